#include "glyphdiff/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "glyphdiff/font5x7.hpp"
#include "glyphdiff/image.hpp"
#include "json.hpp"

namespace glyphdiff::datagen {

namespace fs = std::filesystem;
using nlohmann::json;

int advance(int scale) { return font::kGlyphCols * scale + 2; }

Scalar luminance(Scalar r, Scalar g, Scalar b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

Tensor render_background(const BackgroundSpec& bg, int canvas) {
    Tensor img = Tensor::zeros({3, canvas, canvas});
    switch (bg.kind) {
        case 0: {
            for (int c = 0; c < 3; ++c) {
                for (int y = 0; y < canvas; ++y) {
                    for (int x = 0; x < canvas; ++x) img.at(c, y, x) = bg.c0[c];
                }
            }
            break;
        }
        case 1: {
            for (int c = 0; c < 3; ++c) {
                for (int y = 0; y < canvas; ++y) {
                    for (int x = 0; x < canvas; ++x) {
                        Scalar t = bg.horizontal ? static_cast<Scalar>(x) / (canvas - 1)
                                                 : static_cast<Scalar>(y) / (canvas - 1);
                        img.at(c, y, x) = bg.c0[c] + t * (bg.c1[c] - bg.c0[c]);
                    }
                }
            }
            break;
        }
        case 2: {
            // Low-frequency noise: a coarse random grid enlarged bilinearly.
            Rng rng(bg.noise_seed);
            const int grid = 5;
            std::vector<Scalar> coarse(3 * grid * grid);
            for (auto& v : coarse) v = rng.uniform();
            for (int c = 0; c < 3; ++c) {
                for (int y = 0; y < canvas; ++y) {
                    for (int x = 0; x < canvas; ++x) {
                        Scalar sy = static_cast<Scalar>(y) * (grid - 1) / (canvas - 1);
                        Scalar sx = static_cast<Scalar>(x) * (grid - 1) / (canvas - 1);
                        int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
                        int y1 = std::min(y0 + 1, grid - 1), x1 = std::min(x0 + 1, grid - 1);
                        Scalar fy = sy - y0, fx = sx - x0;
                        const Scalar* g = coarse.data() + static_cast<size_t>(c) * grid * grid;
                        Scalar top = g[y0 * grid + x0] * (1 - fx) + g[y0 * grid + x1] * fx;
                        Scalar bot = g[y1 * grid + x0] * (1 - fx) + g[y1 * grid + x1] * fx;
                        Scalar t = top * (1 - fy) + bot * fy;
                        img.at(c, y, x) = bg.c0[c] + t * (bg.c1[c] - bg.c0[c]);
                    }
                }
            }
            break;
        }
        default:
            throw std::invalid_argument("render_background: unknown kind " +
                                        std::to_string(bg.kind));
    }
    return img;
}

namespace {

struct GlyphBox {
    int x0, y0, x1, y1;  // inclusive pixel bounds of the glyph cell
};

GlyphBox glyph_box(const Placement& p, int position) {
    int gx = p.x0 + position * advance(p.scale);
    return {gx, p.y0, gx + font::kGlyphCols * p.scale - 1, p.y0 + font::kGlyphRows * p.scale - 1};
}

void check_fit(const std::string& word, const Placement& p, int canvas) {
    if (word.empty()) throw std::invalid_argument("render: empty word");
    if (p.scale < 1) throw std::invalid_argument("render: scale must be >= 1");
    GlyphBox last = glyph_box(p, static_cast<int>(word.size()) - 1);
    if (p.x0 < 0 || p.y0 < 0 || last.x1 >= canvas || last.y1 >= canvas) {
        throw std::invalid_argument("render: word '" + word + "' overflows canvas at x0=" +
                                    std::to_string(p.x0) + " y0=" + std::to_string(p.y0) +
                                    " scale=" + std::to_string(p.scale));
    }
}

// Paints one glyph's pixels into a [H,W] binary map.
void paint_glyph(Tensor& map, int charset_index, const GlyphBox& box, int scale) {
    const auto& rows = font::glyph_bitmap(charset_index);
    for (int gy = 0; gy < font::kGlyphRows; ++gy) {
        for (int gx = 0; gx < font::kGlyphCols; ++gx) {
            if (!font::glyph_pixel(rows, gy, gx)) continue;
            for (int sy = 0; sy < scale; ++sy) {
                for (int sx = 0; sx < scale; ++sx) {
                    map.at(box.y0 + gy * scale + sy, box.x0 + gx * scale + sx) = 1.0;
                }
            }
        }
    }
}

Scalar centroid_key(const Tensor& map, int h, int w) {
    Scalar sx = 0, sy = 0, n = 0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (map.at(y, x) != 0) {
                sx += x;
                sy += y;
                n += 1;
            }
        }
    }
    // x dominates; y only breaks exact ties.
    return sx / n + (sy / n) / (1000.0 * h);
}

}  // namespace

std::map<int, Tensor> raw_class_maps(const std::string& word, const Placement& p, int canvas) {
    check_fit(word, p, canvas);
    std::map<int, Tensor> maps;
    for (size_t i = 0; i < word.size(); ++i) {
        int idx = charset::char_to_index(word[i]);
        auto it = maps.find(idx);
        if (it == maps.end()) it = maps.emplace(idx, Tensor::zeros({canvas, canvas})).first;
        paint_glyph(it->second, idx, glyph_box(p, static_cast<int>(i)), p.scale);
    }
    return maps;
}

AugmentResult augment_seg_maps(const std::map<int, Tensor>& class_maps, const std::string& word,
                               int canvas) {
    AugmentResult res;
    res.seg_maps = Tensor::zeros({charset::kMaxLen, canvas, canvas});
    if (word.size() > static_cast<size_t>(charset::kMaxLen)) {
        res.diagnostic = "word longer than label capacity";
        return res;
    }
    // Character positions per class, already in reading order.
    std::map<int, std::vector<int>> positions;
    for (size_t i = 0; i < word.size(); ++i) {
        positions[charset::char_to_index(word[i])].push_back(static_cast<int>(i));
    }
    for (const auto& [idx, want] : positions) {
        auto it = class_maps.find(idx);
        if (it == class_maps.end()) {
            res.diagnostic = "missing class map for '" + std::string(1, charset::index_to_char(idx)) + "'";
            return res;
        }
        Tensor cleaned = img::opening(it->second, img::square2());
        std::vector<int> labels;
        int count = img::connected_components(cleaned, labels);
        if (count < static_cast<int>(want.size())) {
            // Opening can erase single-pixel strokes outright; the raw map
            // still splits cleanly when the glyphs never touched.
            cleaned = it->second.clone();
            count = img::connected_components(cleaned, labels);
        }
        if (count < static_cast<int>(want.size())) {
            res.diagnostic = "class '" + std::string(1, charset::index_to_char(idx)) + "' has " +
                             std::to_string(count) + " components for " +
                             std::to_string(want.size()) + " occurrences";
            return res;
        }
        // Split components and sort left-to-right by centroid.
        std::vector<Tensor> comps;
        for (int c = 1; c <= count; ++c) {
            Tensor m = Tensor::zeros({canvas, canvas});
            for (int64_t i = 0; i < m.numel(); ++i) {
                if (labels[static_cast<size_t>(i)] == c) m.data()[i] = 1.0;
            }
            comps.push_back(std::move(m));
        }
        std::sort(comps.begin(), comps.end(), [&](const Tensor& a, const Tensor& b) {
            return centroid_key(a, canvas, canvas) < centroid_key(b, canvas, canvas);
        });
        // Extra components beyond the occurrence count are residual noise;
        // keep the largest `want` by area, preserving order.
        if (count > static_cast<int>(want.size())) {
            std::vector<std::pair<Scalar, size_t>> areas;
            for (size_t c = 0; c < comps.size(); ++c) {
                Scalar a = 0;
                for (int64_t i = 0; i < comps[c].numel(); ++i) a += comps[c].data()[i];
                areas.push_back({-a, c});
            }
            std::sort(areas.begin(), areas.end());
            std::vector<size_t> keep;
            for (size_t k = 0; k < want.size(); ++k) keep.push_back(areas[k].second);
            std::sort(keep.begin(), keep.end());
            std::vector<Tensor> kept;
            for (size_t k : keep) kept.push_back(std::move(comps[k]));
            comps = std::move(kept);
        }
        for (size_t k = 0; k < want.size(); ++k) {
            Tensor dilated = img::dilate(comps[k], img::cross3());
            Scalar* dst = res.seg_maps.data() +
                          static_cast<int64_t>(want[k]) * canvas * canvas;
            std::memcpy(dst, dilated.data(), sizeof(Scalar) * canvas * canvas);
        }
    }
    res.usable = true;
    return res;
}

TextImageSample render_sample(const std::string& word, const BackgroundSpec& bg,
                              const Scalar text_color[3], const Placement& p, int canvas) {
    check_fit(word, p, canvas);
    TextImageSample s;
    s.label = charset::encode_text(word);
    s.scale = p.scale;
    s.x0 = p.x0;
    s.y0 = p.y0;
    s.bg_kind = bg.kind;
    s.image = render_background(bg, canvas);

    // Text pixels and mask from padded glyph cells.
    Tensor text_pixels = Tensor::zeros({canvas, canvas});
    s.mask = Tensor::zeros({canvas, canvas});
    const int pad = 2;  // covers the seg-map dilation radius
    for (size_t i = 0; i < word.size(); ++i) {
        int idx = charset::char_to_index(word[i]);
        GlyphBox box = glyph_box(p, static_cast<int>(i));
        paint_glyph(text_pixels, idx, box, p.scale);
        for (int y = std::max(0, box.y0 - pad); y <= std::min(canvas - 1, box.y1 + pad); ++y) {
            for (int x = std::max(0, box.x0 - pad); x <= std::min(canvas - 1, box.x1 + pad); ++x) {
                s.mask.at(y, x) = 1.0;
            }
        }
    }
    for (int y = 0; y < canvas; ++y) {
        for (int x = 0; x < canvas; ++x) {
            if (text_pixels.at(y, x) != 0) {
                for (int c = 0; c < 3; ++c) s.image.at(c, y, x) = text_color[c];
            }
        }
    }
    s.masked_image = s.image.clone();
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < canvas; ++y) {
            for (int x = 0; x < canvas; ++x) {
                if (s.mask.at(y, x) != 0) s.masked_image.at(c, y, x) = 0.0;
            }
        }
    }

    AugmentResult aug = augment_seg_maps(raw_class_maps(word, p, canvas), word, canvas);
    if (!aug.usable) {
        throw std::runtime_error("render_sample: unusable segmentation (" + aug.diagnostic + ")");
    }
    s.seg_maps = std::move(aug.seg_maps);
    return s;
}

bool filter_sample(const TextImageSample& sample) {
    int64_t px = sample.mask.numel();
    Scalar mask_area = 0;
    for (int64_t i = 0; i < px; ++i) mask_area += sample.mask.data()[i];
    if (mask_area / static_cast<Scalar>(px) < 0.01) return false;
    for (int j = 0; j < sample.label.length; ++j) {
        const Scalar* seg = sample.seg_maps.data() + static_cast<int64_t>(j) * px;
        Scalar area = 0;
        for (int64_t i = 0; i < px; ++i) area += seg[i];
        if (area / static_cast<Scalar>(px) < 0.001) return false;
    }
    return true;
}

std::string random_word(Rng& rng, int min_len, int max_len) {
    int len = min_len + static_cast<int>(rng.randint(max_len - min_len + 1));
    std::string w;
    for (int i = 0; i < len; ++i) {
        w.push_back(charset::index_to_char(static_cast<int>(rng.randint(charset::kNumGlyphs))));
    }
    return w;
}

TextImageSample make_editing_pair(const TextImageSample& sample, Rng& rng) {
    TextImageSample out = sample;
    int len = sample.label.length;
    std::string w;
    for (int i = 0; i < len; ++i) {
        w.push_back(charset::index_to_char(static_cast<int>(rng.randint(charset::kNumGlyphs))));
    }
    out.label = charset::encode_text(w);
    return out;
}

TextImageSample synth_scene(const SceneConfig& cfg, uint64_t seed, uint64_t index) {
    uint64_t mixed = fnv1a(&index, sizeof(index), fnv1a(&seed, sizeof(seed)));
    Rng rng(mixed);
    for (int attempt = 0; attempt < 100; ++attempt) {
        std::string word = random_word(rng, cfg.min_len, cfg.max_len);
        int n = static_cast<int>(word.size());
        // Largest scale whose full word width leaves a 1px margin.
        int fit = 1;
        for (int s = 3; s >= 2; --s) {
            if (advance(s) * n - 2 <= cfg.canvas - 2) {
                fit = s;
                break;
            }
        }
        Placement p;
        // Scale 3 keeps short words large; longer words drop to whatever fits.
        p.scale = (n <= 3 && fit >= 3 && rng.uniform() < 0.5) ? 3 : std::min(2, fit);
        int width = advance(p.scale) * n - 2;
        int height = font::kGlyphRows * p.scale;
        int xmax = cfg.canvas - width, ymax = cfg.canvas - height;
        if (xmax < 1 || ymax < 1) continue;
        p.x0 = 1 + static_cast<int>(rng.randint(xmax - 1));
        p.y0 = 1 + static_cast<int>(rng.randint(ymax - 1));

        BackgroundSpec bg;
        bg.kind = static_cast<int>(rng.randint(3));
        for (int c = 0; c < 3; ++c) {
            bg.c0[c] = rng.uniform();
            bg.c1[c] = rng.uniform();
        }
        bg.horizontal = rng.uniform() < 0.5;
        bg.noise_seed = rng.gen();

        // Mean background luminance under the text block, for contrast control.
        Tensor bgimg = render_background(bg, cfg.canvas);
        Scalar bglum = 0;
        int count = 0;
        for (int y = p.y0; y < p.y0 + height; ++y) {
            for (int x = p.x0; x < p.x0 + width; ++x) {
                bglum += luminance(bgimg.at(0, y, x), bgimg.at(1, y, x), bgimg.at(2, y, x));
                ++count;
            }
        }
        bglum /= count;

        Scalar color[3];
        bool found = false;
        for (int tries = 0; tries < 40 && !found; ++tries) {
            for (int c = 0; c < 3; ++c) color[c] = rng.uniform();
            found = std::abs(luminance(color[0], color[1], color[2]) - bglum) >= cfg.min_contrast;
        }
        if (!found) {
            // Fall back to whichever of black/white clears the bar.
            Scalar v = bglum < 0.5 ? 1.0 : 0.0;
            color[0] = color[1] = color[2] = v;
        }

        TextImageSample s = render_sample(word, bg, color, p, cfg.canvas);
        if (filter_sample(s)) return s;
    }
    throw std::runtime_error("synth_scene: no acceptable sample after 100 attempts");
}

Tensor render_reference(const std::string& word, int h, int w) {
    if (word.size() > static_cast<size_t>(charset::kMaxLen)) {
        throw std::invalid_argument("render_reference: word too long");
    }
    Tensor img = Tensor::full({3, h, w}, 1.0);
    if (word.empty()) return img;
    int scale = 2;
    int width = advance(scale) * static_cast<int>(word.size()) - 2;
    if (width > w - 4 || font::kGlyphRows * scale > h - 4) scale = 1;
    width = advance(scale) * static_cast<int>(word.size()) - 2;
    int height = font::kGlyphRows * scale;
    Placement p{scale, (w - width) / 2, (h - height) / 2};
    Tensor pixels = Tensor::zeros({h, w});
    // Reference strips reuse the glyph painter on a wide canvas-free map.
    for (size_t i = 0; i < word.size(); ++i) {
        int idx = charset::char_to_index(word[i]);
        const auto& rows = font::glyph_bitmap(idx);
        int gx0 = p.x0 + static_cast<int>(i) * advance(scale);
        for (int gy = 0; gy < font::kGlyphRows; ++gy) {
            for (int gxx = 0; gxx < font::kGlyphCols; ++gxx) {
                if (!font::glyph_pixel(rows, gy, gxx)) continue;
                for (int sy = 0; sy < scale; ++sy) {
                    for (int sx = 0; sx < scale; ++sx) {
                        pixels.at(p.y0 + gy * scale + sy, gx0 + gxx * scale + sx) = 1.0;
                    }
                }
            }
        }
    }
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (pixels.at(y, x) != 0) {
                for (int c = 0; c < 3; ++c) img.at(c, y, x) = 0.0;
            }
        }
    }
    return img;
}

void save_dataset(const std::string& dir, const std::vector<TextImageSample>& samples) {
    fs::create_directories(dir);
    std::ofstream manifest(dir + "/manifest.jsonl");
    if (!manifest.good()) throw std::runtime_error("save_dataset: cannot open manifest in " + dir);
    for (size_t i = 0; i < samples.size(); ++i) {
        const TextImageSample& s = samples[i];
        std::string stem = "sample_" + std::to_string(i);
        img::save_ppm(dir + "/" + stem + ".ppm", s.image);
        img::save_pgm(dir + "/" + stem + "_mask.pgm", s.mask);
        json segs = json::array();
        int canvas = s.mask.dim(0);
        for (int j = 0; j < s.label.length; ++j) {
            std::string seg_path = stem + "_seg" + std::to_string(j) + ".pgm";
            Tensor plane = Tensor::zeros({canvas, canvas});
            std::memcpy(plane.data(), s.seg_maps.data() + static_cast<int64_t>(j) * canvas * canvas,
                        sizeof(Scalar) * canvas * canvas);
            img::save_pgm(dir + "/" + seg_path, plane);
            segs.push_back(seg_path);
        }
        json row = {
            {"image", stem + ".ppm"},
            {"word", s.label.text},
            {"mask", stem + "_mask.pgm"},
            {"segs", segs},
            {"meta", {{"scale", s.scale}, {"x0", s.x0}, {"y0", s.y0}, {"bg_kind", s.bg_kind}}},
        };
        manifest << row.dump() << "\n";
    }
}

std::vector<TextImageSample> load_dataset(const std::string& dir) {
    std::ifstream manifest(dir + "/manifest.jsonl");
    if (!manifest.good()) throw std::runtime_error("load_dataset: cannot open manifest in " + dir);
    std::vector<TextImageSample> samples;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        json row = json::parse(line);
        TextImageSample s;
        s.image = img::load_ppm(dir + "/" + row["image"].get<std::string>());
        s.mask = img::binarize(img::load_pgm(dir + "/" + row["mask"].get<std::string>()), 0.5);
        s.label = charset::encode_text(row["word"].get<std::string>());
        int canvas = s.mask.dim(0);
        s.seg_maps = Tensor::zeros({charset::kMaxLen, canvas, canvas});
        int j = 0;
        for (const auto& seg_path : row["segs"]) {
            Tensor plane = img::binarize(img::load_pgm(dir + "/" + seg_path.get<std::string>()), 0.5);
            std::memcpy(s.seg_maps.data() + static_cast<int64_t>(j) * canvas * canvas,
                        plane.data(), sizeof(Scalar) * canvas * canvas);
            ++j;
        }
        s.scale = row["meta"]["scale"].get<int>();
        s.x0 = row["meta"]["x0"].get<int>();
        s.y0 = row["meta"]["y0"].get<int>();
        s.bg_kind = row["meta"]["bg_kind"].get<int>();
        s.masked_image = s.image.clone();
        for (int c = 0; c < 3; ++c) {
            for (int y = 0; y < canvas; ++y) {
                for (int x = 0; x < canvas; ++x) {
                    if (s.mask.at(y, x) != 0) s.masked_image.at(c, y, x) = 0.0;
                }
            }
        }
        samples.push_back(std::move(s));
    }
    return samples;
}

}  // namespace glyphdiff::datagen

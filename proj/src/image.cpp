#include "glyphdiff/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>

namespace glyphdiff::img {

namespace {

uint8_t to_byte(Scalar v) {
    Scalar c = std::min<Scalar>(1.0, std::max<Scalar>(0.0, v));
    return static_cast<uint8_t>(std::lround(c * 255.0));
}

void expect(bool ok, const std::string& what) {
    if (!ok) throw std::runtime_error(what);
}

// Reads one whitespace-delimited token, skipping '#' comment lines.
std::string next_token(std::istream& in) {
    std::string tok;
    while (in >> tok) {
        if (tok[0] == '#') {
            std::string rest;
            std::getline(in, rest);
            continue;
        }
        return tok;
    }
    throw std::runtime_error("image load: truncated header");
}

}  // namespace

void save_ppm(const std::string& path, const Tensor& rgb) {
    if (rgb.rank() != 3 || rgb.dim(0) != 3) {
        throw std::invalid_argument("save_ppm: want [3,H,W], got " + rgb.shape_str());
    }
    int h = rgb.dim(1), w = rgb.dim(2);
    std::ofstream out(path, std::ios::binary);
    expect(out.good(), "save_ppm: cannot open " + path);
    out << "P6\n" << w << " " << h << "\n255\n";
    std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                row[static_cast<size_t>(x) * 3 + c] = to_byte(rgb.at(c, y, x));
            }
        }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    expect(out.good(), "save_ppm: write failed for " + path);
}

Tensor load_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    expect(in.good(), "load_ppm: cannot open " + path);
    expect(next_token(in) == "P6", "load_ppm: not a P6 file: " + path);
    int w = std::stoi(next_token(in));
    int h = std::stoi(next_token(in));
    int maxv = std::stoi(next_token(in));
    expect(w > 0 && h > 0 && maxv == 255, "load_ppm: unsupported header in " + path);
    in.get();  // single whitespace after maxval
    std::vector<uint8_t> buf(static_cast<size_t>(w) * h * 3);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    expect(in.gcount() == static_cast<std::streamsize>(buf.size()), "load_ppm: truncated " + path);
    Tensor rgb = Tensor::zeros({3, h, w});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                rgb.at(c, y, x) = buf[(static_cast<size_t>(y) * w + x) * 3 + c] / 255.0;
            }
        }
    }
    return rgb;
}

void save_pgm(const std::string& path, const Tensor& gray) {
    if (gray.rank() != 2) {
        throw std::invalid_argument("save_pgm: want [H,W], got " + gray.shape_str());
    }
    int h = gray.dim(0), w = gray.dim(1);
    std::ofstream out(path, std::ios::binary);
    expect(out.good(), "save_pgm: cannot open " + path);
    out << "P5\n" << w << " " << h << "\n255\n";
    std::vector<uint8_t> row(static_cast<size_t>(w));
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) row[static_cast<size_t>(x)] = to_byte(gray.at(y, x));
        out.write(reinterpret_cast<const char*>(row.data()), w);
    }
    expect(out.good(), "save_pgm: write failed for " + path);
}

Tensor load_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    expect(in.good(), "load_pgm: cannot open " + path);
    expect(next_token(in) == "P5", "load_pgm: not a P5 file: " + path);
    int w = std::stoi(next_token(in));
    int h = std::stoi(next_token(in));
    int maxv = std::stoi(next_token(in));
    expect(w > 0 && h > 0 && maxv == 255, "load_pgm: unsupported header in " + path);
    in.get();
    std::vector<uint8_t> buf(static_cast<size_t>(w) * h);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    expect(in.gcount() == static_cast<std::streamsize>(buf.size()), "load_pgm: truncated " + path);
    Tensor gray = Tensor::zeros({h, w});
    for (int64_t i = 0; i < gray.numel(); ++i) gray.data()[i] = buf[static_cast<size_t>(i)] / 255.0;
    return gray;
}

const Element& square2() {
    static const Element se = {{0, 0}, {0, 1}, {1, 0}, {1, 1}};
    return se;
}

const Element& cross3() {
    static const Element se = {{0, 0}, {-1, 0}, {1, 0}, {0, -1}, {0, 1}};
    return se;
}

namespace {

void check_binary_map(const Tensor& m, const char* op) {
    if (m.rank() != 2) throw std::invalid_argument(std::string(op) + ": want [H,W]");
}

}  // namespace

Tensor erode(const Tensor& m, const Element& se) {
    check_binary_map(m, "erode");
    int h = m.dim(0), w = m.dim(1);
    Tensor out = Tensor::zeros({h, w});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            bool all = true;
            for (auto [dy, dx] : se) {
                int yy = y + dy, xx = x + dx;
                if (yy < 0 || yy >= h || xx < 0 || xx >= w || m.at(yy, xx) == 0) {
                    all = false;
                    break;
                }
            }
            out.at(y, x) = all ? 1.0 : 0.0;
        }
    }
    return out;
}

Tensor dilate(const Tensor& m, const Element& se) {
    check_binary_map(m, "dilate");
    int h = m.dim(0), w = m.dim(1);
    Tensor out = Tensor::zeros({h, w});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (m.at(y, x) == 0) continue;
            for (auto [dy, dx] : se) {
                int yy = y + dy, xx = x + dx;  // Minkowski sum
                if (yy >= 0 && yy < h && xx >= 0 && xx < w) out.at(yy, xx) = 1.0;
            }
        }
    }
    return out;
}

Tensor opening(const Tensor& m, const Element& se) { return dilate(erode(m, se), se); }

int connected_components(const Tensor& m, std::vector<int>& labels) {
    check_binary_map(m, "connected_components");
    int h = m.dim(0), w = m.dim(1);
    labels.assign(static_cast<size_t>(h) * w, 0);
    int count = 0;
    std::vector<int> stack;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            int idx = y * w + x;
            if (m.data()[idx] == 0 || labels[static_cast<size_t>(idx)] != 0) continue;
            ++count;
            stack.push_back(idx);
            labels[static_cast<size_t>(idx)] = count;
            while (!stack.empty()) {
                int cur = stack.back();
                stack.pop_back();
                int cy = cur / w, cx = cur % w;
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        if (dy == 0 && dx == 0) continue;
                        int yy = cy + dy, xx = cx + dx;
                        if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                        int nidx = yy * w + xx;
                        if (m.data()[nidx] != 0 && labels[static_cast<size_t>(nidx)] == 0) {
                            labels[static_cast<size_t>(nidx)] = count;
                            stack.push_back(nidx);
                        }
                    }
                }
            }
        }
    }
    return count;
}

Tensor area_downsample(const Tensor& m, int oh, int ow) {
    check_binary_map(m, "area_downsample");
    int h = m.dim(0), w = m.dim(1);
    if (oh < 1 || ow < 1 || h % oh != 0 || w % ow != 0) {
        throw std::invalid_argument("area_downsample: target must divide source size");
    }
    int fy = h / oh, fx = w / ow;
    Tensor out = Tensor::zeros({oh, ow});
    for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
            Scalar s = 0;
            for (int dy = 0; dy < fy; ++dy) {
                for (int dx = 0; dx < fx; ++dx) s += m.at(y * fy + dy, x * fx + dx);
            }
            out.at(y, x) = s / (static_cast<Scalar>(fy) * fx);
        }
    }
    return out;
}

Tensor binarize(const Tensor& m, Scalar threshold) {
    Tensor out = Tensor::zeros(m.shape);
    for (int64_t i = 0; i < m.numel(); ++i) out.data()[i] = m.data()[i] >= threshold ? 1.0 : 0.0;
    return out;
}

}  // namespace glyphdiff::img

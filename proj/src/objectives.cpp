#include "glyphdiff/objectives.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "glyphdiff/image.hpp"

namespace glyphdiff::objectives {

using charset::kMaxLen;
using charset::TextLabel;

Var dsm_loss(Var denoised, const Tensor& target, const std::vector<Scalar>& sigmas) {
    Tape& t = *denoised.tape;
    const Tensor& dv = t.value(denoised);
    if (dv.rank() < 2 || dv.shape != target.shape) {
        throw std::invalid_argument("dsm_loss: denoised " + dv.shape_str() + " vs target " +
                                    target.shape_str());
    }
    int B = dv.dim(0);
    if (static_cast<int>(sigmas.size()) != B) {
        throw std::invalid_argument("dsm_loss: need one sigma per sample");
    }
    Tensor w = Tensor::zeros({B});
    for (int b = 0; b < B; ++b) {
        if (!(sigmas[b] > 0)) throw std::invalid_argument("dsm_loss: sigma must be positive");
        w.data()[b] = 1.0 / (sigmas[b] * sigmas[b] * B);
    }
    Var diff = sub(denoised, t.leaf(target, false));
    return dot_const(mean_per_sample(mul(diff, diff)), w);
}

Var dsm_loss(Var denoised, const Tensor& target, Scalar sigma) {
    const Tensor& dv = denoised.tape->value(denoised);
    return dsm_loss(denoised, target, std::vector<Scalar>(dv.dim(0), sigma));
}

Scalar sample_sigma(Rng& rng) { return std::exp(-1.2 + 1.2 * rng.normal()); }

std::vector<Scalar> gaussian_kernel_explicit(int size, Scalar std_dev) {
    if (size < 1 || size % 2 == 0) throw std::invalid_argument("gaussian_kernel: size must be odd");
    if (size == 1) return {1.0};
    if (!(std_dev > 0)) throw std::invalid_argument("gaussian_kernel: std must be positive");
    std::vector<Scalar> k(size);
    int half = size / 2;
    Scalar sum = 0;
    for (int i = 0; i < size; ++i) {
        Scalar d = i - half;
        k[i] = std::exp(-d * d / (2 * std_dev * std_dev));
        sum += k[i];
    }
    for (Scalar& v : k) v /= sum;
    return k;
}

std::vector<Scalar> gaussian_kernel(int side) {
    if (side < 1) throw std::invalid_argument("gaussian_kernel: side must be positive");
    int size = side / 4;
    if (size < 1) size = 1;
    if (size % 2 == 0) ++size;
    if (size == 1) return {1.0};
    return gaussian_kernel_explicit(size, size / 4.0);
}

Var blur_maps(Var maps) {
    Tape& t = *maps.tape;
    const Tensor& mv = t.value(maps);
    if (mv.rank() != 4) throw std::invalid_argument("blur_maps: want [B,L,H,W]");
    int B = mv.dim(0), L = mv.dim(1), H = mv.dim(2), W = mv.dim(3);
    std::vector<Scalar> k = gaussian_kernel(std::min(H, W));
    if (k.size() == 1) return maps;
    return reshape(blur_hw(reshape(maps, {B * L, H, W}), k), {B, L, H, W});
}

Tensor downsample_seg(const Tensor& map, int th, int tw) {
    return img::binarize(img::area_downsample(map, th, tw), 0.5);
}

Tensor downsample_mask(const Tensor& mask, int th, int tw) {
    Tensor area = img::area_downsample(mask, th, tw);
    Tensor hard = img::binarize(area, 0.5);
    for (int64_t i = 0; i < hard.numel(); ++i) {
        if (hard.data()[i] > 0) return hard;
    }
    return img::binarize(area, 1e-12);
}

namespace {

void check_maps(const AttentionMaps& attn, const char* op) {
    if (attn.blocks.empty()) throw std::invalid_argument(std::string(op) + ": no blocks");
    for (const Var& blk : attn.blocks) {
        const Tensor& v = blk.tape->value(blk);
        if (v.rank() != 4 || v.dim(1) != kMaxLen) {
            throw std::invalid_argument(std::string(op) + ": block maps must be [B,L,H,W], got " +
                                        v.shape_str());
        }
    }
}

// Expands a [H,W] plane to [B,L,H,W].
Tensor tile_plane(const Tensor& plane, int B, int L) {
    Tensor out = Tensor::zeros({B, L, plane.dim(0), plane.dim(1)});
    int64_t n = plane.numel();
    for (int64_t i = 0; i < static_cast<int64_t>(B) * L; ++i) {
        std::copy(plane.data(), plane.data() + n, out.data() + i * n);
    }
    return out;
}

}  // namespace

LocLossResult local_attention_loss(const AttentionMaps& attn, const Tensor& seg_maps,
                                   const std::vector<int>& word_lengths) {
    check_maps(attn, "local_attention_loss");
    Tape& t = *attn.blocks[0].tape;
    int B = t.value(attn.blocks[0]).dim(0);
    if (seg_maps.rank() != 4 || seg_maps.dim(0) != B || seg_maps.dim(1) != kMaxLen) {
        throw std::invalid_argument("local_attention_loss: seg_maps must be [B,L,H,W], got " +
                                    seg_maps.shape_str());
    }
    if (static_cast<int>(word_lengths.size()) != B) {
        throw std::invalid_argument("local_attention_loss: need one word length per sample");
    }
    for (int len : word_lengths) {
        if (len < 1 || len > kMaxLen) {
            throw std::invalid_argument("local_attention_loss: word length out of range");
        }
    }

    LocLossResult res;
    Var acc{};
    int C = static_cast<int>(attn.blocks.size());
    std::vector<Var> block_losses;
    for (int i = 0; i < C; ++i) {
        const Tensor& mv = t.value(attn.blocks[i]);
        int H = mv.dim(2), W = mv.dim(3);
        // Downsample every needed seg plane once, tracking empty ones.
        Tensor seg = Tensor::zeros({B, kMaxLen, H, W});
        std::vector<bool> valid(B, true);
        for (int b = 0; b < B; ++b) {
            for (int j = 0; j < word_lengths[b]; ++j) {
                Tensor plane = Tensor::zeros({seg_maps.dim(2), seg_maps.dim(3)});
                std::copy(seg_maps.data() + (static_cast<int64_t>(b) * kMaxLen + j) * plane.numel(),
                          seg_maps.data() + (static_cast<int64_t>(b) * kMaxLen + j + 1) * plane.numel(),
                          plane.data());
                Tensor small = downsample_seg(plane, H, W);
                bool any = false;
                for (int64_t p = 0; p < small.numel(); ++p) any = any || small.data()[p] > 0;
                if (!any) {
                    valid[b] = false;
                    res.diagnostics.push_back("block " + std::to_string(i) + " sample " +
                                              std::to_string(b) + ": position " + std::to_string(j) +
                                              " seg map empty at " + std::to_string(H) + "x" +
                                              std::to_string(W));
                    break;
                }
                std::copy(small.data(), small.data() + small.numel(),
                          seg.data() + (static_cast<int64_t>(b) * kMaxLen + j) * small.numel());
            }
        }
        int n_valid = 0;
        for (int b = 0; b < B; ++b) n_valid += valid[b] ? 1 : 0;
        if (n_valid == 0) continue;

        Tensor comp = Tensor::zeros(seg.shape);
        for (int64_t p = 0; p < seg.numel(); ++p) comp.data()[p] = 1.0 - seg.data()[p];
        Var blurred = blur_maps(attn.blocks[i]);
        Var flat_on = reshape(mul_const(blurred, seg), {B, kMaxLen, H * W});
        Var flat_off = reshape(mul_const(blurred, comp), {B, kMaxLen, H * W});
        Var terms = sub(max_last(flat_off), max_last(flat_on));  // [B,L]
        Tensor w = Tensor::zeros({B, kMaxLen});
        for (int b = 0; b < B; ++b) {
            if (!valid[b]) continue;
            for (int j = 0; j < word_lengths[b]; ++j) {
                w.at(b, j) = 1.0 / (static_cast<Scalar>(n_valid) * word_lengths[b]);
            }
        }
        block_losses.push_back(dot_const(reshape(terms, {B * kMaxLen}), w.reshaped({B * kMaxLen})));
        ++res.blocks_used;
    }
    if (block_losses.empty()) {
        throw std::invalid_argument(
            "local_attention_loss: every sample excluded in every block; first diagnostic: " +
            (res.diagnostics.empty() ? std::string("none") : res.diagnostics.front()));
    }
    for (const Var& bl : block_losses) acc = acc.valid() ? add(acc, bl) : bl;
    res.loss = scale(acc, 1.0 / res.blocks_used);
    return res;
}

Var aae_scores(const AttentionMaps& attn, const Tensor& mask, int word_length) {
    check_maps(attn, "aae_loss");
    if (word_length < 1 || word_length > kMaxLen) {
        throw std::invalid_argument("aae_loss: word length out of range");
    }
    if (mask.rank() != 2) throw std::invalid_argument("aae_loss: mask must be [H,W]");
    bool any = false;
    for (int64_t i = 0; i < mask.numel(); ++i) any = any || mask.data()[i] > 0;
    if (!any) throw std::invalid_argument("aae_loss: empty mask");

    Tape& t = *attn.blocks[0].tape;
    int B = t.value(attn.blocks[0]).dim(0);
    // Pad positions are pushed out of the min with a large offset.
    Tensor pad_pen = Tensor::zeros({B, kMaxLen});
    for (int b = 0; b < B; ++b) {
        for (int j = word_length; j < kMaxLen; ++j) pad_pen.at(b, j) = 1e9;
    }
    Var acc{};
    for (const Var& blk : attn.blocks) {
        const Tensor& mv = t.value(blk);
        int H = mv.dim(2), W = mv.dim(3);
        if (mv.dim(0) != B) throw std::invalid_argument("aae_loss: inconsistent batch size");
        Tensor small = downsample_mask(mask, H, W);
        Var blurred = blur_maps(blk);
        Var masked = mul_const(blurred, tile_plane(small, B, kMaxLen));
        Var best = max_last(reshape(masked, {B, kMaxLen, H * W}));  // [B,L]
        Var weakest = min_last(add_const(best, pad_pen));           // [B]
        acc = acc.valid() ? add(acc, weakest) : weakest;
    }
    return scale(acc, -1.0 / static_cast<Scalar>(attn.blocks.size()));
}

Var aae_loss(const AttentionMaps& attn, const Tensor& mask, int word_length) {
    return mean_all(aae_scores(attn, mask, word_length));
}

Var str_loss(strnet::StrNet& net, Var denoised, const std::vector<Tensor>& masks,
             const std::vector<TextLabel>& labels) {
    Tape& t = *denoised.tape;
    const Tensor& dv = t.value(denoised);
    if (dv.rank() != 4 || dv.dim(1) != 3) {
        throw std::invalid_argument("str_loss: denoised must be [B,3,H,W], got " + dv.shape_str());
    }
    int B = dv.dim(0), H = dv.dim(2), W = dv.dim(3);
    if (static_cast<int>(masks.size()) != B || static_cast<int>(labels.size()) != B) {
        throw std::invalid_argument("str_loss: need one mask and label per sample");
    }
    Var flat = reshape(denoised, {1, B, 3 * H * W});
    Var crops{};
    for (int b = 0; b < B; ++b) {
        Var sample = reshape(slice_axis1(flat, b, 1), {3, H, W});
        Var crop = strnet::masked_crop(sample, masks[b], net.cfg.in_h, net.cfg.in_w);
        Var crop4 = reshape(crop, {1, 3, net.cfg.in_h, net.cfg.in_w});
        crops = crops.valid() ? concat_axis0(crops, crop4) : crop4;
    }
    // The recognizer participates in the graph with frozen weights: its
    // parameters bind without gradient, so only `denoised` is trained.
    nn::GraphCtx frozen(t, false);
    return strnet::str_ce(net.logits(frozen, crops), labels);
}

Var total_training_loss(Var dsm, Var loc, Var str, Scalar lambda_loc, Scalar lambda_str) {
    if (!dsm.valid()) throw std::invalid_argument("total_training_loss: dsm term required");
    Var out = dsm;
    if (loc.valid() && lambda_loc != 0) out = add(out, scale(loc, lambda_loc));
    if (str.valid() && lambda_str != 0) out = add(out, scale(str, lambda_str));
    return out;
}

}  // namespace glyphdiff::objectives

#include "glyphdiff/strnet.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace glyphdiff::strnet {

using charset::kMaxLen;
using charset::kPadIndex;
using charset::kVocabSize;
using charset::TextLabel;
using nn::GraphCtx;
using nn::Param;

CropBox mask_bbox(const Tensor& mask) {
    if (mask.rank() != 2) {
        throw std::invalid_argument("mask_bbox: expected [H,W], got " + mask.shape_str());
    }
    int H = mask.dim(0), W = mask.dim(1);
    int y_min = H, y_max = -1, x_min = W, x_max = -1;
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            if (mask.at(y, x) > 0) {
                y_min = std::min(y_min, y);
                y_max = std::max(y_max, y);
                x_min = std::min(x_min, x);
                x_max = std::max(x_max, x);
            }
        }
    }
    if (y_max < 0) throw std::invalid_argument("mask_bbox: empty mask");
    return {y_min, x_min, y_max - y_min + 1, x_max - x_min + 1};
}

namespace {

void check_box(const Tensor& image, CropBox box) {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw std::invalid_argument("crop_resize: expected [3,H,W], got " + image.shape_str());
    }
    if (box.h < 1 || box.w < 1 || box.y0 < 0 || box.x0 < 0 || box.y0 + box.h > image.dim(1) ||
        box.x0 + box.w > image.dim(2)) {
        throw std::invalid_argument("crop_resize: box outside image bounds");
    }
}

Var zeros_leaf(Tape& t, std::vector<int> shape) { return t.leaf(Tensor::zeros(shape), false); }

// Pads axis 1 of [3,T,D] to `target` rows with centered zeros.
Var pad_axis1(Var x, int target) {
    Tape& t = *x.tape;
    const Tensor& v = t.value(x);
    int cur = v.dim(1);
    int before = (target - cur) / 2;
    int after = target - cur - before;
    Var y = x;
    if (before > 0) y = concat_axis1(zeros_leaf(t, {3, before, v.dim(2)}), y);
    if (after > 0) y = concat_axis1(y, zeros_leaf(t, {3, after, t.value(y).dim(2)}));
    return y;
}

}  // namespace

Var crop_resize(Var image, CropBox box, int out_h, int out_w) {
    Tape& t = *image.tape;
    check_box(t.value(image), box);
    // Rows then columns, reusing the axis-1 slice via a transpose.
    Var rows = slice_axis1(image, box.y0, box.h);           // [3,h,W]
    Var cols = permute021(slice_axis1(permute021(rows), box.x0, box.w));  // [3,h,w]
    Scalar s = std::min(static_cast<Scalar>(out_h) / box.h, static_cast<Scalar>(out_w) / box.w);
    int nh = std::clamp(static_cast<int>(std::lround(box.h * s)), 1, out_h);
    int nw = std::clamp(static_cast<int>(std::lround(box.w * s)), 1, out_w);
    Var resized = reshape(bilinear_resize(reshape(cols, {1, 3, box.h, box.w}), nh, nw), {3, nh, nw});
    Var padded_rows = pad_axis1(resized, out_h);                       // [3,out_h,nw]
    Var padded = permute021(pad_axis1(permute021(padded_rows), out_w));  // [3,out_h,out_w]
    return padded;
}

Tensor crop_resize(const Tensor& image, CropBox box, int out_h, int out_w) {
    Tape t;
    Var v = crop_resize(t.leaf(image, false), box, out_h, out_w);
    return t.value(v).clone();
}

namespace {

Tensor mask_as_channels(const Tensor& image, const Tensor& mask) {
    if (mask.rank() != 2 || image.rank() != 3 || image.dim(1) != mask.dim(0) ||
        image.dim(2) != mask.dim(1)) {
        throw std::invalid_argument("masked_crop: image " + image.shape_str() + " vs mask " +
                                    mask.shape_str());
    }
    Tensor m3 = Tensor::zeros({3, mask.dim(0), mask.dim(1)});
    for (int c = 0; c < 3; ++c) {
        std::copy(mask.data(), mask.data() + mask.numel(), m3.data() + c * mask.numel());
    }
    return m3;
}

}  // namespace

Var masked_crop(Var image, const Tensor& mask, int out_h, int out_w) {
    Tape& t = *image.tape;
    CropBox box = mask_bbox(mask);
    Var product = mul_const(image, mask_as_channels(t.value(image), mask));
    return crop_resize(product, box, out_h, out_w);
}

Tensor masked_crop(const Tensor& image, const Tensor& mask, int out_h, int out_w) {
    Tape t;
    Var v = masked_crop(t.leaf(image, false), mask, out_h, out_w);
    return t.value(v).clone();
}

void StrNet::init(Rng& rng, const StrNetConfig& cfg_) {
    cfg = cfg_;
    if (cfg.in_h % 8 != 0 || cfg.in_w % 8 != 0) {
        throw std::invalid_argument("StrNet: input resolution must be divisible by 8");
    }
    c1.init("str.c1", 3, 32, 3, 2, 1, rng);
    c2.init("str.c2", 32, 64, 3, 2, 1, rng);
    c3.init("str.c3", 64, cfg.d_model, 3, 2, 1, rng);
    n1.init("str.n1", 32, 8);
    n2.init("str.n2", 64, 8);
    n3.init("str.n3", cfg.d_model, 8);
    int tokens = (cfg.in_h / 8) * (cfg.in_w / 8);
    pos = Param{"str.pos", Tensor::zeros({tokens, cfg.d_model})};
    rng.fill_normal(pos.t, 0.02);
    query = Param{"str.query", Tensor::zeros({kMaxLen, cfg.d_model})};
    rng.fill_normal(query.t, 0.02);
    t1.init("str.t1", cfg.d_model, cfg.heads, cfg.mlp_dim, rng);
    t2.init("str.t2", cfg.d_model, cfg.heads, cfg.mlp_dim, rng);
    head.init("str.head", cfg.d_model, kVocabSize, rng);
}

Var StrNet::logits(GraphCtx& g, Var images, Var* features) {
    Tape& t = g.tape;
    const Tensor& iv = t.value(images);
    if (iv.rank() != 4 || iv.dim(1) != 3 || iv.dim(2) != cfg.in_h || iv.dim(3) != cfg.in_w) {
        throw std::invalid_argument("StrNet::logits: expected [B,3," + std::to_string(cfg.in_h) +
                                    "," + std::to_string(cfg.in_w) + "], got " + iv.shape_str());
    }
    int B = iv.dim(0);
    Var x = silu(n1.apply(g, c1.apply(g, images)));
    x = silu(n2.apply(g, c2.apply(g, x)));
    x = silu(n3.apply(g, c3.apply(g, x)));  // [B,d,4,16]
    int tokens = pos.t.dim(0);
    Var grid = add_bias_ld(permute021(reshape(x, {B, cfg.d_model, tokens})), g(pos));  // [B,tokens,d]
    Var queries = add_bias_ld(zeros_leaf(t, {B, kMaxLen, cfg.d_model}), g(query));
    Var seq = concat_axis1(queries, grid);  // query slots first
    seq = t1.apply(g, seq);
    seq = t2.apply(g, seq);
    Var q_out = slice_axis1(seq, 0, kMaxLen);  // [B,L,d]
    if (features) {
        *features = mean_rows_masked(q_out, Tensor::full({B, kMaxLen}, 1.0));  // [B,d]
    }
    return head.apply(g, q_out);  // [B,L,V]
}

namespace {

Tensor single_forward(StrNet& net, const Tensor& image, bool want_features) {
    Tape t;
    GraphCtx g(t, false);
    Var batch = t.leaf(image.reshaped({1, 3, net.cfg.in_h, net.cfg.in_w}), false);
    Var feats;
    Var out = net.logits(g, batch, want_features ? &feats : nullptr);
    if (want_features) return t.value(feats).clone().reshaped({net.cfg.d_model});
    return t.value(out).clone().reshaped({kMaxLen, kVocabSize});
}

}  // namespace

Tensor StrNet::recognize(const Tensor& image) { return single_forward(*this, image, false); }

std::string StrNet::decode(const Tensor& image) { return decode_logits(recognize(image)); }

Tensor StrNet::visual_features(const Tensor& image) { return single_forward(*this, image, true); }

std::vector<Param*> StrNet::params() {
    std::vector<Param*> out;
    c1.collect(out);
    c2.collect(out);
    c3.collect(out);
    n1.collect(out);
    n2.collect(out);
    n3.collect(out);
    out.push_back(&pos);
    out.push_back(&query);
    t1.collect(out);
    t2.collect(out);
    head.collect(out);
    return out;
}

Var str_ce(Var logits, const std::vector<TextLabel>& labels) {
    Tape& t = *logits.tape;
    const Tensor& lv = t.value(logits);
    if (lv.rank() != 3 || lv.dim(1) != kMaxLen || lv.dim(2) != kVocabSize) {
        throw std::invalid_argument("str_ce: expected [B," + std::to_string(kMaxLen) + "," +
                                    std::to_string(kVocabSize) + "], got " + lv.shape_str());
    }
    if (static_cast<int>(labels.size()) != lv.dim(0)) {
        throw std::invalid_argument("str_ce: batch/label count mismatch");
    }
    std::vector<int> ids;
    ids.reserve(labels.size() * kMaxLen);
    for (const TextLabel& lab : labels) {
        ids.insert(ids.end(), lab.indices.begin(), lab.indices.end());
    }
    return ce_mean(reshape(logits, {lv.dim(0) * kMaxLen, kVocabSize}), ids);
}

Scalar str_ce_value(const Tensor& logits, const TextLabel& label) {
    Tape t;
    Var v = str_ce(t.leaf(logits.reshaped({1, kMaxLen, kVocabSize}), false), {label});
    return t.value(v).data()[0];
}

std::string decode_logits(const Tensor& logits) {
    if (logits.rank() != 2 || logits.dim(0) != kMaxLen || logits.dim(1) != kVocabSize) {
        throw std::invalid_argument("decode_logits: expected [" + std::to_string(kMaxLen) + "," +
                                    std::to_string(kVocabSize) + "], got " + logits.shape_str());
    }
    std::vector<int> ids(kMaxLen, kPadIndex);
    for (int i = 0; i < kMaxLen; ++i) {
        int best = 0;
        for (int k = 1; k < kVocabSize; ++k) {
            if (logits.at(i, k) > logits.at(i, best)) best = k;
        }
        ids[i] = best;
    }
    return charset::decode_indices(ids);
}

}  // namespace glyphdiff::strnet

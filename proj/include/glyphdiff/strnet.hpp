#ifndef GLYPHDIFF_STRNET_HPP
#define GLYPHDIFF_STRNET_HPP

#include <string>
#include <vector>

#include "glyphdiff/charset.hpp"
#include "glyphdiff/nn.hpp"
#include "glyphdiff/tensor.hpp"

namespace glyphdiff::strnet {

struct CropBox {
    int y0 = 0;
    int x0 = 0;
    int h = 0;
    int w = 0;
};

// Bounding box of positive mask pixels. Throws std::invalid_argument on an
// all-zero mask.
CropBox mask_bbox(const Tensor& mask);  // [H,W]

// Crops `box` out of a [3,H,W] image and resizes it into [3,out_h,out_w],
// preserving aspect ratio with centered zero padding.
Var crop_resize(Var image, CropBox box, int out_h, int out_w);
Tensor crop_resize(const Tensor& image, CropBox box, int out_h, int out_w);

// image * mask (mask broadcast over channels), then crop_resize of the mask's
// bounding box. Gradients flow through the graph variant into `image`.
Var masked_crop(Var image, const Tensor& mask, int out_h, int out_w);
Tensor masked_crop(const Tensor& image, const Tensor& mask, int out_h, int out_w);

struct StrNetConfig {
    int in_h = 32;
    int in_w = 128;
    int d_model = 128;
    int heads = 4;
    int mlp_dim = 256;
};

// Scene-text recognizer over fixed 32x128 crops. Conv stem downsamples 8x to
// a 4x16 token grid; learned per-position query slots attend to the grid
// through two transformer blocks and classify one character (or pad) each.
struct StrNet {
    StrNetConfig cfg;
    nn::Conv c1, c2, c3;
    nn::GroupNormLayer n1, n2, n3;
    nn::Param pos;    // [tokens, d_model]
    nn::Param query;  // [kMaxLen, d_model]
    nn::TransformerBlock t1, t2;
    nn::Linear head;  // d_model -> kVocabSize

    void init(Rng& rng, const StrNetConfig& cfg_ = {});

    // images [B,3,in_h,in_w] -> logits [B,kMaxLen,kVocabSize]. When
    // `features` is non-null it receives the pooled pre-head query state
    // [B,d_model] (the visual embedding).
    Var logits(nn::GraphCtx& g, Var images, Var* features = nullptr);

    // Single-image inference helpers (frozen weights, no gradients).
    Tensor recognize(const Tensor& image);        // [3,in_h,in_w] -> [kMaxLen,kVocabSize]
    std::string decode(const Tensor& image);      // argmax, pad class dropped
    Tensor visual_features(const Tensor& image);  // [3,in_h,in_w] -> [d_model]

    std::vector<nn::Param*> params();
};

// Position-averaged cross-entropy of [B,L,V] logits against labels padded to
// L with the pad class.
Var str_ce(Var logits, const std::vector<charset::TextLabel>& labels);
Scalar str_ce_value(const Tensor& logits, const charset::TextLabel& label);  // [L,V]

std::string decode_logits(const Tensor& logits);  // [L,V] argmax rows, pads dropped

}  // namespace glyphdiff::strnet

#endif  // GLYPHDIFF_STRNET_HPP

#ifndef GLYPHDIFF_DENOISER_HPP
#define GLYPHDIFF_DENOISER_HPP

#include <vector>

#include "glyphdiff/nn.hpp"
#include "glyphdiff/objectives.hpp"
#include "glyphdiff/tensor.hpp"

namespace glyphdiff::denoiser {

struct DenoiserConfig {
    int image_size = 64;
    int base_width = 32;  // channel widths: base, 2*base, 4*base
    int d_cond = 128;     // text embedding width
    int heads = 4;
    int sigma_freqs = 8;  // Fourier features of ln(sigma)/4
    int d_sigma = 128;    // sigma embedding width
    Scalar sigma_data = 0.5;
};

// Skip-scaling preconditioning coefficients for direct clean-image
// prediction: D = c_skip * z + c_out * F(c_in * z, ...).
Scalar c_skip(Scalar sigma, Scalar sigma_data = 0.5);
Scalar c_out(Scalar sigma, Scalar sigma_data = 0.5);
Scalar c_in(Scalar sigma, Scalar sigma_data = 0.5);

// Residual conv block with a per-sample noise-level bias between its convs.
struct ResBlock {
    nn::GroupNormLayer gn1, gn2;
    nn::Conv conv1, conv2;
    nn::Linear sigma_proj;  // d_sigma -> channels

    void init(const std::string& name, int channels, int d_sigma, Rng& rng);
    Var apply(nn::GraphCtx& g, Var x, Var sigma_emb);
    void collect(std::vector<nn::Param*>& out);
};

// Cross-attention: spatial queries against text-token keys/values. The
// Q/K/V/output projections carry the trainable flag; the query norm stays
// frozen with the backbone. `maps` receives the head-averaged pre-value
// softmax probabilities reshaped to [B, L, H, W].
struct CrossAttention {
    nn::LayerNormLayer qnorm;
    nn::Linear wq, wk, wv, wo;
    int heads = 1;
    int channels = 0;

    void init(const std::string& name, int channels_, int d_cond, int heads_, Rng& rng);
    Var apply(nn::GraphCtx& g, Var x, Var cond, Var* maps);
    void collect(std::vector<nn::Param*>& out);
};

struct ForwardResult {
    Var denoised;                    // [B,3,H,W]
    objectives::AttentionMaps attn;  // 6 blocks: down 64/32/16, up 16/32/64
};

// Inpainting U-Net over 7 input channels (noised image, mask, masked image)
// at three resolutions with one cross-attention block per resolution per
// branch. The output head is zero-initialized so an untrained net returns
// c_skip * z exactly.
struct UNet {
    DenoiserConfig cfg;
    int64_t forwards = 0;  // pass counter, useful for budget checks
    nn::Linear sigma_mlp1, sigma_mlp2;
    nn::Conv stem;
    ResBlock rb_d0, rb_d1, rb_d2, rb_mid, rb_u2, rb_u1, rb_u0;
    CrossAttention ca_d0, ca_d1, ca_d2, ca_u2, ca_u1, ca_u0;
    nn::Conv down0, down1;  // stride-2
    nn::Conv upc1, upc0;    // 1x1 after nearest upsampling
    nn::GroupNormLayer gn_out;
    nn::Conv head;  // zero-initialized

    void init(Rng& rng, const DenoiserConfig& cfg_ = {});

    // noised [B,3,S,S]; sigmas one per sample, > 0; cond [B,L,d_cond] on the
    // same tape; mask [B,1,S,S] binary; masked_image [B,3,S,S]. Throws
    // std::invalid_argument on shape errors and std::runtime_error naming
    // the block when attention goes non-finite.
    ForwardResult forward(nn::GraphCtx& g, Var noised, const std::vector<Scalar>& sigmas, Var cond,
                          const Tensor& mask, const Tensor& masked_image);

    std::vector<nn::Param*> params();
    std::vector<nn::Param*> ca_params();
    std::vector<nn::Param*> non_ca_params();
};

// Classifier-free guidance: D_u + s * (D_c - D_u), attention maps from the
// conditional branch. s = 1 and s = 0 short-circuit to a single forward.
ForwardResult cfg_forward(UNet& net, nn::GraphCtx& g, Var noised,
                          const std::vector<Scalar>& sigmas, Var cond, Var uncond,
                          const Tensor& mask, const Tensor& masked_image, Scalar s);

}  // namespace glyphdiff::denoiser

#endif  // GLYPHDIFF_DENOISER_HPP

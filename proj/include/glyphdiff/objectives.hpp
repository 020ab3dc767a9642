#ifndef GLYPHDIFF_OBJECTIVES_HPP
#define GLYPHDIFF_OBJECTIVES_HPP

#include <string>
#include <vector>

#include "glyphdiff/autograd.hpp"
#include "glyphdiff/charset.hpp"
#include "glyphdiff/strnet.hpp"
#include "glyphdiff/tensor.hpp"

namespace glyphdiff::objectives {

// Head-averaged cross-attention probabilities, one entry per block, each
// shaped [B, L, H_b, W_b]. At every pixel the values over the L tokens sum
// to 1 (softmax over keys).
struct AttentionMaps {
    std::vector<Var> blocks;
};

// Noise-level weighted reconstruction loss: mean over samples of
// sigma_b^-2 * mean((denoised_b - target_b)^2). Rejects non-positive sigmas.
Var dsm_loss(Var denoised, const Tensor& target, const std::vector<Scalar>& sigmas);
Var dsm_loss(Var denoised, const Tensor& target, Scalar sigma);

// Training noise level: ln sigma ~ Normal(-1.2, 1.2^2).
Scalar sample_sigma(Rng& rng);

// Normalized 1-D Gaussian taps for the map low-pass filter. The default
// spec ties the kernel to the map's short side: size = side/4 rounded up to
// odd, std = size/4. Size 1 is the identity.
std::vector<Scalar> gaussian_kernel(int side);
std::vector<Scalar> gaussian_kernel_explicit(int size, Scalar std_dev);

// Separable low-pass over each [H,W] map of a [B,L,H,W] stack.
Var blur_maps(Var maps);

// Area mean-pool to the target resolution, then re-binarize. Segmentation
// maps use the >= 0.5 rule; masks fall back to > 0 when that empties a
// non-empty mask, so downstream rejection only fires for truly empty masks.
Tensor downsample_seg(const Tensor& map, int th, int tw);
Tensor downsample_mask(const Tensor& mask, int th, int tw);

struct LocLossResult {
    Var loss;  // scalar
    int blocks_used = 0;
    std::vector<std::string> diagnostics;  // one line per excluded (block, sample)
};

// Per-block mean over valid samples of (1/len) sum_j
// [ max(G(A^j) * (1-S^j)) - max(G(A^j) * S^j) ], averaged over blocks.
// Samples whose downsampled S^j is empty for a non-pad position are
// excluded from that block with a diagnostic. seg_maps is [B,L,H,W] at
// image resolution; word_lengths holds one true length (>= 1) per sample.
LocLossResult local_attention_loss(const AttentionMaps& attn, const Tensor& seg_maps,
                                   const std::vector<int>& word_lengths);

// Per-sample attend-to-all-characters scores: -(1/C) sum_i min_{j<=len}
// max(G(A_i^j) * M). Shape [B], each entry in [-1, 0]. The mask is shared
// across the batch (the candidate-scoring and refinement use case).
Var aae_scores(const AttentionMaps& attn, const Tensor& mask, int word_length);
Var aae_loss(const AttentionMaps& attn, const Tensor& mask, int word_length);  // mean of scores

// Recognition loss on the masked crop of each denoised sample. The
// recognizer runs frozen: gradients flow into `denoised` only.
Var str_loss(strnet::StrNet& net, Var denoised, const std::vector<Tensor>& masks,
             const std::vector<charset::TextLabel>& labels);

// dsm + lambda_loc * loc + lambda_str * str. Terms with zero weight or an
// invalid Var are skipped, so ablations reduce to DSM exactly.
Var total_training_loss(Var dsm, Var loc, Var str, Scalar lambda_loc = 0.01,
                        Scalar lambda_str = 0.001);

}  // namespace glyphdiff::objectives

#endif  // GLYPHDIFF_OBJECTIVES_HPP

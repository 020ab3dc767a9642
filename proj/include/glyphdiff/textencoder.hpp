#ifndef GLYPHDIFF_TEXTENCODER_HPP
#define GLYPHDIFF_TEXTENCODER_HPP

#include <vector>

#include "glyphdiff/charset.hpp"
#include "glyphdiff/nn.hpp"
#include "glyphdiff/tensor.hpp"

namespace glyphdiff::textencoder {

struct TextEncoderConfig {
    int d_emb = 128;
    int layers = 4;
    int heads = 4;
    int mlp_dim = 256;
    bool final_ln = true;
    int d_proj = 128;
    int d_img = 128;  // width of the visual features fed to the alignment loss
    // When set, the alignment loss uses a symmetric in-batch softmax over
    // cross-modal similarities instead of the plain matched-pair cosine.
    bool in_batch_contrastive = false;
    Scalar temperature = 0.07;
};

// Character-level word encoder: codebook lookup + positional embeddings fed
// through a small transformer. Pretrained by aligning a pooled projection
// with visual features of clean renders plus a per-position character
// classification head.
struct TextEncoder {
    TextEncoderConfig cfg;
    nn::Param codebook;  // [kVocabSize, d_emb]
    nn::Param pos;       // [kMaxLen, d_emb]
    std::vector<nn::TransformerBlock> blocks;
    nn::LayerNormLayer final_norm;
    nn::Linear mlc_head;  // d_emb -> kVocabSize
    nn::Linear wt;        // d_emb -> d_proj, bias-free
    nn::Linear wi;        // d_img -> d_proj, bias-free

    void init(Rng& rng, const TextEncoderConfig& cfg_ = {});

    // [B] labels -> [B, kMaxLen, d_emb].
    Var embed(nn::GraphCtx& g, const std::vector<charset::TextLabel>& labels);
    Tensor embed_eval(const std::vector<charset::TextLabel>& labels);

    // Per-position classification logits [B, kMaxLen, kVocabSize].
    Var mlc_logits(nn::GraphCtx& g, Var embeddings);

    // Mean of non-pad positions projected to d_proj. Throws on empty words
    // (no positions to pool).
    Var pooled_projection(nn::GraphCtx& g, Var embeddings,
                          const std::vector<charset::TextLabel>& labels);

    std::vector<nn::Param*> params();
};

// Negative mean cosine similarity of matched rows; in [-1, 1].
Var clip_loss(Var text_proj, Var image_proj);

// Symmetric in-batch cross-entropy over the cosine-similarity matrix.
Var clip_loss_in_batch(Var text_proj, Var image_proj, Scalar temperature);

// Cross-entropy of per-position logits against labels, pads included.
Var mlc_loss(Var logits, const std::vector<charset::TextLabel>& labels);

struct PretrainBatch {
    std::vector<charset::TextLabel> labels;
    Tensor image_features;  // [B, d_img], treated as constants
};

// Alignment loss + lambda_ce * classification loss on one batch.
Var pretrain_loss(nn::GraphCtx& g, TextEncoder& enc, const PretrainBatch& batch,
                  Scalar lambda_ce = 0.1);

}  // namespace glyphdiff::textencoder

#endif  // GLYPHDIFF_TEXTENCODER_HPP

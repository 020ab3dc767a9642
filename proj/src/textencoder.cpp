#include "glyphdiff/textencoder.hpp"

#include <stdexcept>
#include <string>

namespace glyphdiff::textencoder {

using charset::kMaxLen;
using charset::kVocabSize;
using charset::TextLabel;
using nn::GraphCtx;
using nn::Param;

void TextEncoder::init(Rng& rng, const TextEncoderConfig& cfg_) {
    cfg = cfg_;
    codebook = Param{"enc.codebook", Tensor::zeros({kVocabSize, cfg.d_emb})};
    rng.fill_normal(codebook.t, 0.02);
    pos = Param{"enc.pos", Tensor::zeros({kMaxLen, cfg.d_emb})};
    rng.fill_normal(pos.t, 0.02);
    blocks.resize(cfg.layers);
    for (int i = 0; i < cfg.layers; ++i) {
        blocks[i].init("enc.t" + std::to_string(i), cfg.d_emb, cfg.heads, cfg.mlp_dim, rng);
    }
    final_norm.init("enc.final_ln", cfg.d_emb);
    mlc_head.init("enc.mlc", cfg.d_emb, kVocabSize, rng);
    wt.init("enc.wt", cfg.d_emb, cfg.d_proj, rng, false);
    wi.init("enc.wi", cfg.d_img, cfg.d_proj, rng, false);
}

Var TextEncoder::embed(GraphCtx& g, const std::vector<TextLabel>& labels) {
    if (labels.empty()) throw std::invalid_argument("TextEncoder::embed: empty batch");
    int B = static_cast<int>(labels.size());
    std::vector<int> ids;
    ids.reserve(static_cast<size_t>(B) * kMaxLen);
    for (const TextLabel& lab : labels) {
        if (static_cast<int>(lab.indices.size()) != kMaxLen) {
            throw std::invalid_argument("TextEncoder::embed: label not padded to fixed length");
        }
        ids.insert(ids.end(), lab.indices.begin(), lab.indices.end());
    }
    Var rows = embedding_rows(g(codebook), ids);                 // [B*L, d]
    Var x = add_bias_ld(reshape(rows, {B, kMaxLen, cfg.d_emb}), g(pos));
    for (auto& block : blocks) x = block.apply(g, x);
    if (cfg.final_ln) x = final_norm.apply(g, x);
    return x;
}

Tensor TextEncoder::embed_eval(const std::vector<TextLabel>& labels) {
    Tape t;
    GraphCtx g(t, false);
    return t.value(embed(g, labels)).clone();
}

Var TextEncoder::mlc_logits(GraphCtx& g, Var embeddings) { return mlc_head.apply(g, embeddings); }

Var TextEncoder::pooled_projection(GraphCtx& g, Var embeddings, const std::vector<TextLabel>& labels) {
    Tape& t = g.tape;
    const Tensor& ev = t.value(embeddings);
    if (ev.rank() != 3 || ev.dim(0) != static_cast<int>(labels.size()) || ev.dim(1) != kMaxLen) {
        throw std::invalid_argument("pooled_projection: embeddings " + ev.shape_str() +
                                    " do not match " + std::to_string(labels.size()) + " labels");
    }
    Tensor nonpad = Tensor::zeros({ev.dim(0), kMaxLen});
    for (size_t b = 0; b < labels.size(); ++b) {
        for (int j = 0; j < labels[b].length; ++j) nonpad.at(static_cast<int>(b), j) = 1.0;
    }
    return wt.apply(g, mean_rows_masked(embeddings, nonpad));
}

std::vector<Param*> TextEncoder::params() {
    std::vector<Param*> out;
    out.push_back(&codebook);
    out.push_back(&pos);
    for (auto& block : blocks) block.collect(out);
    if (cfg.final_ln) final_norm.collect(out);
    mlc_head.collect(out);
    wt.collect(out);
    wi.collect(out);
    return out;
}

Var clip_loss(Var text_proj, Var image_proj) {
    return scale(mean_all(cosine_rows(text_proj, image_proj)), -1.0);
}

Var clip_loss_in_batch(Var text_proj, Var image_proj, Scalar temperature) {
    Tape& t = *text_proj.tape;
    const Tensor& tv = t.value(text_proj);
    if (tv.rank() != 2) throw std::invalid_argument("clip_loss_in_batch: want [B,D]");
    int B = tv.dim(0), D = tv.dim(1);
    auto transpose2d = [](Var m, int r, int c) {
        return reshape(permute021(reshape(m, {1, r, c})), {c, r});
    };
    Var tn = normalize_rows(text_proj);
    Var im = normalize_rows(image_proj);
    Var sims = scale(matmul(tn, transpose2d(im, B, D)), 1.0 / temperature);  // [B,B]
    std::vector<int> diag(B);
    for (int i = 0; i < B; ++i) diag[i] = i;
    Var text_to_image = ce_mean(sims, diag);
    Var image_to_text = ce_mean(transpose2d(sims, B, B), diag);
    return scale(add(text_to_image, image_to_text), 0.5);
}

Var mlc_loss(Var logits, const std::vector<TextLabel>& labels) {
    Tape& t = *logits.tape;
    const Tensor& lv = t.value(logits);
    if (lv.rank() != 3 || lv.dim(0) != static_cast<int>(labels.size()) || lv.dim(1) != kMaxLen ||
        lv.dim(2) != kVocabSize) {
        throw std::invalid_argument("mlc_loss: bad logits shape " + lv.shape_str());
    }
    std::vector<int> ids;
    ids.reserve(labels.size() * kMaxLen);
    for (const TextLabel& lab : labels) {
        ids.insert(ids.end(), lab.indices.begin(), lab.indices.end());
    }
    return ce_mean(reshape(logits, {lv.dim(0) * kMaxLen, kVocabSize}), ids);
}

Var pretrain_loss(GraphCtx& g, TextEncoder& enc, const PretrainBatch& batch, Scalar lambda_ce) {
    Tape& t = g.tape;
    if (batch.image_features.rank() != 2 ||
        batch.image_features.dim(0) != static_cast<int>(batch.labels.size()) ||
        batch.image_features.dim(1) != enc.cfg.d_img) {
        throw std::invalid_argument("pretrain_loss: image features " +
                                    batch.image_features.shape_str() + " do not match batch");
    }
    Var emb = enc.embed(g, batch.labels);
    Var tproj = enc.pooled_projection(g, emb, batch.labels);
    Var iproj = enc.wi.apply(g, t.leaf(batch.image_features, false));
    Var align = enc.cfg.in_batch_contrastive
                    ? clip_loss_in_batch(tproj, iproj, enc.cfg.temperature)
                    : clip_loss(tproj, iproj);
    Var ce = mlc_loss(enc.mlc_logits(g, emb), batch.labels);
    return add(align, scale(ce, lambda_ce));
}

}  // namespace glyphdiff::textencoder

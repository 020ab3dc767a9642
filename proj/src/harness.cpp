#include "glyphdiff/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "glyphdiff/nn.hpp"
#include "glyphdiff/objectives.hpp"

namespace glyphdiff::harness {

namespace {

constexpr int kWordSlots = 4096;

void logln(std::ostream* log, const std::string& line) {
    if (log) (*log) << line << std::endl;
}

double now_seconds() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

std::string fmt(Scalar v) {
    std::ostringstream os;
    os.precision(5);
    os << v;
    return os.str();
}

datagen::TextImageSample scene_at(const Pipeline& p, uint64_t index) {
    return datagen::synth_scene(p.cfg.scene(), p.cfg.data_seed, index);
}

datagen::TextImageSample random_train_scene(Pipeline& p, Rng& rng) {
    if (p.train_pool && !p.train_pool->empty()) {
        return (*p.train_pool)[static_cast<size_t>(
            rng.randint(static_cast<int64_t>(p.train_pool->size())))];
    }
    return scene_at(p, static_cast<uint64_t>(rng.randint(p.cfg.train_size)));
}

// Tracks a smoothed loss so the returned number reflects the trained model,
// not the last batch draw.
struct RunningLoss {
    Scalar value = 0;
    bool seen = false;
    void push(Scalar v) {
        value = seen ? 0.98 * value + 0.02 * v : v;
        seen = true;
    }
};

}  // namespace

uint64_t fnv1a_hash(const void* data, size_t len, uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

std::string compiled_charset() {
    std::string out;
    out.reserve(charset::kNumGlyphs);
    for (int i = 0; i < charset::kNumGlyphs; ++i) out.push_back(charset::index_to_char(i));
    return out;
}

// ---- RunConfig ----

nlohmann::json RunConfig::to_json() const {
    nlohmann::json j;
    j["charset"] = charset_chars.empty() ? compiled_charset() : charset_chars;
    j["data"] = {{"canvas", canvas},       {"min_len", min_len},
                 {"max_len", max_len},     {"data_seed", data_seed},
                 {"train_size", train_size}, {"holdout_size", holdout_size}};
    j["recognizer"] = {{"steps", str_steps}, {"batch", str_batch}, {"lr", str_lr}};
    j["encoder"] = {{"steps", encoder_steps},   {"batch", encoder_batch},
                    {"lr", encoder_lr},         {"corpus", encoder_corpus},
                    {"holdout", encoder_holdout}, {"lambda_ce", lambda_ce}};
    j["denoiser"] = {{"base_width", base_width},
                     {"d_cond", d_cond},
                     {"backbone_steps", backbone_steps},
                     {"backbone_batch", backbone_batch},
                     {"backbone_lr", backbone_lr},
                     {"finetune_steps", finetune_steps},
                     {"finetune_batch", finetune_batch},
                     {"finetune_lr", finetune_lr},
                     {"cfg_dropout", cfg_dropout},
                     {"lambda_loc", lambda_loc},
                     {"lambda_str", lambda_str}};
    j["sampling"] = {{"steps", sample_steps},   {"cfg_scale", cfg_scale},
                     {"candidates", candidates}, {"alpha0", alpha0},
                     {"quick_steps", quick_steps}, {"refine_cutoff", refine_cutoff}};
    j["eval"] = {{"count", eval_count},
                 {"sample_steps", eval_sample_steps},
                 {"ablation_count", ablation_eval_count},
                 {"ablation_seeds", ablation_seeds}};
    j["seed"] = seed;  // master seed: feeds training streams, so top level
    return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    RunConfig c;
    c.charset_chars = j.value("charset", compiled_charset());
    if (c.charset_chars != compiled_charset()) {
        throw std::invalid_argument("run config charset does not match the compiled alphabet");
    }
    if (j.contains("data")) {
        const auto& s = j.at("data");
        c.canvas = s.value("canvas", c.canvas);
        c.min_len = s.value("min_len", c.min_len);
        c.max_len = s.value("max_len", c.max_len);
        c.data_seed = s.value("data_seed", c.data_seed);
        c.train_size = s.value("train_size", c.train_size);
        c.holdout_size = s.value("holdout_size", c.holdout_size);
    }
    if (j.contains("recognizer")) {
        const auto& s = j.at("recognizer");
        c.str_steps = s.value("steps", c.str_steps);
        c.str_batch = s.value("batch", c.str_batch);
        c.str_lr = s.value("lr", c.str_lr);
    }
    if (j.contains("encoder")) {
        const auto& s = j.at("encoder");
        c.encoder_steps = s.value("steps", c.encoder_steps);
        c.encoder_batch = s.value("batch", c.encoder_batch);
        c.encoder_lr = s.value("lr", c.encoder_lr);
        c.encoder_corpus = s.value("corpus", c.encoder_corpus);
        c.encoder_holdout = s.value("holdout", c.encoder_holdout);
        c.lambda_ce = s.value("lambda_ce", c.lambda_ce);
    }
    if (j.contains("denoiser")) {
        const auto& s = j.at("denoiser");
        c.base_width = s.value("base_width", c.base_width);
        c.d_cond = s.value("d_cond", c.d_cond);
        c.backbone_steps = s.value("backbone_steps", c.backbone_steps);
        c.backbone_batch = s.value("backbone_batch", c.backbone_batch);
        c.backbone_lr = s.value("backbone_lr", c.backbone_lr);
        c.finetune_steps = s.value("finetune_steps", c.finetune_steps);
        c.finetune_batch = s.value("finetune_batch", c.finetune_batch);
        c.finetune_lr = s.value("finetune_lr", c.finetune_lr);
        c.cfg_dropout = s.value("cfg_dropout", c.cfg_dropout);
        c.lambda_loc = s.value("lambda_loc", c.lambda_loc);
        c.lambda_str = s.value("lambda_str", c.lambda_str);
    }
    if (j.contains("sampling")) {
        const auto& s = j.at("sampling");
        c.sample_steps = s.value("steps", c.sample_steps);
        c.cfg_scale = s.value("cfg_scale", c.cfg_scale);
        c.candidates = s.value("candidates", c.candidates);
        c.alpha0 = s.value("alpha0", c.alpha0);
        c.quick_steps = s.value("quick_steps", c.quick_steps);
        c.refine_cutoff = s.value("refine_cutoff", c.refine_cutoff);
    }
    if (j.contains("eval")) {
        const auto& s = j.at("eval");
        c.eval_count = s.value("count", c.eval_count);
        c.eval_sample_steps = s.value("sample_steps", c.eval_sample_steps);
        c.ablation_eval_count = s.value("ablation_count", c.ablation_eval_count);
        c.ablation_seeds = s.value("ablation_seeds", c.ablation_seeds);
    }
    c.seed = j.value("seed", c.seed);
    return c;
}

uint64_t RunConfig::hash() const {
    const std::string dump = to_json().dump();  // keys are sorted: canonical
    return fnv1a_hash(dump.data(), dump.size());
}

uint64_t RunConfig::train_hash() const {
    nlohmann::json j = to_json();
    j.erase("sampling");  // inference-time knobs never touch the weights
    j.erase("eval");
    const std::string dump = j.dump();
    return fnv1a_hash(dump.data(), dump.size());
}

datagen::SceneConfig RunConfig::scene() const {
    datagen::SceneConfig sc;
    sc.canvas = canvas;
    sc.min_len = min_len;
    sc.max_len = max_len;
    return sc;
}

denoiser::DenoiserConfig RunConfig::denoiser_config() const {
    denoiser::DenoiserConfig dc;
    dc.image_size = canvas;
    dc.base_width = base_width;
    dc.d_cond = d_cond;
    return dc;
}

textencoder::TextEncoderConfig RunConfig::encoder_config() const {
    textencoder::TextEncoderConfig ec;
    ec.d_emb = d_cond;  // embeddings feed the cross-attention keys/values
    ec.in_batch_contrastive = true;
    return ec;
}

// ---- WordTable ----

void WordTable::init(Rng& rng, int slots_, int d_cond) {
    if (slots_ < 2) {
        throw std::invalid_argument("word table needs at least one real slot plus the null row");
    }
    slots = slots_;
    table.name = "words.table";
    table.t = Tensor({slots_, d_cond});
    table.ca = false;
    rng.fill_normal(table.t, 0.02);
}

int WordTable::slot_for(const std::string& word) const {
    if (slots < 2) throw std::logic_error("word table is uninitialized");
    const uint64_t h = fnv1a_hash(word.data(), word.size());
    return static_cast<int>(h % static_cast<uint64_t>(slots - 1));
}

Var WordTable::cond(nn::GraphCtx& g, const std::vector<charset::TextLabel>& labels) {
    const int B = static_cast<int>(labels.size());
    if (B == 0) throw std::invalid_argument("word table: empty batch");
    std::vector<int> ids;
    ids.reserve(static_cast<size_t>(B) * charset::kMaxLen);
    for (const auto& l : labels) {
        const int id = slot_for(l.text);
        for (int k = 0; k < charset::kMaxLen; ++k) ids.push_back(id);
    }
    Var rows = embedding_rows(g(table), ids);  // [B*L, d]
    return reshape(rows, {B, charset::kMaxLen, table.t.dim(1)});
}

Var WordTable::cond_null(nn::GraphCtx& g, int batch) {
    if (batch < 1) throw std::invalid_argument("word table: empty batch");
    std::vector<int> ids(static_cast<size_t>(batch) * charset::kMaxLen, slots - 1);
    Var rows = embedding_rows(g(table), ids);
    return reshape(rows, {batch, charset::kMaxLen, table.t.dim(1)});
}

Tensor WordTable::row_broadcast(int row) const {
    const int d = table.t.dim(1);
    Tensor out({charset::kMaxLen, d});
    for (int l = 0; l < charset::kMaxLen; ++l) {
        for (int k = 0; k < d; ++k) out.at(l, k) = table.t.at(row, k);
    }
    return out;
}

Tensor WordTable::cond_eval(const std::string& word) const { return row_broadcast(slot_for(word)); }

Tensor WordTable::null_cond() const {
    if (slots < 2) throw std::logic_error("word table is uninitialized");
    return row_broadcast(slots - 1);
}

std::vector<nn::Param*> WordTable::params() { return {&table}; }

// ---- Pipeline ----

void Pipeline::init(Rng& rng) {
    str.init(rng);
    enc.init(rng, cfg.encoder_config());
    if (enc.cfg.d_img != str.cfg.d_model) {
        throw std::invalid_argument("encoder image-feature width must match the recognizer");
    }
    unet.init(rng, cfg.denoiser_config());
    words.init(rng, kWordSlots, cfg.d_cond);
}

std::vector<nn::Param*> Pipeline::all_params() {
    std::vector<nn::Param*> out;
    for (auto* p : str.params()) out.push_back(p);
    for (auto* p : enc.params()) out.push_back(p);
    for (auto* p : unet.params()) out.push_back(p);
    for (auto* p : words.params()) out.push_back(p);
    return out;
}

void save_pipeline(const std::string& path, Pipeline& p, const std::string& stage) {
    nlohmann::json meta;
    meta["stage"] = stage;
    meta["config_hash"] = p.cfg.hash();
    meta["train_hash"] = p.cfg.train_hash();
    meta["config"] = p.cfg.to_json();
    nn::save_checkpoint(path, p.all_params(), meta);
}

std::string load_pipeline(const std::string& path, Pipeline& p) {
    auto params = p.all_params();
    const nlohmann::json meta = nn::load_checkpoint(path, params);
    const uint64_t h = meta.value("train_hash", uint64_t{0});
    if (h != p.cfg.train_hash()) {
        throw std::runtime_error("checkpoint " + path +
                                 " was produced under a different training configuration");
    }
    return meta.value("stage", std::string{});
}

// ---- recognizer training ----

Scalar train_recognizer(Pipeline& p, Rng& rng, std::ostream* log) {
    nn::Adam opt(p.cfg.str_lr);
    RunningLoss running;
    const double t0 = now_seconds();
    for (int step = 0; step < p.cfg.str_steps; ++step) {
        std::vector<Tensor> images;
        std::vector<charset::TextLabel> labels;
        images.reserve(p.cfg.str_batch);
        for (int b = 0; b < p.cfg.str_batch; ++b) {
            // Half scene-text mask crops, half clean reference strips. The
            // strips cover the full label length range so the recognizer
            // also serves the encoder's feature extractor.
            if (rng.uniform() < 0.5) {
                auto s = random_train_scene(p, rng);
                images.push_back(
                    strnet::masked_crop(s.image, s.mask, p.str.cfg.in_h, p.str.cfg.in_w));
                labels.push_back(s.label);
            } else {
                const std::string w = datagen::random_word(rng, 1, charset::kMaxLen);
                images.push_back(datagen::render_reference(w, p.str.cfg.in_h, p.str.cfg.in_w));
                labels.push_back(charset::encode_text(w));
            }
        }
        Tape tape;
        nn::GraphCtx g(tape, true);
        Var logits = p.str.logits(g, tape.leaf(nn::stack0(images), false));
        Var loss = strnet::str_ce(logits, labels);
        tape.backward(loss);
        opt.step(tape, g.bound);
        running.push(tape.value(loss)[0]);
        if (step % 100 == 0 || step + 1 == p.cfg.str_steps) {
            logln(log, "recognizer step " + std::to_string(step) + "/" +
                           std::to_string(p.cfg.str_steps) + " loss " + fmt(running.value) +
                           " (" + fmt(now_seconds() - t0) + "s)");
        }
    }
    return running.value;
}

// ---- encoder training ----

std::vector<charset::TextLabel> sample_words(int count, int min_len, int max_len, uint64_t seed) {
    Rng rng(fnv1a_hash("wordlist", 8, seed));
    std::vector<charset::TextLabel> out;
    out.reserve(count);
    for (int i = 0; i < count; ++i) {
        out.push_back(charset::encode_text(datagen::random_word(rng, min_len, max_len)));
    }
    return out;
}

std::vector<charset::TextLabel> encoder_holdout_words(const RunConfig& cfg) {
    // A different generator stream than the training corpus (which uses the
    // data seed directly); collisions with training words are possible but
    // vanishingly rare over 62^len word spaces.
    return sample_words(cfg.encoder_holdout, 1, charset::kMaxLen,
                        fnv1a_hash("holdout words", 13, cfg.data_seed));
}

namespace {

// Frozen recognizer features of clean renders, in batches.
Tensor render_features(Pipeline& p, const std::vector<charset::TextLabel>& labels,
                       std::ostream* log) {
    const int n = static_cast<int>(labels.size());
    Tensor feats({n, p.str.cfg.d_model});
    const int chunk = 64;
    const double t0 = now_seconds();
    for (int i0 = 0; i0 < n; i0 += chunk) {
        const int m = std::min(chunk, n - i0);
        std::vector<Tensor> imgs;
        imgs.reserve(m);
        for (int k = 0; k < m; ++k) {
            imgs.push_back(
                datagen::render_reference(labels[i0 + k].text, p.str.cfg.in_h, p.str.cfg.in_w));
        }
        Tape tape;
        nn::GraphCtx g(tape, false);
        Var feat;
        p.str.logits(g, tape.leaf(nn::stack0(imgs), false), &feat);
        const Tensor& f = tape.value(feat);  // [m, d_model]
        for (int k = 0; k < m; ++k) {
            for (int d = 0; d < p.str.cfg.d_model; ++d) feats.at(i0 + k, d) = f.at(k, d);
        }
        if (log && (i0 / chunk) % 100 == 0) {
            logln(log, "features " + std::to_string(i0 + m) + "/" + std::to_string(n) + " (" +
                           fmt(now_seconds() - t0) + "s)");
        }
    }
    return feats;
}

}  // namespace

Scalar train_encoder(Pipeline& p, Rng& rng, std::ostream* log) {
    const auto corpus = sample_words(p.cfg.encoder_corpus, 1, charset::kMaxLen, p.cfg.data_seed);
    logln(log, "encoder: extracting recognizer features for " + std::to_string(corpus.size()) +
                   " words");
    const Tensor feats = render_features(p, corpus, log);

    nn::Adam opt(p.cfg.encoder_lr);
    RunningLoss running;
    const double t0 = now_seconds();
    const int d_img = p.str.cfg.d_model;
    for (int step = 0; step < p.cfg.encoder_steps; ++step) {
        textencoder::PretrainBatch batch;
        batch.labels.reserve(p.cfg.encoder_batch);
        batch.image_features = Tensor({p.cfg.encoder_batch, d_img});
        for (int b = 0; b < p.cfg.encoder_batch; ++b) {
            const int idx = static_cast<int>(rng.randint(static_cast<int64_t>(corpus.size())));
            batch.labels.push_back(corpus[idx]);
            for (int d = 0; d < d_img; ++d) batch.image_features.at(b, d) = feats.at(idx, d);
        }
        Tape tape;
        nn::GraphCtx g(tape, true);
        Var loss = textencoder::pretrain_loss(g, p.enc, batch, p.cfg.lambda_ce);
        tape.backward(loss);
        opt.step(tape, g.bound);
        running.push(tape.value(loss)[0]);
        if (step % 100 == 0 || step + 1 == p.cfg.encoder_steps) {
            logln(log, "encoder step " + std::to_string(step) + "/" +
                           std::to_string(p.cfg.encoder_steps) + " loss " + fmt(running.value) +
                           " (" + fmt(now_seconds() - t0) + "s)");
        }
    }
    return running.value;
}

EncoderEvalStats encoder_eval(Pipeline& p, const std::vector<charset::TextLabel>& labels) {
    if (labels.empty()) throw std::invalid_argument("encoder_eval: empty label set");
    EncoderEvalStats st;

    // Per-position classification accuracy, in batches.
    int64_t all_hits = 0, all_total = 0, np_hits = 0, np_total = 0;
    const int chunk = 256;
    const int n = static_cast<int>(labels.size());
    for (int i0 = 0; i0 < n; i0 += chunk) {
        const int m = std::min(chunk, n - i0);
        std::vector<charset::TextLabel> part(labels.begin() + i0, labels.begin() + i0 + m);
        Tape tape;
        nn::GraphCtx g(tape, false);
        Var emb = p.enc.embed(g, part);
        const Tensor& lg = tape.value(p.enc.mlc_logits(g, emb));  // [m,L,V]
        for (int b = 0; b < m; ++b) {
            for (int l = 0; l < charset::kMaxLen; ++l) {
                int best = 0;
                for (int v = 1; v < charset::kVocabSize; ++v) {
                    if (lg.at(b, l, v) > lg.at(b, l, best)) best = v;
                }
                const int want = part[b].indices[l];
                const bool hit = best == want;
                all_hits += hit;
                ++all_total;
                if (l < part[b].length) {
                    np_hits += hit;
                    ++np_total;
                }
            }
        }
    }
    st.mlc_accuracy = static_cast<Scalar>(all_hits) / static_cast<Scalar>(all_total);
    st.mlc_accuracy_nonpad =
        np_total ? static_cast<Scalar>(np_hits) / static_cast<Scalar>(np_total) : 1.0;

    // Matched vs mismatched projection cosines against render features.
    const Tensor feats = render_features(p, labels, nullptr);
    Tape tape;
    nn::GraphCtx g(tape, false);
    Var emb = p.enc.embed(g, labels);
    const Tensor tp = tape.value(p.enc.pooled_projection(g, emb, labels)).clone();
    const Tensor ip =
        tape.value(p.enc.wi.apply(g, tape.leaf(feats, false))).clone();  // [n, d_proj]
    const int dp = tp.dim(1);
    auto cosine = [&](int a, int b) {
        Scalar dot = 0, na = 0, nb = 0;
        for (int d = 0; d < dp; ++d) {
            dot += tp.at(a, d) * ip.at(b, d);
            na += tp.at(a, d) * tp.at(a, d);
            nb += ip.at(b, d) * ip.at(b, d);
        }
        return dot / (std::sqrt(na) * std::sqrt(nb) + 1e-12);
    };
    Scalar matched = 0, mismatched = 0;
    int mm_count = 0;
    for (int i = 0; i < n; ++i) {
        matched += cosine(i, i);
        const int j = (i + 1) % n;
        if (labels[i].text != labels[j].text) {
            mismatched += cosine(i, j);
            ++mm_count;
        }
    }
    st.matched_cosine = matched / n;
    st.mismatched_cosine = mm_count ? mismatched / mm_count : 0.0;
    return st;
}

// ---- denoiser training ----

namespace {

struct DenoBatch {
    Tensor noised, target, mask4, masked, seg;
    std::vector<Scalar> sigmas;
    std::vector<charset::TextLabel> labels;
    std::vector<Tensor> masks2d;
    std::vector<int> lengths;
};

DenoBatch make_deno_batch(Pipeline& p, Rng& rng, int B) {
    const int S = p.cfg.canvas;
    DenoBatch out;
    out.noised = Tensor({B, 3, S, S});
    out.target = Tensor({B, 3, S, S});
    out.mask4 = Tensor({B, 1, S, S});
    out.masked = Tensor({B, 3, S, S});
    std::vector<Tensor> segs;
    segs.reserve(B);
    for (int b = 0; b < B; ++b) {
        const auto s = random_train_scene(p, rng);
        const Scalar sigma = objectives::sample_sigma(rng);
        out.sigmas.push_back(sigma);
        out.labels.push_back(s.label);
        out.lengths.push_back(s.label.length);
        out.masks2d.push_back(s.mask);
        segs.push_back(s.seg_maps);
        for (int y = 0; y < S; ++y) {
            for (int x = 0; x < S; ++x) {
                const Scalar m = s.mask.at(y, x);
                out.mask4.at(b, 0, y, x) = m;
                for (int c = 0; c < 3; ++c) {
                    const Scalar t = 2.0 * s.image.at(c, y, x) - 1.0;
                    out.target.at(b, c, y, x) = t;
                    out.noised.at(b, c, y, x) = t + sigma * rng.normal();
                    out.masked.at(b, c, y, x) = t * (1.0 - m);
                }
            }
        }
    }
    out.seg = nn::stack0(segs);
    return out;
}

}  // namespace

Scalar train_backbone(Pipeline& p, Rng& rng, std::ostream* log, std::ostream* csv) {
    nn::Adam opt(p.cfg.backbone_lr);
    RunningLoss running;
    const double t0 = now_seconds();
    if (csv) (*csv) << "step,dsm\n";
    for (int step = 0; step < p.cfg.backbone_steps; ++step) {
        DenoBatch b = make_deno_batch(p, rng, p.cfg.backbone_batch);
        // Guidance dropout at batch granularity: the whole batch trains the
        // unconditional branch on a pure denoising objective.
        const bool dropped = rng.uniform() < p.cfg.cfg_dropout;
        Tape tape;
        nn::GraphCtx g(tape, true);
        Var cond = dropped ? p.words.cond_null(g, p.cfg.backbone_batch)
                           : p.words.cond(g, b.labels);
        auto res = p.unet.forward(g, tape.leaf(b.noised, false), b.sigmas, cond, b.mask4,
                                  b.masked);
        Var loss = objectives::dsm_loss(res.denoised, b.target, b.sigmas);
        tape.backward(loss);
        opt.step(tape, g.bound);
        const Scalar v = tape.value(loss)[0];
        running.push(v);
        if (csv) (*csv) << step << "," << v << "\n";
        if (step % 25 == 0 || step + 1 == p.cfg.backbone_steps) {
            logln(log, "backbone step " + std::to_string(step) + "/" +
                           std::to_string(p.cfg.backbone_steps) + " loss " + fmt(running.value) +
                           " (" + fmt(now_seconds() - t0) + "s)");
        }
    }
    return running.value;
}

FinetuneSetting ladder_setting(const std::string& name) {
    if (name == "base") return {"base", false, false, false};
    if (name == "cl") return {"cl", true, false, false};
    if (name == "loc") return {"loc", true, true, false};
    if (name == "str") return {"str", true, true, true};
    throw std::invalid_argument("unknown ladder setting: " + name);
}

Scalar finetune_ca(Pipeline& p, const FinetuneSetting& s, uint64_t seed, std::ostream* log,
                   std::ostream* csv) {
    // Everything outside the cross-attention projections must come out
    // bit-identical; hash the frozen set up front.
    std::vector<nn::Param*> frozen;
    for (auto* q : p.str.params()) frozen.push_back(q);
    for (auto* q : p.enc.params()) frozen.push_back(q);
    for (auto* q : p.unet.non_ca_params()) frozen.push_back(q);
    for (auto* q : p.words.params()) frozen.push_back(q);
    const uint64_t before = nn::params_hash(frozen);

    Rng rng(fnv1a_hash("finetune", 8, seed));
    nn::Adam opt(p.cfg.finetune_lr);
    RunningLoss running;
    const double t0 = now_seconds();
    const int B = p.cfg.finetune_batch;
    if (csv) (*csv) << "step,dsm,loc,str,total\n";
    for (int step = 0; step < p.cfg.finetune_steps; ++step) {
        DenoBatch b = make_deno_batch(p, rng, B);
        const bool dropped = rng.uniform() < p.cfg.cfg_dropout;
        Tape tape;
        nn::GraphCtx g(tape, true, /*ca_only=*/true);
        Var cond;
        if (s.encoder_cond) {
            std::vector<charset::TextLabel> want =
                dropped ? std::vector<charset::TextLabel>(B, charset::encode_text("")) : b.labels;
            cond = tape.leaf(p.enc.embed_eval(want), false);
        } else {
            cond = dropped ? p.words.cond_null(g, B) : p.words.cond(g, b.labels);
        }
        auto res = p.unet.forward(g, tape.leaf(b.noised, false), b.sigmas, cond, b.mask4,
                                  b.masked);
        Var dsm = objectives::dsm_loss(res.denoised, b.target, b.sigmas);
        Var loc, strv;
        if (!dropped && s.use_loc) {
            loc = objectives::local_attention_loss(res.attn, b.seg, b.lengths).loss;
        }
        if (!dropped && s.use_str) {
            // The recognizer judges in image space; shift the denoised
            // prediction from [-1,1] back to [0,1] first.
            const Tensor ones = Tensor::full(tape.value(res.denoised).shape, 1.0);
            Var d01 = scale(add_const(res.denoised, ones), 0.5);
            strv = objectives::str_loss(p.str, d01, b.masks2d, b.labels);
        }
        Var loss = objectives::total_training_loss(dsm, loc, strv, p.cfg.lambda_loc,
                                                   p.cfg.lambda_str);
        tape.backward(loss);
        opt.step(tape, g.bound);
        const Scalar total = tape.value(loss)[0];
        running.push(total);
        if (csv) {
            (*csv) << step << "," << tape.value(dsm)[0] << ",";
            if (loc.valid()) (*csv) << tape.value(loc)[0];
            (*csv) << ",";
            if (strv.valid()) (*csv) << tape.value(strv)[0];
            (*csv) << "," << total << "\n";
        }
        if (step % 25 == 0 || step + 1 == p.cfg.finetune_steps) {
            logln(log, "finetune[" + s.name + "] step " + std::to_string(step) + "/" +
                           std::to_string(p.cfg.finetune_steps) + " loss " + fmt(running.value) +
                           " (" + fmt(now_seconds() - t0) + "s)");
        }
    }
    if (nn::params_hash(frozen) != before) {
        throw std::logic_error("finetune touched parameters outside the cross-attention blocks");
    }
    return running.value;
}

// ---- conditioning / judging ----

Tensor eval_cond(Pipeline& p, const charset::TextLabel& label, bool encoder_cond) {
    if (!encoder_cond) return p.words.cond_eval(label.text);
    const Tensor e = p.enc.embed_eval({label});  // [1,L,d]
    Tensor out({charset::kMaxLen, p.cfg.d_cond});
    for (int l = 0; l < charset::kMaxLen; ++l) {
        for (int d = 0; d < p.cfg.d_cond; ++d) out.at(l, d) = e.at(0, l, d);
    }
    return out;
}

Tensor null_cond(Pipeline& p, bool encoder_cond) {
    if (!encoder_cond) return p.words.null_cond();
    const Tensor e = p.enc.embed_eval({charset::encode_text("")});
    Tensor out({charset::kMaxLen, p.cfg.d_cond});
    for (int l = 0; l < charset::kMaxLen; ++l) {
        for (int d = 0; d < p.cfg.d_cond; ++d) out.at(l, d) = e.at(0, l, d);
    }
    return out;
}

std::string judge_word(strnet::StrNet& net, const Tensor& image01, const Tensor& mask) {
    return net.decode(strnet::masked_crop(image01, mask, net.cfg.in_h, net.cfg.in_w));
}

Tensor compose_output(const Tensor& source01, const Tensor& generated_pm1, const Tensor& mask) {
    if (source01.shape != generated_pm1.shape || source01.rank() != 3 ||
        mask.rank() != 2 || mask.dim(0) != source01.dim(1) || mask.dim(1) != source01.dim(2)) {
        throw std::invalid_argument("compose_output: mismatched shapes");
    }
    const int S = mask.dim(0);
    Tensor out(source01.shape);
    for (int c = 0; c < source01.dim(0); ++c) {
        for (int y = 0; y < S; ++y) {
            for (int x = 0; x < S; ++x) {
                out.at(c, y, x) =
                    mask.at(y, x) == 1.0
                        ? std::clamp(0.5 * (generated_pm1.at(c, y, x) + 1.0), 0.0, 1.0)
                        : source01.at(c, y, x);
            }
        }
    }
    return out;
}

// ---- evaluation ----

nlohmann::json EvalReport::to_json() const {
    nlohmann::json j;
    if (seq_acc_recon >= 0) j["seq_acc_recon"] = seq_acc_recon;
    if (seq_acc_editing >= 0) j["seq_acc_editing"] = seq_acc_editing;
    j["mean_final_aae"] = mean_final_aae;
    j["config_hash"] = config_hash;
    j["seed"] = seed;
    j["refined"] = refined;
    j["region_preserved"] = region_preserved;
    nlohmann::json recs = nlohmann::json::array();
    for (const auto& r : records) {
        recs.push_back({{"word", r.word}, {"decoded", r.decoded}, {"match", r.match}});
    }
    j["records"] = recs;
    return j;
}

namespace {

EvalReport run_eval(Pipeline& p, const EvalOptions& opt, bool editing) {
    if (opt.count < 1) throw std::invalid_argument("eval: count must be positive");
    if (opt.count > p.cfg.holdout_size) {
        throw std::invalid_argument("eval: count exceeds the held-out split");
    }
    auto all = p.all_params();
    const uint64_t h0 = nn::params_hash(all);

    const sampler::NoiseSchedule sched = sampler::ode_schedule(opt.sample_steps);
    sampler::RefinementConfig rc;
    rc.cfg_scale = p.cfg.cfg_scale;
    rc.quick_steps = p.cfg.quick_steps;
    rc.refine_cutoff = p.cfg.refine_cutoff;
    rc.candidates = opt.refine ? p.cfg.candidates : 1;
    rc.alpha0 = opt.refine ? p.cfg.alpha0 : 0.0;

    Rng rng(opt.seed);
    EvalReport rep;
    rep.config_hash = p.cfg.hash();
    rep.seed = opt.seed;
    rep.refined = opt.refine;
    const int S = p.cfg.canvas;
    int matches = 0;
    Scalar aae_sum = 0;
    const double t0 = now_seconds();
    for (int i = 0; i < opt.count; ++i) {
        const auto scene = scene_at(p, static_cast<uint64_t>(p.cfg.train_size + i));
        charset::TextLabel target = scene.label;
        if (editing) target = datagen::make_editing_pair(scene, rng).label;

        sampler::SampleInputs in;
        in.image = Tensor({3, S, S});
        for (int c = 0; c < 3; ++c) {
            for (int y = 0; y < S; ++y) {
                for (int x = 0; x < S; ++x) {
                    in.image.at(c, y, x) = 2.0 * scene.image.at(c, y, x) - 1.0;
                }
            }
        }
        in.mask = scene.mask;
        in.cond = eval_cond(p, target, opt.encoder_cond);
        in.uncond = null_cond(p, opt.encoder_cond);
        in.word_length = target.length;

        const auto res = sampler::sample(p.unet, in, sched, rc, rng);

        // Compose the final artifact in image space (generated inside the
        // mask, source copied outside) and verify both that composite and
        // the sampler's own output left the outside-mask region untouched.
        const Tensor out01 = compose_output(scene.image, res.image, scene.mask);
        bool preserved = true;
        for (int c = 0; c < 3; ++c) {
            for (int y = 0; y < S; ++y) {
                for (int x = 0; x < S; ++x) {
                    if (scene.mask.at(y, x) != 1.0) {
                        preserved = preserved && res.image.at(c, y, x) == in.image.at(c, y, x) &&
                                    out01.at(c, y, x) == scene.image.at(c, y, x);
                    }
                }
            }
        }
        rep.region_preserved = rep.region_preserved && preserved;

        const std::string decoded = judge_word(p.str, out01, scene.mask);
        const bool match = decoded == target.text;
        matches += match;
        aae_sum += res.trace.empty() ? 0.0 : res.trace.back().aae_after;
        rep.records.push_back({target.text, decoded, match});
        if (opt.log && (i % 10 == 9 || i + 1 == opt.count)) {
            logln(opt.log, std::string(editing ? "editing" : "recon") + " eval " +
                               std::to_string(i + 1) + "/" + std::to_string(opt.count) + " acc " +
                               fmt(static_cast<Scalar>(matches) / (i + 1)) + " (" +
                               fmt(now_seconds() - t0) + "s)");
        }
    }
    const Scalar acc = static_cast<Scalar>(matches) / static_cast<Scalar>(opt.count);
    if (editing) {
        rep.seq_acc_editing = acc;
    } else {
        rep.seq_acc_recon = acc;
    }
    rep.mean_final_aae = aae_sum / static_cast<Scalar>(opt.count);
    if (nn::params_hash(all) != h0) {
        throw std::logic_error("evaluation must not update parameters");
    }
    return rep;
}

}  // namespace

EvalReport eval_reconstruction(Pipeline& p, const EvalOptions& opt) {
    return run_eval(p, opt, false);
}

EvalReport eval_editing(Pipeline& p, const EvalOptions& opt) { return run_eval(p, opt, true); }

// ---- ablation ----

nlohmann::json AblationLadder::to_json() const {
    nlohmann::json j;
    j["settings"] = settings;
    j["per_seed"] = per_seed;
    j["mean"] = mean;
    return j;
}

AblationLadder run_ablation(Pipeline& p, const std::string& backbone_ckpt, std::ostream* log) {
    AblationLadder lad;
    lad.settings = {"base", "cl", "loc", "str", "refine"};
    const std::vector<std::string> finetunes = {"base", "cl", "loc", "str"};
    for (const uint64_t seed : p.cfg.ablation_seeds) {
        std::vector<Scalar> row;
        for (const auto& name : finetunes) {
            load_pipeline(backbone_ckpt, p);
            const FinetuneSetting s = ladder_setting(name);
            finetune_ca(p, s, seed, log);
            EvalOptions opt;
            opt.count = p.cfg.ablation_eval_count;
            opt.seed = seed;
            opt.refine = false;
            opt.encoder_cond = s.encoder_cond;
            opt.sample_steps = p.cfg.eval_sample_steps;
            opt.log = log;
            const Scalar acc = eval_reconstruction(p, opt).seq_acc_recon;
            row.push_back(acc);
            logln(log, "ablation seed " + std::to_string(seed) + " " + name + ": seqacc " +
                           fmt(acc));
        }
        // The last rung keeps the full finetune and turns on inference-time
        // refinement (candidate search + latent descent).
        EvalOptions opt;
        opt.count = p.cfg.ablation_eval_count;
        opt.seed = seed;
        opt.refine = true;
        opt.encoder_cond = true;
        opt.sample_steps = p.cfg.eval_sample_steps;
        opt.log = log;
        const Scalar acc = eval_reconstruction(p, opt).seq_acc_recon;
        row.push_back(acc);
        logln(log, "ablation seed " + std::to_string(seed) + " refine: seqacc " + fmt(acc));
        lad.per_seed.push_back(row);
    }
    lad.mean.assign(lad.settings.size(), 0.0);
    for (const auto& row : lad.per_seed) {
        for (size_t k = 0; k < row.size(); ++k) lad.mean[k] += row[k];
    }
    for (auto& v : lad.mean) v /= static_cast<Scalar>(lad.per_seed.size());
    return lad;
}

}  // namespace glyphdiff::harness

#ifndef GLYPHDIFF_HARNESS_HPP
#define GLYPHDIFF_HARNESS_HPP

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "glyphdiff/datagen.hpp"
#include "glyphdiff/denoiser.hpp"
#include "glyphdiff/sampler.hpp"
#include "glyphdiff/strnet.hpp"
#include "glyphdiff/textencoder.hpp"
#include "json.hpp"

namespace glyphdiff::harness {

// One JSON-serializable knob set covering data synthesis, every training
// stage, sampling, and evaluation. Loading rejects configs whose charset
// disagrees with the compiled alphabet.
struct RunConfig {
    std::string charset_chars;  // filled from the compiled charset by default

    // data
    int canvas = 64;
    int min_len = 1;
    int max_len = 8;
    uint64_t data_seed = 1;
    int train_size = 4096;
    int holdout_size = 512;

    // recognizer
    int str_steps = 1500;
    int str_batch = 16;
    Scalar str_lr = 3e-4;

    // text encoder
    int encoder_steps = 2500;
    int encoder_batch = 64;
    Scalar encoder_lr = 3e-4;
    int encoder_corpus = 50000;
    int encoder_holdout = 2000;
    Scalar lambda_ce = 0.1;

    // denoiser
    int base_width = 24;
    int d_cond = 128;
    int backbone_steps = 1800;
    int backbone_batch = 8;
    Scalar backbone_lr = 1e-4;
    int finetune_steps = 300;
    int finetune_batch = 4;
    Scalar finetune_lr = 1e-4;
    Scalar cfg_dropout = 0.1;
    Scalar lambda_loc = 0.01;
    Scalar lambda_str = 0.001;

    // sampling defaults (the CLI default path)
    int sample_steps = 50;
    Scalar cfg_scale = 5.0;
    int candidates = 4;
    Scalar alpha0 = 0.1;
    int quick_steps = 2;
    int refine_cutoff = 0;

    // evaluation
    int eval_count = 100;
    int eval_sample_steps = 18;  // schedule length used by the eval loops
    int ablation_eval_count = 32;
    std::vector<uint64_t> ablation_seeds = {1, 2, 3};
    uint64_t seed = 1;

    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
    uint64_t hash() const;        // FNV-1a over the canonical JSON dump
    uint64_t train_hash() const;  // same, minus inference-only sections; keys checkpoints

    datagen::SceneConfig scene() const;
    denoiser::DenoiserConfig denoiser_config() const;
    textencoder::TextEncoderConfig encoder_config() const;
};

// Word-level conditioning baseline: one learned embedding per hashed word,
// broadcast across all token positions. The last row is the reserved null
// condition used for guidance dropout and the unconditional branch.
struct WordTable {
    nn::Param table;  // [slots, d_cond]
    int slots = 0;

    void init(Rng& rng, int slots_, int d_cond);
    int slot_for(const std::string& word) const;
    Var cond(nn::GraphCtx& g, const std::vector<charset::TextLabel>& labels);  // [B,L,d]
    Var cond_null(nn::GraphCtx& g, int batch);                                 // [B,L,d]
    Tensor cond_eval(const std::string& word) const;                           // [L,d]
    Tensor null_cond() const;                                                  // [L,d]
    Tensor row_broadcast(int row) const;                                       // [L,d]
    std::vector<nn::Param*> params();
};

// The full model bundle plus its configuration.
struct Pipeline {
    RunConfig cfg;
    strnet::StrNet str;
    textencoder::TextEncoder enc;
    denoiser::UNet unet;
    WordTable words;
    // Optional materialized training pool; when set, trainers draw scenes
    // from it instead of synthesizing on the fly. It must come from the same
    // generator config/seed to keep the held-out split disjoint.
    const std::vector<datagen::TextImageSample>* train_pool = nullptr;

    void init(Rng& rng);  // sizes everything from cfg
    std::vector<nn::Param*> all_params();
};

// Checkpoints carry all weights plus the training-scoped config hash;
// loading rejects files whose data/model/training fields disagree with the
// pipeline's config (inference-only fields may differ).
void save_pipeline(const std::string& path, Pipeline& p, const std::string& stage);
std::string load_pipeline(const std::string& path, Pipeline& p);  // returns the stage

// ---- training ----

// Recognizer on a mix of scene-text mask crops and clean reference strips.
// Returns the final running loss.
Scalar train_recognizer(Pipeline& p, Rng& rng, std::ostream* log);

// Character encoder pretraining: pooled-projection alignment against frozen
// recognizer features of clean renders plus per-position classification.
Scalar train_encoder(Pipeline& p, Rng& rng, std::ostream* log);

// Denoising pretrain of the full backbone under the word-table condition.
// `csv` (optional) receives one "step,dsm" row per step.
Scalar train_backbone(Pipeline& p, Rng& rng, std::ostream* log, std::ostream* csv = nullptr);

// Cumulative ablation settings; later entries add one ingredient each.
struct FinetuneSetting {
    std::string name = "base";
    bool encoder_cond = false;
    bool use_loc = false;
    bool use_str = false;
};
FinetuneSetting ladder_setting(const std::string& name);  // base/cl/loc/str

// Cross-attention-only finetune of the current denoiser weights. Everything
// outside the attention projections is bit-frozen (hash-checked). `csv`
// (optional) receives one "step,dsm,loc,str,total" row per step; absent
// terms are left blank.
Scalar finetune_ca(Pipeline& p, const FinetuneSetting& s, uint64_t seed, std::ostream* log,
                   std::ostream* csv = nullptr);

// ---- conditioning / judging helpers ----

Tensor eval_cond(Pipeline& p, const charset::TextLabel& label, bool encoder_cond);  // [L,d]
Tensor null_cond(Pipeline& p, bool encoder_cond);                                   // [L,d]

// Recognizer verdict on the masked region of a [0,1] image.
std::string judge_word(strnet::StrNet& net, const Tensor& image01, const Tensor& mask);

// Final artifact assembly: generated pixels (mapped from [-1,1] and clamped)
// inside the mask, source pixels copied bit-exactly outside.
Tensor compose_output(const Tensor& source01, const Tensor& generated_pm1, const Tensor& mask);

// ---- evaluation ----

struct EvalRecord {
    std::string word;
    std::string decoded;
    bool match = false;
};

struct EvalReport {
    Scalar seq_acc_recon = -1;    // -1 when the protocol was not run
    Scalar seq_acc_editing = -1;
    Scalar mean_final_aae = 0;    // attention objective at the last step, averaged
    std::vector<EvalRecord> records;
    uint64_t config_hash = 0;
    uint64_t seed = 0;
    bool refined = true;
    bool region_preserved = true;  // outside-mask pixels identical on every sample
    nlohmann::json to_json() const;
};

struct EvalOptions {
    int count = 100;
    uint64_t seed = 1;
    bool refine = true;
    bool encoder_cond = true;
    int sample_steps = 18;
    std::ostream* log = nullptr;  // per-sample progress, optional
};

// Reconstruction: sample each held-out scene with its true word and judge
// the crop. Editing: substitute a random equal-length word first. Rejects
// counts beyond the held-out split. Model weights are never touched.
EvalReport eval_reconstruction(Pipeline& p, const EvalOptions& opt);
EvalReport eval_editing(Pipeline& p, const EvalOptions& opt);

// Encoder quality on a label set: per-position classification accuracy (all
// positions, and non-pad positions only) plus mean matched / mismatched
// projection cosines against recognizer features of clean renders.
struct EncoderEvalStats {
    Scalar mlc_accuracy = 0;
    Scalar mlc_accuracy_nonpad = 0;
    Scalar matched_cosine = 0;
    Scalar mismatched_cosine = 0;
};
EncoderEvalStats encoder_eval(Pipeline& p, const std::vector<charset::TextLabel>& labels);

// Deterministic word sample disjoint from the training stream's generator.
std::vector<charset::TextLabel> sample_words(int count, int min_len, int max_len, uint64_t seed);

// The held-out word list used to judge encoder pretraining; drawn from a
// stream independent of the training corpus.
std::vector<charset::TextLabel> encoder_holdout_words(const RunConfig& cfg);

std::string compiled_charset();  // the 62-symbol alphabet as a string

// ---- ablation ----

struct AblationLadder {
    std::vector<std::string> settings;          // base, cl, loc, str, refine
    std::vector<std::vector<Scalar>> per_seed;  // [seed][setting] SeqAcc
    std::vector<Scalar> mean;                   // per setting, across seeds
    nlohmann::json to_json() const;
};

// Finetunes the shared backbone checkpoint under each ladder setting per
// seed and evaluates reconstruction SeqAcc; the final rung reuses the full
// finetune with refinement enabled at sampling time. `backbone_ckpt` is
// reloaded before every finetune.
AblationLadder run_ablation(Pipeline& p, const std::string& backbone_ckpt, std::ostream* log);

uint64_t fnv1a_hash(const void* data, size_t len, uint64_t seed = 1469598103934665603ull);

}  // namespace glyphdiff::harness

#endif  // GLYPHDIFF_HARNESS_HPP

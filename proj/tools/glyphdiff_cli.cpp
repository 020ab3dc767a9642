// glyphdiff: command-line front end for the masked scene-text generation
// pipeline. Every verb operates inside a run directory holding config.json,
// checkpoints, logs, and a manifest of produced artifacts.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "glyphdiff/harness.hpp"
#include "glyphdiff/image.hpp"

namespace fs = std::filesystem;
using namespace glyphdiff;

namespace {

nlohmann::json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in.good()) throw std::runtime_error("cannot open " + path.string());
    nlohmann::json j;
    in >> j;
    return j;
}

void write_json_file(const fs::path& path, const nlohmann::json& j) {
    std::ofstream out(path);
    if (!out.good()) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

struct Run {
    fs::path root;
    harness::RunConfig cfg;
};

void manifest_add(const Run& run, const std::string& name, const std::string& relpath,
                  const std::string& verb) {
    const fs::path mpath = run.root / "manifest.json";
    nlohmann::json m;
    if (fs::exists(mpath)) m = read_json_file(mpath);
    m["config_hash"] = run.cfg.hash();
    m["artifacts"][name] = {{"path", relpath}, {"verb", verb}};
    write_json_file(mpath, m);
}

// Opens (creating if needed) a run directory. An existing config.json wins;
// --config may seed a fresh run or must agree with the existing one.
Run open_run(const std::string& run_path, const std::string& config_file) {
    Run run;
    run.root = run_path;
    fs::create_directories(run.root);
    const fs::path cfg_path = run.root / "config.json";
    if (fs::exists(cfg_path)) {
        run.cfg = harness::RunConfig::from_json(read_json_file(cfg_path));
        if (!config_file.empty()) {
            const auto outside = harness::RunConfig::from_json(read_json_file(config_file));
            if (outside.hash() != run.cfg.hash()) {
                throw std::runtime_error(
                    "run is already configured and --config disagrees with its config.json");
            }
        }
    } else {
        run.cfg = config_file.empty()
                      ? harness::RunConfig{}
                      : harness::RunConfig::from_json(read_json_file(config_file));
        write_json_file(cfg_path, run.cfg.to_json());
        manifest_add(run, "config", "config.json", "init");
    }
    return run;
}

// Persists config overrides given on the command line so the recorded
// config always reflects what actually ran.
void commit_config(Run& run) {
    const fs::path cfg_path = run.root / "config.json";
    const nlohmann::json want = run.cfg.to_json();
    if (!fs::exists(cfg_path) || read_json_file(cfg_path) != want) {
        write_json_file(cfg_path, want);
        std::cout << "updated config.json (hash " << run.cfg.hash() << ")\n";
    }
}

harness::Pipeline make_pipeline(const Run& run) {
    harness::Pipeline p;
    p.cfg = run.cfg;
    Rng rng(run.cfg.seed);
    p.init(rng);
    return p;
}

std::string finetune_name(const harness::RunConfig& cfg, const std::string& setting,
                          uint64_t seed) {
    return "finetune_" + setting + "_seed" + std::to_string(seed) + ".ckpt";
}

// Resolves which checkpoint a sample/eval verb should load.
fs::path find_checkpoint(const Run& run, const std::string& explicit_ckpt) {
    if (!explicit_ckpt.empty()) {
        const fs::path direct(explicit_ckpt);
        if (fs::exists(direct)) return direct;
        const fs::path nested = run.root / explicit_ckpt;
        if (fs::exists(nested)) return nested;
        throw std::runtime_error("checkpoint not found: " + explicit_ckpt);
    }
    const fs::path finetuned = run.root / finetune_name(run.cfg, "str", run.cfg.seed);
    if (fs::exists(finetuned)) return finetuned;
    const fs::path backbone = run.root / "backbone.ckpt";
    if (fs::exists(backbone)) return backbone;
    throw std::runtime_error(
        "no denoiser checkpoint in the run directory; run train-denoiser first");
}

// Whether a checkpoint stage conditions on the character encoder (vs the
// word-table baseline), and that it contains a trained denoiser at all.
bool stage_uses_encoder(const std::string& stage) {
    if (stage == "backbone" || stage == "finetune-base") return false;
    if (stage == "finetune-cl" || stage == "finetune-loc" || stage == "finetune-str") return true;
    throw std::runtime_error("checkpoint stage '" + stage + "' has no trained denoiser");
}

std::vector<datagen::TextImageSample> maybe_load_pool(const std::string& data_dir) {
    if (data_dir.empty()) return {};
    std::cout << "loading dataset from " << data_dir << "\n";
    return datagen::load_dataset(data_dir);
}

std::ofstream open_log(const Run& run, const std::string& name) {
    fs::create_directories(run.root / "logs");
    std::ofstream out(run.root / "logs" / name);
    if (!out.good()) throw std::runtime_error("cannot open log " + name);
    return out;
}

// ---- verbs ----

struct GenDataArgs {
    std::string run, config, charset, out;
    int count = 256;
    int size = 0;
    int64_t seed = -1;
};

void cmd_gen_data(const GenDataArgs& a) {
    Run run = open_run(a.run, a.config);
    if (!a.charset.empty() && a.charset != harness::compiled_charset()) {
        throw std::runtime_error("--charset does not match the compiled alphabet");
    }
    datagen::SceneConfig sc = run.cfg.scene();
    if (a.size > 0) sc.canvas = a.size;
    const uint64_t seed = a.seed >= 0 ? static_cast<uint64_t>(a.seed) : run.cfg.data_seed;
    std::vector<datagen::TextImageSample> samples;
    samples.reserve(a.count);
    for (int i = 0; i < a.count; ++i) {
        samples.push_back(datagen::synth_scene(sc, seed, static_cast<uint64_t>(i)));
    }
    const fs::path out = a.out.empty() ? run.root / "dataset" : fs::path(a.out);
    datagen::save_dataset(out.string(), samples);
    manifest_add(run, "dataset", fs::relative(out, run.root).string(), "gen-data");
    std::cout << "wrote " << samples.size() << " samples to " << out.string() << "\n";
}

struct TrainStrArgs {
    std::string run, config, data;
    int steps = -1;
};

void cmd_train_str(const TrainStrArgs& a) {
    Run run = open_run(a.run, a.config);
    if (a.steps >= 0) run.cfg.str_steps = a.steps;
    commit_config(run);
    harness::Pipeline p = make_pipeline(run);
    const auto pool = maybe_load_pool(a.data);
    if (!pool.empty()) p.train_pool = &pool;
    Rng rng(harness::fnv1a_hash("train-str", 9, run.cfg.seed));
    const Scalar loss = harness::train_recognizer(p, rng, &std::cout);
    harness::save_pipeline((run.root / "str.ckpt").string(), p, "str");
    manifest_add(run, "str.ckpt", "str.ckpt", "train-str");
    std::cout << "recognizer trained, final loss " << loss << ", saved str.ckpt\n";
}

struct TrainEncoderArgs {
    std::string run, config, data;
    int steps = -1;
    double lr = -1;
    double lambda_ce = -1;
};

void cmd_train_encoder(const TrainEncoderArgs& a) {
    Run run = open_run(a.run, a.config);
    if (a.steps >= 0) run.cfg.encoder_steps = a.steps;
    if (a.lr > 0) run.cfg.encoder_lr = a.lr;
    if (a.lambda_ce >= 0) run.cfg.lambda_ce = a.lambda_ce;
    commit_config(run);
    harness::Pipeline p = make_pipeline(run);
    harness::load_pipeline((run.root / "str.ckpt").string(), p);
    const auto pool = maybe_load_pool(a.data);
    if (!pool.empty()) p.train_pool = &pool;
    Rng rng(harness::fnv1a_hash("train-encoder", 13, run.cfg.seed));
    const Scalar loss = harness::train_encoder(p, rng, &std::cout);
    harness::save_pipeline((run.root / "encoder.ckpt").string(), p, "encoder");
    manifest_add(run, "encoder.ckpt", "encoder.ckpt", "train-encoder");

    const auto holdout = harness::encoder_holdout_words(run.cfg);
    const harness::EncoderEvalStats st = harness::encoder_eval(p, holdout);
    nlohmann::json rep = {{"mlc_accuracy", st.mlc_accuracy},
                          {"mlc_accuracy_nonpad", st.mlc_accuracy_nonpad},
                          {"matched_cosine", st.matched_cosine},
                          {"mismatched_cosine", st.mismatched_cosine},
                          {"holdout_words", holdout.size()},
                          {"config_hash", run.cfg.hash()}};
    write_json_file(run.root / "encoder_eval.json", rep);
    manifest_add(run, "encoder_eval", "encoder_eval.json", "train-encoder");
    std::cout << "encoder trained, final loss " << loss << "\n"
              << "held-out mlc accuracy " << st.mlc_accuracy << " (non-pad "
              << st.mlc_accuracy_nonpad << "), cosine matched " << st.matched_cosine
              << " vs mismatched " << st.mismatched_cosine << "\n";
}

struct TrainDenoiserArgs {
    std::string run, config, data, stage = "auto", setting = "str";
    int steps = -1;
    double lambda_loc = -1, lambda_str = -1;
    int64_t seed = -1;
};

void cmd_train_denoiser(const TrainDenoiserArgs& a) {
    Run run = open_run(a.run, a.config);
    std::string stage = a.stage;
    if (stage == "auto") stage = fs::exists(run.root / "backbone.ckpt") ? "finetune" : "backbone";
    if (stage != "backbone" && stage != "finetune") {
        throw std::runtime_error("--stage must be backbone or finetune");
    }
    if (a.lambda_loc >= 0) run.cfg.lambda_loc = a.lambda_loc;
    if (a.lambda_str >= 0) run.cfg.lambda_str = a.lambda_str;
    if (a.steps >= 0) (stage == "backbone" ? run.cfg.backbone_steps : run.cfg.finetune_steps) =
        a.steps;
    commit_config(run);
    harness::Pipeline p = make_pipeline(run);
    const auto pool = maybe_load_pool(a.data);
    if (!pool.empty()) p.train_pool = &pool;

    if (stage == "backbone") {
        harness::load_pipeline((run.root / "encoder.ckpt").string(), p);
        Rng rng(harness::fnv1a_hash("train-backbone", 14, run.cfg.seed));
        auto csv = open_log(run, "backbone.csv");
        const Scalar loss = harness::train_backbone(p, rng, &std::cout, &csv);
        harness::save_pipeline((run.root / "backbone.ckpt").string(), p, "backbone");
        manifest_add(run, "backbone.ckpt", "backbone.ckpt", "train-denoiser");
        std::cout << "backbone trained, final loss " << loss << ", saved backbone.ckpt\n";
        return;
    }
    const harness::FinetuneSetting setting = harness::ladder_setting(a.setting);
    const uint64_t seed = a.seed >= 0 ? static_cast<uint64_t>(a.seed) : run.cfg.seed;
    harness::load_pipeline((run.root / "backbone.ckpt").string(), p);
    const std::string name = finetune_name(run.cfg, setting.name, seed);
    auto csv = open_log(run, "finetune_" + setting.name + "_seed" + std::to_string(seed) + ".csv");
    const Scalar loss = harness::finetune_ca(p, setting, seed, &std::cout, &csv);
    harness::save_pipeline((run.root / name).string(), p, "finetune-" + setting.name);
    manifest_add(run, name, name, "train-denoiser");
    std::cout << "finetune '" << setting.name << "' done, final loss " << loss << ", saved "
              << name << "\n";
}

struct SampleArgs {
    std::string run, config, image, mask, text, out, ckpt;
    int index = -1;
    int steps = -1, candidates = -1;
    double cfg_scale = -1, alpha0 = -1;
    int64_t seed = -1;
    bool maps = false;
    bool editing = false;  // set by the `edit` verb
};

// Nearest-neighbor per-map grid: one row per attention block, one column per
// character, each cell normalized to its own peak.
Tensor maps_grid(const std::vector<Tensor>& blocks, int word_length, int cell) {
    const int rows = static_cast<int>(blocks.size());
    Tensor grid({rows * cell, word_length * cell});
    for (int r = 0; r < rows; ++r) {
        const Tensor& m = blocks[r];  // [1, L, h, w]
        const int h = m.dim(2), w = m.dim(3);
        for (int j = 0; j < word_length; ++j) {
            Scalar peak = 0;
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) peak = std::max(peak, m.at(0, j, y, x));
            }
            const Scalar norm = peak > 0 ? 1.0 / peak : 0.0;
            for (int y = 0; y < cell; ++y) {
                for (int x = 0; x < cell; ++x) {
                    const int sy = y * h / cell, sx = x * w / cell;
                    grid.at(r * cell + y, j * cell + x) = m.at(0, j, sy, sx) * norm;
                }
            }
        }
    }
    return grid;
}

void cmd_sample(const SampleArgs& a) {
    Run run = open_run(a.run, a.config);
    if (a.steps > 0) run.cfg.sample_steps = a.steps;
    if (a.cfg_scale >= 0) run.cfg.cfg_scale = a.cfg_scale;
    if (a.candidates > 0) run.cfg.candidates = a.candidates;
    if (a.alpha0 >= 0) run.cfg.alpha0 = a.alpha0;
    commit_config(run);

    harness::Pipeline p = make_pipeline(run);
    const fs::path ckpt = find_checkpoint(run, a.ckpt);
    const std::string stage = harness::load_pipeline(ckpt.string(), p);
    const bool encoder_cond = stage_uses_encoder(stage);
    const uint64_t seed = a.seed >= 0 ? static_cast<uint64_t>(a.seed) : run.cfg.seed;

    // Source image + mask: explicit files, or a held-out scene by index.
    Tensor image01, mask;
    std::string text = a.text;
    std::string source_word;  // known only for synthesized scenes
    std::string tag;
    if (!a.image.empty()) {
        if (a.mask.empty()) throw std::runtime_error("--image requires --mask");
        if (text.empty()) throw std::runtime_error("--image requires --text");
        image01 = img::load_ppm(a.image);
        mask = img::binarize(img::load_pgm(a.mask), 0.5);
        tag = fs::path(a.image).stem().string();
    } else {
        const int index = a.index >= 0 ? a.index : 0;
        const auto scene = datagen::synth_scene(run.cfg.scene(), run.cfg.data_seed,
                                                static_cast<uint64_t>(run.cfg.train_size + index));
        image01 = scene.image;
        mask = scene.mask;
        source_word = scene.label.text;
        if (text.empty()) {
            if (a.editing) {
                Rng wr(seed);
                text = datagen::make_editing_pair(scene, wr).label.text;
            } else {
                text = scene.label.text;
            }
        }
        tag = "i" + std::to_string(index);
    }
    const charset::TextLabel label = charset::encode_text(text);
    if (label.length == 0) throw std::runtime_error("the target word is empty");

    const int S = image01.dim(1);
    sampler::SampleInputs in;
    in.image = Tensor({3, S, S});
    for (int64_t i = 0; i < in.image.numel(); ++i) in.image[i] = 2.0 * image01[i] - 1.0;
    in.mask = mask;
    in.cond = harness::eval_cond(p, label, encoder_cond);
    in.uncond = harness::null_cond(p, encoder_cond);
    in.word_length = label.length;

    const auto sched = sampler::ode_schedule(run.cfg.sample_steps);
    sampler::RefinementConfig rc;
    rc.candidates = run.cfg.candidates;
    rc.alpha0 = run.cfg.alpha0;
    rc.quick_steps = run.cfg.quick_steps;
    rc.cfg_scale = run.cfg.cfg_scale;
    rc.refine_cutoff = run.cfg.refine_cutoff;

    Rng rng(seed);
    std::cout << (a.editing ? "editing" : "sampling") << " '" << text << "' with "
              << run.cfg.sample_steps << " steps, " << rc.candidates << " candidates, alpha0 "
              << rc.alpha0 << " (" << stage << ")\n";
    const auto res = sampler::sample(p.unet, in, sched, rc, rng);
    const Tensor out01 = harness::compose_output(image01, res.image, mask);

    fs::path prefix;
    if (!a.out.empty()) {
        prefix = fs::path(a.out);
        if (prefix.is_relative()) prefix = run.root / prefix;
    } else {
        fs::create_directories(run.root / "samples");
        prefix = run.root / "samples" / ((a.editing ? "edit_" : "sample_") + tag + "_" + text);
    }
    fs::create_directories(prefix.parent_path());

    img::save_ppm(prefix.string() + ".ppm", out01);
    std::ofstream trace(prefix.string() + "_trace.csv");
    trace << "# word=" << text << " seed=" << seed << " config_hash=" << run.cfg.hash() << "\n";
    trace << "# chosen_candidate=" << res.chosen_candidate;
    if (!res.candidate_scores.empty()) {
        trace << " candidate_scores=";
        for (size_t i = 0; i < res.candidate_scores.size(); ++i) {
            trace << (i ? "|" : "") << res.candidate_scores[i];
        }
    }
    trace << "\nstep,sigma,aae_before,aae_after\n";
    for (size_t t = 0; t < res.trace.size(); ++t) {
        trace << t << "," << res.trace[t].sigma << "," << res.trace[t].aae_before << ","
              << res.trace[t].aae_after << "\n";
    }
    trace.close();
    if (a.maps) {
        img::save_pgm(prefix.string() + "_maps.pgm", maps_grid(res.final_maps, label.length, S));
    }
    const std::string rel = fs::relative(prefix, run.root).string();
    manifest_add(run, (a.editing ? "edit:" : "sample:") + tag + ":" + text, rel + ".ppm",
                 a.editing ? "edit" : "sample");

    const std::string decoded = harness::judge_word(p.str, out01, mask);
    std::cout << "wrote " << prefix.string() << ".ppm (+trace" << (a.maps ? ", +maps" : "")
              << ")\n";
    std::cout << "recognizer reads '" << decoded << "' — "
              << (decoded == text ? "matches the target" : "target was '" + text + "'");
    if (!source_word.empty() && a.editing) std::cout << " (source word '" << source_word << "')";
    std::cout << "\n";
}

struct EvalArgs {
    std::string run, config, protocol = "both", ckpt;
    int count = -1, steps = -1;
    int64_t seed = -1;
    bool no_refine = false;
};

void cmd_eval(const EvalArgs& a) {
    Run run = open_run(a.run, a.config);
    if (a.count > 0) run.cfg.eval_count = a.count;
    if (a.steps > 0) run.cfg.eval_sample_steps = a.steps;
    commit_config(run);
    if (a.protocol != "recon" && a.protocol != "editing" && a.protocol != "both") {
        throw std::runtime_error("--protocol must be recon, editing, or both");
    }

    harness::Pipeline p = make_pipeline(run);
    const fs::path ckpt = find_checkpoint(run, a.ckpt);
    const std::string stage = harness::load_pipeline(ckpt.string(), p);

    harness::EvalOptions opt;
    opt.count = run.cfg.eval_count;
    opt.seed = a.seed >= 0 ? static_cast<uint64_t>(a.seed) : run.cfg.seed;
    opt.refine = !a.no_refine;
    opt.encoder_cond = stage_uses_encoder(stage);
    opt.sample_steps = run.cfg.eval_sample_steps;
    opt.log = &std::cout;
    const std::string suffix = opt.refine ? "" : "_norefine";

    std::cout << "evaluating " << ckpt.filename().string() << " (" << stage << "), " << opt.count
              << " held-out samples, " << opt.sample_steps << " steps, refinement "
              << (opt.refine ? "on" : "off") << "\n";
    if (a.protocol != "editing") {
        const auto rep = harness::eval_reconstruction(p, opt);
        const std::string name = "eval_recon" + suffix + ".json";
        write_json_file(run.root / name, rep.to_json());
        manifest_add(run, name, name, "eval");
        std::cout << "SeqAcc-Recon " << rep.seq_acc_recon << " | mean final attention loss "
                  << rep.mean_final_aae << " | region preserved "
                  << (rep.region_preserved ? "yes" : "NO") << "\n";
    }
    if (a.protocol != "recon") {
        const auto rep = harness::eval_editing(p, opt);
        const std::string name = "eval_editing" + suffix + ".json";
        write_json_file(run.root / name, rep.to_json());
        manifest_add(run, name, name, "eval");
        std::cout << "SeqAcc-Editing " << rep.seq_acc_editing << " | mean final attention loss "
                  << rep.mean_final_aae << " | region preserved "
                  << (rep.region_preserved ? "yes" : "NO") << "\n";
    }
}

struct AblationArgs {
    std::string run, config, ckpt;
};

void cmd_ablation(const AblationArgs& a) {
    Run run = open_run(a.run, a.config);
    harness::Pipeline p = make_pipeline(run);
    const fs::path ckpt = a.ckpt.empty() ? run.root / "backbone.ckpt"
                                         : find_checkpoint(run, a.ckpt);
    if (!fs::exists(ckpt)) {
        throw std::runtime_error("ablation needs a backbone checkpoint; run train-denoiser first");
    }
    const auto ladder = harness::run_ablation(p, ckpt.string(), &std::cout);
    nlohmann::json j = ladder.to_json();
    j["config_hash"] = run.cfg.hash();
    j["seeds"] = run.cfg.ablation_seeds;
    write_json_file(run.root / "ablation.json", j);
    manifest_add(run, "ablation", "ablation.json", "ablation");
    std::cout << "ladder (mean SeqAcc over " << run.cfg.ablation_seeds.size() << " seeds):";
    for (size_t k = 0; k < ladder.settings.size(); ++k) {
        std::cout << " " << ladder.settings[k] << "=" << ladder.mean[k];
    }
    std::cout << "\nwrote ablation.json\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"glyphdiff: masked scene-text generation with character-level conditioning"};
    app.require_subcommand(1);

    GenDataArgs gd;
    auto* gen = app.add_subcommand("gen-data", "Materialize a synthetic scene-text dataset");
    gen->add_option("--run", gd.run, "run directory")->required();
    gen->add_option("--config", gd.config, "config JSON seeding a fresh run");
    gen->add_option("--count", gd.count, "number of samples (default 256)");
    gen->add_option("--size", gd.size, "canvas override in pixels");
    gen->add_option("--charset", gd.charset, "expected alphabet (validated)");
    gen->add_option("--seed", gd.seed, "generator seed (default: config data seed)");
    gen->add_option("--out", gd.out, "output directory (default: <run>/dataset)");
    gen->callback([&] { cmd_gen_data(gd); });

    TrainStrArgs ts;
    auto* tstr = app.add_subcommand("train-str", "Train the scene-text recognizer");
    tstr->add_option("--run", ts.run, "run directory")->required();
    tstr->add_option("--config", ts.config, "config JSON seeding a fresh run");
    tstr->add_option("--data", ts.data, "materialized dataset directory (optional)");
    tstr->add_option("--steps", ts.steps, "training steps override");
    tstr->callback([&] { cmd_train_str(ts); });

    TrainEncoderArgs te;
    auto* tenc = app.add_subcommand("train-encoder", "Pretrain the character-level text encoder");
    tenc->add_option("--run", te.run, "run directory")->required();
    tenc->add_option("--config", te.config, "config JSON seeding a fresh run");
    tenc->add_option("--data", te.data, "materialized dataset directory (optional)");
    tenc->add_option("--steps", te.steps, "training steps override");
    tenc->add_option("--lr", te.lr, "learning rate override");
    tenc->add_option("--lambda-ce", te.lambda_ce, "classification loss weight override");
    tenc->callback([&] { cmd_train_encoder(te); });

    TrainDenoiserArgs td;
    auto* tden = app.add_subcommand("train-denoiser", "Train the inpainting denoiser");
    tden->add_option("--run", td.run, "run directory")->required();
    tden->add_option("--config", td.config, "config JSON seeding a fresh run");
    tden->add_option("--data", td.data, "materialized dataset directory (optional)");
    tden->add_option("--stage", td.stage, "backbone | finetune | auto (default auto)");
    tden->add_option("--setting", td.setting, "finetune setting: base|cl|loc|str (default str)");
    tden->add_option("--steps", td.steps, "training steps override");
    tden->add_option("--lambda-loc", td.lambda_loc, "attention-position loss weight override");
    tden->add_option("--lambda-str", td.lambda_str, "recognition loss weight override");
    tden->add_option("--seed", td.seed, "finetune seed (default: config seed)");
    tden->callback([&] { cmd_train_denoiser(td); });

    SampleArgs sa;
    auto* smp = app.add_subcommand("sample", "Render a word into a masked region");
    smp->add_option("--run", sa.run, "run directory")->required();
    smp->add_option("--config", sa.config, "config JSON seeding a fresh run");
    smp->add_option("--image", sa.image, "source image (PPM); default: held-out scene");
    smp->add_option("--mask", sa.mask, "region mask (PGM), required with --image");
    smp->add_option("--text", sa.text, "word to render (default: the scene's own word)");
    smp->add_option("--index", sa.index, "held-out scene index (default 0)");
    smp->add_option("--steps", sa.steps, "sampling steps override");
    smp->add_option("--cfg", sa.cfg_scale, "guidance scale override");
    smp->add_option("--candidates", sa.candidates, "initial-noise candidates override");
    smp->add_option("--alpha0", sa.alpha0, "refinement step size override (0 disables)");
    smp->add_option("--seed", sa.seed, "sampling seed (default: config seed)");
    smp->add_option("--out", sa.out, "output path prefix");
    smp->add_option("--ckpt", sa.ckpt, "checkpoint to sample from");
    smp->add_flag("--maps", sa.maps, "also write the final attention-map grid");
    smp->callback([&] { cmd_sample(sa); });

    SampleArgs ea;
    ea.editing = true;
    auto* edt = app.add_subcommand("edit", "Replace the word in a masked region");
    edt->add_option("--run", ea.run, "run directory")->required();
    edt->add_option("--config", ea.config, "config JSON seeding a fresh run");
    edt->add_option("--image", ea.image, "source image (PPM); default: held-out scene");
    edt->add_option("--mask", ea.mask, "region mask (PGM), required with --image");
    edt->add_option("--text", ea.text, "replacement word (default: random, equal length)");
    edt->add_option("--index", ea.index, "held-out scene index (default 0)");
    edt->add_option("--steps", ea.steps, "sampling steps override");
    edt->add_option("--cfg", ea.cfg_scale, "guidance scale override");
    edt->add_option("--candidates", ea.candidates, "initial-noise candidates override");
    edt->add_option("--alpha0", ea.alpha0, "refinement step size override (0 disables)");
    edt->add_option("--seed", ea.seed, "sampling seed (default: config seed)");
    edt->add_option("--out", ea.out, "output path prefix");
    edt->add_option("--ckpt", ea.ckpt, "checkpoint to sample from");
    edt->add_flag("--maps", ea.maps, "also write the final attention-map grid");
    edt->callback([&] { cmd_sample(ea); });

    EvalArgs ev;
    auto* evl = app.add_subcommand("eval", "Evaluate SeqAcc on held-out scenes");
    evl->add_option("--run", ev.run, "run directory")->required();
    evl->add_option("--config", ev.config, "config JSON seeding a fresh run");
    evl->add_option("--protocol", ev.protocol, "recon | editing | both (default both)");
    evl->add_option("--count", ev.count, "evaluation sample count override");
    evl->add_option("--steps", ev.steps, "evaluation sampling steps override");
    evl->add_option("--seed", ev.seed, "evaluation seed (default: config seed)");
    evl->add_option("--ckpt", ev.ckpt, "checkpoint to evaluate");
    evl->add_flag("--no-refine", ev.no_refine, "disable inference-time refinement");
    evl->callback([&] { cmd_eval(ev); });

    AblationArgs ab;
    auto* abl = app.add_subcommand("ablation", "Run the cumulative-setting ladder");
    abl->add_option("--run", ab.run, "run directory")->required();
    abl->add_option("--config", ab.config, "config JSON seeding a fresh run");
    abl->add_option("--ckpt", ab.ckpt, "backbone checkpoint (default: <run>/backbone.ckpt)");
    abl->callback([&] { cmd_ablation(ab); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

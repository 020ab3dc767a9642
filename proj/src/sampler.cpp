#include "glyphdiff/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "glyphdiff/charset.hpp"
#include "glyphdiff/objectives.hpp"

namespace glyphdiff::sampler {

using charset::kMaxLen;

NoiseSchedule ode_schedule(int T, Scalar sigma_min, Scalar sigma_max, Scalar rho) {
    if (T < 1) throw std::invalid_argument("ode_schedule: need at least one step");
    if (!(sigma_min > 0) || !(sigma_min < sigma_max)) {
        throw std::invalid_argument("ode_schedule: need 0 < sigma_min < sigma_max");
    }
    if (!(rho > 0)) throw std::invalid_argument("ode_schedule: rho must be positive");
    NoiseSchedule out;
    out.steps = T;
    out.sigma_min = sigma_min;
    out.sigma_max = sigma_max;
    out.rho = rho;
    Scalar lo = std::pow(sigma_min, 1.0 / rho);
    Scalar hi = std::pow(sigma_max, 1.0 / rho);
    for (int i = 0; i < T; ++i) {
        Scalar frac = T == 1 ? 0.0 : static_cast<Scalar>(i) / (T - 1);
        out.sigmas.push_back(std::pow(hi + frac * (lo - hi), rho));
    }
    out.sigmas.push_back(0.0);
    return out;
}

Tensor euler_step(const Tensor& z, const Tensor& denoised, Scalar sigma_cur, Scalar sigma_next) {
    if (!(sigma_cur > 0)) throw std::invalid_argument("euler_step: sigma_cur must be positive");
    if (sigma_next < 0) throw std::invalid_argument("euler_step: sigma_next must be >= 0");
    if (z.shape != denoised.shape) {
        throw std::invalid_argument("euler_step: shape mismatch " + z.shape_str() + " vs " +
                                    denoised.shape_str());
    }
    Tensor out = z.clone();
    Scalar dt = sigma_next - sigma_cur;
    for (int64_t i = 0; i < z.numel(); ++i) {
        out.data()[i] = z.data()[i] + dt * ((z.data()[i] - denoised.data()[i]) / sigma_cur);
    }
    return out;
}

std::vector<Tensor> draw_candidates(Rng& rng, int n, int image_size, Scalar sigma_max) {
    if (n < 1) throw std::invalid_argument("draw_candidates: need at least one candidate");
    if (image_size < 1 || !(sigma_max > 0)) {
        throw std::invalid_argument("draw_candidates: bad size or sigma");
    }
    std::vector<Tensor> out;
    for (int i = 0; i < n; ++i) {
        Tensor t = Tensor::zeros({1, 3, image_size, image_size});
        rng.fill_normal(t, sigma_max);
        out.push_back(std::move(t));
    }
    return out;
}

int argmin_index(const std::vector<Scalar>& losses) {
    if (losses.empty()) throw std::invalid_argument("argmin_index: empty list");
    return static_cast<int>(std::min_element(losses.begin(), losses.end()) - losses.begin());
}

namespace {

bool tensor_finite(const Tensor& t) {
    for (int64_t i = 0; i < t.numel(); ++i) {
        if (!std::isfinite(t.data()[i])) return false;
    }
    return true;
}

// Batched views of the sampling inputs shared by every denoiser call.
struct RunCtx {
    Tensor mask4;    // [1,1,S,S]
    Tensor masked;   // [1,3,S,S]
    Tensor cond3;    // [1,L,d]
    Tensor uncond3;  // [1,L,d]
};

RunCtx make_ctx(denoiser::UNet& net, const SampleInputs& in) {
    int s = net.cfg.image_size;
    if (in.image.shape != std::vector<int>{3, s, s}) {
        throw std::invalid_argument("sampler: image must be [3," + std::to_string(s) + "," +
                                    std::to_string(s) + "], got " + in.image.shape_str());
    }
    if (in.mask.shape != std::vector<int>{s, s}) {
        throw std::invalid_argument("sampler: mask must match the image, got " +
                                    in.mask.shape_str());
    }
    int ones = 0;
    for (int64_t i = 0; i < in.mask.numel(); ++i) {
        Scalar v = in.mask.data()[i];
        if (v != 0.0 && v != 1.0) throw std::invalid_argument("sampler: mask must be binary");
        ones += v == 1.0;
    }
    if (ones == 0) throw std::invalid_argument("sampler: mask selects nothing");
    std::vector<int> cshape = {kMaxLen, net.cfg.d_cond};
    if (in.cond.shape != cshape || in.uncond.shape != cshape) {
        throw std::invalid_argument("sampler: cond/uncond must be [" + std::to_string(kMaxLen) +
                                    "," + std::to_string(net.cfg.d_cond) + "]");
    }
    if (in.word_length < 1 || in.word_length > kMaxLen) {
        throw std::invalid_argument("sampler: word length must be in [1," +
                                    std::to_string(kMaxLen) + "]");
    }
    RunCtx ctx;
    ctx.mask4 = in.mask.reshaped({1, 1, s, s}).clone();
    ctx.masked = Tensor::zeros({1, 3, s, s});
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < s; ++y) {
            for (int x = 0; x < s; ++x) {
                ctx.masked.at(0, c, y, x) = in.image.at(c, y, x) * (1.0 - in.mask.at(y, x));
            }
        }
    }
    ctx.cond3 = in.cond.reshaped({1, kMaxLen, net.cfg.d_cond});
    ctx.uncond3 = in.uncond.reshaped({1, kMaxLen, net.cfg.d_cond});
    return ctx;
}

struct GuidedEval {
    Tensor denoised;           // [1,3,S,S]
    std::vector<Tensor> maps;  // conditional attention per block
    Scalar aae = 0;
};

GuidedEval guided_eval(denoiser::UNet& net, const Tensor& z, Scalar sigma, const SampleInputs& in,
                       const RunCtx& ctx, Scalar cfg_scale) {
    Tape t;
    nn::GraphCtx g(t, false);
    Var zv = t.leaf(z, false);
    Var cv = t.leaf(ctx.cond3, false);
    Var uv = t.leaf(ctx.uncond3, false);
    denoiser::ForwardResult res =
        denoiser::cfg_forward(net, g, zv, {sigma}, cv, uv, ctx.mask4, ctx.masked, cfg_scale);
    GuidedEval out;
    out.denoised = t.value(res.denoised);
    for (Var b : res.attn.blocks) out.maps.push_back(t.value(b));
    out.aae = t.value(objectives::aae_loss(res.attn, in.mask, in.word_length)).data()[0];
    return out;
}

// Conditional-only pass with gradients flowing back to the latent.
Tensor refine_grad(denoiser::UNet& net, const Tensor& z, Scalar sigma, const SampleInputs& in,
                   const RunCtx& ctx, Scalar* aae_out) {
    Tape t;
    nn::GraphCtx g(t, false);
    Var zv = t.leaf(z, true);
    denoiser::ForwardResult res =
        net.forward(g, zv, {sigma}, t.leaf(ctx.cond3, false), ctx.mask4, ctx.masked);
    Var loss = objectives::aae_loss(res.attn, in.mask, in.word_length);
    *aae_out = t.value(loss).data()[0];
    t.backward(loss);
    return t.grad(zv);
}

}  // namespace

SelectionResult select_initial_noise(denoiser::UNet& net, const SampleInputs& in,
                                     const NoiseSchedule& sched, const RefinementConfig& cfg,
                                     Rng& rng) {
    if (cfg.candidates < 1) throw std::invalid_argument("sampler: need at least one candidate");
    if (cfg.quick_steps < 1) throw std::invalid_argument("sampler: quick_steps must be >= 1");
    RunCtx ctx = make_ctx(net, in);
    std::vector<Tensor> cands =
        draw_candidates(rng, cfg.candidates, net.cfg.image_size, sched.sigma_max);
    SelectionResult out;
    if (cfg.candidates == 1) {
        out.noise = cands[0];
        return out;
    }
    NoiseSchedule quick =
        ode_schedule(cfg.quick_steps, sched.sigma_min, sched.sigma_max, sched.rho);
    for (const Tensor& cand : cands) {
        Tensor z = cand;
        for (int i = 0; i + 1 < quick.steps; ++i) {
            GuidedEval ev = guided_eval(net, z, quick.sigmas[i], in, ctx, cfg.cfg_scale);
            z = euler_step(z, ev.denoised, quick.sigmas[i], quick.sigmas[i + 1]);
        }
        // Score with the conditional branch alone at the last nonzero level.
        GuidedEval ev = guided_eval(net, z, quick.sigmas[quick.steps - 1], in, ctx, 1.0);
        out.scores.push_back(ev.aae);
    }
    out.index = argmin_index(out.scores);
    out.noise = cands[out.index];
    return out;
}

SampleResult sample(denoiser::UNet& net, const SampleInputs& in, const NoiseSchedule& sched,
                    const RefinementConfig& cfg, Rng& rng) {
    if (cfg.alpha0 < 0) throw std::invalid_argument("sampler: alpha0 must be >= 0");
    if (cfg.refine_cutoff < 0) throw std::invalid_argument("sampler: cutoff must be >= 0");
    if (sched.steps < 1 || sched.sigmas.size() != static_cast<size_t>(sched.steps) + 1) {
        throw std::invalid_argument("sampler: malformed schedule");
    }
    RunCtx ctx = make_ctx(net, in);

    SelectionResult sel = select_initial_noise(net, in, sched, cfg, rng);
    Tensor z = sel.noise;
    SampleResult res;
    res.candidate_scores = sel.scores;
    res.chosen_candidate = sel.index;

    for (int t = 0; t < sched.steps; ++t) {
        Scalar sc = sched.sigmas[t];
        Scalar sn = sched.sigmas[t + 1];
        bool refine = cfg.alpha0 > 0 && t < sched.steps - cfg.refine_cutoff;
        StepTrace tr;
        tr.sigma = sc;
        if (refine) {
            Tensor grad = refine_grad(net, z, sc, in, ctx, &tr.aae_before);
            if (!tensor_finite(grad)) {
                throw std::runtime_error("sampler: non-finite refinement gradient at step " +
                                         std::to_string(t));
            }
            Scalar step = cfg.alpha0 * sc;
            Tensor moved = z.clone();
            for (int64_t i = 0; i < moved.numel(); ++i) {
                moved.data()[i] = z.data()[i] - step * grad.data()[i];
            }
            z = moved;
        }
        GuidedEval ev = guided_eval(net, z, sc, in, ctx, cfg.cfg_scale);
        if (!refine) tr.aae_before = ev.aae;
        tr.aae_after = ev.aae;
        res.trace.push_back(tr);
        if (t == sched.steps - 1) res.final_maps = ev.maps;
        z = euler_step(z, ev.denoised, sc, sn);
    }

    int s = net.cfg.image_size;
    res.image = Tensor::zeros({3, s, s});
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < s; ++y) {
            for (int x = 0; x < s; ++x) {
                res.image.at(c, y, x) = in.mask.at(y, x) == 1.0 ? z.at(0, c, y, x)
                                                                : in.image.at(c, y, x);
            }
        }
    }
    if (!tensor_finite(res.image)) throw std::runtime_error("sampler: non-finite output");
    return res;
}

}  // namespace glyphdiff::sampler

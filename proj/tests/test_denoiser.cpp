#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "doctest.h"
#include "glyphdiff/denoiser.hpp"
#include "glyphdiff/objectives.hpp"

using namespace glyphdiff;
using namespace glyphdiff::denoiser;
using charset::kMaxLen;
using nn::GraphCtx;
using nn::params_hash;

namespace {

DenoiserConfig tiny_cfg() {
    DenoiserConfig cfg;
    cfg.image_size = 8;
    cfg.base_width = 8;
    cfg.d_cond = 16;
    cfg.heads = 2;
    cfg.sigma_freqs = 4;
    cfg.d_sigma = 32;
    return cfg;
}

Tensor randn(Rng& rng, std::vector<int> shape, Scalar std = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    rng.fill_normal(t, std);
    return t;
}

// Mask whose right half is selected; stays non-empty at every map scale.
Tensor half_mask(int b, int s) {
    Tensor m = Tensor::zeros({b, 1, s, s});
    for (int i = 0; i < b; ++i) {
        for (int y = 0; y < s; ++y) {
            for (int x = s / 2; x < s; ++x) m.at(i, 0, y, x) = 1.0;
        }
    }
    return m;
}

struct Inputs {
    Tensor noised, mask, masked, cond;
    std::vector<Scalar> sigmas;
};

Inputs make_inputs(Rng& rng, const DenoiserConfig& cfg, int b) {
    Inputs in;
    int s = cfg.image_size;
    in.noised = randn(rng, {b, 3, s, s});
    in.mask = half_mask(b, s);
    in.masked = randn(rng, {b, 3, s, s});
    in.cond = randn(rng, {b, kMaxLen, cfg.d_cond}, 0.3);
    for (int i = 0; i < b; ++i) in.sigmas.push_back(0.3 + 0.7 * i);
    return in;
}

ForwardResult run(UNet& net, Tape& t, const Inputs& in, bool train = false,
                  bool ca_only = false) {
    GraphCtx g(t, train, ca_only);
    return net.forward(g, t.leaf(in.noised, false), in.sigmas, t.leaf(in.cond, false), in.mask,
                       in.masked);
}

}  // namespace

TEST_CASE("skip scaling coefficients match the closed forms") {
    for (Scalar sd : {0.5, 0.25}) {
        for (Scalar sigma : {0.02, 0.37, 0.5, 1.0, 80.0}) {
            Scalar ci = 1.0 / std::sqrt(sigma * sigma + sd * sd);
            CHECK(c_in(sigma, sd) == doctest::Approx(ci).epsilon(1e-14));
            CHECK(c_out(sigma, sd) == doctest::Approx(sigma * sd * ci).epsilon(1e-14));
            CHECK(c_skip(sigma, sd) == doctest::Approx(sd * sd * ci * ci).epsilon(1e-14));
        }
    }
    // At sigma == sigma_data the skip and residual branches carry equal weight.
    CHECK(c_skip(0.5) == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(c_out(0.5) == doctest::Approx(0.25 / std::sqrt(0.5)).epsilon(1e-14));
    CHECK(c_in(0.5) == doctest::Approx(1.0 / std::sqrt(0.5)).epsilon(1e-14));
}

TEST_CASE("untrained net reduces to the skip path exactly") {
    Rng rng(11);
    UNet net;
    net.init(rng, tiny_cfg());
    CHECK(net.stem.w.t.shape == std::vector<int>{8, 7, 3, 3});

    Inputs in = make_inputs(rng, net.cfg, 2);
    Tape t;
    ForwardResult res = run(net, t, in);
    const Tensor& d = t.value(res.denoised);
    int per = static_cast<int>(d.numel()) / 2;
    for (int b = 0; b < 2; ++b) {
        Scalar cs = c_skip(in.sigmas[b], net.cfg.sigma_data);
        for (int i = 0; i < per; ++i) {
            CHECK(d.data()[b * per + i] == cs * in.noised.data()[b * per + i]);
        }
    }
}

TEST_CASE("attention maps are per-pixel distributions at every scale") {
    Rng rng(12);
    UNet net;
    net.init(rng, tiny_cfg());
    Inputs in = make_inputs(rng, net.cfg, 2);
    Tape t;
    ForwardResult res = run(net, t, in);

    REQUIRE(res.attn.blocks.size() == 6);
    int expected[6] = {8, 4, 2, 2, 4, 8};
    for (int i = 0; i < 6; ++i) {
        const Tensor& m = t.value(res.attn.blocks[i]);
        REQUIRE(m.shape == std::vector<int>{2, kMaxLen, expected[i], expected[i]});
        for (int b = 0; b < 2; ++b) {
            for (int y = 0; y < expected[i]; ++y) {
                for (int x = 0; x < expected[i]; ++x) {
                    Scalar sum = 0;
                    for (int l = 0; l < kMaxLen; ++l) {
                        Scalar v = m.at(b, l, y, x);
                        CHECK(v >= 0.0);
                        CHECK(v <= 1.0);
                        sum += v;
                    }
                    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
                }
            }
        }
    }
}

TEST_CASE("forward is deterministic") {
    Rng rng(13);
    UNet net;
    net.init(rng, tiny_cfg());
    Inputs in = make_inputs(rng, net.cfg, 2);

    Tape t1, t2;
    ForwardResult a = run(net, t1, in);
    ForwardResult b = run(net, t2, in);
    const Tensor& da = t1.value(a.denoised);
    const Tensor& db = t2.value(b.denoised);
    for (int64_t i = 0; i < da.numel(); ++i) CHECK(da.data()[i] == db.data()[i]);
    const Tensor& ma = t1.value(a.attn.blocks[0]);
    const Tensor& mb = t2.value(b.attn.blocks[0]);
    for (int64_t i = 0; i < ma.numel(); ++i) CHECK(ma.data()[i] == mb.data()[i]);
}

TEST_CASE("finetune gating trains only the cross-attention projections") {
    Rng rng(14);
    UNet net;
    net.init(rng, tiny_cfg());
    // The zero-initialized head would block gradients from reaching the
    // attention projections; give it real weights first.
    rng.fill_normal(net.head.w.t, 0.05);
    // Six blocks, each contributing bias-free Q/K/V weights plus the output
    // projection's weight and bias.
    CHECK(net.ca_params().size() == 30);
    CHECK(net.ca_params().size() + net.non_ca_params().size() == net.params().size());

    Inputs in = make_inputs(rng, net.cfg, 1);
    uint64_t ca0 = params_hash(net.ca_params());
    uint64_t non0 = params_hash(net.non_ca_params());

    {
        Tape t;
        GraphCtx g(t, true, true);
        ForwardResult res = net.forward(g, t.leaf(in.noised, false), in.sigmas,
                                        t.leaf(in.cond, false), in.mask, in.masked);
        t.backward(mean_all(mul(res.denoised, res.denoised)));
        nn::Adam opt(1e-2);
        opt.step(t, g.bound);
    }
    CHECK(params_hash(net.non_ca_params()) == non0);
    CHECK(params_hash(net.ca_params()) != ca0);

    uint64_t ca1 = params_hash(net.ca_params());
    {
        Tape t;
        GraphCtx g(t, true, false);
        ForwardResult res = net.forward(g, t.leaf(in.noised, false), in.sigmas,
                                        t.leaf(in.cond, false), in.mask, in.masked);
        t.backward(mean_all(mul(res.denoised, res.denoised)));
        nn::Adam opt(1e-2);
        opt.step(t, g.bound);
    }
    CHECK(params_hash(net.non_ca_params()) != non0);
    CHECK(params_hash(net.ca_params()) != ca1);
}

TEST_CASE("attention maps are differentiable in the noised input") {
    Rng rng(15);
    UNet net;
    net.init(rng, tiny_cfg());
    Inputs in = make_inputs(rng, net.cfg, 1);
    Tensor w = randn(rng, {static_cast<int>(kMaxLen) * 64});

    auto loss_of = [&](const Tensor& noised, Tensor* grad) {
        Tape t;
        GraphCtx g(t, false);
        Var z = t.leaf(noised, true);
        ForwardResult res =
            net.forward(g, z, in.sigmas, t.leaf(in.cond, false), in.mask, in.masked);
        Var loss = dot_const(reshape(res.attn.blocks[0], {static_cast<int>(kMaxLen) * 64}), w);
        Scalar v = t.value(loss).data()[0];
        if (grad) {
            t.backward(loss);
            *grad = t.grad(z).clone();
        }
        return v;
    };

    Tensor grad;
    loss_of(in.noised, &grad);
    for (int idx : {0, 37, 100, 150}) {
        Tensor up = in.noised.clone(), dn = in.noised.clone();
        Scalar eps = 1e-4;
        up.data()[idx] += eps;
        dn.data()[idx] -= eps;
        Scalar fd = (loss_of(up, nullptr) - loss_of(dn, nullptr)) / (2 * eps);
        CHECK(std::abs(grad.data()[idx] - fd) <= 1e-5 + 1e-3 * std::abs(fd));
    }
}

TEST_CASE("refinement objective differentiates through live maps") {
    Rng rng(16);
    UNet net;
    net.init(rng, tiny_cfg());
    Inputs in = make_inputs(rng, net.cfg, 1);
    Tensor region = Tensor::zeros({8, 8});
    for (int y = 2; y < 6; ++y) {
        for (int x = 2; x < 6; ++x) region.at(y, x) = 1.0;
    }

    auto loss_of = [&](const Tensor& noised, Tensor* grad) {
        Tape t;
        GraphCtx g(t, false);
        Var z = t.leaf(noised, true);
        ForwardResult res =
            net.forward(g, z, in.sigmas, t.leaf(in.cond, false), in.mask, in.masked);
        Var loss = objectives::aae_loss(res.attn, region, 3);
        Scalar v = t.value(loss).data()[0];
        if (grad) {
            t.backward(loss);
            *grad = t.grad(z).clone();
        }
        return v;
    };

    Tensor grad;
    Scalar base = loss_of(in.noised, &grad);
    CHECK(base <= 0.0);
    CHECK(base >= -1.0);
    for (int idx : {5, 60, 130}) {
        Tensor up = in.noised.clone(), dn = in.noised.clone();
        Scalar eps = 1e-4;
        up.data()[idx] += eps;
        dn.data()[idx] -= eps;
        Scalar fd = (loss_of(up, nullptr) - loss_of(dn, nullptr)) / (2 * eps);
        CHECK(std::abs(grad.data()[idx] - fd) <= 1e-5 + 1e-3 * std::abs(fd));
    }
}

TEST_CASE("guidance composes the two branches") {
    Rng rng(17);
    UNet net;
    net.init(rng, tiny_cfg());
    // Give the output head real weights so the branches actually differ.
    rng.fill_normal(net.head.w.t, 0.05);

    Inputs in = make_inputs(rng, net.cfg, 2);
    Tensor uncond = randn(rng, {2, static_cast<int>(kMaxLen), net.cfg.d_cond}, 0.3);

    Tape t;
    GraphCtx g(t, false);
    Var z = t.leaf(in.noised, false);
    Var cv = t.leaf(in.cond, false);
    Var uv = t.leaf(uncond, false);
    ForwardResult dc = net.forward(g, z, in.sigmas, cv, in.mask, in.masked);
    ForwardResult du = net.forward(g, z, in.sigmas, uv, in.mask, in.masked);
    // Copy by value: later forwards grow the tape and invalidate references.
    Tensor hc = t.value(dc.denoised);
    Tensor hu = t.value(du.denoised);
    Tensor mc = t.value(dc.attn.blocks[0]);
    Scalar diff = 0;
    for (int64_t i = 0; i < hc.numel(); ++i) diff += std::abs(hc.data()[i] - hu.data()[i]);
    REQUIRE(diff > 0);

    ForwardResult r1 = cfg_forward(net, g, z, in.sigmas, cv, uv, in.mask, in.masked, 1.0);
    Tensor d1 = t.value(r1.denoised);
    for (int64_t i = 0; i < d1.numel(); ++i) CHECK(d1.data()[i] == hc.data()[i]);

    ForwardResult r0 = cfg_forward(net, g, z, in.sigmas, cv, uv, in.mask, in.masked, 0.0);
    Tensor d0 = t.value(r0.denoised);
    for (int64_t i = 0; i < d0.numel(); ++i) CHECK(d0.data()[i] == hu.data()[i]);

    ForwardResult r5 = cfg_forward(net, g, z, in.sigmas, cv, uv, in.mask, in.masked, 5.0);
    Tensor d5 = t.value(r5.denoised);
    for (int64_t i = 0; i < d5.numel(); ++i) {
        // Round the scaled difference separately so the compiler cannot fuse
        // it into an fma the op-by-op graph never performs.
        volatile Scalar scaled = 5.0 * (hc.data()[i] - hu.data()[i]);
        CHECK(d5.data()[i] == hu.data()[i] + scaled);
    }
    // Guided maps come from the conditional branch.
    Tensor m5 = t.value(r5.attn.blocks[0]);
    for (int64_t i = 0; i < m5.numel(); ++i) CHECK(m5.data()[i] == mc.data()[i]);
}

TEST_CASE("forward validates its inputs") {
    Rng rng(18);
    UNet net;
    net.init(rng, tiny_cfg());
    Inputs in = make_inputs(rng, net.cfg, 1);

    auto attempt = [&](Tensor noised, std::vector<Scalar> sigmas, Tensor cond, Tensor mask,
                       Tensor masked) {
        Tape t;
        GraphCtx g(t, false);
        net.forward(g, t.leaf(noised, false), sigmas, t.leaf(cond, false), mask, masked);
    };

    CHECK_THROWS_AS(attempt(Tensor::zeros({1, 3, 8, 4}), in.sigmas, in.cond, in.mask, in.masked),
                    std::invalid_argument);
    CHECK_THROWS_AS(attempt(in.noised, {0.0}, in.cond, in.mask, in.masked), std::invalid_argument);
    CHECK_THROWS_AS(attempt(in.noised, {-1.0}, in.cond, in.mask, in.masked), std::invalid_argument);
    CHECK_THROWS_AS(attempt(in.noised, {0.5, 0.5}, in.cond, in.mask, in.masked),
                    std::invalid_argument);
    CHECK_THROWS_AS(attempt(in.noised, in.sigmas, Tensor::zeros({1, 11, 16}), in.mask, in.masked),
                    std::invalid_argument);
    CHECK_THROWS_AS(attempt(in.noised, in.sigmas, Tensor::zeros({1, 12, 8}), in.mask, in.masked),
                    std::invalid_argument);
    CHECK_THROWS_AS(attempt(in.noised, in.sigmas, in.cond, Tensor::zeros({1, 3, 8, 8}), in.masked),
                    std::invalid_argument);
    CHECK_THROWS_AS(attempt(in.noised, in.sigmas, in.cond, in.mask, Tensor::zeros({1, 3, 8, 4})),
                    std::invalid_argument);

    DenoiserConfig bad = tiny_cfg();
    bad.image_size = 10;
    UNet other;
    CHECK_THROWS_AS(other.init(rng, bad), std::invalid_argument);

    Tensor poisoned = in.noised.clone();
    poisoned.data()[0] = std::numeric_limits<Scalar>::infinity();
    CHECK_THROWS_AS(attempt(poisoned, in.sigmas, in.cond, in.mask, in.masked), std::runtime_error);
}

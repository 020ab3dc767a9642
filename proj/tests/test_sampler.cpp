#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "glyphdiff/charset.hpp"
#include "glyphdiff/sampler.hpp"

using namespace glyphdiff;
using namespace glyphdiff::sampler;
using charset::kMaxLen;
using nn::GraphCtx;

namespace {

denoiser::DenoiserConfig tiny_cfg() {
    denoiser::DenoiserConfig cfg;
    cfg.image_size = 8;
    cfg.base_width = 8;
    cfg.d_cond = 16;
    cfg.heads = 2;
    cfg.sigma_freqs = 4;
    cfg.d_sigma = 32;
    return cfg;
}

denoiser::UNet make_net(int seed) {
    Rng rng(seed);
    denoiser::UNet net;
    net.init(rng, tiny_cfg());
    // An all-zero head makes conditioning irrelevant; give it real weights.
    rng.fill_normal(net.head.w.t, 0.05);
    return net;
}

Tensor randn(Rng& rng, std::vector<int> shape, Scalar std = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    rng.fill_normal(t, std);
    return t;
}

SampleInputs make_inputs(int seed) {
    Rng rng(seed);
    SampleInputs in;
    in.image = randn(rng, {3, 8, 8}, 0.5);
    in.mask = Tensor::zeros({8, 8});
    for (int y = 2; y < 6; ++y) {
        for (int x = 2; x < 6; ++x) in.mask.at(y, x) = 1.0;
    }
    in.cond = randn(rng, {kMaxLen, 16}, 0.3);
    in.uncond = randn(rng, {kMaxLen, 16}, 0.3);
    in.word_length = 3;
    return in;
}

}  // namespace

TEST_CASE("schedule hits both endpoints and decays monotonically") {
    NoiseSchedule two = ode_schedule(2);
    REQUIRE(two.sigmas.size() == 3);
    CHECK(two.steps == 2);
    CHECK(two.sigmas[0] == doctest::Approx(80.0).epsilon(1e-12));
    CHECK(two.sigmas[1] == doctest::Approx(0.02).epsilon(1e-12));
    CHECK(two.sigmas[2] == 0.0);

    NoiseSchedule one = ode_schedule(1);
    REQUIRE(one.sigmas.size() == 2);
    CHECK(one.sigmas[0] == doctest::Approx(80.0).epsilon(1e-12));
    CHECK(one.sigmas[1] == 0.0);

    for (int T : {2, 5, 50}) {
        NoiseSchedule s = ode_schedule(T);
        REQUIRE(s.sigmas.size() == static_cast<size_t>(T) + 1);
        for (int i = 0; i + 1 < T; ++i) CHECK(s.sigmas[i] > s.sigmas[i + 1]);
        CHECK(s.sigmas[0] == doctest::Approx(80.0).epsilon(1e-12));
        CHECK(s.sigmas[T - 1] == doctest::Approx(0.02).epsilon(1e-12));
        CHECK(s.sigmas[T] == 0.0);
    }

    CHECK_THROWS_AS(ode_schedule(0), std::invalid_argument);
    CHECK_THROWS_AS(ode_schedule(5, 0.0, 80.0), std::invalid_argument);
    CHECK_THROWS_AS(ode_schedule(5, -1.0, 80.0), std::invalid_argument);
    CHECK_THROWS_AS(ode_schedule(5, 2.0, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(ode_schedule(5, 0.02, 80.0, 0.0), std::invalid_argument);
}

TEST_CASE("unit exponent gives linear spacing") {
    NoiseSchedule s = ode_schedule(3, 1.0, 3.0, 1.0);
    REQUIRE(s.sigmas.size() == 4);
    CHECK(s.sigmas[0] == 3.0);
    CHECK(s.sigmas[1] == 2.0);
    CHECK(s.sigmas[2] == 1.0);
    CHECK(s.sigmas[3] == 0.0);
}

TEST_CASE("euler step fixed points and arithmetic") {
    Rng rng(3);
    Tensor z = randn(rng, {1, 3, 4, 4});

    Tensor same = euler_step(z, z, 2.0, 1.0);
    for (int64_t i = 0; i < z.numel(); ++i) CHECK(same.data()[i] == z.data()[i]);

    Tensor frozen = euler_step(z, randn(rng, {1, 3, 4, 4}), 2.0, 2.0);
    for (int64_t i = 0; i < z.numel(); ++i) CHECK(frozen.data()[i] == z.data()[i]);

    // d = (2 - 0.5)/2 = 0.75, z_next = 2 + (1 - 2) * 0.75 = 1.25.
    Tensor z2 = Tensor::full({2, 2}, 2.0);
    Tensor d2 = Tensor::full({2, 2}, 0.5);
    Tensor n2 = euler_step(z2, d2, 2.0, 1.0);
    for (int64_t i = 0; i < n2.numel(); ++i) CHECK(n2.data()[i] == 1.25);

    CHECK_THROWS_AS(euler_step(z, z, 0.0, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(euler_step(z, z, -1.0, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(euler_step(z, z, 1.0, -0.5), std::invalid_argument);
    CHECK_THROWS_AS(euler_step(z, Tensor::zeros({1, 3, 4, 5}), 1.0, 0.5), std::invalid_argument);
}

TEST_CASE("a constant-target walk telescopes onto the target") {
    Rng rng(4);
    Tensor x0 = randn(rng, {1, 3, 4, 4});
    Tensor z = randn(rng, {1, 3, 4, 4}, 80.0);
    NoiseSchedule s = ode_schedule(10);
    for (int i = 0; i < s.steps; ++i) z = euler_step(z, x0, s.sigmas[i], s.sigmas[i + 1]);
    for (int64_t i = 0; i < z.numel(); ++i) {
        CHECK(std::abs(z.data()[i] - x0.data()[i]) <= 1e-12 * (1.0 + std::abs(x0.data()[i])));
    }
}

TEST_CASE("argmin keeps the smallest loss") {
    CHECK(argmin_index({0.5, -0.2, 0.1}) == 1);
    CHECK(argmin_index({0.5}) == 0);
    CHECK(argmin_index({0.3, 0.1, 0.1}) == 1);
    CHECK_THROWS_AS(argmin_index({}), std::invalid_argument);
}

TEST_CASE("candidate search keeps the best-scoring noise") {
    denoiser::UNet net = make_net(21);
    SampleInputs in = make_inputs(22);
    NoiseSchedule sched = ode_schedule(4);
    RefinementConfig cfg;
    cfg.candidates = 3;

    Rng rng(5);
    SelectionResult sel = select_initial_noise(net, in, sched, cfg, rng);
    REQUIRE(sel.scores.size() == 3);
    for (Scalar s : sel.scores) CHECK(sel.scores[sel.index] <= s);

    // The kept tensor is literally the winning draw.
    Rng replay(5);
    std::vector<Tensor> cands = draw_candidates(replay, 3, 8, sched.sigma_max);
    const Tensor& won = cands[sel.index];
    for (int64_t i = 0; i < won.numel(); ++i) CHECK(sel.noise.data()[i] == won.data()[i]);

    // One candidate: no scoring, the single draw is returned as-is.
    cfg.candidates = 1;
    int64_t before = net.forwards;
    Rng rng1(9);
    SelectionResult single = select_initial_noise(net, in, sched, cfg, rng1);
    CHECK(net.forwards == before);
    CHECK(single.scores.empty());
    Rng replay1(9);
    Tensor hand = draw_candidates(replay1, 1, 8, sched.sigma_max)[0];
    for (int64_t i = 0; i < hand.numel(); ++i) CHECK(single.noise.data()[i] == hand.data()[i]);
}

TEST_CASE("sampling rewrites only the masked region") {
    denoiser::UNet net = make_net(31);
    SampleInputs in = make_inputs(32);
    NoiseSchedule sched = ode_schedule(4);
    RefinementConfig cfg;
    cfg.candidates = 2;

    uint64_t weights = nn::params_hash(net.params());
    Rng rng(11);
    SampleResult res = sample(net, in, sched, cfg, rng);
    CHECK(nn::params_hash(net.params()) == weights);

    REQUIRE(res.image.shape == std::vector<int>{3, 8, 8});
    Scalar inside = 0;
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < 8; ++y) {
            for (int x = 0; x < 8; ++x) {
                if (in.mask.at(y, x) == 1.0) {
                    inside += std::abs(res.image.at(c, y, x) - in.image.at(c, y, x));
                } else {
                    CHECK(res.image.at(c, y, x) == in.image.at(c, y, x));
                }
            }
        }
    }
    CHECK(inside > 0);

    REQUIRE(res.trace.size() == 4);
    for (int t = 0; t < 4; ++t) {
        CHECK(res.trace[t].sigma == sched.sigmas[t]);
        CHECK(std::isfinite(res.trace[t].aae_before));
        CHECK(std::isfinite(res.trace[t].aae_after));
    }
    CHECK(res.final_maps.size() == 6);
    CHECK(res.candidate_scores.size() == 2);

    Rng again(11);
    SampleResult rep = sample(net, in, sched, cfg, again);
    for (int64_t i = 0; i < res.image.numel(); ++i) {
        CHECK(rep.image.data()[i] == res.image.data()[i]);
    }

    Rng other(12);
    SampleResult diff = sample(net, in, sched, cfg, other);
    Scalar delta = 0;
    for (int64_t i = 0; i < res.image.numel(); ++i) {
        delta += std::abs(diff.image.data()[i] - res.image.data()[i]);
    }
    CHECK(delta > 0);
}

TEST_CASE("disabled refinement reduces to plain guided stepping") {
    denoiser::UNet net = make_net(41);
    SampleInputs in = make_inputs(42);
    NoiseSchedule sched = ode_schedule(3);
    RefinementConfig cfg;
    cfg.candidates = 1;
    cfg.alpha0 = 0.0;

    int64_t before = net.forwards;
    Rng rng(13);
    SampleResult res = sample(net, in, sched, cfg, rng);
    // One guided evaluation (two passes) per step, nothing else.
    CHECK(net.forwards - before == 2 * sched.steps);

    // Independent plain loop: draw, guide, Euler, composite.
    Rng replay(13);
    Tensor z = draw_candidates(replay, 1, 8, sched.sigma_max)[0];
    Tensor mask4 = in.mask.reshaped({1, 1, 8, 8}).clone();
    Tensor masked = Tensor::zeros({1, 3, 8, 8});
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < 8; ++y) {
            for (int x = 0; x < 8; ++x) {
                masked.at(0, c, y, x) = in.image.at(c, y, x) * (1.0 - in.mask.at(y, x));
            }
        }
    }
    for (int t = 0; t < sched.steps; ++t) {
        Tape tape;
        GraphCtx g(tape, false);
        denoiser::ForwardResult r = denoiser::cfg_forward(
            net, g, tape.leaf(z, false), {sched.sigmas[t]},
            tape.leaf(in.cond.reshaped({1, kMaxLen, 16}), false),
            tape.leaf(in.uncond.reshaped({1, kMaxLen, 16}), false), mask4, masked, cfg.cfg_scale);
        z = euler_step(z, tape.value(r.denoised), sched.sigmas[t], sched.sigmas[t + 1]);
    }
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < 8; ++y) {
            for (int x = 0; x < 8; ++x) {
                Scalar want = in.mask.at(y, x) == 1.0 ? z.at(0, c, y, x) : in.image.at(c, y, x);
                CHECK(res.image.at(c, y, x) == want);
            }
        }
    }

    // Refinement adds exactly one conditional pass per step.
    cfg.alpha0 = 0.1;
    int64_t mid = net.forwards;
    Rng rng2(13);
    sample(net, in, sched, cfg, rng2);
    CHECK(net.forwards - mid == 3 * sched.steps);
}

TEST_CASE("one refinement step descends the attention objective") {
    denoiser::UNet net = make_net(51);
    SampleInputs in = make_inputs(52);
    // Single-step schedule at a moderate noise level: the trace exposes the
    // objective right before and right after the latent update.
    NoiseSchedule sched = ode_schedule(1, 0.02, 1.0);
    RefinementConfig cfg;
    cfg.candidates = 1;
    cfg.alpha0 = 0.05;

    int descended = 0;
    Scalar total = 0;
    for (int seed = 0; seed < 20; ++seed) {
        Rng rng(100 + seed);
        SampleResult res = sample(net, in, sched, cfg, rng);
        Scalar drop = res.trace[0].aae_before - res.trace[0].aae_after;
        total += drop;
        descended += drop >= 0;
    }
    CHECK(total > 0);
    CHECK(descended >= 15);
}

TEST_CASE("sampler rejects bad inputs") {
    denoiser::UNet net = make_net(61);
    SampleInputs good = make_inputs(62);
    NoiseSchedule sched = ode_schedule(2);
    RefinementConfig cfg;
    cfg.candidates = 1;
    Rng rng(7);

    auto expect_reject = [&](SampleInputs in) {
        Rng r(7);
        CHECK_THROWS_AS(sample(net, in, sched, cfg, r), std::invalid_argument);
    };

    SampleInputs empty = good;
    empty.mask = Tensor::zeros({8, 8});
    expect_reject(empty);

    SampleInputs soft = good;
    soft.mask = soft.mask.clone();
    soft.mask.at(2, 2) = 0.5;
    expect_reject(soft);

    SampleInputs nolen = good;
    nolen.word_length = 0;
    expect_reject(nolen);
    nolen.word_length = kMaxLen + 1;
    expect_reject(nolen);

    SampleInputs badimg = good;
    badimg.image = Tensor::zeros({3, 8, 4});
    expect_reject(badimg);

    SampleInputs badcond = good;
    badcond.cond = Tensor::zeros({kMaxLen, 8});
    expect_reject(badcond);

    RefinementConfig nocand = cfg;
    nocand.candidates = 0;
    CHECK_THROWS_AS(sample(net, good, sched, nocand, rng), std::invalid_argument);

    RefinementConfig negalpha = cfg;
    negalpha.alpha0 = -0.1;
    CHECK_THROWS_AS(sample(net, good, sched, negalpha, rng), std::invalid_argument);

    NoiseSchedule broken;
    broken.sigmas = {1.0, 0.0};
    broken.steps = 5;
    CHECK_THROWS_AS(sample(net, good, broken, cfg, rng), std::invalid_argument);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "glyphdiff/datagen.hpp"
#include "glyphdiff/strnet.hpp"

using namespace glyphdiff;
using namespace glyphdiff::strnet;
using charset::encode_text;
using charset::kMaxLen;
using charset::kPadIndex;
using charset::kVocabSize;

namespace {

Tensor randn(Rng& rng, std::vector<int> shape, Scalar std = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    rng.fill_normal(t, std);
    return t;
}

bool all_finite(const Tensor& t) {
    for (int64_t i = 0; i < t.numel(); ++i) {
        if (!std::isfinite(t.data()[i])) return false;
    }
    return true;
}

Scalar max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.numel() == b.numel());
    Scalar m = 0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

}  // namespace

TEST_CASE("mask_bbox finds the tight bounding box and rejects empty masks") {
    Tensor mask = Tensor::zeros({10, 12});
    mask.at(3, 4) = 1.0;
    mask.at(7, 9) = 1.0;
    CropBox box = mask_bbox(mask);
    CHECK(box.y0 == 3);
    CHECK(box.x0 == 4);
    CHECK(box.h == 5);
    CHECK(box.w == 6);
    CHECK_THROWS_AS(mask_bbox(Tensor::zeros({4, 4})), std::invalid_argument);
    CHECK_THROWS_AS(mask_bbox(Tensor::zeros({4, 4, 4})), std::invalid_argument);
}

TEST_CASE("crop_resize preserves aspect ratio with centered zero padding") {
    // Constant-1 content 8 tall, 4 wide: the binding side is height (x4),
    // so the output is a 32x16 block centered horizontally in 32x128.
    Tensor img = Tensor::full({3, 8, 4}, 1.0);
    Tensor out = crop_resize(img, {0, 0, 8, 4}, 32, 128);
    REQUIRE(out.dim(0) == 3);
    REQUIRE(out.dim(1) == 32);
    REQUIRE(out.dim(2) == 128);
    for (int y = 0; y < 32; ++y) {
        for (int x = 0; x < 128; ++x) {
            Scalar expect = (x >= 56 && x < 72) ? 1.0 : 0.0;
            CHECK(out.at(0, y, x) == doctest::Approx(expect).epsilon(1e-12));
        }
    }

    // Width-bound case: 2 tall, 64 wide scaled x2 into 4 rows centered
    // vertically in a 32-row strip.
    Tensor wide = Tensor::full({3, 2, 64}, 0.5);
    Tensor out2 = crop_resize(wide, {0, 0, 2, 64}, 32, 128);
    int filled_rows = 0;
    for (int y = 0; y < 32; ++y) {
        if (out2.at(1, y, 0) > 0.25) ++filled_rows;
    }
    CHECK(filled_rows == 4);
    CHECK(out2.at(1, 0, 0) == 0.0);
    CHECK(out2.at(1, 31, 127) == 0.0);

    CHECK_THROWS_AS(crop_resize(img, {0, 0, 9, 4}, 32, 128), std::invalid_argument);
    CHECK_THROWS_AS(crop_resize(img, {-1, 0, 2, 2}, 32, 128), std::invalid_argument);
}

TEST_CASE("masked_crop matches between plain and graph paths and zeroes outside the mask") {
    Rng rng(5);
    Tensor img = randn(rng, {3, 16, 20});
    Tensor mask = Tensor::zeros({16, 20});
    for (int y = 4; y < 12; ++y) {
        for (int x = 6; x < 16; ++x) mask.at(y, x) = 1.0;
    }
    Tensor plain = masked_crop(img, mask, 32, 128);
    Tape t;
    Var v = masked_crop(t.leaf(img, false), mask, 32, 128);
    CHECK(max_abs_diff(plain, t.value(v)) == 0.0);
    CHECK(all_finite(plain));

    // Poke a hole in the mask interior: the product zeroes that pixel even
    // though it stays inside the bounding box.
    Tensor holed = mask.clone();
    holed.at(8, 10) = 0.0;
    Tensor with_hole = masked_crop(img, holed, 32, 128);
    CHECK(max_abs_diff(plain, with_hole) > 0.0);
    CHECK_THROWS_AS(masked_crop(img, Tensor::zeros({16, 20}), 32, 128), std::invalid_argument);
}

TEST_CASE("masked_crop backpropagates into the source image") {
    Rng rng(9);
    Tensor img = randn(rng, {3, 8, 8});
    Tensor mask = Tensor::zeros({8, 8});
    for (int y = 1; y < 7; ++y) {
        for (int x = 2; x < 8; ++x) mask.at(y, x) = 1.0;
    }
    Tensor weights = randn(rng, {3 * 16 * 32});
    auto value = [&](const Tensor& im) {
        Tape t;
        Var v = masked_crop(t.leaf(im, false), mask, 16, 32);
        Var loss = dot_const(reshape(v, {3 * 16 * 32}), weights);
        return t.value(loss).data()[0];
    };
    Tape t;
    Var leaf = t.leaf(img, true);
    Var v = masked_crop(leaf, mask, 16, 32);
    Var loss = dot_const(reshape(v, {3 * 16 * 32}), weights);
    t.backward(loss);
    const Tensor& grad = t.grad(leaf);
    Scalar h = 1e-5;
    // Probe a handful of positions inside and outside the mask.
    std::vector<std::pair<int, int>> probes = {{3, 4}, {0, 0}, {6, 7}, {1, 2}, {5, 5}};
    for (auto [y, x] : probes) {
        for (int c = 0; c < 3; ++c) {
            Tensor plus = img.clone(), minus = img.clone();
            plus.at(c, y, x) += h;
            minus.at(c, y, x) -= h;
            Scalar num = (value(plus) - value(minus)) / (2 * h);
            INFO("c=", c, " y=", y, " x=", x);
            CHECK(std::abs(num - grad.at(c, y, x)) <= 1e-6 * (1.0 + std::abs(num)));
        }
    }
}

TEST_CASE("untrained recognizer satisfies the logits shape contract") {
    Rng rng(11);
    StrNet net;
    net.init(rng);
    Tensor img = randn(rng, {3, 32, 128}, 0.5);
    Tensor logits = net.recognize(img);
    REQUIRE(logits.rank() == 2);
    CHECK(logits.dim(0) == kMaxLen);
    CHECK(logits.dim(1) == kVocabSize);
    CHECK(all_finite(logits));
}

TEST_CASE("recognition is invariant to batch composition") {
    Rng rng(13);
    StrNet net;
    net.init(rng);
    std::vector<Tensor> imgs;
    for (int i = 0; i < 3; ++i) imgs.push_back(randn(rng, {3, 32, 128}, 0.3));
    Tensor batch = nn::stack0(imgs);
    Tape t;
    nn::GraphCtx g(t);
    Tensor blog = t.value(net.logits(g, t.leaf(batch, false))).clone();
    for (int i = 0; i < 3; ++i) {
        Tensor solo = net.recognize(imgs[i]);
        for (int l = 0; l < kMaxLen; ++l) {
            for (int k = 0; k < kVocabSize; ++k) {
                CHECK(std::abs(blog.at(i, l, k) - solo.at(l, k)) < 1e-12);
            }
        }
    }
}

TEST_CASE("visual features are deterministic with the configured width") {
    Rng rng(17);
    StrNet net;
    net.init(rng);
    Tensor img = datagen::render_reference("Fresh");
    Tensor f1 = net.visual_features(img);
    Tensor f2 = net.visual_features(img);
    REQUIRE(f1.rank() == 1);
    CHECK(f1.dim(0) == net.cfg.d_model);
    CHECK(max_abs_diff(f1, f2) == 0.0);
    CHECK(all_finite(f1));
}

TEST_CASE("position-averaged cross-entropy oracles") {
    // One-hot correct with a wide margin: CE collapses toward zero.
    charset::TextLabel cat = encode_text("cat");
    Tensor hot = Tensor::zeros({kMaxLen, kVocabSize});
    for (int i = 0; i < kMaxLen; ++i) hot.at(i, cat.indices[i]) = 50.0;
    CHECK(str_ce_value(hot, cat) == doctest::Approx(0.0).epsilon(1e-9));

    // Uniform logits: CE = ln(vocab) at every position.
    Tensor uniform = Tensor::zeros({kMaxLen, kVocabSize});
    Scalar ln_v = std::log(static_cast<Scalar>(kVocabSize));
    CHECK(str_ce_value(uniform, cat) == doctest::Approx(ln_v).epsilon(1e-12));
    CHECK(ln_v == doctest::Approx(4.143135).epsilon(1e-6));

    // Correct on the 3 word positions, uniform on the 9 pads.
    Tensor mixed = Tensor::zeros({kMaxLen, kVocabSize});
    for (int i = 0; i < cat.length; ++i) mixed.at(i, cat.indices[i]) = 50.0;
    CHECK(str_ce_value(mixed, cat) == doctest::Approx(9.0 / 12.0 * ln_v).epsilon(1e-9));
}

TEST_CASE("batched cross-entropy averages per-position rows across samples") {
    charset::TextLabel a = encode_text("a");
    charset::TextLabel b = encode_text("b");
    Tensor logits = Tensor::zeros({2, kMaxLen, kVocabSize});
    for (int i = 0; i < kMaxLen; ++i) logits.at(0, i, a.indices[i]) = 50.0;
    // sample 1 left uniform
    Tape t;
    Var v = str_ce(t.leaf(logits, false), {a, b});
    Scalar ln_v = std::log(static_cast<Scalar>(kVocabSize));
    CHECK(t.value(v).data()[0] == doctest::Approx(0.5 * ln_v).epsilon(1e-9));
    CHECK_THROWS_AS(str_ce(t.leaf(logits, false), {a}), std::invalid_argument);
}

TEST_CASE("argmax decode drops the pad class") {
    Tensor logits = Tensor::zeros({kMaxLen, kVocabSize});
    charset::TextLabel lab = encode_text("K9s");
    for (int i = 0; i < kMaxLen; ++i) logits.at(i, lab.indices[i]) = 3.0;
    CHECK(decode_logits(logits) == "K9s");
    Tensor blank = Tensor::zeros({kMaxLen, kVocabSize});
    for (int i = 0; i < kMaxLen; ++i) blank.at(i, kPadIndex) = 3.0;
    CHECK(decode_logits(blank) == "");
}

TEST_CASE("str parameters receive gradients through the recognition loss") {
    Rng rng(23);
    StrNet net;
    StrNetConfig tiny;
    tiny.in_h = 8;
    tiny.in_w = 8;
    tiny.d_model = 16;
    tiny.heads = 2;
    tiny.mlp_dim = 24;
    net.init(rng, tiny);
    Tensor img = randn(rng, {1, 3, 8, 8}, 0.4);
    charset::TextLabel lab = encode_text("ok");
    auto loss_value = [&]() {
        Tape t;
        nn::GraphCtx g(t, false);
        return t.value(str_ce(net.logits(g, t.leaf(img, false)), {lab})).data()[0];
    };
    Tape tape;
    nn::GraphCtx g(tape, true);
    Var loss = str_ce(net.logits(g, tape.leaf(img, false)), {lab});
    tape.backward(loss);
    int checked = 0;
    Scalar h = 1e-5;
    for (auto& [var, p] : g.bound) {
        if (!tape.has_grad(var)) continue;
        Scalar ana = tape.grad(var).data()[0];
        Scalar orig = p->t.data()[0];
        p->t.data()[0] = orig + h;
        Scalar up = loss_value();
        p->t.data()[0] = orig - h;
        Scalar down = loss_value();
        p->t.data()[0] = orig;
        Scalar num = (up - down) / (2 * h);
        INFO("param ", p->name);
        CHECK(std::abs(num - ana) <= 1e-4 * (1.0 + std::abs(num)));
        ++checked;
    }
    CHECK(checked == static_cast<int>(net.params().size()));
}

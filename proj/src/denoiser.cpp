#include "glyphdiff/denoiser.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace glyphdiff::denoiser {

using charset::kMaxLen;
using nn::GraphCtx;
using nn::Param;

Scalar c_skip(Scalar sigma, Scalar sigma_data) {
    Scalar sd2 = sigma_data * sigma_data;
    return sd2 / (sigma * sigma + sd2);
}

Scalar c_out(Scalar sigma, Scalar sigma_data) {
    Scalar sd2 = sigma_data * sigma_data;
    return sigma * sigma_data / std::sqrt(sigma * sigma + sd2);
}

Scalar c_in(Scalar sigma, Scalar sigma_data) {
    Scalar sd2 = sigma_data * sigma_data;
    return 1.0 / std::sqrt(sigma * sigma + sd2);
}

namespace {

int norm_groups(int channels) {
    for (int g : {8, 4, 2}) {
        if (channels % g == 0) return g;
    }
    return 1;
}

bool tensor_finite(const Tensor& t) {
    for (int64_t i = 0; i < t.numel(); ++i) {
        if (!std::isfinite(t.data()[i])) return false;
    }
    return true;
}

}  // namespace

void ResBlock::init(const std::string& name, int channels, int d_sigma, Rng& rng) {
    gn1.init(name + ".gn1", channels, norm_groups(channels));
    gn2.init(name + ".gn2", channels, norm_groups(channels));
    conv1.init(name + ".conv1", channels, channels, 3, 1, 1, rng);
    conv2.init(name + ".conv2", channels, channels, 3, 1, 1, rng);
    sigma_proj.init(name + ".sigma", d_sigma, channels, rng);
}

Var ResBlock::apply(GraphCtx& g, Var x, Var sigma_emb) {
    Var h = conv1.apply(g, silu(gn1.apply(g, x)));
    h = add_bias_bc(h, sigma_proj.apply(g, sigma_emb));
    h = conv2.apply(g, silu(gn2.apply(g, h)));
    return add(x, h);
}

void ResBlock::collect(std::vector<Param*>& out) {
    gn1.collect(out);
    gn2.collect(out);
    conv1.collect(out);
    conv2.collect(out);
    sigma_proj.collect(out);
}

void CrossAttention::init(const std::string& name, int channels_, int d_cond, int heads_,
                          Rng& rng) {
    channels = channels_;
    heads = heads_;
    if (channels % heads != 0) {
        throw std::invalid_argument("CrossAttention: heads must divide channels");
    }
    qnorm.init(name + ".qnorm", channels);
    wq.init(name + ".wq", channels, channels, rng, false, true);
    wk.init(name + ".wk", d_cond, channels, rng, false, true);
    wv.init(name + ".wv", d_cond, channels, rng, false, true);
    wo.init(name + ".wo", channels, channels, rng, true, true);
}

Var CrossAttention::apply(GraphCtx& g, Var x, Var cond, Var* maps) {
    Tape& t = g.tape;
    const Tensor& xv = t.value(x);
    if (xv.rank() != 4 || xv.dim(1) != channels) {
        throw std::invalid_argument("CrossAttention: bad input " + xv.shape_str());
    }
    int B = xv.dim(0), H = xv.dim(2), W = xv.dim(3);
    int hw = H * W;
    const Tensor& cv = t.value(cond);
    if (cv.rank() != 3 || cv.dim(0) != B) {
        throw std::invalid_argument("CrossAttention: bad cond " + cv.shape_str());
    }
    int L = cv.dim(1);
    int dh = channels / heads;

    Var tokens = permute021(reshape(x, {B, channels, hw}));  // [B,hw,C]
    auto split = [&](Var v, int T) {
        return reshape(permute0213(reshape(v, {B, T, heads, dh})), {B * heads, T, dh});
    };
    Var q = split(wq.apply(g, qnorm.apply(g, tokens)), hw);
    Var k = split(wk.apply(g, cond), L);
    Var v = split(wv.apply(g, cond), L);
    Var probs = softmax_last(scale(bmm(q, k, true), 1.0 / std::sqrt(static_cast<Scalar>(dh))));
    if (maps) {
        Var avg = mean_axis1(reshape(probs, {B, heads, hw, L}));  // [B,hw,L]
        *maps = reshape(permute021(avg), {B, L, H, W});
    }
    Var out = reshape(permute0213(reshape(bmm(probs, v), {B, heads, hw, dh})), {B, hw, channels});
    Var merged = add(tokens, wo.apply(g, out));
    return reshape(permute021(merged), {B, channels, H, W});
}

void CrossAttention::collect(std::vector<Param*>& out) {
    qnorm.collect(out);
    wq.collect(out);
    wk.collect(out);
    wv.collect(out);
    wo.collect(out);
}

void UNet::init(Rng& rng, const DenoiserConfig& cfg_) {
    cfg = cfg_;
    if (cfg.image_size % 4 != 0) {
        throw std::invalid_argument("UNet: image size must be divisible by 4");
    }
    int w0 = cfg.base_width, w1 = 2 * cfg.base_width, w2 = 4 * cfg.base_width;
    sigma_mlp1.init("unet.sigma1", 2 * cfg.sigma_freqs, cfg.d_sigma, rng);
    sigma_mlp2.init("unet.sigma2", cfg.d_sigma, cfg.d_sigma, rng);
    stem.init("unet.stem", 7, w0, 3, 1, 1, rng);
    rb_d0.init("unet.rb_d0", w0, cfg.d_sigma, rng);
    rb_d1.init("unet.rb_d1", w1, cfg.d_sigma, rng);
    rb_d2.init("unet.rb_d2", w2, cfg.d_sigma, rng);
    rb_mid.init("unet.rb_mid", w2, cfg.d_sigma, rng);
    rb_u2.init("unet.rb_u2", w2, cfg.d_sigma, rng);
    rb_u1.init("unet.rb_u1", w1, cfg.d_sigma, rng);
    rb_u0.init("unet.rb_u0", w0, cfg.d_sigma, rng);
    ca_d0.init("unet.ca_d0", w0, cfg.d_cond, cfg.heads, rng);
    ca_d1.init("unet.ca_d1", w1, cfg.d_cond, cfg.heads, rng);
    ca_d2.init("unet.ca_d2", w2, cfg.d_cond, cfg.heads, rng);
    ca_u2.init("unet.ca_u2", w2, cfg.d_cond, cfg.heads, rng);
    ca_u1.init("unet.ca_u1", w1, cfg.d_cond, cfg.heads, rng);
    ca_u0.init("unet.ca_u0", w0, cfg.d_cond, cfg.heads, rng);
    down0.init("unet.down0", w0, w1, 3, 2, 1, rng);
    down1.init("unet.down1", w1, w2, 3, 2, 1, rng);
    upc1.init("unet.upc1", w2, w1, 1, 1, 0, rng);
    upc0.init("unet.upc0", w1, w0, 1, 1, 0, rng);
    gn_out.init("unet.gn_out", w0, norm_groups(w0));
    head.init("unet.head", w0, 3, 3, 1, 1, rng, true);
}

ForwardResult UNet::forward(GraphCtx& g, Var noised, const std::vector<Scalar>& sigmas, Var cond,
                            const Tensor& mask, const Tensor& masked_image) {
    ++forwards;
    Tape& t = g.tape;
    const Tensor& zv = t.value(noised);
    int S = cfg.image_size;
    if (zv.rank() != 4 || zv.dim(1) != 3 || zv.dim(2) != S || zv.dim(3) != S) {
        throw std::invalid_argument("UNet: noised must be [B,3," + std::to_string(S) + "," +
                                    std::to_string(S) + "], got " + zv.shape_str());
    }
    int B = zv.dim(0);
    if (static_cast<int>(sigmas.size()) != B) {
        throw std::invalid_argument("UNet: need one sigma per sample");
    }
    for (Scalar s : sigmas) {
        if (!(s > 0)) throw std::invalid_argument("UNet: sigma must be positive");
    }
    const Tensor& cv = t.value(cond);
    if (cv.rank() != 3 || cv.dim(0) != B || cv.dim(1) != kMaxLen || cv.dim(2) != cfg.d_cond) {
        throw std::invalid_argument("UNet: cond must be [B," + std::to_string(kMaxLen) + "," +
                                    std::to_string(cfg.d_cond) + "], got " + cv.shape_str());
    }
    if (mask.rank() != 4 || mask.dim(0) != B || mask.dim(1) != 1 || mask.dim(2) != S ||
        mask.dim(3) != S) {
        throw std::invalid_argument("UNet: mask must be [B,1,S,S], got " + mask.shape_str());
    }
    if (masked_image.shape != zv.shape) {
        throw std::invalid_argument("UNet: masked image must match the noised shape, got " +
                                    masked_image.shape_str());
    }

    // Noise-level embedding from Fourier features of ln(sigma)/4.
    Tensor ff = Tensor::zeros({B, 2 * cfg.sigma_freqs});
    std::vector<Scalar> cin(B), cskip(B), cout_(B);
    for (int b = 0; b < B; ++b) {
        Scalar u = std::log(sigmas[b]) / 4.0;
        for (int k = 0; k < cfg.sigma_freqs; ++k) {
            Scalar f = std::pow(2.0, k) * u;
            ff.at(b, 2 * k) = std::sin(f);
            ff.at(b, 2 * k + 1) = std::cos(f);
        }
        cin[b] = c_in(sigmas[b], cfg.sigma_data);
        cskip[b] = c_skip(sigmas[b], cfg.sigma_data);
        cout_[b] = c_out(sigmas[b], cfg.sigma_data);
    }
    Var emb = silu(sigma_mlp2.apply(g, silu(sigma_mlp1.apply(g, t.leaf(ff, false)))));

    Var zin = scale_per_sample(noised, cin);
    Var x7 = concat_channels(concat_channels(zin, t.leaf(mask, false)), t.leaf(masked_image, false));

    ForwardResult res;
    res.attn.blocks.resize(6);
    auto attend = [&](CrossAttention& ca, Var h, int idx) {
        Var maps;
        Var out = ca.apply(g, h, cond, &maps);
        if (!tensor_finite(t.value(maps))) {
            throw std::runtime_error("denoiser: non-finite attention maps in block " +
                                     std::to_string(idx));
        }
        res.attn.blocks[idx] = maps;
        return out;
    };

    Var x = stem.apply(g, x7);
    x = attend(ca_d0, rb_d0.apply(g, x, emb), 0);
    Var skip0 = x;
    x = down0.apply(g, x);
    x = attend(ca_d1, rb_d1.apply(g, x, emb), 1);
    Var skip1 = x;
    x = down1.apply(g, x);
    x = attend(ca_d2, rb_d2.apply(g, x, emb), 2);
    x = rb_mid.apply(g, x, emb);
    x = attend(ca_u2, rb_u2.apply(g, x, emb), 3);
    x = add(upc1.apply(g, upsample_nearest2(x)), skip1);
    x = attend(ca_u1, rb_u1.apply(g, x, emb), 4);
    x = add(upc0.apply(g, upsample_nearest2(x)), skip0);
    x = attend(ca_u0, rb_u0.apply(g, x, emb), 5);
    Var core = head.apply(g, silu(gn_out.apply(g, x)));

    res.denoised = add(scale_per_sample(noised, cskip), scale_per_sample(core, cout_));
    if (!tensor_finite(t.value(res.denoised))) {
        throw std::runtime_error("denoiser: non-finite output");
    }
    return res;
}

std::vector<Param*> UNet::params() {
    std::vector<Param*> out;
    sigma_mlp1.collect(out);
    sigma_mlp2.collect(out);
    stem.collect(out);
    rb_d0.collect(out);
    ca_d0.collect(out);
    down0.collect(out);
    rb_d1.collect(out);
    ca_d1.collect(out);
    down1.collect(out);
    rb_d2.collect(out);
    ca_d2.collect(out);
    rb_mid.collect(out);
    rb_u2.collect(out);
    ca_u2.collect(out);
    upc1.collect(out);
    rb_u1.collect(out);
    ca_u1.collect(out);
    upc0.collect(out);
    rb_u0.collect(out);
    ca_u0.collect(out);
    gn_out.collect(out);
    head.collect(out);
    return out;
}

std::vector<Param*> UNet::ca_params() {
    std::vector<Param*> out;
    for (Param* p : params()) {
        if (p->ca) out.push_back(p);
    }
    return out;
}

std::vector<Param*> UNet::non_ca_params() {
    std::vector<Param*> out;
    for (Param* p : params()) {
        if (!p->ca) out.push_back(p);
    }
    return out;
}

ForwardResult cfg_forward(UNet& net, GraphCtx& g, Var noised, const std::vector<Scalar>& sigmas,
                          Var cond, Var uncond, const Tensor& mask, const Tensor& masked_image,
                          Scalar s) {
    if (s == 1.0) return net.forward(g, noised, sigmas, cond, mask, masked_image);
    if (s == 0.0) return net.forward(g, noised, sigmas, uncond, mask, masked_image);
    ForwardResult c = net.forward(g, noised, sigmas, cond, mask, masked_image);
    ForwardResult u = net.forward(g, noised, sigmas, uncond, mask, masked_image);
    ForwardResult out;
    out.denoised = add(u.denoised, scale(sub(c.denoised, u.denoised), s));
    out.attn = c.attn;
    return out;
}

}  // namespace glyphdiff::denoiser

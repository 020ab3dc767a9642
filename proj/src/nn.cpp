#include "glyphdiff/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace glyphdiff::nn {

using nlohmann::json;

// ---- layers ----

void Linear::init(const std::string& name, int in, int out, Rng& rng, bool bias, bool ca,
                  Scalar w_scale) {
    if (w_scale < 0) w_scale = 1.0 / std::sqrt(static_cast<Scalar>(in));
    w.name = name + ".w";
    w.t = Tensor::zeros({in, out});
    w.ca = ca;
    rng.fill_normal(w.t, w_scale);
    has_bias = bias;
    if (bias) {
        b.name = name + ".b";
        b.t = Tensor::zeros({out});
        b.ca = ca;
    }
}

Var Linear::apply(GraphCtx& g, Var x) {
    const Tensor& xv = g.tape.value(x);
    int in = w.t.dim(0), out = w.t.dim(1);
    if (xv.dim(xv.rank() - 1) != in) {
        throw std::invalid_argument("Linear " + w.name + ": input dim " +
                                    std::to_string(xv.dim(xv.rank() - 1)) + " != " +
                                    std::to_string(in));
    }
    std::vector<int> out_shape = xv.shape;
    out_shape.back() = out;
    int64_t rows = xv.numel() / in;
    Var flat = reshape(x, {static_cast<int>(rows), in});
    Var y = matmul(flat, g(w));
    if (has_bias) y = add_bias_last(y, g(b));
    return reshape(y, std::move(out_shape));
}

void Linear::collect(std::vector<Param*>& out) {
    out.push_back(&w);
    if (has_bias) out.push_back(&b);
}

void Conv::init(const std::string& name, int in_ch, int out_ch, int k, int stride_, int pad_,
                Rng& rng, bool zero_init) {
    stride = stride_;
    pad = pad_;
    w.name = name + ".w";
    w.t = Tensor::zeros({out_ch, in_ch, k, k});
    if (!zero_init) {
        rng.fill_normal(w.t, 1.0 / std::sqrt(static_cast<Scalar>(in_ch) * k * k));
    }
    b.name = name + ".b";
    b.t = Tensor::zeros({out_ch});
}

Var Conv::apply(GraphCtx& g, Var x) { return conv2d(x, g(w), g(b), stride, pad); }

void Conv::collect(std::vector<Param*>& out) {
    out.push_back(&w);
    out.push_back(&b);
}

void GroupNormLayer::init(const std::string& name, int channels, int groups_) {
    groups = groups_;
    gamma.name = name + ".gamma";
    gamma.t = Tensor::full({channels}, 1.0);
    beta.name = name + ".beta";
    beta.t = Tensor::zeros({channels});
}

Var GroupNormLayer::apply(GraphCtx& g, Var x) {
    return group_norm(x, g(gamma), g(beta), groups);
}

void GroupNormLayer::collect(std::vector<Param*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
}

void LayerNormLayer::init(const std::string& name, int dim) {
    gamma.name = name + ".gamma";
    gamma.t = Tensor::full({dim}, 1.0);
    beta.name = name + ".beta";
    beta.t = Tensor::zeros({dim});
}

Var LayerNormLayer::apply(GraphCtx& g, Var x) { return layer_norm(x, g(gamma), g(beta)); }

void LayerNormLayer::collect(std::vector<Param*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
}

void SelfAttention::init(const std::string& name, int dim_, int heads_, Rng& rng) {
    if (dim_ % heads_ != 0) {
        throw std::invalid_argument("SelfAttention: dim not divisible by heads");
    }
    dim = dim_;
    heads = heads_;
    wq.init(name + ".wq", dim, dim, rng, false);
    wk.init(name + ".wk", dim, dim, rng, false);
    wv.init(name + ".wv", dim, dim, rng, false);
    wo.init(name + ".wo", dim, dim, rng, true);
}

Var SelfAttention::apply(GraphCtx& g, Var x) {
    const Tensor& xv = g.tape.value(x);
    if (xv.rank() != 3 || xv.dim(2) != dim) {
        throw std::invalid_argument("SelfAttention: want [B,T," + std::to_string(dim) + "]");
    }
    int B = xv.dim(0), T = xv.dim(1), dh = dim / heads;
    auto split = [&](Var v) {
        // [B,T,d] -> [B*heads, T, dh]
        Var r = reshape(v, {B, T, heads, dh});
        return reshape(permute0213(r), {B * heads, T, dh});
    };
    Var q = split(wq.apply(g, x));
    Var k = split(wk.apply(g, x));
    Var v = split(wv.apply(g, x));
    Var att = softmax_last(scale(bmm(q, k, true), 1.0 / std::sqrt(static_cast<Scalar>(dh))));
    Var ctx = bmm(att, v);  // [B*heads, T, dh]
    Var merged = reshape(permute0213(reshape(ctx, {B, heads, T, dh})), {B, T, dim});
    return wo.apply(g, merged);
}

void SelfAttention::collect(std::vector<Param*>& out) {
    wq.collect(out);
    wk.collect(out);
    wv.collect(out);
    wo.collect(out);
}

void TransformerBlock::init(const std::string& name, int dim, int heads, int mlp_dim, Rng& rng) {
    ln1.init(name + ".ln1", dim);
    ln2.init(name + ".ln2", dim);
    attn.init(name + ".attn", dim, heads, rng);
    mlp1.init(name + ".mlp1", dim, mlp_dim, rng);
    mlp2.init(name + ".mlp2", mlp_dim, dim, rng);
}

Var TransformerBlock::apply(GraphCtx& g, Var x) {
    Var h = add(x, attn.apply(g, ln1.apply(g, x)));
    Var m = mlp2.apply(g, silu(mlp1.apply(g, ln2.apply(g, h))));
    return add(h, m);
}

void TransformerBlock::collect(std::vector<Param*>& out) {
    ln1.collect(out);
    ln2.collect(out);
    attn.collect(out);
    mlp1.collect(out);
    mlp2.collect(out);
}

// ---- optimization ----

Adam::State& Adam::state_for(Param* p) {
    for (auto& [param, st] : state_) {
        if (param == p) return st;
    }
    state_.push_back({p, State{Tensor::zeros(p->t.shape), Tensor::zeros(p->t.shape)}});
    return state_.back().second;
}

void Adam::step(Tape& tape, const std::vector<std::pair<Var, Param*>>& bound) {
    ++steps;
    Scalar c1 = 1.0 - std::pow(beta1, static_cast<Scalar>(steps));
    Scalar c2 = 1.0 - std::pow(beta2, static_cast<Scalar>(steps));

    Scalar scale = 1.0;
    if (clip > 0) {
        Scalar norm2 = 0;
        for (const auto& [var, param] : bound) {
            if (!tape.has_grad(var)) continue;
            const Tensor& g = tape.grad(var);
            for (int64_t i = 0; i < g.numel(); ++i) norm2 += g.data()[i] * g.data()[i];
        }
        Scalar norm = std::sqrt(norm2);
        if (norm > clip) scale = clip / norm;
    }

    for (const auto& [var, param] : bound) {
        if (!tape.has_grad(var)) continue;
        const Tensor& g = tape.grad(var);
        State& st = state_for(param);
        for (int64_t i = 0; i < g.numel(); ++i) {
            Scalar gi = g.data()[i] * scale;
            st.m.data()[i] = beta1 * st.m.data()[i] + (1.0 - beta1) * gi;
            st.v.data()[i] = beta2 * st.v.data()[i] + (1.0 - beta2) * gi * gi;
            Scalar mhat = st.m.data()[i] / c1;
            Scalar vhat = st.v.data()[i] / c2;
            param->t.data()[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

// ---- persistence / hashing ----

namespace {
constexpr char kMagic[4] = {'G', 'D', 'C', 'K'};
constexpr uint32_t kVersion = 1;
}  // namespace

void save_checkpoint(const std::string& path, const std::vector<Param*>& params,
                     const json& meta) {
    json table = json::array();
    for (const Param* p : params) {
        table.push_back({{"name", p->name}, {"shape", p->t.shape}, {"ca", p->ca}});
    }
    json header = {{"meta", meta}, {"tensors", table}};
    std::string hdr = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out.good()) throw std::runtime_error("save_checkpoint: cannot open " + path);
    out.write(kMagic, 4);
    uint32_t version = kVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    uint64_t hdr_len = hdr.size();
    out.write(reinterpret_cast<const char*>(&hdr_len), sizeof(hdr_len));
    out.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
    for (const Param* p : params) {
        out.write(reinterpret_cast<const char*>(p->t.data()),
                  static_cast<std::streamsize>(p->t.numel() * sizeof(Scalar)));
    }
    if (!out.good()) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

namespace {

json read_header(std::ifstream& in, const std::string& path) {
    char magic[4];
    in.read(magic, 4);
    if (!in.good() || std::memcmp(magic, kMagic, 4) != 0) {
        throw std::runtime_error("checkpoint: bad magic in " + path);
    }
    uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    if (version != kVersion) {
        throw std::runtime_error("checkpoint: unsupported version in " + path);
    }
    uint64_t hdr_len = 0;
    in.read(reinterpret_cast<char*>(&hdr_len), sizeof(hdr_len));
    std::string hdr(hdr_len, '\0');
    in.read(hdr.data(), static_cast<std::streamsize>(hdr_len));
    if (!in.good()) throw std::runtime_error("checkpoint: truncated header in " + path);
    return json::parse(hdr);
}

}  // namespace

json load_checkpoint(const std::string& path, const std::vector<Param*>& params) {
    std::ifstream in(path, std::ios::binary);
    if (!in.good()) throw std::runtime_error("load_checkpoint: cannot open " + path);
    json header = read_header(in, path);
    const json& table = header["tensors"];
    if (table.size() != params.size()) {
        throw std::runtime_error("load_checkpoint: " + path + " holds " +
                                 std::to_string(table.size()) + " tensors, expected " +
                                 std::to_string(params.size()));
    }
    for (const json& entry : table) {
        std::string name = entry["name"].get<std::string>();
        std::vector<int> shape = entry["shape"].get<std::vector<int>>();
        Param* target = nullptr;
        for (Param* p : params) {
            if (p->name == name) {
                target = p;
                break;
            }
        }
        if (!target) throw std::runtime_error("load_checkpoint: unknown tensor " + name);
        if (target->t.shape != shape) {
            throw std::runtime_error("load_checkpoint: shape mismatch for " + name);
        }
        in.read(reinterpret_cast<char*>(target->t.data()),
                static_cast<std::streamsize>(target->t.numel() * sizeof(Scalar)));
        if (!in.good()) throw std::runtime_error("load_checkpoint: truncated data in " + path);
    }
    return header["meta"];
}

json read_checkpoint_meta(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in.good()) throw std::runtime_error("read_checkpoint_meta: cannot open " + path);
    return read_header(in, path)["meta"];
}

uint64_t params_hash(const std::vector<Param*>& params) {
    uint64_t h = 1469598103934665603ull;
    for (const Param* p : params) {
        h = fnv1a(p->name.data(), p->name.size(), h);
        h = fnv1a(p->t.data(), static_cast<size_t>(p->t.numel()) * sizeof(Scalar), h);
    }
    return h;
}

Tensor stack0(const std::vector<Tensor>& ts) {
    if (ts.empty()) throw std::invalid_argument("stack0: empty input");
    for (const Tensor& t : ts) {
        if (!t.same_shape(ts[0])) throw std::invalid_argument("stack0: shape mismatch");
    }
    std::vector<int> shape;
    shape.push_back(static_cast<int>(ts.size()));
    for (int d : ts[0].shape) shape.push_back(d);
    Tensor out = Tensor::zeros(shape);
    int64_t per = ts[0].numel();
    for (size_t i = 0; i < ts.size(); ++i) {
        std::memcpy(out.data() + static_cast<int64_t>(i) * per, ts[i].data(),
                    sizeof(Scalar) * per);
    }
    return out;
}

}  // namespace glyphdiff::nn

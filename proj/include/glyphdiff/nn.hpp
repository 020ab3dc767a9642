#ifndef GLYPHDIFF_NN_HPP
#define GLYPHDIFF_NN_HPP

#include <string>
#include <utility>
#include <vector>

#include "glyphdiff/autograd.hpp"
#include "glyphdiff/tensor.hpp"
#include "json.hpp"

namespace glyphdiff::nn {

struct Param {
    std::string name;
    Tensor t;
    bool ca = false;  // member of a cross-attention block
};

// Binds persistent parameters into a tape for one forward/backward pass.
// `train` requests gradients; `ca_only` restricts them to cross-attention
// parameters (the finetune trainability contract).
struct GraphCtx {
    Tape& tape;
    bool train = false;
    bool ca_only = false;
    std::vector<std::pair<Var, Param*>> bound;

    explicit GraphCtx(Tape& t, bool train_ = false, bool ca_only_ = false)
        : tape(t), train(train_), ca_only(ca_only_) {}

    Var operator()(Param& p) {
        bool rg = train && (!ca_only || p.ca);
        Var v = tape.leaf(p.t, rg);
        if (rg) bound.push_back({v, &p});
        return v;
    }
};

// ---- layers ----

struct Linear {
    Param w;  // [in, out]
    Param b;  // [out]
    bool has_bias = true;

    void init(const std::string& name, int in, int out, Rng& rng, bool bias = true,
              bool ca = false, Scalar w_scale = -1.0);
    Var apply(GraphCtx& g, Var x);  // [..., in] -> [..., out]
    void collect(std::vector<Param*>& out);
};

struct Conv {
    Param w;  // [out_ch, in_ch, k, k]
    Param b;  // [out_ch]
    int stride = 1;
    int pad = 0;

    void init(const std::string& name, int in_ch, int out_ch, int k, int stride_, int pad_,
              Rng& rng, bool zero_init = false);
    Var apply(GraphCtx& g, Var x);
    void collect(std::vector<Param*>& out);
};

struct GroupNormLayer {
    Param gamma, beta;
    int groups = 1;

    void init(const std::string& name, int channels, int groups_);
    Var apply(GraphCtx& g, Var x);
    void collect(std::vector<Param*>& out);
};

struct LayerNormLayer {
    Param gamma, beta;

    void init(const std::string& name, int dim);
    Var apply(GraphCtx& g, Var x);
    void collect(std::vector<Param*>& out);
};

struct SelfAttention {
    Linear wq, wk, wv, wo;
    int heads = 1;
    int dim = 0;

    void init(const std::string& name, int dim_, int heads_, Rng& rng);
    Var apply(GraphCtx& g, Var x);  // [B,T,d] -> [B,T,d]
    void collect(std::vector<Param*>& out);
};

// Pre-LN transformer block: x + attn(ln1(x)), then x + mlp(ln2(x)).
struct TransformerBlock {
    LayerNormLayer ln1, ln2;
    SelfAttention attn;
    Linear mlp1, mlp2;

    void init(const std::string& name, int dim, int heads, int mlp_dim, Rng& rng);
    Var apply(GraphCtx& g, Var x);
    void collect(std::vector<Param*>& out);
};

// ---- optimization ----

struct Adam {
    Scalar lr = 1e-3;
    Scalar beta1 = 0.9;
    Scalar beta2 = 0.999;
    Scalar eps = 1e-8;
    Scalar clip = 0;  // global grad-norm clip, 0 disables
    int64_t steps = 0;

    explicit Adam(Scalar lr_) : lr(lr_) {}

    // Applies tape gradients to every bound parameter. Parameters missing a
    // gradient (not on the loss path) are skipped.
    void step(Tape& tape, const std::vector<std::pair<Var, Param*>>& bound);

  private:
    struct State {
        Tensor m, v;
    };
    std::vector<std::pair<Param*, State>> state_;
    State& state_for(Param* p);
};

// ---- persistence / hashing ----

// Binary checkpoint: "GDCK" magic, version, JSON header (meta + tensor
// table), raw little-endian doubles. Loading matches by name and verifies
// shapes; unknown or missing names throw.
void save_checkpoint(const std::string& path, const std::vector<Param*>& params,
                     const nlohmann::json& meta);
nlohmann::json load_checkpoint(const std::string& path, const std::vector<Param*>& params);
nlohmann::json read_checkpoint_meta(const std::string& path);

uint64_t params_hash(const std::vector<Param*>& params);

// Stacks equal-shaped tensors along a new leading axis.
Tensor stack0(const std::vector<Tensor>& ts);

}  // namespace glyphdiff::nn

#endif  // GLYPHDIFF_NN_HPP

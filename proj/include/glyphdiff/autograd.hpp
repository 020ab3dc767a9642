#ifndef GLYPHDIFF_AUTOGRAD_HPP
#define GLYPHDIFF_AUTOGRAD_HPP

#include <functional>
#include <vector>

#include "glyphdiff/tensor.hpp"

namespace glyphdiff {

// Reverse-mode tape. Nodes are appended in topological order; backward walks
// the tape in reverse. Values are immutable once created.
class Tape;

struct Var {
    Tape* tape = nullptr;
    int id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
};

class Tape {
  public:
    struct Node {
        Tensor value;
        Tensor grad;  // allocated lazily
        bool requires_grad = false;
        std::function<void(Tape&, Node&)> backward;  // empty for leaves
    };

    Var leaf(Tensor value, bool requires_grad = false);

    Var make(Tensor value, bool requires_grad, std::function<void(Tape&, Node&)> backward) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    const Tensor& value(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }
    const Tensor& grad(Var v) const;
    bool has_grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].grad.numel() != 0; }
    Node& node(Var v) { return nodes_[static_cast<size_t>(v.id)]; }
    bool requires_grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].requires_grad; }

    // Accumulate g into v's grad buffer (shape-flat; element counts must match).
    void accumulate(Var v, const Tensor& g);

    // Run reverse pass from a scalar loss node.
    void backward(Var loss);

    size_t size() const { return nodes_.size(); }

  private:
    std::vector<Node> nodes_;
};

// ---- elementwise / arithmetic ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, Scalar s);
Var silu(Var a);
Var mul_const(Var a, const Tensor& c);
Var add_const(Var a, const Tensor& c);

// ---- broadcasts ----
Var add_bias_channels(Var x, Var b);            // [B,C,H,W] + [C]
Var add_bias_bc(Var x, Var e);                  // [B,C,H,W] + [B,C]
Var add_bias_last(Var x, Var b);                // [...,D] + [D]
Var add_bias_ld(Var x, Var p);                  // [B,L,D] + [L,D]
Var scale_per_sample(Var x, std::vector<Scalar> s);  // x[b,...] * s[b]

// ---- linear algebra ----
Var matmul(Var a, Var b);                       // [M,K]x[K,N]
Var bmm(Var a, Var b, bool transpose_b = false);  // [B,M,K]x[B,K,N] (or [B,N,K])

// ---- shape ----
Var reshape(Var x, std::vector<int> shape);     // zero-copy
Var permute021(Var x);                          // [A,B,C] -> [A,C,B]
Var permute0213(Var x);                         // [A,B,C,D] -> [A,C,B,D]
Var concat_channels(Var a, Var b);              // [B,C1,H,W] + [B,C2,H,W]
Var concat_axis1(Var a, Var b);                 // [B,T1,D] + [B,T2,D]
Var concat_axis0(Var a, Var b);                 // [A,...] + [B,...]
Var slice_axis1(Var x, int start, int len);     // [B,T,D] -> [B,len,D]

// ---- reductions ----
Var mean_all(Var x);                            // -> [1]
Var mean_per_sample(Var x);                     // [B,...] -> [B]
Var mean_axis1(Var x);                          // [A,H,M,N] -> [A,M,N]
Var dot(Var a, Var b);                          // [N].[N] -> [1]
Var dot_const(Var a, const Tensor& w);          // [N].const[N] -> [1]
Var max_last(Var x);                            // [...,K] -> [...] (argmax-routed)
Var min_last(Var x);                            // [...,K] -> [...] (argmin-routed)
Var mean_rows_masked(Var x, const Tensor& m);   // [B,L,D], mask[B,L] -> [B,D]

// ---- nonlinear rows ----
Var softmax_last(Var x);
Var cosine_rows(Var a, Var b);                  // [B,D],[B,D] -> [B]
Var normalize_rows(Var x);                      // [B,D] -> unit rows
Var ce_mean(Var logits, const std::vector<int>& ids);  // [N,K] -> [1]

// ---- normalization ----
Var group_norm(Var x, Var gamma, Var beta, int groups, Scalar eps = 1e-5);
Var layer_norm(Var x, Var gamma, Var beta, Scalar eps = 1e-5);

// ---- spatial ----
Var conv2d(Var x, Var w, Var bias, int stride, int pad);  // bias may be invalid Var
Var upsample_nearest2(Var x);
Var blur_hw(Var x, const std::vector<Scalar>& k1d);  // [N,H,W], zero-padded separable
Var bilinear_resize(Var x, int oh, int ow);          // [B,C,H,W]
Var embedding_rows(Var table, const std::vector<int>& ids);  // [V,D] -> [N,D]

}  // namespace glyphdiff

#endif  // GLYPHDIFF_AUTOGRAD_HPP

#include "glyphdiff/autograd.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>

namespace glyphdiff {

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() +
                                    " vs " + b.shape_str());
    }
}

void check_same_tape(Var a, Var b, const char* op) {
    if (a.tape != b.tape) throw std::invalid_argument(std::string(op) + ": vars from different tapes");
}

void axpy(Scalar alpha, const Scalar* x, Scalar* y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace

Var Tape::leaf(Tensor value, bool requires_grad) {
    return make(std::move(value), requires_grad, nullptr);
}

const Tensor& Tape::grad(Var v) const {
    const Node& n = nodes_[static_cast<size_t>(v.id)];
    if (n.grad.numel() == 0) {
        throw std::invalid_argument("grad: node has no gradient (not on backward path)");
    }
    return n.grad;
}

void Tape::accumulate(Var v, const Tensor& g) {
    Node& n = nodes_[static_cast<size_t>(v.id)];
    if (!n.requires_grad) return;
    if (n.grad.numel() == 0) n.grad = Tensor::zeros(n.value.shape);
    if (n.grad.numel() != g.numel()) {
        throw std::invalid_argument("accumulate: gradient element count mismatch");
    }
    axpy(1.0, g.data(), n.grad.data(), g.numel());
}

void Tape::backward(Var loss) {
    if (loss.tape != this) throw std::invalid_argument("backward: var from different tape");
    Node& ln = nodes_[static_cast<size_t>(loss.id)];
    if (ln.value.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    for (auto& n : nodes_) n.grad = Tensor();
    ln.grad = Tensor::full(ln.value.shape, 1.0);
    for (int i = loss.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (!n.requires_grad || !n.backward) continue;
        if (n.grad.numel() == 0) continue;
        n.backward(*this, n);
    }
}

// ---- elementwise / arithmetic ----

Var add(Var a, Var b) {
    check_same_tape(a, b, "add");
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    check_same_shape(av, bv, "add");
    Tensor y = av.clone();
    axpy(1.0, bv.data(), y.data(), y.numel());
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    return t.make(std::move(y), rg, [a, b](Tape& tp, Tape::Node& n) {
        tp.accumulate(a, n.grad);
        tp.accumulate(b, n.grad);
    });
}

Var sub(Var a, Var b) {
    check_same_tape(a, b, "sub");
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    check_same_shape(av, bv, "sub");
    Tensor y = av.clone();
    axpy(-1.0, bv.data(), y.data(), y.numel());
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    return t.make(std::move(y), rg, [a, b](Tape& tp, Tape::Node& n) {
        tp.accumulate(a, n.grad);
        if (!tp.requires_grad(b)) return;
        Tensor gb = n.grad.clone();
        for (int64_t i = 0; i < gb.numel(); ++i) gb.data()[i] = -gb.data()[i];
        tp.accumulate(b, gb);
    });
}

Var mul(Var a, Var b) {
    check_same_tape(a, b, "mul");
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    check_same_shape(av, bv, "mul");
    Tensor y = Tensor::zeros(av.shape);
    for (int64_t i = 0; i < y.numel(); ++i) y.data()[i] = av.data()[i] * bv.data()[i];
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    return t.make(std::move(y), rg, [a, b](Tape& tp, Tape::Node& n) {
        if (tp.requires_grad(a)) {
            Tensor ga = Tensor::zeros(n.grad.shape);
            const Scalar* bd = tp.value(b).data();
            for (int64_t i = 0; i < ga.numel(); ++i) ga.data()[i] = n.grad.data()[i] * bd[i];
            tp.accumulate(a, ga);
        }
        if (tp.requires_grad(b)) {
            Tensor gb = Tensor::zeros(n.grad.shape);
            const Scalar* ad = tp.value(a).data();
            for (int64_t i = 0; i < gb.numel(); ++i) gb.data()[i] = n.grad.data()[i] * ad[i];
            tp.accumulate(b, gb);
        }
    });
}

Var scale(Var a, Scalar s) {
    Tape& t = *a.tape;
    Tensor y = t.value(a).clone();
    for (int64_t i = 0; i < y.numel(); ++i) y.data()[i] *= s;
    return t.make(std::move(y), t.requires_grad(a), [a, s](Tape& tp, Tape::Node& n) {
        Tensor g = n.grad.clone();
        for (int64_t i = 0; i < g.numel(); ++i) g.data()[i] *= s;
        tp.accumulate(a, g);
    });
}

Var silu(Var a) {
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    Tensor y = Tensor::zeros(av.shape);
    for (int64_t i = 0; i < y.numel(); ++i) {
        Scalar x = av.data()[i];
        y.data()[i] = x / (1.0 + std::exp(-x));
    }
    return t.make(std::move(y), t.requires_grad(a), [a](Tape& tp, Tape::Node& n) {
        const Tensor& av = tp.value(a);
        Tensor g = Tensor::zeros(av.shape);
        for (int64_t i = 0; i < g.numel(); ++i) {
            Scalar x = av.data()[i];
            Scalar sig = 1.0 / (1.0 + std::exp(-x));
            g.data()[i] = n.grad.data()[i] * sig * (1.0 + x * (1.0 - sig));
        }
        tp.accumulate(a, g);
    });
}

Var mul_const(Var a, const Tensor& c) {
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    check_same_shape(av, c, "mul_const");
    Tensor y = Tensor::zeros(av.shape);
    for (int64_t i = 0; i < y.numel(); ++i) y.data()[i] = av.data()[i] * c.data()[i];
    Tensor cc = c;  // shares buffer, keeps it alive
    return t.make(std::move(y), t.requires_grad(a), [a, cc](Tape& tp, Tape::Node& n) {
        Tensor g = Tensor::zeros(n.grad.shape);
        for (int64_t i = 0; i < g.numel(); ++i) g.data()[i] = n.grad.data()[i] * cc.data()[i];
        tp.accumulate(a, g);
    });
}

Var add_const(Var a, const Tensor& c) {
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    check_same_shape(av, c, "add_const");
    Tensor y = av.clone();
    axpy(1.0, c.data(), y.data(), y.numel());
    return t.make(std::move(y), t.requires_grad(a), [a](Tape& tp, Tape::Node& n) {
        tp.accumulate(a, n.grad);
    });
}

// ---- broadcasts ----

Var add_bias_bc(Var x, Var e) {
    check_same_tape(x, e, "add_bias_bc");
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    const Tensor& ev = t.value(e);
    if (xv.rank() != 4 || ev.rank() != 2 || ev.dim(0) != xv.dim(0) || ev.dim(1) != xv.dim(1)) {
        throw std::invalid_argument("add_bias_bc: want [B,C,H,W] and [B,C]");
    }
    int B = xv.dim(0), C = xv.dim(1);
    int64_t hw = static_cast<int64_t>(xv.dim(2)) * xv.dim(3);
    Tensor y = xv.clone();
    for (int bi = 0; bi < B; ++bi) {
        for (int c = 0; c < C; ++c) {
            Scalar* p = y.data() + (static_cast<int64_t>(bi) * C + c) * hw;
            Scalar bias = ev.at(bi, c);
            for (int64_t i = 0; i < hw; ++i) p[i] += bias;
        }
    }
    bool rg = t.requires_grad(x) || t.requires_grad(e);
    return t.make(std::move(y), rg, [x, e, B, C, hw](Tape& tp, Tape::Node& n) {
        tp.accumulate(x, n.grad);
        if (!tp.requires_grad(e)) return;
        Tensor ge = Tensor::zeros({B, C});
        for (int bi = 0; bi < B; ++bi) {
            for (int c = 0; c < C; ++c) {
                const Scalar* p = n.grad.data() + (static_cast<int64_t>(bi) * C + c) * hw;
                Scalar s = 0;
                for (int64_t i = 0; i < hw; ++i) s += p[i];
                ge.at(bi, c) = s;
            }
        }
        tp.accumulate(e, ge);
    });
}

Var add_bias_channels(Var x, Var b) {
    check_same_tape(x, b, "add_bias_channels");
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    const Tensor& bv = t.value(b);
    if (xv.rank() != 4 || bv.rank() != 1 || bv.dim(0) != xv.dim(1)) {
        throw std::invalid_argument("add_bias_channels: want [B,C,H,W] and [C]");
    }
    int B = xv.dim(0), C = xv.dim(1);
    int64_t hw = static_cast<int64_t>(xv.dim(2)) * xv.dim(3);
    Tensor y = xv.clone();
    for (int bi = 0; bi < B; ++bi) {
        for (int c = 0; c < C; ++c) {
            Scalar* p = y.data() + (static_cast<int64_t>(bi) * C + c) * hw;
            Scalar bias = bv.data()[c];
            for (int64_t i = 0; i < hw; ++i) p[i] += bias;
        }
    }
    bool rg = t.requires_grad(x) || t.requires_grad(b);
    return t.make(std::move(y), rg, [x, b, B, C, hw](Tape& tp, Tape::Node& n) {
        tp.accumulate(x, n.grad);
        if (!tp.requires_grad(b)) return;
        Tensor gb = Tensor::zeros({C});
        for (int bi = 0; bi < B; ++bi) {
            for (int c = 0; c < C; ++c) {
                const Scalar* p = n.grad.data() + (static_cast<int64_t>(bi) * C + c) * hw;
                Scalar s = 0;
                for (int64_t i = 0; i < hw; ++i) s += p[i];
                gb.data()[c] += s;
            }
        }
        tp.accumulate(b, gb);
    });
}

Var add_bias_last(Var x, Var b) {
    check_same_tape(x, b, "add_bias_last");
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    const Tensor& bv = t.value(b);
    if (bv.rank() != 1 || xv.dim(xv.rank() - 1) != bv.dim(0)) {
        throw std::invalid_argument("add_bias_last: trailing dim mismatch");
    }
    int D = bv.dim(0);
    int64_t rows = xv.numel() / D;
    Tensor y = xv.clone();
    for (int64_t r = 0; r < rows; ++r) {
        axpy(1.0, bv.data(), y.data() + r * D, D);
    }
    bool rg = t.requires_grad(x) || t.requires_grad(b);
    return t.make(std::move(y), rg, [x, b, D, rows](Tape& tp, Tape::Node& n) {
        tp.accumulate(x, n.grad);
        if (!tp.requires_grad(b)) return;
        Tensor gb = Tensor::zeros({D});
        for (int64_t r = 0; r < rows; ++r) {
            axpy(1.0, n.grad.data() + r * D, gb.data(), D);
        }
        tp.accumulate(b, gb);
    });
}

Var add_bias_ld(Var x, Var p) {
    check_same_tape(x, p, "add_bias_ld");
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    const Tensor& pv = t.value(p);
    if (xv.rank() != 3 || pv.rank() != 2 || xv.dim(1) != pv.dim(0) || xv.dim(2) != pv.dim(1)) {
        throw std::invalid_argument("add_bias_ld: want [B,L,D] and [L,D]");
    }
    int B = xv.dim(0);
    int64_t ld = pv.numel();
    Tensor y = xv.clone();
    for (int bi = 0; bi < B; ++bi) axpy(1.0, pv.data(), y.data() + bi * ld, ld);
    bool rg = t.requires_grad(x) || t.requires_grad(p);
    return t.make(std::move(y), rg, [x, p, B, ld](Tape& tp, Tape::Node& n) {
        tp.accumulate(x, n.grad);
        if (!tp.requires_grad(p)) return;
        Tensor gp = Tensor::zeros(tp.value(p).shape);
        for (int bi = 0; bi < B; ++bi) axpy(1.0, n.grad.data() + bi * ld, gp.data(), ld);
        tp.accumulate(p, gp);
    });
}

Var scale_per_sample(Var x, std::vector<Scalar> s) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    if (xv.rank() < 1 || xv.dim(0) != static_cast<int>(s.size())) {
        throw std::invalid_argument("scale_per_sample: leading dim must match scale count");
    }
    int B = xv.dim(0);
    int64_t per = xv.numel() / B;
    Tensor y = xv.clone();
    for (int bi = 0; bi < B; ++bi) {
        Scalar* p = y.data() + bi * per;
        for (int64_t i = 0; i < per; ++i) p[i] *= s[static_cast<size_t>(bi)];
    }
    return t.make(std::move(y), t.requires_grad(x),
                  [x, s = std::move(s), B, per](Tape& tp, Tape::Node& n) {
                      Tensor g = n.grad.clone();
                      for (int bi = 0; bi < B; ++bi) {
                          Scalar* p = g.data() + bi * per;
                          for (int64_t i = 0; i < per; ++i) p[i] *= s[static_cast<size_t>(bi)];
                      }
                      tp.accumulate(x, g);
                  });
}

// ---- linear algebra ----

Var matmul(Var a, Var b) {
    check_same_tape(a, b, "matmul");
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
        throw std::invalid_argument("matmul: want [M,K]x[K,N], got " + av.shape_str() + " x " +
                                    bv.shape_str());
    }
    int M = av.dim(0), K = av.dim(1), N = bv.dim(1);
    Tensor y = Tensor::zeros({M, N});
    gemm(false, false, M, N, K, 1.0, av.data(), K, bv.data(), N, 0.0, y.data(), N);
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    return t.make(std::move(y), rg, [a, b, M, K, N](Tape& tp, Tape::Node& n) {
        if (tp.requires_grad(a)) {
            Tensor ga = Tensor::zeros({M, K});
            gemm(false, true, M, K, N, 1.0, n.grad.data(), N, tp.value(b).data(), N, 0.0,
                 ga.data(), K);
            tp.accumulate(a, ga);
        }
        if (tp.requires_grad(b)) {
            Tensor gb = Tensor::zeros({K, N});
            gemm(true, false, K, N, M, 1.0, tp.value(a).data(), K, n.grad.data(), N, 0.0,
                 gb.data(), N);
            tp.accumulate(b, gb);
        }
    });
}

Var bmm(Var a, Var b, bool transpose_b) {
    check_same_tape(a, b, "bmm");
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0)) {
        throw std::invalid_argument("bmm: want rank-3 with equal batch");
    }
    int B = av.dim(0), M = av.dim(1), K = av.dim(2);
    int N = transpose_b ? bv.dim(1) : bv.dim(2);
    int bk = transpose_b ? bv.dim(2) : bv.dim(1);
    if (bk != K) throw std::invalid_argument("bmm: inner dim mismatch");
    Tensor y = Tensor::zeros({B, M, N});
    int64_t sa = static_cast<int64_t>(M) * K, sb = static_cast<int64_t>(bv.dim(1)) * bv.dim(2);
    int64_t sy = static_cast<int64_t>(M) * N;
    int ldb = bv.dim(2);
    for (int bi = 0; bi < B; ++bi) {
        gemm(false, transpose_b, M, N, K, 1.0, av.data() + bi * sa, K, bv.data() + bi * sb, ldb,
             0.0, y.data() + bi * sy, N);
    }
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    return t.make(std::move(y), rg,
                  [a, b, transpose_b, B, M, K, N, sa, sb, sy, ldb](Tape& tp, Tape::Node& n) {
                      const Tensor& av = tp.value(a);
                      const Tensor& bv = tp.value(b);
                      if (tp.requires_grad(a)) {
                          Tensor ga = Tensor::zeros(av.shape);
                          for (int bi = 0; bi < B; ++bi) {
                              // y = A*B  -> dA = G*B^T;  y = A*B^T -> dA = G*B
                              gemm(false, !transpose_b, M, K, N, 1.0, n.grad.data() + bi * sy, N,
                                   bv.data() + bi * sb, ldb, 0.0, ga.data() + bi * sa, K);
                          }
                          tp.accumulate(a, ga);
                      }
                      if (tp.requires_grad(b)) {
                          Tensor gb = Tensor::zeros(bv.shape);
                          for (int bi = 0; bi < B; ++bi) {
                              if (transpose_b) {
                                  // dB = G^T * A  ([N,M]x[M,K])
                                  gemm(true, false, N, K, M, 1.0, n.grad.data() + bi * sy, N,
                                       av.data() + bi * sa, K, 0.0, gb.data() + bi * sb, K);
                              } else {
                                  // dB = A^T * G  ([K,M]x[M,N])
                                  gemm(true, false, K, N, M, 1.0, av.data() + bi * sa, K,
                                       n.grad.data() + bi * sy, N, 0.0, gb.data() + bi * sb, N);
                              }
                          }
                          tp.accumulate(b, gb);
                      }
                  });
}

// ---- shape ----

Var reshape(Var x, std::vector<int> shape) {
    Tape& t = *x.tape;
    Tensor y = t.value(x).reshaped(std::move(shape));
    return t.make(std::move(y), t.requires_grad(x), [x](Tape& tp, Tape::Node& n) {
        tp.accumulate(x, n.grad);  // flat accumulate, counts match
    });
}

Var permute021(Var x) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    if (xv.rank() != 3) throw std::invalid_argument("permute021: want rank 3");
    int A = xv.dim(0), B = xv.dim(1), C = xv.dim(2);
    Tensor y = Tensor::zeros({A, C, B});
    for (int a = 0; a < A; ++a) {
        for (int b = 0; b < B; ++b) {
            for (int c = 0; c < C; ++c) {
                y.at(a, c, b) = xv.at(a, b, c);
            }
        }
    }
    return t.make(std::move(y), t.requires_grad(x), [x, A, B, C](Tape& tp, Tape::Node& n) {
        Tensor g = Tensor::zeros({A, B, C});
        for (int a = 0; a < A; ++a) {
            for (int b = 0; b < B; ++b) {
                for (int c = 0; c < C; ++c) {
                    g.at(a, b, c) = n.grad.at(a, c, b);
                }
            }
        }
        tp.accumulate(x, g);
    });
}

Var permute0213(Var x) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    if (xv.rank() != 4) throw std::invalid_argument("permute0213: want rank 4");
    int A = xv.dim(0), B = xv.dim(1), C = xv.dim(2), D = xv.dim(3);
    Tensor y = Tensor::zeros({A, C, B, D});
    for (int a = 0; a < A; ++a) {
        for (int b = 0; b < B; ++b) {
            for (int c = 0; c < C; ++c) {
                std::memcpy(&y.at(a, c, b, 0), &xv.at(a, b, c, 0), sizeof(Scalar) * D);
            }
        }
    }
    return t.make(std::move(y), t.requires_grad(x), [x, A, B, C, D](Tape& tp, Tape::Node& n) {
        Tensor g = Tensor::zeros({A, B, C, D});
        for (int a = 0; a < A; ++a) {
            for (int c = 0; c < C; ++c) {
                for (int b = 0; b < B; ++b) {
                    axpy(1.0, &n.grad.at(a, c, b, 0), &g.at(a, b, c, 0), D);
                }
            }
        }
        tp.accumulate(x, g);
    });
}

namespace {

Var concat_dim1(Var a, Var b, const char* op) {
    check_same_tape(a, b, op);
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (av.rank() != bv.rank() || av.rank() < 2 || av.dim(0) != bv.dim(0)) {
        throw std::invalid_argument(std::string(op) + ": rank/batch mismatch");
    }
    for (int i = 2; i < av.rank(); ++i) {
        if (av.dim(i) != bv.dim(i)) {
            throw std::invalid_argument(std::string(op) + ": trailing dims mismatch");
        }
    }
    int B = av.dim(0);
    int64_t inner = av.numel() / (static_cast<int64_t>(B) * av.dim(1));
    int64_t na = av.dim(1) * inner, nb = bv.dim(1) * inner;
    std::vector<int> yshape = av.shape;
    yshape[1] = av.dim(1) + bv.dim(1);
    Tensor y = Tensor::zeros(yshape);
    for (int bi = 0; bi < B; ++bi) {
        std::memcpy(y.data() + bi * (na + nb), av.data() + bi * na, sizeof(Scalar) * na);
        std::memcpy(y.data() + bi * (na + nb) + na, bv.data() + bi * nb, sizeof(Scalar) * nb);
    }
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    return t.make(std::move(y), rg, [a, b, B, na, nb](Tape& tp, Tape::Node& n) {
        if (tp.requires_grad(a)) {
            Tensor ga = Tensor::zeros(tp.value(a).shape);
            for (int bi = 0; bi < B; ++bi) {
                axpy(1.0, n.grad.data() + bi * (na + nb), ga.data() + bi * na, na);
            }
            tp.accumulate(a, ga);
        }
        if (tp.requires_grad(b)) {
            Tensor gb = Tensor::zeros(tp.value(b).shape);
            for (int bi = 0; bi < B; ++bi) {
                axpy(1.0, n.grad.data() + bi * (na + nb) + na, gb.data() + bi * nb, nb);
            }
            tp.accumulate(b, gb);
        }
    });
}

}  // namespace

Var concat_channels(Var a, Var b) { return concat_dim1(a, b, "concat_channels"); }
Var concat_axis1(Var a, Var b) { return concat_dim1(a, b, "concat_axis1"); }

Var concat_axis0(Var a, Var b) {
    check_same_tape(a, b, "concat_axis0");
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (av.rank() != bv.rank() || av.rank() < 1) {
        throw std::invalid_argument("concat_axis0: rank mismatch");
    }
    for (int i = 1; i < av.rank(); ++i) {
        if (av.dim(i) != bv.dim(i)) {
            throw std::invalid_argument("concat_axis0: trailing dims mismatch");
        }
    }
    std::vector<int> yshape = av.shape;
    yshape[0] = av.dim(0) + bv.dim(0);
    Tensor y = Tensor::zeros(yshape);
    std::memcpy(y.data(), av.data(), sizeof(Scalar) * av.numel());
    std::memcpy(y.data() + av.numel(), bv.data(), sizeof(Scalar) * bv.numel());
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    int64_t na = av.numel(), nb = bv.numel();
    return t.make(std::move(y), rg, [a, b, na, nb](Tape& tp, Tape::Node& n) {
        if (tp.requires_grad(a)) {
            Tensor ga = Tensor::zeros(tp.value(a).shape);
            std::memcpy(ga.data(), n.grad.data(), sizeof(Scalar) * na);
            tp.accumulate(a, ga);
        }
        if (tp.requires_grad(b)) {
            Tensor gb = Tensor::zeros(tp.value(b).shape);
            std::memcpy(gb.data(), n.grad.data() + na, sizeof(Scalar) * nb);
            tp.accumulate(b, gb);
        }
    });
}

Var slice_axis1(Var x, int start, int len) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    if (xv.rank() < 2 || start < 0 || len <= 0 || start + len > xv.dim(1)) {
        throw std::invalid_argument("slice_axis1: range out of bounds");
    }
    int B = xv.dim(0), T = xv.dim(1);
    int64_t inner = xv.numel() / (static_cast<int64_t>(B) * T);
    std::vector<int> yshape = xv.shape;
    yshape[1] = len;
    Tensor y = Tensor::zeros(yshape);
    for (int bi = 0; bi < B; ++bi) {
        std::memcpy(y.data() + static_cast<int64_t>(bi) * len * inner,
                    xv.data() + (static_cast<int64_t>(bi) * T + start) * inner,
                    sizeof(Scalar) * len * inner);
    }
    return t.make(std::move(y), t.requires_grad(x),
                  [x, start, len, B, T, inner](Tape& tp, Tape::Node& n) {
                      Tensor g = Tensor::zeros(tp.value(x).shape);
                      for (int bi = 0; bi < B; ++bi) {
                          axpy(1.0, n.grad.data() + static_cast<int64_t>(bi) * len * inner,
                               g.data() + (static_cast<int64_t>(bi) * T + start) * inner,
                               len * inner);
                      }
                      tp.accumulate(x, g);
                  });
}

// ---- reductions ----

Var mean_all(Var x) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    int64_t n = xv.numel();
    Scalar s = 0;
    for (int64_t i = 0; i < n; ++i) s += xv.data()[i];
    Tensor y = Tensor::scalar(s / static_cast<Scalar>(n));
    return t.make(std::move(y), t.requires_grad(x), [x, n](Tape& tp, Tape::Node& nd) {
        Tensor g = Tensor::full(tp.value(x).shape, nd.grad.data()[0] / static_cast<Scalar>(n));
        tp.accumulate(x, g);
    });
}

Var mean_per_sample(Var x) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    if (xv.rank() < 1) throw std::invalid_argument("mean_per_sample: want rank >= 1");
    int B = xv.dim(0);
    int64_t per = xv.numel() / B;
    Tensor y = Tensor::zeros({B});
    for (int bi = 0; bi < B; ++bi) {
        const Scalar* p = xv.data() + bi * per;
        Scalar s = 0;
        for (int64_t i = 0; i < per; ++i) s += p[i];
        y.data()[bi] = s / static_cast<Scalar>(per);
    }
    return t.make(std::move(y), t.requires_grad(x), [x, B, per](Tape& tp, Tape::Node& n) {
        Tensor g = Tensor::zeros(tp.value(x).shape);
        for (int bi = 0; bi < B; ++bi) {
            Scalar v = n.grad.data()[bi] / static_cast<Scalar>(per);
            Scalar* p = g.data() + bi * per;
            for (int64_t i = 0; i < per; ++i) p[i] = v;
        }
        tp.accumulate(x, g);
    });
}

Var mean_axis1(Var x) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    if (xv.rank() < 2) throw std::invalid_argument("mean_axis1: want rank >= 2");
    int A = xv.dim(0), H = xv.dim(1);
    int64_t inner = xv.numel() / (static_cast<int64_t>(A) * H);
    std::vector<int> yshape;
    yshape.push_back(A);
    for (int i = 2; i < xv.rank(); ++i) yshape.push_back(xv.dim(i));
    Tensor y = Tensor::zeros(yshape);
    for (int a = 0; a < A; ++a) {
        for (int h = 0; h < H; ++h) {
            axpy(1.0 / H, xv.data() + (static_cast<int64_t>(a) * H + h) * inner,
                 y.data() + a * inner, inner);
        }
    }
    return t.make(std::move(y), t.requires_grad(x), [x, A, H, inner](Tape& tp, Tape::Node& n) {
        Tensor g = Tensor::zeros(tp.value(x).shape);
        for (int a = 0; a < A; ++a) {
            for (int h = 0; h < H; ++h) {
                axpy(1.0 / H, n.grad.data() + a * inner,
                     g.data() + (static_cast<int64_t>(a) * H + h) * inner, inner);
            }
        }
        tp.accumulate(x, g);
    });
}

Var dot(Var a, Var b) {
    check_same_tape(a, b, "dot");
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (av.numel() != bv.numel()) throw std::invalid_argument("dot: element count mismatch");
    Scalar s = 0;
    for (int64_t i = 0; i < av.numel(); ++i) s += av.data()[i] * bv.data()[i];
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    return t.make(Tensor::scalar(s), rg, [a, b](Tape& tp, Tape::Node& n) {
        Scalar g = n.grad.data()[0];
        if (tp.requires_grad(a)) {
            Tensor ga = tp.value(b).clone();
            for (int64_t i = 0; i < ga.numel(); ++i) ga.data()[i] *= g;
            tp.accumulate(a, ga);
        }
        if (tp.requires_grad(b)) {
            Tensor gb = tp.value(a).clone();
            for (int64_t i = 0; i < gb.numel(); ++i) gb.data()[i] *= g;
            tp.accumulate(b, gb);
        }
    });
}

Var dot_const(Var a, const Tensor& w) {
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    if (av.numel() != w.numel()) throw std::invalid_argument("dot_const: element count mismatch");
    Scalar s = 0;
    for (int64_t i = 0; i < av.numel(); ++i) s += av.data()[i] * w.data()[i];
    Tensor wc = w;
    return t.make(Tensor::scalar(s), t.requires_grad(a), [a, wc](Tape& tp, Tape::Node& n) {
        Scalar g = n.grad.data()[0];
        Tensor ga = wc.clone();
        for (int64_t i = 0; i < ga.numel(); ++i) ga.data()[i] *= g;
        tp.accumulate(a, ga);
    });
}

namespace {

Var extremum_last(Var x, bool take_max, const char* op) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    if (xv.rank() < 1) throw std::invalid_argument(std::string(op) + ": want rank >= 1");
    int K = xv.dim(xv.rank() - 1);
    int64_t rows = xv.numel() / K;
    std::vector<int> yshape(xv.shape.begin(), xv.shape.end() - 1);
    if (yshape.empty()) yshape.push_back(1);
    Tensor y = Tensor::zeros(yshape);
    auto args = std::make_shared<std::vector<int>>(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const Scalar* p = xv.data() + r * K;
        int best = 0;
        for (int k = 1; k < K; ++k) {
            bool better = take_max ? (p[k] > p[best]) : (p[k] < p[best]);
            if (better) best = k;
        }
        (*args)[static_cast<size_t>(r)] = best;
        y.data()[r] = p[best];
    }
    return t.make(std::move(y), t.requires_grad(x), [x, K, rows, args](Tape& tp, Tape::Node& n) {
        Tensor g = Tensor::zeros(tp.value(x).shape);
        for (int64_t r = 0; r < rows; ++r) {
            g.data()[r * K + (*args)[static_cast<size_t>(r)]] = n.grad.data()[r];
        }
        tp.accumulate(x, g);
    });
}

}  // namespace

Var max_last(Var x) { return extremum_last(x, true, "max_last"); }
Var min_last(Var x) { return extremum_last(x, false, "min_last"); }

Var mean_rows_masked(Var x, const Tensor& m) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    if (xv.rank() != 3 || m.rank() != 2 || m.dim(0) != xv.dim(0) || m.dim(1) != xv.dim(1)) {
        throw std::invalid_argument("mean_rows_masked: want x[B,L,D] and mask[B,L]");
    }
    int B = xv.dim(0), L = xv.dim(1), D = xv.dim(2);
    std::vector<Scalar> cnt(static_cast<size_t>(B), 0);
    for (int bi = 0; bi < B; ++bi) {
        for (int l = 0; l < L; ++l) cnt[static_cast<size_t>(bi)] += m.at(bi, l);
        if (cnt[static_cast<size_t>(bi)] <= 0) {
            throw std::invalid_argument("mean_rows_masked: mask selects no rows for a sample");
        }
    }
    Tensor y = Tensor::zeros({B, D});
    for (int bi = 0; bi < B; ++bi) {
        for (int l = 0; l < L; ++l) {
            Scalar w = m.at(bi, l) / cnt[static_cast<size_t>(bi)];
            if (w != 0) axpy(w, &xv.at(bi, l, 0), y.data() + bi * D, D);
        }
    }
    Tensor mc = m;
    return t.make(std::move(y), t.requires_grad(x),
                  [x, mc, cnt = std::move(cnt), B, L, D](Tape& tp, Tape::Node& n) {
                      Tensor g = Tensor::zeros(tp.value(x).shape);
                      for (int bi = 0; bi < B; ++bi) {
                          for (int l = 0; l < L; ++l) {
                              Scalar w = mc.at(bi, l) / cnt[static_cast<size_t>(bi)];
                              if (w != 0) axpy(w, n.grad.data() + bi * D, &g.at(bi, l, 0), D);
                          }
                      }
                      tp.accumulate(x, g);
                  });
}

// ---- nonlinear rows ----

Var softmax_last(Var x) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    if (xv.rank() < 1) throw std::invalid_argument("softmax_last: want rank >= 1");
    int K = xv.dim(xv.rank() - 1);
    int64_t rows = xv.numel() / K;
    Tensor y = Tensor::zeros(xv.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const Scalar* p = xv.data() + r * K;
        Scalar* q = y.data() + r * K;
        Scalar mx = p[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, p[k]);
        Scalar z = 0;
        for (int k = 0; k < K; ++k) {
            q[k] = std::exp(p[k] - mx);
            z += q[k];
        }
        for (int k = 0; k < K; ++k) q[k] /= z;
    }
    Var out = t.make(std::move(y), t.requires_grad(x), nullptr);
    t.node(out).backward = [x, out, K, rows](Tape& tp, Tape::Node& n) {
        const Tensor& yv = tp.value(out);
        Tensor g = Tensor::zeros(yv.shape);
        for (int64_t r = 0; r < rows; ++r) {
            const Scalar* yr = yv.data() + r * K;
            const Scalar* gr = n.grad.data() + r * K;
            Scalar dotv = 0;
            for (int k = 0; k < K; ++k) dotv += yr[k] * gr[k];
            Scalar* o = g.data() + r * K;
            for (int k = 0; k < K; ++k) o[k] = (gr[k] - dotv) * yr[k];
        }
        tp.accumulate(x, g);
    };
    return out;
}

Var cosine_rows(Var a, Var b) {
    check_same_tape(a, b, "cosine_rows");
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    check_same_shape(av, bv, "cosine_rows");
    if (av.rank() != 2) throw std::invalid_argument("cosine_rows: want [B,D]");
    int B = av.dim(0), D = av.dim(1);
    Tensor y = Tensor::zeros({B});
    for (int bi = 0; bi < B; ++bi) {
        const Scalar* pa = av.data() + static_cast<int64_t>(bi) * D;
        const Scalar* pb = bv.data() + static_cast<int64_t>(bi) * D;
        Scalar na = 0, nb = 0, d = 0;
        for (int i = 0; i < D; ++i) {
            na += pa[i] * pa[i];
            nb += pb[i] * pb[i];
            d += pa[i] * pb[i];
        }
        if (na == 0 || nb == 0) {
            throw std::invalid_argument("cosine_rows: zero-norm row");
        }
        y.data()[bi] = d / (std::sqrt(na) * std::sqrt(nb));
    }
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    return t.make(std::move(y), rg, [a, b, B, D](Tape& tp, Tape::Node& n) {
        const Tensor& av = tp.value(a);
        const Tensor& bv = tp.value(b);
        Tensor ga = Tensor::zeros(av.shape);
        Tensor gb = Tensor::zeros(bv.shape);
        for (int bi = 0; bi < B; ++bi) {
            const Scalar* pa = av.data() + static_cast<int64_t>(bi) * D;
            const Scalar* pb = bv.data() + static_cast<int64_t>(bi) * D;
            Scalar na2 = 0, nb2 = 0, d = 0;
            for (int i = 0; i < D; ++i) {
                na2 += pa[i] * pa[i];
                nb2 += pb[i] * pb[i];
                d += pa[i] * pb[i];
            }
            Scalar na = std::sqrt(na2), nb = std::sqrt(nb2);
            Scalar cosv = d / (na * nb);
            Scalar g = n.grad.data()[bi];
            Scalar* oa = ga.data() + static_cast<int64_t>(bi) * D;
            Scalar* ob = gb.data() + static_cast<int64_t>(bi) * D;
            for (int i = 0; i < D; ++i) {
                oa[i] = g * (pb[i] / (na * nb) - cosv * pa[i] / na2);
                ob[i] = g * (pa[i] / (na * nb) - cosv * pb[i] / nb2);
            }
        }
        tp.accumulate(a, ga);
        tp.accumulate(b, gb);
    });
}

Var normalize_rows(Var x) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    if (xv.rank() != 2) throw std::invalid_argument("normalize_rows: want [B,D]");
    int B = xv.dim(0), D = xv.dim(1);
    Tensor y = Tensor::zeros(xv.shape);
    for (int bi = 0; bi < B; ++bi) {
        const Scalar* px = xv.data() + static_cast<int64_t>(bi) * D;
        Scalar n2 = 0;
        for (int i = 0; i < D; ++i) n2 += px[i] * px[i];
        if (n2 == 0) throw std::invalid_argument("normalize_rows: zero-norm row");
        Scalar inv = 1.0 / std::sqrt(n2);
        Scalar* py = y.data() + static_cast<int64_t>(bi) * D;
        for (int i = 0; i < D; ++i) py[i] = px[i] * inv;
    }
    return t.make(std::move(y), t.requires_grad(x), [x, B, D](Tape& tp, Tape::Node& n) {
        const Tensor& xv = tp.value(x);
        Tensor gx = Tensor::zeros(xv.shape);
        for (int bi = 0; bi < B; ++bi) {
            const Scalar* px = xv.data() + static_cast<int64_t>(bi) * D;
            const Scalar* pg = n.grad.data() + static_cast<int64_t>(bi) * D;
            Scalar n2 = 0, xg = 0;
            for (int i = 0; i < D; ++i) {
                n2 += px[i] * px[i];
                xg += px[i] * pg[i];
            }
            Scalar inv = 1.0 / std::sqrt(n2);
            Scalar* out = gx.data() + static_cast<int64_t>(bi) * D;
            for (int i = 0; i < D; ++i) {
                out[i] = inv * pg[i] - px[i] * xg * inv * inv * inv;
            }
        }
        tp.accumulate(x, gx);
    });
}

Var ce_mean(Var logits, const std::vector<int>& ids) {
    Tape& t = *logits.tape;
    const Tensor& lv = t.value(logits);
    if (lv.rank() != 2 || lv.dim(0) != static_cast<int>(ids.size())) {
        throw std::invalid_argument("ce_mean: want logits[N,K] with one id per row");
    }
    int N = lv.dim(0), K = lv.dim(1);
    for (int id : ids) {
        if (id < 0 || id >= K) throw std::invalid_argument("ce_mean: class id out of range");
    }
    auto probs = std::make_shared<Tensor>(Tensor::zeros({N, K}));
    Scalar loss = 0;
    for (int r = 0; r < N; ++r) {
        const Scalar* p = lv.data() + static_cast<int64_t>(r) * K;
        Scalar* q = probs->data() + static_cast<int64_t>(r) * K;
        Scalar mx = p[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, p[k]);
        Scalar z = 0;
        for (int k = 0; k < K; ++k) {
            q[k] = std::exp(p[k] - mx);
            z += q[k];
        }
        for (int k = 0; k < K; ++k) q[k] /= z;
        loss += std::log(z) + mx - p[ids[static_cast<size_t>(r)]];
    }
    loss /= static_cast<Scalar>(N);
    return t.make(Tensor::scalar(loss), t.requires_grad(logits),
                  [logits, probs, ids, N, K](Tape& tp, Tape::Node& n) {
                      Scalar g = n.grad.data()[0] / static_cast<Scalar>(N);
                      Tensor gl = Tensor::zeros({N, K});
                      for (int r = 0; r < N; ++r) {
                          const Scalar* q = probs->data() + static_cast<int64_t>(r) * K;
                          Scalar* o = gl.data() + static_cast<int64_t>(r) * K;
                          for (int k = 0; k < K; ++k) o[k] = g * q[k];
                          o[ids[static_cast<size_t>(r)]] -= g;
                      }
                      tp.accumulate(logits, gl);
                  });
}

// ---- normalization ----

Var group_norm(Var x, Var gamma, Var beta, int groups, Scalar eps) {
    check_same_tape(x, gamma, "group_norm");
    check_same_tape(x, beta, "group_norm");
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    if (xv.rank() != 4) throw std::invalid_argument("group_norm: want [B,C,H,W]");
    int B = xv.dim(0), C = xv.dim(1);
    int64_t hw = static_cast<int64_t>(xv.dim(2)) * xv.dim(3);
    if (groups <= 0 || C % groups != 0) {
        throw std::invalid_argument("group_norm: channels not divisible by groups");
    }
    const Tensor& gv = t.value(gamma);
    const Tensor& bv = t.value(beta);
    if (gv.rank() != 1 || gv.dim(0) != C || bv.rank() != 1 || bv.dim(0) != C) {
        throw std::invalid_argument("group_norm: gamma/beta must be [C]");
    }
    int cpg = C / groups;
    int64_t gsize = cpg * hw;
    auto mu = std::make_shared<std::vector<Scalar>>(static_cast<size_t>(B) * groups);
    auto inv = std::make_shared<std::vector<Scalar>>(static_cast<size_t>(B) * groups);
    Tensor y = Tensor::zeros(xv.shape);
    for (int bi = 0; bi < B; ++bi) {
        for (int g = 0; g < groups; ++g) {
            const Scalar* p = xv.data() + (static_cast<int64_t>(bi) * C + g * cpg) * hw;
            Scalar m = 0;
            for (int64_t i = 0; i < gsize; ++i) m += p[i];
            m /= static_cast<Scalar>(gsize);
            Scalar v = 0;
            for (int64_t i = 0; i < gsize; ++i) {
                Scalar d = p[i] - m;
                v += d * d;
            }
            v /= static_cast<Scalar>(gsize);
            Scalar iv = 1.0 / std::sqrt(v + eps);
            (*mu)[static_cast<size_t>(bi) * groups + g] = m;
            (*inv)[static_cast<size_t>(bi) * groups + g] = iv;
            for (int c = 0; c < cpg; ++c) {
                int ch = g * cpg + c;
                const Scalar* px = xv.data() + (static_cast<int64_t>(bi) * C + ch) * hw;
                Scalar* py = y.data() + (static_cast<int64_t>(bi) * C + ch) * hw;
                Scalar ga = gv.data()[ch], be = bv.data()[ch];
                for (int64_t i = 0; i < hw; ++i) py[i] = ga * (px[i] - m) * iv + be;
            }
        }
    }
    bool rg = t.requires_grad(x) || t.requires_grad(gamma) || t.requires_grad(beta);
    return t.make(
        std::move(y), rg,
        [x, gamma, beta, mu, inv, B, C, hw, groups, cpg, gsize](Tape& tp, Tape::Node& n) {
            const Tensor& xv = tp.value(x);
            const Tensor& gv = tp.value(gamma);
            Tensor gx = Tensor::zeros(xv.shape);
            Tensor gg = Tensor::zeros({C});
            Tensor gb = Tensor::zeros({C});
            std::vector<Scalar> xhat(static_cast<size_t>(gsize));
            std::vector<Scalar> dxh(static_cast<size_t>(gsize));
            for (int bi = 0; bi < B; ++bi) {
                for (int g = 0; g < groups; ++g) {
                    Scalar m = (*mu)[static_cast<size_t>(bi) * groups + g];
                    Scalar iv = (*inv)[static_cast<size_t>(bi) * groups + g];
                    Scalar s1 = 0, s2 = 0;
                    for (int c = 0; c < cpg; ++c) {
                        int ch = g * cpg + c;
                        const Scalar* px = xv.data() + (static_cast<int64_t>(bi) * C + ch) * hw;
                        const Scalar* pg = n.grad.data() + (static_cast<int64_t>(bi) * C + ch) * hw;
                        Scalar ga = gv.data()[ch];
                        for (int64_t i = 0; i < hw; ++i) {
                            int64_t k = c * hw + i;
                            xhat[static_cast<size_t>(k)] = (px[i] - m) * iv;
                            dxh[static_cast<size_t>(k)] = pg[i] * ga;
                            s1 += dxh[static_cast<size_t>(k)];
                            s2 += dxh[static_cast<size_t>(k)] * xhat[static_cast<size_t>(k)];
                            gg.data()[ch] += pg[i] * xhat[static_cast<size_t>(k)];
                            gb.data()[ch] += pg[i];
                        }
                    }
                    s1 /= static_cast<Scalar>(gsize);
                    s2 /= static_cast<Scalar>(gsize);
                    for (int c = 0; c < cpg; ++c) {
                        int ch = g * cpg + c;
                        Scalar* po = gx.data() + (static_cast<int64_t>(bi) * C + ch) * hw;
                        for (int64_t i = 0; i < hw; ++i) {
                            int64_t k = c * hw + i;
                            po[i] = iv * (dxh[static_cast<size_t>(k)] - s1 -
                                          xhat[static_cast<size_t>(k)] * s2);
                        }
                    }
                }
            }
            tp.accumulate(x, gx);
            tp.accumulate(gamma, gg);
            tp.accumulate(beta, gb);
        });
}

Var layer_norm(Var x, Var gamma, Var beta, Scalar eps) {
    check_same_tape(x, gamma, "layer_norm");
    check_same_tape(x, beta, "layer_norm");
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    const Tensor& gv = t.value(gamma);
    const Tensor& bv = t.value(beta);
    if (xv.rank() < 1 || gv.rank() != 1 || bv.rank() != 1) {
        throw std::invalid_argument("layer_norm: want x[...,D], gamma[D], beta[D]");
    }
    int D = gv.dim(0);
    if (xv.dim(xv.rank() - 1) != D || bv.dim(0) != D) {
        throw std::invalid_argument("layer_norm: trailing dim mismatch");
    }
    int64_t rows = xv.numel() / D;
    auto mu = std::make_shared<std::vector<Scalar>>(static_cast<size_t>(rows));
    auto inv = std::make_shared<std::vector<Scalar>>(static_cast<size_t>(rows));
    Tensor y = Tensor::zeros(xv.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const Scalar* p = xv.data() + r * D;
        Scalar m = 0;
        for (int i = 0; i < D; ++i) m += p[i];
        m /= D;
        Scalar v = 0;
        for (int i = 0; i < D; ++i) {
            Scalar d = p[i] - m;
            v += d * d;
        }
        v /= D;
        Scalar iv = 1.0 / std::sqrt(v + eps);
        (*mu)[static_cast<size_t>(r)] = m;
        (*inv)[static_cast<size_t>(r)] = iv;
        Scalar* q = y.data() + r * D;
        for (int i = 0; i < D; ++i) q[i] = gv.data()[i] * (p[i] - m) * iv + bv.data()[i];
    }
    bool rg = t.requires_grad(x) || t.requires_grad(gamma) || t.requires_grad(beta);
    return t.make(std::move(y), rg, [x, gamma, beta, mu, inv, D, rows](Tape& tp, Tape::Node& n) {
        const Tensor& xv = tp.value(x);
        const Tensor& gv = tp.value(gamma);
        Tensor gx = Tensor::zeros(xv.shape);
        Tensor gg = Tensor::zeros({D});
        Tensor gb = Tensor::zeros({D});
        for (int64_t r = 0; r < rows; ++r) {
            const Scalar* p = xv.data() + r * D;
            const Scalar* pg = n.grad.data() + r * D;
            Scalar m = (*mu)[static_cast<size_t>(r)];
            Scalar iv = (*inv)[static_cast<size_t>(r)];
            Scalar s1 = 0, s2 = 0;
            for (int i = 0; i < D; ++i) {
                Scalar xh = (p[i] - m) * iv;
                Scalar dh = pg[i] * gv.data()[i];
                s1 += dh;
                s2 += dh * xh;
                gg.data()[i] += pg[i] * xh;
                gb.data()[i] += pg[i];
            }
            s1 /= D;
            s2 /= D;
            Scalar* o = gx.data() + r * D;
            for (int i = 0; i < D; ++i) {
                Scalar xh = (p[i] - m) * iv;
                Scalar dh = pg[i] * gv.data()[i];
                o[i] = iv * (dh - s1 - xh * s2);
            }
        }
        tp.accumulate(x, gx);
        tp.accumulate(gamma, gg);
        tp.accumulate(beta, gb);
    });
}

// ---- spatial ----

namespace {

void im2col(const Scalar* img, int C, int H, int W, int kh, int kw, int stride, int pad, int OH,
            int OW, Scalar* col) {
    // col layout: [C*kh*kw, OH*OW]
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                Scalar* row = col + ((static_cast<int64_t>(c) * kh + ky) * kw + kx) *
                                        (static_cast<int64_t>(OH) * OW);
                for (int oy = 0; oy < OH; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) {
                        std::memset(row + static_cast<int64_t>(oy) * OW, 0, sizeof(Scalar) * OW);
                        continue;
                    }
                    const Scalar* src = img + (static_cast<int64_t>(c) * H + iy) * W;
                    for (int ox = 0; ox < OW; ++ox) {
                        int ix = ox * stride - pad + kx;
                        row[static_cast<int64_t>(oy) * OW + ox] =
                            (ix >= 0 && ix < W) ? src[ix] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_add(const Scalar* col, int C, int H, int W, int kh, int kw, int stride, int pad,
                int OH, int OW, Scalar* img) {
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const Scalar* row = col + ((static_cast<int64_t>(c) * kh + ky) * kw + kx) *
                                              (static_cast<int64_t>(OH) * OW);
                for (int oy = 0; oy < OH; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    Scalar* dst = img + (static_cast<int64_t>(c) * H + iy) * W;
                    for (int ox = 0; ox < OW; ++ox) {
                        int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < W) dst[ix] += row[static_cast<int64_t>(oy) * OW + ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Var conv2d(Var x, Var w, Var bias, int stride, int pad) {
    check_same_tape(x, w, "conv2d");
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    const Tensor& wv = t.value(w);
    if (xv.rank() != 4 || wv.rank() != 4 || xv.dim(1) != wv.dim(1)) {
        throw std::invalid_argument("conv2d: want x[B,C,H,W], w[O,C,kh,kw]");
    }
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    int O = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    int OH = (H + 2 * pad - kh) / stride + 1;
    int OW = (W + 2 * pad - kw) / stride + 1;
    if (OH < 1 || OW < 1) throw std::invalid_argument("conv2d: output would be empty");
    int K = C * kh * kw;
    int64_t P = static_cast<int64_t>(OH) * OW;
    bool has_bias = bias.valid();
    if (has_bias) {
        check_same_tape(x, bias, "conv2d");
        const Tensor& bv = t.value(bias);
        if (bv.rank() != 1 || bv.dim(0) != O) {
            throw std::invalid_argument("conv2d: bias must be [O]");
        }
    }
    Tensor y = Tensor::zeros({B, O, OH, OW});
    std::vector<Scalar> col(static_cast<size_t>(K) * P);
    for (int bi = 0; bi < B; ++bi) {
        im2col(xv.data() + static_cast<int64_t>(bi) * C * H * W, C, H, W, kh, kw, stride, pad, OH,
               OW, col.data());
        gemm(false, false, O, static_cast<int>(P), K, 1.0, wv.data(), K, col.data(),
             static_cast<int>(P), 0.0, y.data() + static_cast<int64_t>(bi) * O * P,
             static_cast<int>(P));
        if (has_bias) {
            const Tensor& bv = t.value(bias);
            for (int o = 0; o < O; ++o) {
                Scalar* p = y.data() + (static_cast<int64_t>(bi) * O + o) * P;
                Scalar bval = bv.data()[o];
                for (int64_t i = 0; i < P; ++i) p[i] += bval;
            }
        }
    }
    bool rg = t.requires_grad(x) || t.requires_grad(w) || (has_bias && t.requires_grad(bias));
    return t.make(std::move(y), rg,
                  [x, w, bias, has_bias, stride, pad, B, C, H, W, O, kh, kw, OH, OW, K,
                   P](Tape& tp, Tape::Node& n) {
                      const Tensor& xv = tp.value(x);
                      const Tensor& wv = tp.value(w);
                      bool need_x = tp.requires_grad(x);
                      bool need_w = tp.requires_grad(w);
                      Tensor gx = need_x ? Tensor::zeros(xv.shape) : Tensor();
                      Tensor gw = need_w ? Tensor::zeros(wv.shape) : Tensor();
                      std::vector<Scalar> col(static_cast<size_t>(K) * P);
                      std::vector<Scalar> dcol(need_x ? static_cast<size_t>(K) * P : 0);
                      for (int bi = 0; bi < B; ++bi) {
                          const Scalar* gy = n.grad.data() + static_cast<int64_t>(bi) * O * P;
                          if (need_w) {
                              // im2col is recomputed here rather than cached from the
                              // forward pass to keep peak memory bounded.
                              im2col(xv.data() + static_cast<int64_t>(bi) * C * H * W, C, H, W,
                                     kh, kw, stride, pad, OH, OW, col.data());
                              gemm(false, true, O, K, static_cast<int>(P), 1.0, gy,
                                   static_cast<int>(P), col.data(), static_cast<int>(P), 1.0,
                                   gw.data(), K);
                          }
                          if (need_x) {
                              gemm(true, false, K, static_cast<int>(P), O, 1.0, wv.data(), K, gy,
                                   static_cast<int>(P), 0.0, dcol.data(), static_cast<int>(P));
                              col2im_add(dcol.data(), C, H, W, kh, kw, stride, pad, OH, OW,
                                         gx.data() + static_cast<int64_t>(bi) * C * H * W);
                          }
                      }
                      if (need_x) tp.accumulate(x, gx);
                      if (need_w) tp.accumulate(w, gw);
                      if (has_bias && tp.requires_grad(bias)) {
                          Tensor gb = Tensor::zeros({O});
                          for (int bi = 0; bi < B; ++bi) {
                              for (int o = 0; o < O; ++o) {
                                  const Scalar* p =
                                      n.grad.data() + (static_cast<int64_t>(bi) * O + o) * P;
                                  Scalar s = 0;
                                  for (int64_t i = 0; i < P; ++i) s += p[i];
                                  gb.data()[o] += s;
                              }
                          }
                          tp.accumulate(bias, gb);
                      }
                  });
}

Var upsample_nearest2(Var x) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    if (xv.rank() != 4) throw std::invalid_argument("upsample_nearest2: want [B,C,H,W]");
    int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    Tensor y = Tensor::zeros({B, C, 2 * H, 2 * W});
    for (int bc = 0; bc < B * C; ++bc) {
        const Scalar* src = xv.data() + static_cast<int64_t>(bc) * H * W;
        Scalar* dst = y.data() + static_cast<int64_t>(bc) * 4 * H * W;
        for (int yy = 0; yy < 2 * H; ++yy) {
            const Scalar* row = src + static_cast<int64_t>(yy / 2) * W;
            Scalar* orow = dst + static_cast<int64_t>(yy) * 2 * W;
            for (int xx = 0; xx < 2 * W; ++xx) orow[xx] = row[xx / 2];
        }
    }
    return t.make(std::move(y), t.requires_grad(x), [x, B, C, H, W](Tape& tp, Tape::Node& n) {
        Tensor g = Tensor::zeros({B, C, H, W});
        for (int bc = 0; bc < B * C; ++bc) {
            const Scalar* src = n.grad.data() + static_cast<int64_t>(bc) * 4 * H * W;
            Scalar* dst = g.data() + static_cast<int64_t>(bc) * H * W;
            for (int yy = 0; yy < 2 * H; ++yy) {
                const Scalar* row = src + static_cast<int64_t>(yy) * 2 * W;
                Scalar* orow = dst + static_cast<int64_t>(yy / 2) * W;
                for (int xx = 0; xx < 2 * W; ++xx) orow[xx / 2] += row[xx];
            }
        }
        tp.accumulate(x, g);
    });
}

namespace {

// Separable zero-padded correlation along W then H for a stack of [H,W] planes.
void blur_planes(const Scalar* src, int N, int H, int W, const std::vector<Scalar>& k,
                 Scalar* dst, std::vector<Scalar>& tmp) {
    int half = static_cast<int>(k.size()) / 2;
    tmp.resize(static_cast<size_t>(H) * W);
    for (int p = 0; p < N; ++p) {
        const Scalar* in = src + static_cast<int64_t>(p) * H * W;
        Scalar* out = dst + static_cast<int64_t>(p) * H * W;
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                Scalar s = 0;
                for (int i = 0; i < static_cast<int>(k.size()); ++i) {
                    int xx = x + i - half;
                    if (xx >= 0 && xx < W) s += k[static_cast<size_t>(i)] * in[y * W + xx];
                }
                tmp[static_cast<size_t>(y) * W + x] = s;
            }
        }
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                Scalar s = 0;
                for (int i = 0; i < static_cast<int>(k.size()); ++i) {
                    int yy = y + i - half;
                    if (yy >= 0 && yy < H) s += k[static_cast<size_t>(i)] * tmp[yy * W + x];
                }
                out[y * W + x] = s;
            }
        }
    }
}

}  // namespace

Var blur_hw(Var x, const std::vector<Scalar>& k1d) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    if (xv.rank() != 3) throw std::invalid_argument("blur_hw: want [N,H,W]");
    if (k1d.empty() || k1d.size() % 2 == 0) {
        throw std::invalid_argument("blur_hw: kernel length must be odd");
    }
    int N = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    Tensor y = Tensor::zeros(xv.shape);
    std::vector<Scalar> tmp;
    blur_planes(xv.data(), N, H, W, k1d, y.data(), tmp);
    return t.make(std::move(y), t.requires_grad(x),
                  [x, k1d, N, H, W](Tape& tp, Tape::Node& n) {
                      // Adjoint of zero-padded correlation is correlation with the
                      // reversed kernel.
                      std::vector<Scalar> kr(k1d.rbegin(), k1d.rend());
                      Tensor g = Tensor::zeros({N, H, W});
                      std::vector<Scalar> tmp;
                      blur_planes(n.grad.data(), N, H, W, kr, g.data(), tmp);
                      tp.accumulate(x, g);
                  });
}

Var bilinear_resize(Var x, int oh, int ow) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    if (xv.rank() != 4) throw std::invalid_argument("bilinear_resize: want [B,C,H,W]");
    if (oh < 1 || ow < 1) throw std::invalid_argument("bilinear_resize: bad output size");
    int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    // Half-pixel sampling grid, clamped at borders.
    auto taps = [](int out, int in, std::vector<int>& i0, std::vector<int>& i1,
                   std::vector<Scalar>& f) {
        i0.resize(static_cast<size_t>(out));
        i1.resize(static_cast<size_t>(out));
        f.resize(static_cast<size_t>(out));
        for (int o = 0; o < out; ++o) {
            Scalar s = (o + 0.5) * static_cast<Scalar>(in) / out - 0.5;
            s = std::max<Scalar>(0.0, std::min<Scalar>(s, in - 1));
            int lo = static_cast<int>(std::floor(s));
            int hi = std::min(lo + 1, in - 1);
            i0[static_cast<size_t>(o)] = lo;
            i1[static_cast<size_t>(o)] = hi;
            f[static_cast<size_t>(o)] = s - lo;
        }
    };
    std::vector<int> y0, y1, x0, x1;
    std::vector<Scalar> fy, fx;
    taps(oh, H, y0, y1, fy);
    taps(ow, W, x0, x1, fx);
    Tensor y = Tensor::zeros({B, C, oh, ow});
    for (int bc = 0; bc < B * C; ++bc) {
        const Scalar* src = xv.data() + static_cast<int64_t>(bc) * H * W;
        Scalar* dst = y.data() + static_cast<int64_t>(bc) * oh * ow;
        for (int yy = 0; yy < oh; ++yy) {
            const Scalar* r0 = src + static_cast<int64_t>(y0[static_cast<size_t>(yy)]) * W;
            const Scalar* r1 = src + static_cast<int64_t>(y1[static_cast<size_t>(yy)]) * W;
            Scalar wy = fy[static_cast<size_t>(yy)];
            for (int xx = 0; xx < ow; ++xx) {
                Scalar wx = fx[static_cast<size_t>(xx)];
                int a = x0[static_cast<size_t>(xx)], b = x1[static_cast<size_t>(xx)];
                Scalar top = r0[a] * (1 - wx) + r0[b] * wx;
                Scalar bot = r1[a] * (1 - wx) + r1[b] * wx;
                dst[static_cast<int64_t>(yy) * ow + xx] = top * (1 - wy) + bot * wy;
            }
        }
    }
    return t.make(std::move(y), t.requires_grad(x),
                  [x, B, C, H, W, oh, ow, y0, y1, x0, x1, fy, fx](Tape& tp, Tape::Node& n) {
                      Tensor g = Tensor::zeros({B, C, H, W});
                      for (int bc = 0; bc < B * C; ++bc) {
                          const Scalar* src = n.grad.data() + static_cast<int64_t>(bc) * oh * ow;
                          Scalar* dst = g.data() + static_cast<int64_t>(bc) * H * W;
                          for (int yy = 0; yy < oh; ++yy) {
                              Scalar wy = fy[static_cast<size_t>(yy)];
                              int ra = y0[static_cast<size_t>(yy)], rb = y1[static_cast<size_t>(yy)];
                              for (int xx = 0; xx < ow; ++xx) {
                                  Scalar wx = fx[static_cast<size_t>(xx)];
                                  int ca = x0[static_cast<size_t>(xx)], cb = x1[static_cast<size_t>(xx)];
                                  Scalar gv = src[static_cast<int64_t>(yy) * ow + xx];
                                  dst[static_cast<int64_t>(ra) * W + ca] += gv * (1 - wy) * (1 - wx);
                                  dst[static_cast<int64_t>(ra) * W + cb] += gv * (1 - wy) * wx;
                                  dst[static_cast<int64_t>(rb) * W + ca] += gv * wy * (1 - wx);
                                  dst[static_cast<int64_t>(rb) * W + cb] += gv * wy * wx;
                              }
                          }
                      }
                      tp.accumulate(x, g);
                  });
}

Var embedding_rows(Var table, const std::vector<int>& ids) {
    Tape& t = *table.tape;
    const Tensor& tv = t.value(table);
    if (tv.rank() != 2) throw std::invalid_argument("embedding_rows: want table[V,D]");
    int V = tv.dim(0), D = tv.dim(1);
    for (int id : ids) {
        if (id < 0 || id >= V) throw std::invalid_argument("embedding_rows: id out of range");
    }
    int N = static_cast<int>(ids.size());
    Tensor y = Tensor::zeros({N, D});
    for (int i = 0; i < N; ++i) {
        std::memcpy(y.data() + static_cast<int64_t>(i) * D,
                    tv.data() + static_cast<int64_t>(ids[static_cast<size_t>(i)]) * D,
                    sizeof(Scalar) * D);
    }
    return t.make(std::move(y), t.requires_grad(table),
                  [table, ids, V, D, N](Tape& tp, Tape::Node& n) {
                      Tensor g = Tensor::zeros({V, D});
                      for (int i = 0; i < N; ++i) {
                          axpy(1.0, n.grad.data() + static_cast<int64_t>(i) * D,
                               g.data() + static_cast<int64_t>(ids[static_cast<size_t>(i)]) * D, D);
                      }
                      tp.accumulate(table, g);
                  });
}

}  // namespace glyphdiff

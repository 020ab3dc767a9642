#ifndef GLYPHDIFF_TENSOR_HPP
#define GLYPHDIFF_TENSOR_HPP

#include <cstdint>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace glyphdiff {

using Scalar = double;

// Dense row-major tensor. Copies are shallow (shared buffer); use clone()
// before mutating anything that may be aliased.
struct Tensor {
    std::vector<int> shape;
    std::shared_ptr<std::vector<Scalar>> buf;

    Tensor() : buf(std::make_shared<std::vector<Scalar>>()) {}
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        buf = std::make_shared<std::vector<Scalar>>(static_cast<size_t>(count(shape)), Scalar(0));
    }

    static int64_t count(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            if (d < 0) throw std::invalid_argument("tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, Scalar v) {
        Tensor t(std::move(s));
        std::fill(t.buf->begin(), t.buf->end(), v);
        return t;
    }
    static Tensor scalar(Scalar v) { return full({1}, v); }
    static Tensor from(std::vector<int> s, std::vector<Scalar> v) {
        if (count(s) != static_cast<int64_t>(v.size()))
            throw std::invalid_argument("tensor: data size does not match shape");
        Tensor t;
        t.shape = std::move(s);
        t.buf = std::make_shared<std::vector<Scalar>>(std::move(v));
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(buf->size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    Scalar* data() { return buf->data(); }
    const Scalar* data() const { return buf->data(); }
    Scalar& operator[](int64_t i) { return (*buf)[static_cast<size_t>(i)]; }
    Scalar operator[](int64_t i) const { return (*buf)[static_cast<size_t>(i)]; }

    Scalar& at(int i, int j) { return (*buf)[static_cast<size_t>(i) * shape[1] + j]; }
    const Scalar& at(int i, int j) const { return (*buf)[static_cast<size_t>(i) * shape[1] + j]; }
    Scalar& at(int i, int j, int k) {
        return (*buf)[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    const Scalar& at(int i, int j, int k) const {
        return (*buf)[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    Scalar& at(int i, int j, int k, int l) {
        return (*buf)[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }
    const Scalar& at(int i, int j, int k, int l) const {
        return (*buf)[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }

    // Shallow reshape; element count must match.
    Tensor reshaped(std::vector<int> s) const {
        if (count(s) != numel()) throw std::invalid_argument("reshape: element count mismatch");
        Tensor t;
        t.shape = std::move(s);
        t.buf = buf;
        return t;
    }

    Tensor clone() const {
        Tensor t;
        t.shape = shape;
        t.buf = std::make_shared<std::vector<Scalar>>(*buf);
        return t;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    std::string shape_str() const {
        std::string s = "[";
        for (size_t i = 0; i < shape.size(); i++) s += (i ? "," : "") + std::to_string(shape[i]);
        return s + "]";
    }
};

// Deterministic RNG. Box-Muller is hand-rolled so streams are identical
// across standard library implementations.
struct Rng {
    std::mt19937_64 gen;
    bool has_spare = false;
    double spare = 0.0;

    explicit Rng(uint64_t seed = 0) : gen(seed) {}

    double uniform() {  // [0,1)
        return (gen() >> 11) * (1.0 / 9007199254740992.0);
    }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal() {
        if (has_spare) {
            has_spare = false;
            return spare;
        }
        double u1 = 0.0, u2 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 1e-300);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925287 * u2;
        spare = r * std::sin(a);
        has_spare = true;
        return r * std::cos(a);
    }
    // Uniform integer in [0, n).
    int64_t randint(int64_t n) {
        return static_cast<int64_t>(uniform() * static_cast<double>(n)) % n;
    }
    void fill_normal(Tensor& t, double std_dev = 1.0, double mean = 0.0) {
        for (int64_t i = 0; i < t.numel(); i++) t[i] = mean + std_dev * normal();
    }
};

// FNV-1a over raw tensor bytes; used for freeze checks and config hashes.
uint64_t fnv1a(const void* data, size_t n, uint64_t h = 1469598103934665603ull);
uint64_t hash_tensors(const std::vector<const Tensor*>& ts);
std::string hash_hex(uint64_t h);

// Row-major GEMM on raw buffers: C = alpha*op(A)*op(B) + beta*C.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, Scalar alpha, const Scalar* a, int lda,
          const Scalar* b, int ldb, Scalar beta, Scalar* c, int ldc);

}  // namespace glyphdiff

#endif  // GLYPHDIFF_TENSOR_HPP

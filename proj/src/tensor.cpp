#include "glyphdiff/tensor.hpp"

#include <cblas.h>

#include <cmath>
#include <cstring>

namespace glyphdiff {

uint64_t fnv1a(const void* data, size_t n, uint64_t h) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; i++) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

uint64_t hash_tensors(const std::vector<const Tensor*>& ts) {
    uint64_t h = 1469598103934665603ull;
    for (const Tensor* t : ts) {
        for (int d : t->shape) h = fnv1a(&d, sizeof(d), h);
        h = fnv1a(t->data(), static_cast<size_t>(t->numel()) * sizeof(Scalar), h);
    }
    return h;
}

std::string hash_hex(uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; i--) {
        s[static_cast<size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return s;
}

void gemm(bool trans_a, bool trans_b, int m, int n, int k, Scalar alpha, const Scalar* a, int lda,
          const Scalar* b, int ldb, Scalar beta, Scalar* c, int ldc) {
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

}  // namespace glyphdiff

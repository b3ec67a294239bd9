#pragma once

#include <cstddef>

#ifdef EEGDG_HAVE_OPENBLAS
#include <cblas.h>
extern "C" void openblas_set_num_threads(int);
#endif

namespace eegdg {

#ifdef EEGDG_HAVE_OPENBLAS
namespace detail {
// OpenBLAS must stay single-threaded: the harness parallelizes at run level
// and gradient accumulation order must be fixed.
inline bool pin_blas_threads() {
    openblas_set_num_threads(1);
    return true;
}
inline const bool blas_threads_pinned = pin_blas_threads();
}  // namespace detail

// Row-major C[m,n] = alpha * op(A) * op(B) + beta * C.
inline void gemm(bool ta, bool tb, int m, int n, int k, float alpha,
                 const float* a, int lda, const float* b, int ldb, float beta,
                 float* c, int ldc) {
    (void)detail::blas_threads_pinned;
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
                tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
                beta, c, ldc);
}

inline void gemm(bool ta, bool tb, int m, int n, int k, double alpha,
                 const double* a, int lda, const double* b, int ldb,
                 double beta, double* c, int ldc) {
    (void)detail::blas_threads_pinned;
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
                tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
                beta, c, ldc);
}

#else  // reference path

template <typename T>
void gemm(bool ta, bool tb, int m, int n, int k, T alpha, const T* a, int lda,
          const T* b, int ldb, T beta, T* c, int ldc) {
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            T acc = 0;
            for (int l = 0; l < k; ++l) {
                T av = ta ? a[static_cast<std::size_t>(l) * lda + i]
                          : a[static_cast<std::size_t>(i) * lda + l];
                T bv = tb ? b[static_cast<std::size_t>(j) * ldb + l]
                          : b[static_cast<std::size_t>(l) * ldb + j];
                acc += av * bv;
            }
            T* out = &c[static_cast<std::size_t>(i) * ldc + j];
            *out = alpha * acc + beta * *out;
        }
    }
}

#endif

}  // namespace eegdg

// SPDX-License-Identifier: Apache-2.0
//
// Dense float kernels, OpenMP-parallel over independent output rows.
//
// Determinism contract: every output element is produced by exactly one
// thread with a fixed inner-loop order, so results are bit-identical for any
// thread count. No atomics, no thread-order-dependent reductions. SIMD
// reductions (omp simd) fix their association at compile time, which keeps
// run-to-run determinism on a given build.
//
// Serial reference implementations live in kernels_ref.hpp and are kept for
// testing and for the kernel benchmark.

#pragma once

#include <cmath>
#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace gemma::kernels {

// c[m,n] += a[m,k] * b[k,n]
// k-unrolled by 4 to reuse the c row; per-element accumulation stays in
// ascending-k order, matching the serial reference bit for bit.
template <class T>
void gemm(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) {
        const T* ai = a + i * k;
        T* ci = c + i * n;
        const int64_t k4 = k & ~int64_t{3};
        for (int64_t p = 0; p < k4; p += 4) {
            const T a0 = ai[p + 0];
            const T a1 = ai[p + 1];
            const T a2 = ai[p + 2];
            const T a3 = ai[p + 3];
            const T* b0 = b + (p + 0) * n;
            const T* b1 = b + (p + 1) * n;
            const T* b2 = b + (p + 2) * n;
            const T* b3 = b + (p + 3) * n;
#pragma omp simd
            for (int64_t j = 0; j < n; ++j) {
                T x = ci[j];
                x += a0 * b0[j];
                x += a1 * b1[j];
                x += a2 * b2[j];
                x += a3 * b3[j];
                ci[j] = x;
            }
        }
        for (int64_t p = k4; p < k; ++p) {
            const T ap = ai[p];
            const T* bp = b + p * n;
#pragma omp simd
            for (int64_t j = 0; j < n; ++j) {
                ci[j] += ap * bp[j];
            }
        }
    }
}

// c[m,n] += a[m,k] * bt[n,k]^T   (bt stored row-major as [n,k])
// Row i of c is n dot products against rows of bt.
template <class T>
void gemm_nt(const T* a, const T* bt, T* c, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) {
        const T* ai = a + i * k;
        T* ci = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const T* bj = bt + j * k;
            T sum{};
#pragma omp simd reduction(+ : sum)
            for (int64_t p = 0; p < k; ++p) {
                sum += ai[p] * bj[p];
            }
            ci[j] += sum;
        }
    }
}

// c[k,n] += a[m,k]^T * b[m,n]
// Parallel over output rows; the strided column walk over `a` is fine at the
// matrix sizes this model uses.
template <class T>
void gemm_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < k; ++r) {
        T* cr = c + r * n;
        for (int64_t i = 0; i < m; ++i) {
            const T av = a[i * k + r];
            const T* bi = b + i * n;
#pragma omp simd
            for (int64_t j = 0; j < n; ++j) {
                cr[j] += av * bi[j];
            }
        }
    }
}

template <class T>
inline T dot(const T* a, const T* b, int64_t n) {
    T sum{};
#pragma omp simd reduction(+ : sum)
    for (int64_t i = 0; i < n; ++i) {
        sum += a[i] * b[i];
    }
    return sum;
}

// In-place stable softmax over one row. Returns log(sum(exp(x - max))) + max,
// i.e. the log-partition, which cross-entropy reuses.
template <class T>
T softmax_row(T* x, int64_t n) {
    T mx = x[0];
    for (int64_t i = 1; i < n; ++i) {
        if (x[i] > mx) mx = x[i];
    }
    T sum{};
    for (int64_t i = 0; i < n; ++i) {
        x[i] = std::exp(x[i] - mx);
        sum += x[i];
    }
    const T inv = T{1} / sum;
    for (int64_t i = 0; i < n; ++i) {
        x[i] *= inv;
    }
    return std::log(sum) + mx;
}

// log(sum(exp(row))) without materializing the softmax
template <class T>
T log_sum_exp(const T* x, int64_t n) {
    T mx = x[0];
    for (int64_t i = 1; i < n; ++i) {
        if (x[i] > mx) mx = x[i];
    }
    T sum{};
    for (int64_t i = 0; i < n; ++i) {
        sum += std::exp(x[i] - mx);
    }
    return std::log(sum) + mx;
}

inline int thread_count() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

inline void set_thread_count(int n) {
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

}  // namespace gemma::kernels

// SPDX-License-Identifier: Apache-2.0
//
// Naive serial reference kernels. These are the correctness oracles for the
// OpenMP kernels in kernels.hpp and one side of the kernel benchmark. Loop
// orders are chosen so gemm/gemm_tn accumulate each output element in the
// same order as the parallel kernels (bit-identical results); gemm_nt uses a
// plain sequential dot, so it matches only within rounding.

#pragma once

#include <cstdint>

namespace gemma::ref {

// c[m,n] += a[m,k] * b[k,n]
template <class T>
void gemm(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t p = 0; p < k; ++p) {
            const T ap = a[i * k + p];
            for (int64_t j = 0; j < n; ++j) {
                c[i * n + j] += ap * b[p * n + j];
            }
        }
    }
}

// c[m,n] += a[m,k] * bt[n,k]^T
template <class T>
void gemm_nt(const T* a, const T* bt, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            T sum{};
            for (int64_t p = 0; p < k; ++p) {
                sum += a[i * k + p] * bt[j * k + p];
            }
            c[i * n + j] += sum;
        }
    }
}

// c[k,n] += a[m,k]^T * b[m,n]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t r = 0; r < k; ++r) {
            const T av = a[i * k + r];
            for (int64_t j = 0; j < n; ++j) {
                c[r * n + j] += av * b[i * n + j];
            }
        }
    }
}

}  // namespace gemma::ref

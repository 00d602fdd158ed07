// SPDX-License-Identifier: Apache-2.0
//
// Differentiable ops over Tensor<T>. Each op validates shapes, runs its
// forward kernel, and registers a backward closure that accumulates into the
// inputs' grad buffers. Backward math is checked against finite differences
// in the test suite.

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "gemma/error.hpp"
#include "gemma/kernels.hpp"
#include "gemma/tensor.hpp"

namespace gemma::ops {

template <class T>
std::string shape_str(const std::vector<int64_t>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) out += ", ";
    }
    return out + "]";
}

// ---------------------------------------------------------------------------
// matmul: [m,k] x [k,n] -> [m,n]
// dA += dC * B^T, dB += A^T * dC
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError(str_cat("matmul: incompatible shapes ", shape_str<T>(a.shape()),
                                 " x ", shape_str<T>(b.shape())));
    }
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto out = Tensor<T>::make_op_result(
        {m, n}, {a, b}, [a, b, m, k, n](TensorNode<T>& self) {
            if (a.requires_grad()) {
                kernels::gemm_nt(self.grad.data(), b.data().data(),
                                 a.node()->grad.data(), m, n, k);
            }
            if (b.requires_grad()) {
                kernels::gemm_tn(a.data().data(), self.grad.data(),
                                 b.node()->grad.data(), m, k, n);
            }
        });
    kernels::gemm(a.data().data(), b.data().data(), out.data().data(), m, k, n);
    return out;
}

// ---------------------------------------------------------------------------
// matmul_nt: [m,k] x [n,k]^T -> [m,n]; used for the tied unembedding where
// the weight is stored as the [vocab, d_model] embedding table.
// dA += dC * B, dB += dC^T * A
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& bt) {
    if (a.ndim() != 2 || bt.ndim() != 2 || a.dim(1) != bt.dim(1)) {
        throw ShapeError(str_cat("matmul_nt: incompatible shapes ", shape_str<T>(a.shape()),
                                 " x ", shape_str<T>(bt.shape()), "^T"));
    }
    const int64_t m = a.dim(0), k = a.dim(1), n = bt.dim(0);
    auto out = Tensor<T>::make_op_result(
        {m, n}, {a, bt}, [a, bt, m, k, n](TensorNode<T>& self) {
            if (a.requires_grad()) {
                kernels::gemm(self.grad.data(), bt.data().data(),
                              a.node()->grad.data(), m, n, k);
            }
            if (bt.requires_grad()) {
                kernels::gemm_tn(self.grad.data(), a.data().data(),
                                 bt.node()->grad.data(), m, n, k);
            }
        });
    kernels::gemm_nt(a.data().data(), bt.data().data(), out.data().data(), m, k, n);
    return out;
}

// ---------------------------------------------------------------------------
// add (same shape, used for residual connections)
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(str_cat("add: shape mismatch ", shape_str<T>(a.shape()), " vs ",
                                 shape_str<T>(b.shape())));
    }
    auto out = Tensor<T>::make_op_result(a.shape(), {a, b}, [a, b](TensorNode<T>& self) {
        const int64_t n = static_cast<int64_t>(self.grad.size());
        if (a.requires_grad()) {
            T* ga = a.node()->grad.data();
            for (int64_t i = 0; i < n; ++i) ga[i] += self.grad[i];
        }
        if (b.requires_grad()) {
            T* gb = b.node()->grad.data();
            for (int64_t i = 0; i < n; ++i) gb[i] += self.grad[i];
        }
    });
    const int64_t n = out.numel();
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* po = out.data().data();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    return out;
}

// ---------------------------------------------------------------------------
// scale by a compile-time constant factor
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    auto out = Tensor<T>::make_op_result(x.shape(), {x}, [x, factor](TensorNode<T>& self) {
        if (!x.requires_grad()) return;
        T* gx = x.node()->grad.data();
        const int64_t n = static_cast<int64_t>(self.grad.size());
        for (int64_t i = 0; i < n; ++i) gx[i] += factor * self.grad[i];
    });
    const int64_t n = out.numel();
    const T* px = x.data().data();
    T* po = out.data().data();
    for (int64_t i = 0; i < n; ++i) po[i] = factor * px[i];
    return out;
}

// ---------------------------------------------------------------------------
// soft_cap: cap * tanh(x / cap); odd, strictly monotone, |y| < cap,
// unit slope at the origin. d/dx = 1 - (y/cap)^2.
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> soft_cap(const Tensor<T>& x, T cap) {
    if (!(cap > T{0})) {
        throw InvalidParamError(str_cat("soft_cap: cap must be positive, got ", cap));
    }
    auto out = Tensor<T>::make_op_result(x.shape(), {x}, [x, cap](TensorNode<T>& self) {
        if (!x.requires_grad()) return;
        T* gx = x.node()->grad.data();
        const T* y = self.data.data();
        const int64_t n = static_cast<int64_t>(self.grad.size());
        for (int64_t i = 0; i < n; ++i) {
            const T th = y[i] / cap;
            gx[i] += self.grad[i] * (T{1} - th * th);
        }
    });
    const int64_t n = out.numel();
    const T* px = x.data().data();
    T* po = out.data().data();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) po[i] = cap * std::tanh(px[i] / cap);
    return out;
}

// ---------------------------------------------------------------------------
// rms_norm over the last dimension:
//   y = x / sqrt(mean(x^2) + eps) * (1 + w)
// Gain convention: weight 0 is the neutral gain.
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& w, T eps) {
    const int64_t d = x.shape().back();
    if (w.ndim() != 1 || w.dim(0) != d) {
        throw ShapeError(str_cat("rms_norm: weight shape ", shape_str<T>(w.shape()),
                                 " does not match last dim ", d, " of ",
                                 shape_str<T>(x.shape())));
    }
    const int64_t rows = x.numel() / d;
    auto out = Tensor<T>::make_op_result(
        x.shape(), {x, w}, [x, w, rows, d, eps](TensorNode<T>& self) {
            const T* px = x.data().data();
            const T* pw = w.data().data();
            const T* g = self.grad.data();
            for (int64_t r = 0; r < rows; ++r) {
                const T* xr = px + r * d;
                const T* gr = g + r * d;
                T ms{};
                for (int64_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
                ms = ms / static_cast<T>(d) + eps;
                const T inv = T{1} / std::sqrt(ms);
                if (x.requires_grad()) {
                    // dx_j = inv*(1+w_j)*g_j - inv^3/d * x_j * sum_l g_l*(1+w_l)*x_l
                    T dotgx{};
                    for (int64_t l = 0; l < d; ++l) {
                        dotgx += gr[l] * (T{1} + pw[l]) * xr[l];
                    }
                    T* gx = x.node()->grad.data() + r * d;
                    const T c = inv * inv * inv * dotgx / static_cast<T>(d);
                    for (int64_t j = 0; j < d; ++j) {
                        gx[j] += inv * (T{1} + pw[j]) * gr[j] - c * xr[j];
                    }
                }
                if (w.requires_grad()) {
                    T* gw = w.node()->grad.data();
                    for (int64_t j = 0; j < d; ++j) {
                        gw[j] += gr[j] * xr[j] * inv;
                    }
                }
            }
        });
    const T* px = x.data().data();
    const T* pw = w.data().data();
    T* po = out.data().data();
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = px + r * d;
        T* orow = po + r * d;
        T ms{};
        for (int64_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
        ms = ms / static_cast<T>(d) + eps;
        const T inv = T{1} / std::sqrt(ms);
        for (int64_t j = 0; j < d; ++j) {
            orow[j] = xr[j] * inv * (T{1} + pw[j]);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// GeGLU with tanh-approximated GELU:
//   gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
//   out = gelu(gate) * lin
// ---------------------------------------------------------------------------
namespace detail {
template <class T>
inline T gelu_tanh(T x) {
    const T c = T{0.7978845608028654};  // sqrt(2/pi)
    const T u = c * (x + T{0.044715} * x * x * x);
    return T{0.5} * x * (T{1} + std::tanh(u));
}

template <class T>
inline T gelu_tanh_deriv(T x) {
    const T c = T{0.7978845608028654};
    const T u = c * (x + T{0.044715} * x * x * x);
    const T t = std::tanh(u);
    const T du = c * (T{1} + T{3} * T{0.044715} * x * x);
    return T{0.5} * (T{1} + t) + T{0.5} * x * (T{1} - t * t) * du;
}
}  // namespace detail

template <class T>
Tensor<T> geglu(const Tensor<T>& gate, const Tensor<T>& lin) {
    if (gate.shape() != lin.shape()) {
        throw ShapeError(str_cat("geglu: gate shape ", shape_str<T>(gate.shape()),
                                 " != lin shape ", shape_str<T>(lin.shape())));
    }
    auto out = Tensor<T>::make_op_result(
        gate.shape(), {gate, lin}, [gate, lin](TensorNode<T>& self) {
            const T* pg = gate.data().data();
            const T* pl = lin.data().data();
            const int64_t n = static_cast<int64_t>(self.grad.size());
            if (gate.requires_grad()) {
                T* gg = gate.node()->grad.data();
                for (int64_t i = 0; i < n; ++i) {
                    gg[i] += self.grad[i] * pl[i] * detail::gelu_tanh_deriv(pg[i]);
                }
            }
            if (lin.requires_grad()) {
                T* gl = lin.node()->grad.data();
                for (int64_t i = 0; i < n; ++i) {
                    gl[i] += self.grad[i] * detail::gelu_tanh(pg[i]);
                }
            }
        });
    const int64_t n = out.numel();
    const T* pg = gate.data().data();
    const T* pl = lin.data().data();
    T* po = out.data().data();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) po[i] = detail::gelu_tanh(pg[i]) * pl[i];
    return out;
}

// ---------------------------------------------------------------------------
// Rotary position embedding. x is [t, n_heads*head_size]; for each head the
// feature pairs (2p, 2p+1) are rotated by (start_pos + row) * base^(-2p/hs).
// Backward is the inverse rotation.
// ---------------------------------------------------------------------------
namespace detail {
template <class T>
void rope_rows(const T* in, T* out, int64_t rows, int n_heads, int head_size,
               int64_t start_pos, T base, bool inverse) {
    const int half = head_size / 2;
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
        const T pos = static_cast<T>(start_pos + r);
        for (int h = 0; h < n_heads; ++h) {
            const int64_t off = r * static_cast<int64_t>(n_heads) * head_size +
                                static_cast<int64_t>(h) * head_size;
            for (int p = 0; p < half; ++p) {
                const T theta =
                    pos * std::pow(base, -static_cast<T>(2 * p) / static_cast<T>(head_size));
                const T c = std::cos(theta);
                const T s = inverse ? -std::sin(theta) : std::sin(theta);
                const T x0 = in[off + 2 * p];
                const T x1 = in[off + 2 * p + 1];
                out[off + 2 * p] = x0 * c - x1 * s;
                out[off + 2 * p + 1] = x0 * s + x1 * c;
            }
        }
    }
}
}  // namespace detail

template <class T>
Tensor<T> rope(const Tensor<T>& x, int n_heads, int head_size, int64_t start_pos, T base) {
    if (head_size % 2 != 0) {
        throw ConfigError(str_cat("rope: head_size must be even, got ", head_size));
    }
    if (x.ndim() != 2 || x.dim(1) != static_cast<int64_t>(n_heads) * head_size) {
        throw ShapeError(str_cat("rope: expected [t, ", n_heads * head_size, "], got ",
                                 shape_str<T>(x.shape())));
    }
    const int64_t rows = x.dim(0);
    auto out = Tensor<T>::make_op_result(
        x.shape(), {x},
        [x, rows, n_heads, head_size, start_pos, base](TensorNode<T>& self) {
            if (!x.requires_grad()) return;
            std::vector<T> tmp(self.grad.size());
            detail::rope_rows(self.grad.data(), tmp.data(), rows, n_heads, head_size,
                              start_pos, base, /*inverse=*/true);
            T* gx = x.node()->grad.data();
            for (size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
        });
    detail::rope_rows(x.data().data(), out.data().data(), rows, n_heads, head_size,
                      start_pos, base, /*inverse=*/false);
    return out;
}

// ---------------------------------------------------------------------------
// Fused causal windowed attention with GQA and score soft-capping.
//   q: [t, n_heads*hs] (rotated), k,v: [t, n_kv*hs] (rotated)
//   row i attends to j in [max(0, i-window+1), i]
//   score = soft_cap(scale * <q_i, k_j>), prob = softmax, out = sum prob * v
// Capped scores and probs are saved for backward. dK/dV accumulation is
// parallelized over kv groups so no two threads touch the same row.
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    int n_heads, int n_kv_heads, int head_size, int64_t window,
                    T score_cap, T scale_factor) {
    const int64_t t = q.dim(0);
    if (q.ndim() != 2 || q.dim(1) != static_cast<int64_t>(n_heads) * head_size) {
        throw ShapeError(str_cat("attention: q shape ", shape_str<T>(q.shape()),
                                 " does not match heads ", n_heads, " x ", head_size));
    }
    if (k.shape() != v.shape() || k.dim(0) != t ||
        k.dim(1) != static_cast<int64_t>(n_kv_heads) * head_size) {
        throw ShapeError(str_cat("attention: k/v shapes ", shape_str<T>(k.shape()), "/",
                                 shape_str<T>(v.shape()), " do not match kv heads ",
                                 n_kv_heads, " x ", head_size, " at seq len ", t));
    }
    if (n_heads % n_kv_heads != 0) {
        throw ConfigError(str_cat("attention: n_heads ", n_heads,
                                  " not divisible by n_kv_heads ", n_kv_heads));
    }
    if (window < 1) {
        throw InvalidParamError(str_cat("attention: window must be >= 1, got ", window));
    }
    const int group = n_heads / n_kv_heads;
    const int64_t hs = head_size;
    const int64_t qw = static_cast<int64_t>(n_heads) * hs;
    const int64_t kw = static_cast<int64_t>(n_kv_heads) * hs;

    const bool tape = grad_enabled() &&
                      (q.requires_grad() || k.requires_grad() || v.requires_grad());
    // dense [n_heads, t, t]; entries outside the window stay zero
    const size_t saved_size = tape ? static_cast<size_t>(n_heads) * t * t : 0;
    auto probs = std::make_shared<std::vector<T>>(saved_size, T{});
    auto capped = std::make_shared<std::vector<T>>(saved_size, T{});

    auto out = Tensor<T>::make_op_result(
        {t, qw}, {q, k, v},
        [q, k, v, probs, capped, t, n_heads, n_kv_heads, group, hs, qw, kw, window,
         score_cap, scale_factor](TensorNode<T>& self) {
            const T* pq = q.data().data();
            const T* pk = k.data().data();
            const T* pv = v.data().data();
            const T* g = self.grad.data();
            T* gq = q.requires_grad() ? q.node()->grad.data() : nullptr;
            T* gk = k.requires_grad() ? k.node()->grad.data() : nullptr;
            T* gv = v.requires_grad() ? v.node()->grad.data() : nullptr;
#pragma omp parallel for schedule(static)
            for (int gi = 0; gi < n_kv_heads; ++gi) {
                std::vector<T> dprob(static_cast<size_t>(t));
                for (int hh = 0; hh < group; ++hh) {
                    const int h = gi * group + hh;
                    for (int64_t i = 0; i < t; ++i) {
                        const int64_t lo = std::max<int64_t>(0, i - window + 1);
                        const T* gout = g + i * qw + h * hs;
                        const T* prow = probs->data() + (static_cast<size_t>(h) * t + i) * t;
                        const T* srow = capped->data() + (static_cast<size_t>(h) * t + i) * t;
                        // dprob_j = <gout, v_j>, and dV_j += prob_j * gout
                        for (int64_t j = lo; j <= i; ++j) {
                            const T* vj = pv + j * kw + gi * hs;
                            dprob[j] = kernels::dot(gout, vj, hs);
                            if (gv) {
                                T* gvj = gv + j * kw + gi * hs;
                                const T pj = prow[j];
                                for (int64_t e = 0; e < hs; ++e) gvj[e] += pj * gout[e];
                            }
                        }
                        // softmax backward
                        T dotpd{};
                        for (int64_t j = lo; j <= i; ++j) dotpd += prow[j] * dprob[j];
                        const T* qi = pq + i * qw + h * hs;
                        for (int64_t j = lo; j <= i; ++j) {
                            T ds = prow[j] * (dprob[j] - dotpd);
                            if (score_cap > T{0}) {
                                const T th = srow[j] / score_cap;
                                ds *= (T{1} - th * th);
                            }
                            ds *= scale_factor;
                            const T* kj = pk + j * kw + gi * hs;
                            if (gq) {
                                T* gqi = gq + i * qw + h * hs;
                                for (int64_t e = 0; e < hs; ++e) gqi[e] += ds * kj[e];
                            }
                            if (gk) {
                                T* gkj = gk + j * kw + gi * hs;
                                for (int64_t e = 0; e < hs; ++e) gkj[e] += ds * qi[e];
                            }
                        }
                    }
                }
            }
        });

    const T* pq = q.data().data();
    const T* pk = k.data().data();
    const T* pv = v.data().data();
    T* po = out.data().data();
    const bool save = out.requires_grad();
#pragma omp parallel for schedule(static) collapse(2)
    for (int h = 0; h < n_heads; ++h) {
        for (int64_t i = 0; i < t; ++i) {
            const int gi = h / group;
            const int64_t lo = std::max<int64_t>(0, i - window + 1);
            const T* qi = pq + i * qw + h * hs;
            std::vector<T> row(static_cast<size_t>(i - lo + 1));
            for (int64_t j = lo; j <= i; ++j) {
                T s = scale_factor * kernels::dot(qi, pk + j * kw + gi * hs, hs);
                if (score_cap > T{0}) {
                    s = score_cap * std::tanh(s / score_cap);
                }
                row[static_cast<size_t>(j - lo)] = s;
            }
            if (save) {
                T* srow = capped->data() + (static_cast<size_t>(h) * t + i) * t;
                for (int64_t j = lo; j <= i; ++j) srow[j] = row[static_cast<size_t>(j - lo)];
            }
            kernels::softmax_row(row.data(), static_cast<int64_t>(row.size()));
            if (save) {
                T* prow = probs->data() + (static_cast<size_t>(h) * t + i) * t;
                for (int64_t j = lo; j <= i; ++j) prow[j] = row[static_cast<size_t>(j - lo)];
            }
            T* orow = po + i * qw + h * hs;
            for (int64_t e = 0; e < hs; ++e) orow[e] = T{};
            for (int64_t j = lo; j <= i; ++j) {
                const T pj = row[static_cast<size_t>(j - lo)];
                const T* vj = pv + j * kw + gi * hs;
                for (int64_t e = 0; e < hs; ++e) orow[e] += pj * vj[e];
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Embedding gather with optional multiplier (the input scaling by
// sqrt(d_model) folds in here). table: [vocab, d], out: [t, d].
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& ids, T multiplier) {
    const int64_t vocab = table.dim(0), d = table.dim(1);
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= vocab) {
            throw IndexError(str_cat("embedding: token id ", ids[i], " at position ", i,
                                     " outside vocab of size ", vocab));
        }
    }
    const int64_t t = static_cast<int64_t>(ids.size());
    auto out = Tensor<T>::make_op_result(
        {t, d}, {table}, [table, ids, d, multiplier](TensorNode<T>& self) {
            if (!table.requires_grad()) return;
            T* gt = table.node()->grad.data();
            // serial scatter: different rows may collide on the same id
            for (size_t i = 0; i < ids.size(); ++i) {
                const T* gr = self.grad.data() + static_cast<int64_t>(i) * d;
                T* dst = gt + static_cast<int64_t>(ids[i]) * d;
                for (int64_t j = 0; j < d; ++j) dst[j] += multiplier * gr[j];
            }
        });
    const T* pt = table.data().data();
    T* po = out.data().data();
    for (int64_t i = 0; i < t; ++i) {
        const T* src = pt + static_cast<int64_t>(ids[static_cast<size_t>(i)]) * d;
        T* dst = po + i * d;
        for (int64_t j = 0; j < d; ++j) dst[j] = multiplier * src[j];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Per-position cross entropy: logits [t, v], targets[t] -> losses [t]
//   loss_i = log_sum_exp(logits_i) - logits_i[target_i]
//   dlogits_i = (softmax(logits_i) - onehot(target_i)) * dloss_i
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets) {
    if (logits.ndim() != 2 || logits.dim(0) != static_cast<int64_t>(targets.size())) {
        throw ShapeError(str_cat("cross_entropy: logits ", shape_str<T>(logits.shape()),
                                 " vs ", targets.size(), " targets"));
    }
    const int64_t t = logits.dim(0), v = logits.dim(1);
    for (size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] < 0 || targets[i] >= v) {
            throw IndexError(str_cat("cross_entropy: target ", targets[i], " at position ",
                                     i, " outside vocab of size ", v));
        }
    }
    auto out = Tensor<T>::make_op_result(
        {t}, {logits}, [logits, targets, t, v](TensorNode<T>& self) {
            if (!logits.requires_grad()) return;
            const T* pl = logits.data().data();
            T* gl = logits.node()->grad.data();
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < t; ++i) {
                const T* row = pl + i * v;
                T* grow = gl + i * v;
                std::vector<T> sm(row, row + v);
                kernels::softmax_row(sm.data(), v);
                const T gi = self.grad[i];
                for (int64_t j = 0; j < v; ++j) grow[j] += gi * sm[j];
                grow[targets[static_cast<size_t>(i)]] -= gi;
            }
        });
    const T* pl = logits.data().data();
    T* po = out.data().data();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < t; ++i) {
        const T* row = pl + i * v;
        po[i] = kernels::log_sum_exp(row, v) - row[targets[static_cast<size_t>(i)]];
    }
    return out;
}

// scalar form: -log softmax(logits)[target]
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, int target) {
    if (logits.ndim() != 1) {
        throw ShapeError(str_cat("cross_entropy(scalar): expected 1-d logits, got ",
                                 shape_str<T>(logits.shape())));
    }
    auto view = Tensor<T>::make_op_result(
        {1, logits.dim(0)}, {logits}, [logits](TensorNode<T>& self) {
            if (!logits.requires_grad()) return;
            T* g = logits.node()->grad.data();
            for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        });
    view.data() = logits.data();
    auto rows = cross_entropy(view, std::vector<int>{target});
    return rows;  // shape [1]
}

// ---------------------------------------------------------------------------
// Distillation cross entropy between a teacher distribution and student
// logits, per position:
//   loss_i = sum_x -P_T(x) log P_S(x)
// The teacher is a constant: gradients flow to the student only.
//   dstudent_i = (softmax(S_i) - P_T_i) * dloss_i
// teacher_probs must hold softmax rows (nonnegative, summing to 1).
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> distill_cross_entropy(const std::vector<T>& teacher_probs,
                                const Tensor<T>& student_logits) {
    const int64_t t = student_logits.dim(0), v = student_logits.dim(1);
    if (static_cast<int64_t>(teacher_probs.size()) != t * v) {
        throw ContractError(str_cat("distill: teacher distribution size ",
                                    teacher_probs.size(), " != student logits ",
                                    shape_str<T>(student_logits.shape())));
    }
    auto tp = std::make_shared<std::vector<T>>(teacher_probs);
    auto out = Tensor<T>::make_op_result(
        {t}, {student_logits}, [student_logits, tp, t, v](TensorNode<T>& self) {
            if (!student_logits.requires_grad()) return;
            const T* pl = student_logits.data().data();
            T* gl = student_logits.node()->grad.data();
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < t; ++i) {
                const T* row = pl + i * v;
                T* grow = gl + i * v;
                const T* pt = tp->data() + i * v;
                std::vector<T> sm(row, row + v);
                kernels::softmax_row(sm.data(), v);
                const T gi = self.grad[i];
                for (int64_t j = 0; j < v; ++j) grow[j] += gi * (sm[j] - pt[j]);
            }
        });
    const T* pl = student_logits.data().data();
    T* po = out.data().data();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < t; ++i) {
        const T* row = pl + i * v;
        const T* pt = teacher_probs.data() + i * v;
        const T lse = kernels::log_sum_exp(row, v);
        T loss{};
        for (int64_t j = 0; j < v; ++j) {
            loss += pt[j] * (lse - row[j]);
        }
        po[i] = loss;
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    auto out = Tensor<T>::make_op_result({1}, {x}, [x](TensorNode<T>& self) {
        if (!x.requires_grad()) return;
        T* gx = x.node()->grad.data();
        const T g = self.grad[0];
        for (size_t i = 0; i < x.data().size(); ++i) gx[i] += g;
    });
    T s{};
    for (T v : x.data()) s += v;
    out.data()[0] = s;
    return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
    const T n = static_cast<T>(x.numel());
    auto out = Tensor<T>::make_op_result({1}, {x}, [x, n](TensorNode<T>& self) {
        if (!x.requires_grad()) return;
        T* gx = x.node()->grad.data();
        const T g = self.grad[0] / n;
        for (size_t i = 0; i < x.data().size(); ++i) gx[i] += g;
    });
    T s{};
    for (T v : x.data()) s += v;
    out.data()[0] = s / n;
    return out;
}

}  // namespace gemma::ops

// SPDX-License-Identifier: Apache-2.0
//
// Decoder-only transformer in the Gemma 2 family: grouped-query attention
// with alternating local sliding-window / global layers, RoPE, pre+post
// RMSNorm around each sub-layer, GeGLU feedforward, logit soft-capping and
// tied embeddings. Presets "2B"/"9B"/"27B" reproduce the published
// configurations; everything scales down to toy sizes.

#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "gemma/error.hpp"
#include "gemma/ops.hpp"
#include "gemma/rng.hpp"
#include "gemma/tensor.hpp"

namespace gemma {

enum class LayerKind { local, global };

enum class LayerPattern { alternate, all_local, all_global };

const char* to_string(LayerKind k);
const char* to_string(LayerPattern p);

struct ModelConfig {
    int64_t d_model = 0;
    int64_t n_layers = 0;
    int64_t n_heads = 0;
    int64_t n_kv_heads = 0;
    int64_t head_size = 0;
    // Convention: ff_dim is the concatenated gate+up width; the actual hidden
    // width is ff_dim/2 and the block holds three [d_model, ff_dim/2]-sized
    // matrices. This is the unique reading under which the published
    // parameter counts come out exact.
    int64_t ff_dim = 0;
    int64_t vocab_size = 0;
    int64_t window_size = 0;   // local attention span
    int64_t global_span = 0;   // max context (global layers' span)
    double attn_softcap = 50.0;
    double final_softcap = 30.0;
    double rope_base = 10000.0;
    bool tied_embeddings = true;
    LayerPattern layer_pattern = LayerPattern::alternate;
    LayerKind first_layer_kind = LayerKind::local;
    // Neither of these is pinned by the published configuration; they are
    // recorded in config dumps so every run is explicit about its choice.
    double rms_eps = 1e-6;
    double init_std = 0.02;

    void validate() const;
    LayerKind layer_kind(int64_t layer) const;
    int64_t group_size() const { return n_heads / n_kv_heads; }

    static ModelConfig preset(const std::string& name);  // "2B" | "9B" | "27B"

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);

    bool operator==(const ModelConfig&) const = default;
};

struct ParamCounts {
    int64_t embedding = 0;
    int64_t non_embedding = 0;
};

// embedding = vocab * d_model
// non_embedding = n_layers * (attn + ff + 4*d_model) + d_model
//   attn = d_model * (2*n_heads + 2*n_kv_heads) * head_size
//   ff   = 3 * d_model * (ff_dim/2)
// (+ vocab * d_model more when embeddings are untied)
ParamCounts count_params(const ModelConfig& cfg);

// Boolean mask [seq_len, seq_len]: entry (i,j) is 1 iff position i may attend
// to position j. Local layers see the last `window` positions; global layers
// the last `global_span`.
std::vector<uint8_t> attention_mask(LayerKind kind, int64_t seq_len, int64_t window,
                                    int64_t global_span);

template <class T>
struct LayerParams {
    Tensor<T> w_q, w_k, w_v, w_o;          // attention projections
    Tensor<T> w_gate, w_up, w_down;        // GeGLU feedforward
    Tensor<T> norm_pre_attn, norm_post_attn;
    Tensor<T> norm_pre_ffn, norm_post_ffn;
};

template <class T>
struct ModelParams {
    ModelConfig config;
    Tensor<T> embedding;  // [vocab, d_model]; also the unembedding when tied
    Tensor<T> unembedding;  // only when !tied_embeddings
    std::vector<LayerParams<T>> layers;
    Tensor<T> final_norm;
    // Local-attention span used by inference paths; training passes the
    // configured window explicitly, so changing this never affects training.
    int64_t inference_window = 0;
};

// Visits every parameter in a fixed order (checkpoint layout, optimizer slot
// order and merge all rely on it).
template <class T, class F>
void for_each_param(ModelParams<T>& p, F&& f) {
    f(std::string("embedding"), p.embedding);
    char name[64];
    for (size_t l = 0; l < p.layers.size(); ++l) {
        auto& lay = p.layers[l];
        const char* fields[] = {"w_q",          "w_k",           "w_v",         "w_o",
                                "w_gate",       "w_up",          "w_down",      "norm_pre_attn",
                                "norm_post_attn", "norm_pre_ffn", "norm_post_ffn"};
        Tensor<T>* tensors[] = {&lay.w_q,          &lay.w_k,           &lay.w_v,
                                &lay.w_o,          &lay.w_gate,        &lay.w_up,
                                &lay.w_down,       &lay.norm_pre_attn, &lay.norm_post_attn,
                                &lay.norm_pre_ffn, &lay.norm_post_ffn};
        for (size_t i = 0; i < 11; ++i) {
            std::snprintf(name, sizeof(name), "layer%02zu.%s", l, fields[i]);
            f(std::string(name), *tensors[i]);
        }
    }
    f(std::string("final_norm"), p.final_norm);
    if (!p.config.tied_embeddings) {
        f(std::string("unembedding"), p.unembedding);
    }
}

// Allocates and initializes all parameters. Weights are truncated-normal
// (2 sigma) with std init_std, except residual-path output projections
// (w_o, w_down) which use init_std/sqrt(2*n_layers); norm gains start at 0
// (neutral). Identical seed -> bit-identical parameters.
template <class T>
ModelParams<T> build_model(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    ModelParams<T> p;
    p.config = cfg;
    p.inference_window = cfg.window_size;
    Rng rng(mix_u64(seed, 0x6d6f64656cull));  // "model"

    auto init = [&rng](std::vector<int64_t> shape, double std_dev) {
        auto t = Tensor<T>::zeros(std::move(shape), /*requires_grad=*/true);
        for (auto& v : t.data()) {
            // draw in float32 so float and double builds share bits
            v = static_cast<T>(static_cast<float>(rng.next_trunc_normal(std_dev)));
        }
        return t;
    };

    const double std_in = cfg.init_std;
    const double std_out = cfg.init_std / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
    const int64_t qdim = cfg.n_heads * cfg.head_size;
    const int64_t kvdim = cfg.n_kv_heads * cfg.head_size;
    const int64_t hidden = cfg.ff_dim / 2;

    p.embedding = init({cfg.vocab_size, cfg.d_model}, std_in);
    p.layers.resize(static_cast<size_t>(cfg.n_layers));
    for (auto& lay : p.layers) {
        lay.w_q = init({cfg.d_model, qdim}, std_in);
        lay.w_k = init({cfg.d_model, kvdim}, std_in);
        lay.w_v = init({cfg.d_model, kvdim}, std_in);
        lay.w_o = init({qdim, cfg.d_model}, std_out);
        lay.w_gate = init({cfg.d_model, hidden}, std_in);
        lay.w_up = init({cfg.d_model, hidden}, std_in);
        lay.w_down = init({hidden, cfg.d_model}, std_out);
        lay.norm_pre_attn = Tensor<T>::zeros({cfg.d_model}, true);
        lay.norm_post_attn = Tensor<T>::zeros({cfg.d_model}, true);
        lay.norm_pre_ffn = Tensor<T>::zeros({cfg.d_model}, true);
        lay.norm_post_ffn = Tensor<T>::zeros({cfg.d_model}, true);
    }
    p.final_norm = Tensor<T>::zeros({cfg.d_model}, true);
    if (!cfg.tied_embeddings) {
        p.unembedding = init({cfg.vocab_size, cfg.d_model}, std_in);
    }
    return p;
}

// Training-time / full-sequence forward. Returns logits [len, vocab].
// local_window_override < 1 means "use the params' inference window".
template <class T>
Tensor<T> forward(const ModelParams<T>& params, const std::vector<int>& tokens,
                  int64_t local_window_override = -1) {
    const ModelConfig& cfg = params.config;
    const int64_t len = static_cast<int64_t>(tokens.size());
    if (len > cfg.global_span) {
        throw ContextOverflowError(str_cat("sequence length ", len,
                                           " exceeds global span ", cfg.global_span));
    }
    const int64_t local_window =
        local_window_override >= 1 ? local_window_override : params.inference_window;
    const T attn_scale = T{1} / static_cast<T>(std::sqrt(static_cast<double>(cfg.head_size)));
    const T embed_scale = static_cast<T>(std::sqrt(static_cast<double>(cfg.d_model)));
    const T eps = static_cast<T>(cfg.rms_eps);

    auto h = ops::embedding(params.embedding, tokens, embed_scale);
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        const auto& lay = params.layers[static_cast<size_t>(l)];
        const int64_t window =
            cfg.layer_kind(l) == LayerKind::local ? local_window : cfg.global_span;

        auto x = ops::rms_norm(h, lay.norm_pre_attn, eps);
        auto q = ops::rope(ops::matmul(x, lay.w_q), static_cast<int>(cfg.n_heads),
                           static_cast<int>(cfg.head_size), 0,
                           static_cast<T>(cfg.rope_base));
        auto k = ops::rope(ops::matmul(x, lay.w_k), static_cast<int>(cfg.n_kv_heads),
                           static_cast<int>(cfg.head_size), 0,
                           static_cast<T>(cfg.rope_base));
        auto v = ops::matmul(x, lay.w_v);
        auto attn = ops::attention(q, k, v, static_cast<int>(cfg.n_heads),
                                   static_cast<int>(cfg.n_kv_heads),
                                   static_cast<int>(cfg.head_size), window,
                                   static_cast<T>(cfg.attn_softcap), attn_scale);
        auto o = ops::matmul(attn, lay.w_o);
        h = ops::add(h, ops::rms_norm(o, lay.norm_post_attn, eps));

        x = ops::rms_norm(h, lay.norm_pre_ffn, eps);
        auto f = ops::geglu(ops::matmul(x, lay.w_gate), ops::matmul(x, lay.w_up));
        o = ops::matmul(f, lay.w_down);
        h = ops::add(h, ops::rms_norm(o, lay.norm_post_ffn, eps));
    }
    h = ops::rms_norm(h, params.final_norm, eps);
    const Tensor<T>& unembed = cfg.tied_embeddings ? params.embedding : params.unembedding;
    auto logits = ops::matmul_nt(h, unembed);
    if (cfg.final_softcap > 0) {
        logits = ops::soft_cap(logits, static_cast<T>(cfg.final_softcap));
    }
    return logits;
}

// Per-layer rolling key/value store for incremental decoding. Local layers
// hold at most the effective window; global layers the full span. Single
// writer per cache.
template <class T>
struct KVCache {
    struct Layer {
        std::vector<T> k, v;  // ring buffers [capacity, n_kv_heads*head_size]
        int64_t capacity = 0;
    };
    std::vector<Layer> layers;
    int64_t length = 0;     // positions decoded so far
    int64_t kv_width = 0;   // n_kv_heads * head_size
    int64_t local_window = 0;

    static KVCache make(const ModelConfig& cfg, int64_t inference_window) {
        if (inference_window < 1) {
            throw InvalidParamError(
                str_cat("KV cache window must be >= 1, got ", inference_window));
        }
        KVCache c;
        c.kv_width = cfg.n_kv_heads * cfg.head_size;
        c.local_window = std::min(inference_window, cfg.global_span);
        c.layers.resize(static_cast<size_t>(cfg.n_layers));
        for (int64_t l = 0; l < cfg.n_layers; ++l) {
            auto& lay = c.layers[static_cast<size_t>(l)];
            lay.capacity = cfg.layer_kind(l) == LayerKind::local ? c.local_window
                                                                 : cfg.global_span;
            lay.k.assign(static_cast<size_t>(lay.capacity * c.kv_width), T{});
            lay.v.assign(static_cast<size_t>(lay.capacity * c.kv_width), T{});
        }
        return c;
    }
};

template <class T>
KVCache<T> make_cache(const ModelParams<T>& params) {
    return KVCache<T>::make(params.config, params.inference_window);
}

namespace detail {

// one RMSNorm row, plain buffers
template <class T>
void rms_norm_row(const T* x, const T* w, T eps, int64_t d, T* out) {
    T ms{};
    for (int64_t j = 0; j < d; ++j) ms += x[j] * x[j];
    ms = ms / static_cast<T>(d) + eps;
    const T inv = T{1} / std::sqrt(ms);
    for (int64_t j = 0; j < d; ++j) out[j] = x[j] * inv * (T{1} + w[j]);
}

template <class T>
void rope_row(T* x, int n_heads, int head_size, int64_t pos, T base) {
    const int half = head_size / 2;
    for (int h = 0; h < n_heads; ++h) {
        T* head = x + static_cast<int64_t>(h) * head_size;
        for (int p = 0; p < half; ++p) {
            const T theta = static_cast<T>(pos) *
                            std::pow(base, -static_cast<T>(2 * p) / static_cast<T>(head_size));
            const T c = std::cos(theta), s = std::sin(theta);
            const T x0 = head[2 * p], x1 = head[2 * p + 1];
            head[2 * p] = x0 * c - x1 * s;
            head[2 * p + 1] = x0 * s + x1 * c;
        }
    }
}

}  // namespace detail

// Decodes one token against the cache; returns the logits row [vocab].
// Equivalent (within float round-off) to the last row of forward() over the
// whole prefix. No autodiff involvement.
template <class T>
std::vector<T> forward_cached(const ModelParams<T>& params, KVCache<T>& cache,
                              int new_token) {
    const ModelConfig& cfg = params.config;
    if (static_cast<int64_t>(cache.layers.size()) != cfg.n_layers ||
        cache.kv_width != cfg.n_kv_heads * cfg.head_size) {
        throw ContractError(str_cat("KV cache shape (layers=", cache.layers.size(),
                                    ", kv_width=", cache.kv_width,
                                    ") does not match model (layers=", cfg.n_layers,
                                    ", kv_width=", cfg.n_kv_heads * cfg.head_size, ")"));
    }
    if (new_token < 0 || new_token >= cfg.vocab_size) {
        throw IndexError(str_cat("token id ", new_token, " outside vocab of size ",
                                 cfg.vocab_size));
    }
    const int64_t pos = cache.length;
    if (pos >= cfg.global_span) {
        throw ContextOverflowError(str_cat("decoding position ", pos,
                                           " exceeds global span ", cfg.global_span));
    }

    const int64_t d = cfg.d_model;
    const int64_t hs = cfg.head_size;
    const int64_t qw = cfg.n_heads * hs;
    const int64_t kw = cfg.n_kv_heads * hs;
    const int group = static_cast<int>(cfg.group_size());
    const T eps = static_cast<T>(cfg.rms_eps);
    const T attn_scale = T{1} / static_cast<T>(std::sqrt(static_cast<double>(hs)));
    const T score_cap = static_cast<T>(cfg.attn_softcap);

    std::vector<T> h(static_cast<size_t>(d));
    {
        const T* e = params.embedding.data().data() + static_cast<int64_t>(new_token) * d;
        const T scale = static_cast<T>(std::sqrt(static_cast<double>(d)));
        for (int64_t j = 0; j < d; ++j) h[static_cast<size_t>(j)] = e[j] * scale;
    }

    std::vector<T> x(static_cast<size_t>(d)), q(static_cast<size_t>(qw));
    std::vector<T> attn_out(static_cast<size_t>(qw)), o(static_cast<size_t>(d));
    std::vector<T> gate, up, f;

    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        const auto& lay = params.layers[static_cast<size_t>(l)];
        auto& cl = cache.layers[static_cast<size_t>(l)];
        const int64_t window = cl.capacity;
        const int64_t slot = pos % cl.capacity;

        detail::rms_norm_row(h.data(), lay.norm_pre_attn.data().data(), eps, d, x.data());

        std::fill(q.begin(), q.end(), T{});
        kernels::gemm(x.data(), lay.w_q.data().data(), q.data(), 1, d, qw);
        T* krow = cl.k.data() + slot * kw;
        T* vrow = cl.v.data() + slot * kw;
        std::fill(krow, krow + kw, T{});
        std::fill(vrow, vrow + kw, T{});
        kernels::gemm(x.data(), lay.w_k.data().data(), krow, 1, d, kw);
        kernels::gemm(x.data(), lay.w_v.data().data(), vrow, 1, d, kw);
        detail::rope_row(q.data(), static_cast<int>(cfg.n_heads), static_cast<int>(hs), pos,
                         static_cast<T>(cfg.rope_base));
        detail::rope_row(krow, static_cast<int>(cfg.n_kv_heads), static_cast<int>(hs), pos,
                         static_cast<T>(cfg.rope_base));

        const int64_t lo = std::max<int64_t>(0, pos - window + 1);
#pragma omp parallel for schedule(static)
        for (int64_t hh = 0; hh < cfg.n_heads; ++hh) {
            const int gi = static_cast<int>(hh) / group;
            const T* qh = q.data() + hh * hs;
            std::vector<T> scores(static_cast<size_t>(pos - lo + 1));
            for (int64_t j = lo; j <= pos; ++j) {
                const T* kj = cl.k.data() + (j % cl.capacity) * kw + gi * hs;
                T s = attn_scale * kernels::dot(qh, kj, hs);
                if (score_cap > T{0}) s = score_cap * std::tanh(s / score_cap);
                scores[static_cast<size_t>(j - lo)] = s;
            }
            kernels::softmax_row(scores.data(), static_cast<int64_t>(scores.size()));
            T* dst = attn_out.data() + hh * hs;
            for (int64_t e = 0; e < hs; ++e) dst[e] = T{};
            for (int64_t j = lo; j <= pos; ++j) {
                const T* vj = cl.v.data() + (j % cl.capacity) * kw + gi * hs;
                const T pj = scores[static_cast<size_t>(j - lo)];
                for (int64_t e = 0; e < hs; ++e) dst[e] += pj * vj[e];
            }
        }

        std::fill(o.begin(), o.end(), T{});
        kernels::gemm(attn_out.data(), lay.w_o.data().data(), o.data(), 1, qw, d);
        detail::rms_norm_row(o.data(), lay.norm_post_attn.data().data(), eps, d, x.data());
        for (int64_t j = 0; j < d; ++j) h[static_cast<size_t>(j)] += x[static_cast<size_t>(j)];

        detail::rms_norm_row(h.data(), lay.norm_pre_ffn.data().data(), eps, d, x.data());
        const int64_t hidden = cfg.ff_dim / 2;
        gate.assign(static_cast<size_t>(hidden), T{});
        up.assign(static_cast<size_t>(hidden), T{});
        f.resize(static_cast<size_t>(hidden));
        kernels::gemm(x.data(), lay.w_gate.data().data(), gate.data(), 1, d, hidden);
        kernels::gemm(x.data(), lay.w_up.data().data(), up.data(), 1, d, hidden);
        for (int64_t j = 0; j < hidden; ++j) {
            f[static_cast<size_t>(j)] =
                ops::detail::gelu_tanh(gate[static_cast<size_t>(j)]) * up[static_cast<size_t>(j)];
        }
        std::fill(o.begin(), o.end(), T{});
        kernels::gemm(f.data(), lay.w_down.data().data(), o.data(), 1, hidden, d);
        detail::rms_norm_row(o.data(), lay.norm_post_ffn.data().data(), eps, d, x.data());
        for (int64_t j = 0; j < d; ++j) h[static_cast<size_t>(j)] += x[static_cast<size_t>(j)];
    }

    detail::rms_norm_row(h.data(), params.final_norm.data().data(), eps, d, x.data());
    std::vector<T> logits(static_cast<size_t>(cfg.vocab_size), T{});
    const Tensor<T>& unembed =
        cfg.tied_embeddings ? params.embedding : params.unembedding;
    kernels::gemm_nt(x.data(), unembed.data().data(), logits.data(), 1, d, cfg.vocab_size);
    if (cfg.final_softcap > 0) {
        const T cap = static_cast<T>(cfg.final_softcap);
#pragma omp parallel for schedule(static)
        for (int64_t j = 0; j < cfg.vocab_size; ++j) {
            logits[static_cast<size_t>(j)] = cap * std::tanh(logits[static_cast<size_t>(j)] / cap);
        }
    }
    cache.length = pos + 1;
    return logits;
}

// Changes the local-attention span used by subsequent inference forwards.
// The training window (config.window_size) is untouched.
template <class T>
void set_inference_window(ModelParams<T>& params, int64_t new_window) {
    if (new_window < 1) {
        throw InvalidParamError(str_cat("inference window must be >= 1, got ", new_window));
    }
    params.inference_window = new_window;
}

using ModelParamsF = ModelParams<float>;
using ModelParamsD = ModelParams<double>;

}  // namespace gemma

// SPDX-License-Identifier: Apache-2.0

#include "gemma/model.hpp"

#include <nlohmann/json.hpp>

namespace gemma {

const char* to_string(LayerKind k) {
    return k == LayerKind::local ? "local" : "global";
}

const char* to_string(LayerPattern p) {
    switch (p) {
        case LayerPattern::alternate: return "alternate";
        case LayerPattern::all_local: return "all_local";
        case LayerPattern::all_global: return "all_global";
    }
    return "?";
}

static LayerKind layer_kind_from_string(const std::string& s) {
    if (s == "local") return LayerKind::local;
    if (s == "global") return LayerKind::global;
    throw ConfigError(str_cat("unknown layer kind '", s, "' (expected local|global)"));
}

static LayerPattern layer_pattern_from_string(const std::string& s) {
    if (s == "alternate") return LayerPattern::alternate;
    if (s == "all_local") return LayerPattern::all_local;
    if (s == "all_global") return LayerPattern::all_global;
    throw ConfigError(
        str_cat("unknown layer pattern '", s, "' (expected alternate|all_local|all_global)"));
}

void ModelConfig::validate() const {
    auto positive = [](int64_t v, const char* name) {
        if (v < 1) throw ConfigError(str_cat("config: ", name, " must be >= 1, got ", v));
    };
    positive(d_model, "d_model");
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(n_kv_heads, "n_kv_heads");
    positive(head_size, "head_size");
    positive(ff_dim, "ff_dim");
    positive(vocab_size, "vocab_size");
    positive(window_size, "window_size");
    positive(global_span, "global_span");
    if (n_heads % n_kv_heads != 0) {
        throw ConfigError(str_cat("config: n_heads (", n_heads,
                                  ") must be divisible by n_kv_heads (", n_kv_heads, ")"));
    }
    if (head_size % 2 != 0) {
        throw ConfigError(str_cat("config: head_size must be even for RoPE, got ", head_size));
    }
    if (ff_dim % 2 != 0) {
        throw ConfigError(str_cat("config: ff_dim must be even (gate+up concatenated), got ",
                                  ff_dim));
    }
    if (window_size > global_span) {
        throw ConfigError(str_cat("config: window_size (", window_size,
                                  ") must be <= global_span (", global_span, ")"));
    }
    if (attn_softcap < 0 || final_softcap < 0) {
        throw ConfigError("config: soft caps must be >= 0 (0 disables capping)");
    }
    if (rms_eps < 0) {
        throw ConfigError("config: rms_eps must be >= 0");
    }
}

LayerKind ModelConfig::layer_kind(int64_t layer) const {
    switch (layer_pattern) {
        case LayerPattern::all_local: return LayerKind::local;
        case LayerPattern::all_global: return LayerKind::global;
        case LayerPattern::alternate: break;
    }
    const LayerKind other =
        first_layer_kind == LayerKind::local ? LayerKind::global : LayerKind::local;
    return layer % 2 == 0 ? first_layer_kind : other;
}

ModelConfig ModelConfig::preset(const std::string& name) {
    ModelConfig c;
    c.vocab_size = 256128;
    c.window_size = 4096;
    c.global_span = 8192;
    if (name == "2B") {
        c.d_model = 2304;
        c.n_layers = 26;
        c.n_heads = 8;
        c.n_kv_heads = 4;
        c.head_size = 256;
        c.ff_dim = 18432;
    } else if (name == "9B") {
        c.d_model = 3584;
        c.n_layers = 42;
        c.n_heads = 16;
        c.n_kv_heads = 8;
        c.head_size = 256;
        c.ff_dim = 28672;
    } else if (name == "27B") {
        c.d_model = 4608;
        c.n_layers = 46;
        c.n_heads = 32;
        c.n_kv_heads = 16;
        c.head_size = 128;
        c.ff_dim = 73728;
    } else {
        throw ConfigError(str_cat("unknown preset '", name, "' (expected 2B|9B|27B)"));
    }
    c.validate();
    return c;
}

ParamCounts count_params(const ModelConfig& cfg) {
    cfg.validate();
    ParamCounts c;
    c.embedding = cfg.vocab_size * cfg.d_model;
    const int64_t attn =
        cfg.d_model * (2 * cfg.n_heads + 2 * cfg.n_kv_heads) * cfg.head_size;
    const int64_t ff = 3 * cfg.d_model * (cfg.ff_dim / 2);
    c.non_embedding = cfg.n_layers * (attn + ff + 4 * cfg.d_model) + cfg.d_model;
    if (!cfg.tied_embeddings) {
        c.non_embedding += cfg.vocab_size * cfg.d_model;
    }
    return c;
}

std::vector<uint8_t> attention_mask(LayerKind kind, int64_t seq_len, int64_t window,
                                    int64_t global_span) {
    const int64_t span = kind == LayerKind::local ? window : global_span;
    std::vector<uint8_t> mask(static_cast<size_t>(seq_len * seq_len), 0);
    for (int64_t i = 0; i < seq_len; ++i) {
        for (int64_t j = 0; j <= i; ++j) {
            if (i - j < span) {
                mask[static_cast<size_t>(i * seq_len + j)] = 1;
            }
        }
    }
    return mask;
}

nlohmann::json ModelConfig::to_json() const {
    return nlohmann::json{{"d_model", d_model},
                          {"n_layers", n_layers},
                          {"n_heads", n_heads},
                          {"n_kv_heads", n_kv_heads},
                          {"head_size", head_size},
                          {"ff_dim", ff_dim},
                          {"vocab_size", vocab_size},
                          {"window_size", window_size},
                          {"global_span", global_span},
                          {"attn_softcap", attn_softcap},
                          {"final_softcap", final_softcap},
                          {"rope_base", rope_base},
                          {"tied_embeddings", tied_embeddings},
                          {"layer_pattern", to_string(layer_pattern)},
                          {"first_layer_kind", to_string(first_layer_kind)},
                          {"rms_eps", rms_eps},
                          {"init_std", init_std}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    if (j.contains("preset")) {
        c = preset(j.at("preset").get<std::string>());
    }
    auto get = [&j](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).template get<std::decay_t<decltype(field)>>();
    };
    get("d_model", c.d_model);
    get("n_layers", c.n_layers);
    get("n_heads", c.n_heads);
    get("n_kv_heads", c.n_kv_heads);
    get("head_size", c.head_size);
    get("ff_dim", c.ff_dim);
    get("vocab_size", c.vocab_size);
    get("window_size", c.window_size);
    get("global_span", c.global_span);
    get("attn_softcap", c.attn_softcap);
    get("final_softcap", c.final_softcap);
    get("rope_base", c.rope_base);
    get("tied_embeddings", c.tied_embeddings);
    get("rms_eps", c.rms_eps);
    get("init_std", c.init_std);
    if (j.contains("layer_pattern")) {
        c.layer_pattern = layer_pattern_from_string(j.at("layer_pattern").get<std::string>());
    }
    if (j.contains("first_layer_kind")) {
        c.first_layer_kind =
            layer_kind_from_string(j.at("first_layer_kind").get<std::string>());
    }
    c.validate();
    return c;
}

}  // namespace gemma

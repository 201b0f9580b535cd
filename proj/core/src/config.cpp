#include "kvzip/config.hpp"

#include <string>

namespace kvzip {

ModelConfig make_config(uint32_t layers, uint32_t kv_heads, uint32_t group, uint32_t dim,
                        uint32_t vocab, uint32_t max_pos, uint32_t seed) {
    ModelConfig cfg;
    cfg.n_layers = layers;
    cfg.n_kv_heads = kv_heads;
    cfg.group_size = group;
    cfg.head_dim = dim;
    cfg.vocab_size = vocab;
    cfg.max_position = max_pos;
    cfg.hidden_dim = kv_heads * group * dim;
    cfg.seed = seed;
    validate(cfg);
    return cfg;
}

void validate(const ModelConfig& cfg) {
    if (cfg.n_layers < 1 || cfg.n_kv_heads < 1 || cfg.group_size < 1 || cfg.head_dim < 1) {
        throw ConfigError("model dimensions must all be >= 1");
    }
    if (cfg.hidden_dim != cfg.n_kv_heads * cfg.group_size * cfg.head_dim) {
        throw ConfigError("hidden_dim must equal n_kv_heads * group_size * head_dim (got " +
                          std::to_string(cfg.hidden_dim) + ")");
    }
    if (cfg.vocab_size < 1) {
        throw ConfigError("vocab_size must be >= 1");
    }
    if (cfg.max_position < 1) {
        throw ConfigError("max_position must be >= 1");
    }
}

void TokenSeq::push_back(int32_t tok, TokenRole role) {
    if (roles.size() != tokens.size()) roles.assign(tokens.size(), TokenRole::Context);
    tokens.push_back(tok);
    roles.push_back(role);
}

TokenSeq make_seq(std::vector<int32_t> tokens, TokenRole role) {
    TokenSeq seq;
    seq.tokens = std::move(tokens);
    seq.roles.assign(seq.tokens.size(), role);
    return seq;
}

}  // namespace kvzip

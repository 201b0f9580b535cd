#pragma once

#include <cstdint>
#include <vector>

#include "kvzip/errors.hpp"

namespace kvzip {

// Architecture hyperparameters of the toy grouped-query-attention transformer.
// hidden_dim must equal n_kv_heads * group_size * head_dim.
struct ModelConfig {
    uint32_t n_layers = 2;
    uint32_t n_kv_heads = 2;  // H
    uint32_t group_size = 2;  // G, query heads per KV head
    uint32_t head_dim = 8;    // d
    uint32_t vocab_size = 64;
    uint32_t max_position = 1024;
    uint32_t hidden_dim = 32;
    uint32_t seed = 0;

    uint32_t n_query_heads() const { return n_kv_heads * group_size; }
    uint32_t kv_dim() const { return n_kv_heads * head_dim; }
    uint32_t ff_dim() const { return 2 * hidden_dim; }

    bool operator==(const ModelConfig&) const = default;
};

// hidden_dim derived from (kv_heads, group, dim).
ModelConfig make_config(uint32_t layers, uint32_t kv_heads, uint32_t group, uint32_t dim,
                        uint32_t vocab, uint32_t max_pos = 1024, uint32_t seed = 0);

// Throws ConfigError on invalid dimensions.
void validate(const ModelConfig& cfg);

enum class TokenRole : uint8_t { System = 0, Context = 1, Prompt = 2, Generated = 3 };

struct TokenSeq {
    std::vector<int32_t> tokens;
    std::vector<TokenRole> roles;  // empty, or one role per token

    size_t size() const { return tokens.size(); }
    bool empty() const { return tokens.empty(); }
    TokenRole role_at(size_t i) const { return roles.empty() ? TokenRole::Context : roles[i]; }
    void push_back(int32_t tok, TokenRole role);
};

TokenSeq make_seq(std::vector<int32_t> tokens, TokenRole role = TokenRole::Context);

// Reserved ids at the top of the vocabulary; data tokens occupy [0, data_limit).
struct SpecialTokens {
    int32_t repeat;  // leading marker of the reconstruction prompt
    int32_t cont;    // marker of the continuation form ("... starting with <span>")
    int32_t sep;     // separator / colon
    int32_t query;   // query marker used by lookup-style tasks
    int32_t data_limit;

    static constexpr uint32_t reserved = 4;

    static SpecialTokens of(const ModelConfig& cfg) {
        const auto v = static_cast<int32_t>(cfg.vocab_size);
        return SpecialTokens{v - 1, v - 2, v - 3, v - 4, v - 4};
    }
};

}  // namespace kvzip

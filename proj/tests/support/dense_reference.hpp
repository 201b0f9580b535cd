#pragma once

// Naive dense references used as oracles. These materialize full attention
// matrices and recompute everything from the raw weights, independently of
// the cached/gathered paths in the library.

#include <span>
#include <vector>

#include "kvzip/kv_cache.hpp"
#include "kvzip/model.hpp"
#include "kvzip/scoring.hpp"

namespace kvzip::test {

struct NaiveForward {
    std::vector<float> logits;            // n x vocab
    std::vector<std::vector<float>> q;    // per layer: n x (H*G*d), post-rotary
    std::vector<std::vector<float>> k;    // per layer: n x (H*d), post-rotary
    size_t n = 0;
};

NaiveForward naive_forward(const Model& model, std::span<const int32_t> tokens);

// full causal softmax attention for (l, h, g): n x n row-major, zero above diagonal
std::vector<float> naive_attention(const NaiveForward& nf, const ModelConfig& cfg, uint32_t l,
                                   uint32_t h, uint32_t g);

// only_group restricts the query-head max to one group member (-1 = all).
ScoreTensor naive_score_kvzip(const Model& model, const TokenSeq& context, uint32_t chunk_size,
                              const RepeatPromptSpec& prompt, ScoreMode mode,
                              int only_group = -1);

ScoreTensor naive_score_prefill_max(const Model& model, const TokenSeq& context);

ScoreTensor naive_score_snap_window(const Model& model, std::span<const int32_t> all_tokens,
                                    uint32_t n_ctx, uint32_t window, uint32_t kernel);

// dense attention with evicted key logits at -inf; queries are G rows
std::vector<float> naive_masked_attention(std::span<const float> queries, uint32_t n_groups,
                                          uint32_t head_dim, std::span<const float> keys,
                                          std::span<const float> values,
                                          std::span<const uint8_t> keep);

}  // namespace kvzip::test

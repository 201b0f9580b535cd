#pragma once

#include <cstdint>

namespace kvzip {

// Exact attention pair counts, one unit per (query, key) logit for a single
// layer / KV head / group member. Multiply by L*H*G for raw counter units.
constexpr uint64_t causal_pairs(uint64_t n) { return n * (n + 1) / 2; }
constexpr uint64_t cross_pairs(uint64_t n_cache, uint64_t n_in) {
    return n_in * n_cache + causal_pairs(n_in);
}

struct FlopReport {
    uint64_t n_ctx = 0;
    uint64_t chunk_size = 0;
    uint64_t n_chunks = 0;
    uint64_t prefill_pairs = 0;    // causal_pairs(n_ctx)
    uint64_t scoring_pairs = 0;    // sum over chunks of cross_pairs(n_ctx, n_in)
    double ratio = 0.0;            // scoring_pairs / prefill_pairs
    double ratio_closed_form = 0;  // 2 + m/n_ctx, the prompt-free idealization
};

// Analytic scoring cost with a prompt-free input (n_in = chunk length).
FlopReport flops_scoring(uint64_t n_ctx, uint64_t chunk_size);

}  // namespace kvzip

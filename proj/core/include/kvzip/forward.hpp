#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "kvzip/kv_cache.hpp"
#include "kvzip/model.hpp"

namespace kvzip {

// Attention work in (query, key) position pairs, accumulated over every
// layer, KV head, group member and visible key.
struct FlopCounter {
    uint64_t attn_pairs = 0;
};

// KV pairs produced by one forward call, before appending to the cache.
// keys/values per layer are [n_in][H][d], post-rotary, at positions
// cache.next_position + i.
struct NewKv {
    uint32_t n_in = 0;
    std::vector<std::vector<float>> keys;    // per layer
    std::vector<std::vector<float>> values;  // per layer
};

// Grouped-query features of the forward input, per layer [H][G][n_in][d].
struct QCapture {
    uint32_t n_in = 0;
    std::vector<std::vector<float>> q;

    // view of the (layer, head) block: G * n_in * d floats
    std::span<const float> at(const ModelConfig& cfg, uint32_t l, uint32_t h) const;
};

struct ForwardOptions {
    bool capture_q = false;
    FlopCounter* flops = nullptr;
};

struct ForwardResult {
    std::vector<float> logits;  // [n_in][vocab]
    NewKv kv;
    QCapture q;
};

// Causal forward over `tokens` given an immutable past cache: position i
// attends every cache entry plus input positions <= i. The cache is not
// modified; callers persist result.kv via append_kv when wanted.
// Throws CapacityError when positions would exceed max_position.
ForwardResult forward(const Model& model, std::span<const int32_t> tokens, const KvCache& cache,
                      const ForwardOptions& opts = {});

// Appends one KV pair per (layer, head, input position) and advances
// next_position. Roles default to Context.
void append_kv(KvCache& cache, const NewKv& kv, std::span<const TokenRole> roles = {});

// Forward + append; returns the prefilled cache with L*H*n_ctx pairs.
KvCache prefill(const Model& model, const TokenSeq& context, FlopCounter* flops = nullptr);

// Greedy decoding: each emitted token is the argmax of the logits, ties broken
// by lowest vocabulary index. The given cache is copied into a working state.
TokenSeq decode_greedy(const Model& model, const KvCache& cache, const TokenSeq& prompt,
                       uint32_t max_new, FlopCounter* flops = nullptr);
TokenSeq decode_greedy(const Model& model, const CompressedCache& cache, const TokenSeq& prompt,
                       uint32_t max_new, FlopCounter* flops = nullptr);

}  // namespace kvzip

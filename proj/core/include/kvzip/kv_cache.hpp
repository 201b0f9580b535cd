#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "kvzip/config.hpp"

namespace kvzip {

// One (layer, head) sequence. keys/values are row-major [len][head_dim],
// stored post-rotary. positions are original (strictly increasing) indices.
struct HeadSeq {
    std::vector<float> keys;
    std::vector<float> values;
    std::vector<int32_t> positions;
    std::vector<TokenRole> roles;

    size_t len() const { return positions.size(); }
    const float* key_row(size_t i, uint32_t d) const { return keys.data() + i * d; }
    const float* value_row(size_t i, uint32_t d) const { return values.data() + i * d; }
};

// Prefill yields one entry per (layer, head, position), all heads sharing the
// same length n_ctx. Compressed stores reuse the same layout with ragged
// per-head lengths.
struct KvCache {
    uint32_t n_layers = 0;
    uint32_t n_kv_heads = 0;
    uint32_t head_dim = 0;
    std::vector<HeadSeq> heads;  // n_layers * n_kv_heads
    int64_t next_position = 0;   // appended tokens continue here

    HeadSeq& head(uint32_t l, uint32_t h) { return heads[l * n_kv_heads + h]; }
    const HeadSeq& head(uint32_t l, uint32_t h) const { return heads[l * n_kv_heads + h]; }

    bool uniform() const;
    uint32_t n_ctx() const;  // uniform length; throws ContractError when ragged
    uint64_t total_pairs() const;
    // role per position, taken from head (0,0); meaningful for uniform caches
    std::vector<TokenRole> roles() const;
};

KvCache make_cache(const ModelConfig& cfg);

// keep[l][h][p], row-major. Built for a cache of uniform length n_ctx.
struct EvictionMask {
    uint32_t n_layers = 0;
    uint32_t n_kv_heads = 0;
    uint32_t n_ctx = 0;
    std::vector<uint8_t> keep;

    bool at(uint32_t l, uint32_t h, uint32_t p) const { return keep[(l * n_kv_heads + h) * size_t(n_ctx) + p] != 0; }
    void set(uint32_t l, uint32_t h, uint32_t p, bool v) { keep[(l * n_kv_heads + h) * size_t(n_ctx) + p] = v ? 1 : 0; }
    uint64_t kept_count() const;
    uint64_t kept_count(uint32_t l, uint32_t h) const;
};

EvictionMask make_mask(uint32_t n_layers, uint32_t n_kv_heads, uint32_t n_ctx, bool value = false);

// Whether the keep-set was chosen with or without sight of query tokens.
enum class Provenance : uint8_t { QueryAgnostic = 0, QueryConditioned = 1 };

struct CompressedCache {
    KvCache store;  // gathered kept pairs, ragged per head
    EvictionMask source_mask;
    std::vector<uint32_t> kept;  // per (layer, head)
    Provenance provenance = Provenance::QueryAgnostic;

    double ratio() const;
    uint64_t kept_pairs() const;
};

// Per-head gather of kept pairs; system-tagged positions are always retained.
// The source cache is unmodified. Throws ContractError on shape mismatch.
CompressedCache apply_mask(const KvCache& cache, const EvictionMask& mask,
                           Provenance provenance = Provenance::QueryAgnostic);

// kept pairs / total pairs
double cache_ratio(const EvictionMask& mask);

// Attention of `n_groups` query rows (each head_dim wide) over the kept pairs
// of one head plus the visible prefix of new-input KV. Numerically equal to
// dense attention over the full cache with evicted key logits at -inf.
// Throws ContractError when both the kept set and the new input are empty.
std::vector<float> attend_compressed(std::span<const float> queries, uint32_t n_groups,
                                     uint32_t head_dim, const HeadSeq& kept,
                                     std::span<const float> new_keys = {},
                                     std::span<const float> new_values = {});

// Debug export, magic "KVC1": dims, then per head [len, positions, roles, keys, values].
void save_cache_debug(const KvCache& cache, const std::filesystem::path& path);
KvCache load_cache_debug(const std::filesystem::path& path);

}  // namespace kvzip

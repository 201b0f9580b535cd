#pragma once

#include <vector>

#include "kvzip/config.hpp"
#include "kvzip/model.hpp"
#include "kvzip/rng.hpp"

namespace kvzip::test {

inline Model small_model(uint32_t layers = 2, uint32_t kv_heads = 2, uint32_t group = 2,
                         uint32_t dim = 8, uint32_t vocab = 64, uint32_t max_pos = 1024,
                         uint32_t seed = 7) {
    return init_model(make_config(layers, kv_heads, group, dim, vocab, max_pos, seed));
}

inline TokenSeq random_context(const ModelConfig& cfg, uint32_t n, uint64_t seed,
                               uint32_t n_system = 0) {
    Rng rng(seed, 0x7357);
    TokenSeq seq;
    const SpecialTokens sp = SpecialTokens::of(cfg);
    for (uint32_t i = 0; i < n; ++i) {
        seq.push_back(static_cast<int32_t>(rng.below(static_cast<uint32_t>(sp.data_limit))),
                      i < n_system ? TokenRole::System : TokenRole::Context);
    }
    return seq;
}

inline float max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
    float m = 0.0f;
    for (size_t i = 0; i < a.size() && i < b.size(); ++i) {
        const float d = std::abs(a[i] - b[i]);
        if (d > m) m = d;
    }
    if (a.size() != b.size()) return 1e30f;
    return m;
}

}  // namespace kvzip::test

#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "kvzip/kv_cache.hpp"
#include "kvzip/scoring.hpp"

namespace kvzip {

enum class BudgetMode : uint8_t { NonUniform, Uniform, HeadLevel };

const char* to_string(BudgetMode m);
BudgetMode budget_mode_from_string(std::string_view s);

struct BudgetSpec {
    double ratio = 1.0;
    BudgetMode mode = BudgetMode::NonUniform;
    uint32_t sink = 4;     // headlevel only
    uint32_t window = 16;  // headlevel only
    bool protect_system = true;
};

// ceil(ratio * n), guarded against binary-float products landing a hair above
// an integer.
uint32_t ceil_count(double ratio, uint64_t n);

// Per layer, keep the ceil(r * H * n_ctx) pairs with the highest scores across
// that layer's heads; ties broken by (head asc, position asc). System-tagged
// positions are kept in addition.
EvictionMask allocate_nonuniform(const ScoreTensor& scores, double ratio,
                                 std::span<const TokenRole> roles = {},
                                 bool protect_system = true);

// Per (layer, head), keep the top ceil(r * n_ctx) by score; same tie-break.
EvictionMask allocate_uniform(const ScoreTensor& scores, double ratio,
                              std::span<const TokenRole> roles = {}, bool protect_system = true);

// Context-independent policy: heads are full-cache or streaming(sink, window).
struct HeadPolicy {
    uint32_t n_layers = 0;
    uint32_t n_kv_heads = 0;
    uint32_t n_ctx = 0;
    uint32_t sink = 0;
    uint32_t window = 0;
    std::vector<uint8_t> full;  // per (layer, head)

    bool is_full(uint32_t l, uint32_t h) const { return full[l * n_kv_heads + h] != 0; }
    uint32_t n_full() const;
    uint32_t streaming_kept() const;  // min(sink + window, n_ctx)
    double achieved_ratio() const;
    double floor_ratio() const;  // all-streaming lower limit
};

// Heads ranked by HeadScore descending (ties by layer asc, head asc); the
// smallest count of full heads whose total kept ratio >= r is marked full.
// Ratios below the all-streaming floor are clamped with a warning.
// Requires sink + window <= n_ctx.
HeadPolicy allocate_headlevel(const HeadScore& head_scores, double ratio, uint32_t sink,
                              uint32_t window, uint32_t n_ctx);

// Streaming heads keep the first `sink` and last `window` positions.
EvictionMask policy_to_mask(const HeadPolicy& policy, std::span<const TokenRole> roles = {},
                            bool protect_system = true);

// Dispatch over BudgetSpec.mode.
EvictionMask allocate(const ScoreTensor& scores, const HeadScore& head_scores,
                      const BudgetSpec& budget, std::span<const TokenRole> roles = {});

struct BudgetSummary {
    uint64_t kept = 0;
    uint64_t total = 0;
    double ratio = 0.0;
    std::vector<uint64_t> per_layer_kept;
    uint32_t min_head_kept = 0;
    uint32_t max_head_kept = 0;
};

BudgetSummary mask_to_policy_report(const EvictionMask& mask);
BudgetSummary mask_to_policy_report(const HeadPolicy& policy);

}  // namespace kvzip

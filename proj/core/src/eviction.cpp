#include "kvzip/eviction.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace kvzip {

const char* to_string(BudgetMode m) {
    switch (m) {
        case BudgetMode::NonUniform: return "nonuniform";
        case BudgetMode::Uniform: return "uniform";
        case BudgetMode::HeadLevel: return "headlevel";
    }
    return "?";
}

BudgetMode budget_mode_from_string(std::string_view s) {
    if (s == "nonuniform") return BudgetMode::NonUniform;
    if (s == "uniform") return BudgetMode::Uniform;
    if (s == "headlevel") return BudgetMode::HeadLevel;
    throw ConfigError("unknown budget mode: " + std::string(s));
}

uint32_t ceil_count(double ratio, uint64_t n) {
    // guard against r*n landing epsilon above an integer (0.1 * 230 = 23 + ulp)
    const double x = ratio * static_cast<double>(n);
    const auto k = static_cast<int64_t>(std::ceil(x - 1e-9));
    if (k < 0) return 0;
    return static_cast<uint32_t>(std::min<int64_t>(k, static_cast<int64_t>(n)));
}

namespace {

void check_ratio(double r) {
    if (!(r > 0.0) || r > 1.0) {
        throw ContractError("budget ratio must be in (0, 1]");
    }
}

void check_roles(std::span<const TokenRole> roles, uint32_t n_ctx) {
    if (!roles.empty() && roles.size() != n_ctx) {
        throw ContractError("role span length does not match context length");
    }
}

void protect_system_positions(EvictionMask& mask, std::span<const TokenRole> roles) {
    if (roles.empty()) return;
    for (uint32_t p = 0; p < mask.n_ctx; ++p) {
        if (roles[p] != TokenRole::System) continue;
        for (uint32_t l = 0; l < mask.n_layers; ++l) {
            for (uint32_t h = 0; h < mask.n_kv_heads; ++h) mask.set(l, h, p, true);
        }
    }
}

}  // namespace

EvictionMask allocate_nonuniform(const ScoreTensor& s, double ratio,
                                 std::span<const TokenRole> roles, bool protect_system) {
    check_ratio(ratio);
    check_roles(roles, s.n_ctx);
    EvictionMask mask = make_mask(s.n_layers, s.n_kv_heads, s.n_ctx, false);
    const uint64_t per_layer = uint64_t(s.n_kv_heads) * s.n_ctx;
    const uint32_t k = ceil_count(ratio, per_layer);

    std::vector<uint32_t> order(per_layer);
    for (uint32_t l = 0; l < s.n_layers; ++l) {
        std::iota(order.begin(), order.end(), 0u);
        const float* layer_scores = s.scores.data() + size_t(l) * per_layer;
        // ties: lower head, then lower position, wins
        std::sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
            const float sa = layer_scores[a];
            const float sb = layer_scores[b];
            if (sa != sb) return sa > sb;
            return a < b;  // index encodes (head, position) in row-major order
        });
        for (uint32_t i = 0; i < k; ++i) {
            const uint32_t h = order[i] / s.n_ctx;
            const uint32_t p = order[i] % s.n_ctx;
            mask.set(l, h, p, true);
        }
    }
    if (protect_system) protect_system_positions(mask, roles);
    return mask;
}

EvictionMask allocate_uniform(const ScoreTensor& s, double ratio, std::span<const TokenRole> roles,
                              bool protect_system) {
    check_ratio(ratio);
    check_roles(roles, s.n_ctx);
    EvictionMask mask = make_mask(s.n_layers, s.n_kv_heads, s.n_ctx, false);
    const uint32_t k = ceil_count(ratio, s.n_ctx);

    std::vector<uint32_t> order(s.n_ctx);
    for (uint32_t l = 0; l < s.n_layers; ++l) {
        for (uint32_t h = 0; h < s.n_kv_heads; ++h) {
            std::iota(order.begin(), order.end(), 0u);
            const float* head_scores = &s.scores[(size_t(l) * s.n_kv_heads + h) * s.n_ctx];
            std::sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
                const float sa = head_scores[a];
                const float sb = head_scores[b];
                if (sa != sb) return sa > sb;
                return a < b;
            });
            for (uint32_t i = 0; i < k; ++i) mask.set(l, h, order[i], true);
        }
    }
    if (protect_system) protect_system_positions(mask, roles);
    return mask;
}

uint32_t HeadPolicy::n_full() const {
    uint32_t n = 0;
    for (uint8_t f : full) n += f ? 1 : 0;
    return n;
}

uint32_t HeadPolicy::streaming_kept() const { return std::min(sink + window, n_ctx); }

double HeadPolicy::achieved_ratio() const {
    const uint64_t heads = full.size();
    const uint64_t total = heads * n_ctx;
    if (total == 0) return 1.0;
    const uint64_t kept =
        uint64_t(n_full()) * n_ctx + (heads - n_full()) * uint64_t(streaming_kept());
    return static_cast<double>(kept) / static_cast<double>(total);
}

double HeadPolicy::floor_ratio() const {
    return n_ctx == 0 ? 1.0 : static_cast<double>(streaming_kept()) / static_cast<double>(n_ctx);
}

HeadPolicy allocate_headlevel(const HeadScore& head_scores, double ratio, uint32_t sink,
                              uint32_t window, uint32_t n_ctx) {
    check_ratio(ratio);
    if (sink + window > n_ctx) {
        throw ContractError("sink + window must not exceed the context length");
    }
    HeadPolicy policy;
    policy.n_layers = head_scores.n_layers;
    policy.n_kv_heads = head_scores.n_kv_heads;
    policy.n_ctx = n_ctx;
    policy.sink = sink;
    policy.window = window;
    const uint32_t n_heads = head_scores.n_layers * head_scores.n_kv_heads;
    policy.full.assign(n_heads, 0);
    if (n_heads == 0 || n_ctx == 0) return policy;

    if (ratio < policy.floor_ratio() - 1e-12) {
        std::fprintf(stderr,
                     "[kvzip] headlevel: requested ratio %.4f below the all-streaming floor %.4f; "
                     "clamped\n",
                     ratio, policy.floor_ratio());
    }

    std::vector<uint32_t> order(n_heads);
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
        const float sa = head_scores.scores[a];
        const float sb = head_scores.scores[b];
        if (sa != sb) return sa > sb;
        return a < b;  // (layer, head) row-major
    });

    const uint64_t total = uint64_t(n_heads) * n_ctx;
    const uint64_t s = policy.streaming_kept();
    const double target = ratio * static_cast<double>(total) - 1e-9;
    uint32_t n_full = 0;
    for (; n_full <= n_heads; ++n_full) {
        const uint64_t kept = uint64_t(n_full) * n_ctx + uint64_t(n_heads - n_full) * s;
        if (static_cast<double>(kept) >= target) break;
    }
    n_full = std::min(n_full, n_heads);
    for (uint32_t i = 0; i < n_full; ++i) policy.full[order[i]] = 1;
    return policy;
}

EvictionMask policy_to_mask(const HeadPolicy& policy, std::span<const TokenRole> roles,
                            bool protect_system) {
    check_roles(roles, policy.n_ctx);
    EvictionMask mask = make_mask(policy.n_layers, policy.n_kv_heads, policy.n_ctx, false);
    for (uint32_t l = 0; l < policy.n_layers; ++l) {
        for (uint32_t h = 0; h < policy.n_kv_heads; ++h) {
            const bool full = policy.is_full(l, h);
            for (uint32_t p = 0; p < policy.n_ctx; ++p) {
                const bool keep =
                    full || p < policy.sink || p + policy.window >= policy.n_ctx;
                if (keep) mask.set(l, h, p, true);
            }
        }
    }
    if (protect_system) protect_system_positions(mask, roles);
    return mask;
}

EvictionMask allocate(const ScoreTensor& scores, const HeadScore& head_scores,
                      const BudgetSpec& budget, std::span<const TokenRole> roles) {
    switch (budget.mode) {
        case BudgetMode::NonUniform:
            return allocate_nonuniform(scores, budget.ratio, roles, budget.protect_system);
        case BudgetMode::Uniform:
            return allocate_uniform(scores, budget.ratio, roles, budget.protect_system);
        case BudgetMode::HeadLevel: {
            const HeadPolicy policy = allocate_headlevel(head_scores, budget.ratio, budget.sink,
                                                         budget.window, scores.n_ctx);
            return policy_to_mask(policy, roles, budget.protect_system);
        }
    }
    throw ContractError("unreachable budget mode");
}

BudgetSummary mask_to_policy_report(const EvictionMask& mask) {
    BudgetSummary sum;
    sum.total = uint64_t(mask.n_layers) * mask.n_kv_heads * mask.n_ctx;
    sum.per_layer_kept.assign(mask.n_layers, 0);
    uint32_t min_kept = mask.n_ctx;
    uint32_t max_kept = 0;
    for (uint32_t l = 0; l < mask.n_layers; ++l) {
        for (uint32_t h = 0; h < mask.n_kv_heads; ++h) {
            const auto kept = static_cast<uint32_t>(mask.kept_count(l, h));
            sum.per_layer_kept[l] += kept;
            sum.kept += kept;
            min_kept = std::min(min_kept, kept);
            max_kept = std::max(max_kept, kept);
        }
    }
    sum.min_head_kept = mask.n_layers * mask.n_kv_heads == 0 ? 0 : min_kept;
    sum.max_head_kept = max_kept;
    sum.ratio = sum.total == 0 ? 1.0 : static_cast<double>(sum.kept) / static_cast<double>(sum.total);
    return sum;
}

BudgetSummary mask_to_policy_report(const HeadPolicy& policy) {
    BudgetSummary sum;
    const uint32_t s = policy.streaming_kept();
    sum.total = uint64_t(policy.n_layers) * policy.n_kv_heads * policy.n_ctx;
    sum.per_layer_kept.assign(policy.n_layers, 0);
    uint32_t min_kept = policy.n_ctx;
    uint32_t max_kept = 0;
    for (uint32_t l = 0; l < policy.n_layers; ++l) {
        for (uint32_t h = 0; h < policy.n_kv_heads; ++h) {
            const uint32_t kept = policy.is_full(l, h) ? policy.n_ctx : s;
            sum.per_layer_kept[l] += kept;
            sum.kept += kept;
            min_kept = std::min(min_kept, kept);
            max_kept = std::max(max_kept, kept);
        }
    }
    sum.min_head_kept = policy.full.empty() ? 0 : min_kept;
    sum.max_head_kept = max_kept;
    sum.ratio = sum.total == 0 ? 1.0 : static_cast<double>(sum.kept) / static_cast<double>(sum.total);
    return sum;
}

}  // namespace kvzip

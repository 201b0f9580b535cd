#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kvzip/eviction.hpp"
#include "kvzip/forward.hpp"
#include "kvzip/scoring.hpp"
#include "kvzip/tasks.hpp"

namespace kvzip {

// Teacher-forced argmax accuracy of reproducing the context tokens given the
// repeat prompt and a compressed cache.
double eval_repeat_accuracy(const Model& model, const CompressedCache& cache,
                            const TokenSeq& context, const RepeatPromptSpec& prompt);

// Mean exact-match of greedy decodes against gold answers. The cache must be
// query-agnostic unless allow_query_conditioned is set.
double eval_queries(const Model& model, const CompressedCache& cache, std::span<const Query> queries,
                    bool allow_query_conditioned = false);

struct CurveCell {
    std::string task;
    std::string method;
    BudgetMode mode = BudgetMode::NonUniform;
    double ratio = 0.0;
    double accuracy = 0.0;
    double repeat_accuracy = 0.0;
    uint64_t kept_pairs = 0;
    uint64_t total_pairs = 0;
};

struct EvalReport {
    uint32_t schema = 1;
    std::string fingerprint;  // hash of config, tasks, methods, ratios, seed
    uint64_t scoring_pairs = 0;
    uint64_t prefill_pairs = 0;
    std::vector<CurveCell> cells;
};

struct CurveOptions {
    BudgetMode mode = BudgetMode::NonUniform;
    uint32_t chunk_size = kDeskChunkSize;
    uint32_t instances = 4;  // contexts averaged per task
    uint32_t snap_window = 16;
    uint32_t snap_kernel = 7;
    uint32_t sink = 4;
    uint32_t stream_window = 16;
    uint32_t threads = 1;
    bool with_repeat = true;  // also measure reconstruction accuracy
};

// Full |tasks| x |methods| x |ratios| cross-product under the reuse protocol:
// each context is prefilled and scored once per method, compressed per ratio,
// then evaluated on all queries.
EvalReport compression_curve(const Model& model, std::span<const TaskSpec> tasks,
                             std::span<const ScoreMethod> methods, std::span<const double> ratios,
                             const CurveOptions& opts = {});

struct EfficiencyReport {
    uint64_t n_ctx = 0;
    uint64_t chunk_size = 0;
    double ratio = 0.0;
    FlopReport scoring;  // prompt-free analytic counts
    uint64_t total_pairs = 0;
    uint64_t kept_pairs = 0;
    uint64_t full_cache_bytes = 0;
    uint64_t kept_cache_bytes = 0;
    double decode_attn_fraction = 0.0;  // kept / total
};

// Analytic decode-FLOP and cache-size accounting:
// bytes = pairs * 2 vectors * head_dim * sizeof(float).
EfficiencyReport efficiency_report(const ModelConfig& cfg, uint64_t n_ctx, uint64_t chunk_size,
                                   double ratio);

}  // namespace kvzip

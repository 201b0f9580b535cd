#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "kvzip/flops.hpp"
#include "kvzip/forward.hpp"
#include "kvzip/kv_cache.hpp"
#include "kvzip/model.hpp"

namespace kvzip {

enum class ScoreMethod : uint8_t { KvZip, KvZipLogit, PrefillMax, SnapWindow };
enum class ScoreMode : uint8_t { Softmax, Logit };

const char* to_string(ScoreMethod m);
ScoreMethod score_method_from_string(std::string_view s);

// Importance scores S, [layers][kv_heads][n_ctx]. Softmax-based methods yield
// scores in [0, 1]; logit mode yields unbounded reals; snap-window marks its
// force-kept observation window with +inf.
struct ScoreTensor {
    uint32_t n_layers = 0;
    uint32_t n_kv_heads = 0;
    uint32_t n_ctx = 0;
    ScoreMethod method = ScoreMethod::KvZip;
    uint32_t chunk_size = 0;
    std::vector<float> scores;

    float at(uint32_t l, uint32_t h, uint32_t p) const {
        return scores[(l * n_kv_heads + h) * size_t(n_ctx) + p];
    }
    float& at(uint32_t l, uint32_t h, uint32_t p) {
        return scores[(l * n_kv_heads + h) * size_t(n_ctx) + p];
    }
};

// Max over the position axis of a ScoreTensor.
struct HeadScore {
    uint32_t n_layers = 0;
    uint32_t n_kv_heads = 0;
    std::vector<float> scores;

    float at(uint32_t l, uint32_t h) const { return scores[l * n_kv_heads + h]; }
    float& at(uint32_t l, uint32_t h) { return scores[l * n_kv_heads + h]; }
};

// Reconstruction prompt rendered in the reserved-token vocabulary.
// Input for chunk t:
//   t = 0:  first ++ chunk_t
//   t > 0:  cont ++ (trailing span of chunk t-1, span_len tokens) ++ {sep} ++ chunk_t
struct RepeatPromptSpec {
    std::vector<int32_t> first;
    std::vector<int32_t> cont;
    int32_t sep = 0;
    uint32_t span_len = 8;

    uint32_t prompt_len(uint32_t chunk_index, uint32_t prev_chunk_len) const;
};

RepeatPromptSpec default_repeat_prompt(const ModelConfig& cfg);
// Alternate rendering of equal token length; scoring is insensitive to the wording.
RepeatPromptSpec alternate_repeat_prompt(const ModelConfig& cfg);
// Empty prompt ("\n\n" analog): chunks are forwarded bare.
RepeatPromptSpec no_repeat_prompt();

inline constexpr uint32_t kLongContextChunkSize = 2048;  // reference default
inline constexpr uint32_t kDeskChunkSize = 64;           // desk-scale default

struct KvzipResult {
    ScoreTensor scores;
    HeadScore head;
    FlopReport flops;             // analytic, prompt lengths included
    uint64_t measured_pairs = 0;  // raw counter over the scoring forwards (x L*H*G)
};

// Chunked reconstruction scoring: the context is partitioned into
// ceil(n_ctx / chunk_size) chunks; each chunk is re-forwarded behind its
// prompt with the full cache, attention is recomputed between the input's
// grouped queries and the chunk's cached keys plus the input's own keys
// (softmax over that key set, causal among input positions), and each cached
// key's score is the max over group members and input positions. Logit mode
// skips the softmax and takes the max of raw scaled QK products.
// Requires cache = prefill(context). Throws ContractError on length mismatch.
KvzipResult score_kvzip(const Model& model, const KvCache& cache, const TokenSeq& context,
                        uint32_t chunk_size, const RepeatPromptSpec& prompt,
                        ScoreMode mode = ScoreMode::Softmax);

// Max causal self-attention each KV pair receives during prefill, maximized
// over grouped queries and later positions.
ScoreTensor score_prefill_max(const Model& model, const TokenSeq& context);

// Attention received from the trailing `window` query positions, averaged over
// those queries, max over group members, then 1-D max-pooled along the key
// axis (odd kernel, same padding). Window keys themselves are force-kept
// (score +inf). window > n_ctx is reduced to n_ctx with a warning.
ScoreTensor score_snap_window(const Model& model, const TokenSeq& context, uint32_t window = 32,
                              uint32_t kernel = 7);

// Same, with explicit observation tokens appended after the context (the
// query-conditioned compression setup): scores still cover context positions
// only, and the trailing context positions inside the window remain force-kept.
ScoreTensor score_snap_window_observed(const Model& model, const TokenSeq& context,
                                       const TokenSeq& observation, uint32_t window = 32,
                                       uint32_t kernel = 7);

HeadScore aggregate_head(const ScoreTensor& scores);

// Analytic cost of the actual pipeline, prompt lengths included.
FlopReport flops_scoring(uint64_t n_ctx, uint64_t chunk_size, const RepeatPromptSpec& prompt);

}  // namespace kvzip

#include "kvzip/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "kernels.hpp"

namespace kvzip {

const char* to_string(ScoreMethod m) {
    switch (m) {
        case ScoreMethod::KvZip: return "kvzip";
        case ScoreMethod::KvZipLogit: return "kvzip-logit";
        case ScoreMethod::PrefillMax: return "prefill-max";
        case ScoreMethod::SnapWindow: return "snap-window";
    }
    return "?";
}

ScoreMethod score_method_from_string(std::string_view s) {
    if (s == "kvzip") return ScoreMethod::KvZip;
    if (s == "kvzip-logit") return ScoreMethod::KvZipLogit;
    if (s == "prefill-max") return ScoreMethod::PrefillMax;
    if (s == "snap-window") return ScoreMethod::SnapWindow;
    throw ConfigError("unknown scoring method: " + std::string(s));
}

uint32_t RepeatPromptSpec::prompt_len(uint32_t chunk_index, uint32_t prev_chunk_len) const {
    if (chunk_index == 0) return static_cast<uint32_t>(first.size());
    const uint32_t span = std::min(span_len, prev_chunk_len);
    const uint32_t with_sep = (cont.empty() && span_len == 0) ? 0 : 1;
    return static_cast<uint32_t>(cont.size()) + span + with_sep;
}

RepeatPromptSpec default_repeat_prompt(const ModelConfig& cfg) {
    if (cfg.vocab_size <= SpecialTokens::reserved) {
        throw ConfigError("vocabulary too small for reserved prompt tokens");
    }
    const SpecialTokens sp = SpecialTokens::of(cfg);
    RepeatPromptSpec p;
    p.first = {sp.repeat, sp.sep};
    p.cont = {sp.cont};
    p.sep = sp.sep;
    p.span_len = 8;
    return p;
}

RepeatPromptSpec alternate_repeat_prompt(const ModelConfig& cfg) {
    // paraphrase analog: a different marker token renders the instruction,
    // structure and length unchanged
    RepeatPromptSpec p = default_repeat_prompt(cfg);
    const SpecialTokens sp = SpecialTokens::of(cfg);
    p.first = {sp.query, sp.sep};
    return p;
}

RepeatPromptSpec no_repeat_prompt() {
    RepeatPromptSpec p;
    p.span_len = 0;
    p.sep = 0;
    return p;
}

namespace {

// prompt tokens for chunk t; must agree with RepeatPromptSpec::prompt_len
std::vector<int32_t> build_chunk_prompt(const RepeatPromptSpec& prompt,
                                        std::span<const int32_t> context, uint32_t chunk_index,
                                        uint32_t chunk_begin) {
    std::vector<int32_t> out;
    if (chunk_index == 0) {
        out = prompt.first;
        return out;
    }
    out = prompt.cont;
    const uint32_t span = std::min<uint32_t>(prompt.span_len, chunk_begin);
    for (uint32_t i = chunk_begin - span; i < chunk_begin; ++i) out.push_back(context[i]);
    if (!(prompt.cont.empty() && prompt.span_len == 0)) out.push_back(prompt.sep);
    return out;
}

}  // namespace

KvzipResult score_kvzip(const Model& model, const KvCache& cache, const TokenSeq& context,
                        uint32_t chunk_size, const RepeatPromptSpec& prompt, ScoreMode mode) {
    const ModelConfig& cfg = model.config;
    const uint32_t n_c = cache.n_ctx();
    if (n_c != context.size()) {
        throw ContractError("cache length does not match context length");
    }
    if (static_cast<uint64_t>(cache.next_position) != n_c) {
        throw ContractError("cache is not the prefill of the given context");
    }
    if (chunk_size < 1) throw ContractError("chunk size must be >= 1");

    const uint32_t d = cfg.head_dim;
    const uint32_t H = cfg.n_kv_heads;
    const uint32_t G = cfg.group_size;
    const float scale = 1.0f / std::sqrt(static_cast<float>(d));
    const size_t kv_dim = cfg.kv_dim();

    KvzipResult res;
    res.scores.n_layers = cfg.n_layers;
    res.scores.n_kv_heads = H;
    res.scores.n_ctx = n_c;
    res.scores.method = mode == ScoreMode::Softmax ? ScoreMethod::KvZip : ScoreMethod::KvZipLogit;
    res.scores.chunk_size = chunk_size;
    const float init = mode == ScoreMode::Softmax ? 0.0f : -std::numeric_limits<float>::infinity();
    res.scores.scores.assign(size_t(cfg.n_layers) * H * n_c, init);
    res.flops = flops_scoring(n_c, chunk_size, prompt);

    if (n_c == 0) {
        res.head = aggregate_head(res.scores);
        return res;
    }

    // chunk ranges partition [0, n_c); each position is written exactly once
    std::vector<uint32_t> writes(n_c, 0);
    FlopCounter counter;

    const uint32_t n_chunks = (n_c + chunk_size - 1) / chunk_size;
    std::vector<float> logits;
    for (uint32_t t = 0; t < n_chunks; ++t) {
        const uint32_t begin = t * chunk_size;
        const uint32_t end = std::min(n_c, begin + chunk_size);
        const uint32_t chunk_len = end - begin;

        std::vector<int32_t> input = build_chunk_prompt(prompt, context.tokens, t, begin);
        input.insert(input.end(), context.tokens.begin() + begin, context.tokens.begin() + end);
        const uint32_t n_in = static_cast<uint32_t>(input.size());

        ForwardOptions opts;
        opts.capture_q = true;
        opts.flops = &counter;
        const ForwardResult fwd = forward(model, input, cache, opts);

        for (uint32_t l = 0; l < cfg.n_layers; ++l) {
            const std::vector<float>& new_k = fwd.kv.keys[l];  // [n_in][H][d]
            for (uint32_t h = 0; h < H; ++h) {
                const HeadSeq& past = cache.head(l, h);
                const std::span<const float> q_block = fwd.q.at(cfg, l, h);  // [G][n_in][d]
                float* s_row = &res.scores.at(l, h, begin);

                for (uint32_t g = 0; g < G; ++g) {
                    for (uint32_t i = 0; i < n_in; ++i) {
                        const float* q = q_block.data() + (size_t(g) * n_in + i) * d;
                        const size_t n_keys = size_t(chunk_len) + i + 1;  // chunk + causal input
                        logits.resize(n_keys);
                        float max_logit = -std::numeric_limits<float>::infinity();
                        for (size_t j = 0; j < n_keys; ++j) {
                            const float* k = j < chunk_len
                                                 ? past.key_row(begin + j, d)
                                                 : new_k.data() + (j - chunk_len) * kv_dim + size_t(h) * d;
                            float dot = 0.0f;
                            for (uint32_t e = 0; e < d; ++e) dot += q[e] * k[e];
                            logits[j] = dot * scale;
                            if (logits[j] > max_logit) max_logit = logits[j];
                        }
                        if (mode == ScoreMode::Softmax) {
                            float denom = 0.0f;
                            for (size_t j = 0; j < n_keys; ++j) {
                                logits[j] = std::exp(logits[j] - max_logit);
                                denom += logits[j];
                            }
                            for (uint32_t j = 0; j < chunk_len; ++j) {
                                const float a = logits[j] / denom;
                                if (a > s_row[j]) s_row[j] = a;
                            }
                        } else {
                            for (uint32_t j = 0; j < chunk_len; ++j) {
                                if (logits[j] > s_row[j]) s_row[j] = logits[j];
                            }
                        }
                    }
                }
            }
        }
        for (uint32_t p = begin; p < end; ++p) writes[p] += 1;
    }

    for (uint32_t p = 0; p < n_c; ++p) {
        if (writes[p] != 1) throw ContractError("chunk ranges failed to partition the context");
    }
    res.measured_pairs = counter.attn_pairs;
    res.head = aggregate_head(res.scores);
    return res;
}

namespace {

// full causal attention rows from a capture of a prefill forward
struct PrefillAttention {
    ForwardResult fwd;
    uint32_t n = 0;

    // probabilities of query (h, g, i) over keys j <= i
    void row(const ModelConfig& cfg, uint32_t l, uint32_t h, uint32_t g, uint32_t i,
             std::vector<float>& out) const {
        const uint32_t d = cfg.head_dim;
        const size_t kv_dim = cfg.kv_dim();
        const float scale = 1.0f / std::sqrt(static_cast<float>(d));
        const float* q = fwd.q.at(cfg, l, h).data() + (size_t(g) * n + i) * d;
        const std::vector<float>& keys = fwd.kv.keys[l];
        out.resize(i + 1);
        float max_logit = -std::numeric_limits<float>::infinity();
        for (uint32_t j = 0; j <= i; ++j) {
            const float* k = keys.data() + size_t(j) * kv_dim + size_t(h) * d;
            float dot = 0.0f;
            for (uint32_t e = 0; e < d; ++e) dot += q[e] * k[e];
            out[j] = dot * scale;
            if (out[j] > max_logit) max_logit = out[j];
        }
        float denom = 0.0f;
        for (uint32_t j = 0; j <= i; ++j) {
            out[j] = std::exp(out[j] - max_logit);
            denom += out[j];
        }
        for (uint32_t j = 0; j <= i; ++j) out[j] /= denom;
    }
};

PrefillAttention capture_prefill(const Model& model, std::span<const int32_t> tokens) {
    PrefillAttention pa;
    KvCache empty = make_cache(model.config);
    ForwardOptions opts;
    opts.capture_q = true;
    pa.fwd = forward(model, tokens, empty, opts);
    pa.n = static_cast<uint32_t>(tokens.size());
    return pa;
}

}  // namespace

ScoreTensor score_prefill_max(const Model& model, const TokenSeq& context) {
    const ModelConfig& cfg = model.config;
    const uint32_t n = static_cast<uint32_t>(context.size());

    ScoreTensor s;
    s.n_layers = cfg.n_layers;
    s.n_kv_heads = cfg.n_kv_heads;
    s.n_ctx = n;
    s.method = ScoreMethod::PrefillMax;
    s.scores.assign(size_t(cfg.n_layers) * cfg.n_kv_heads * n, 0.0f);
    if (n == 0) return s;

    const PrefillAttention pa = capture_prefill(model, context.tokens);
    std::vector<float> row;
    for (uint32_t l = 0; l < cfg.n_layers; ++l) {
        for (uint32_t h = 0; h < cfg.n_kv_heads; ++h) {
            float* dst = &s.at(l, h, 0);
            for (uint32_t g = 0; g < cfg.group_size; ++g) {
                for (uint32_t i = 0; i < n; ++i) {
                    pa.row(cfg, l, h, g, i, row);
                    for (uint32_t j = 0; j <= i; ++j) {
                        if (row[j] > dst[j]) dst[j] = row[j];
                    }
                }
            }
        }
    }
    return s;
}

namespace {

ScoreTensor snap_scores(const Model& model, std::span<const int32_t> all_tokens, uint32_t n_ctx,
                        uint32_t window, uint32_t kernel) {
    const ModelConfig& cfg = model.config;
    if (kernel < 1 || kernel % 2 == 0) throw ContractError("pooling kernel must be odd");
    const uint32_t n_total = static_cast<uint32_t>(all_tokens.size());
    uint32_t w = window;
    if (w > n_total) {
        std::fprintf(stderr, "[kvzip] snap-window: window %u exceeds sequence length %u; reduced\n",
                     window, n_total);
        w = n_total;
    }
    if (w < 1) throw ContractError("observation window must be >= 1");

    ScoreTensor s;
    s.n_layers = cfg.n_layers;
    s.n_kv_heads = cfg.n_kv_heads;
    s.n_ctx = n_ctx;
    s.method = ScoreMethod::SnapWindow;
    s.scores.assign(size_t(cfg.n_layers) * cfg.n_kv_heads * n_ctx, 0.0f);
    if (n_ctx == 0) return s;

    const PrefillAttention pa = capture_prefill(model, all_tokens);
    const uint32_t first_q = n_total - w;
    std::vector<float> row, raw(n_ctx), pooled(n_ctx);
    const uint32_t half = kernel / 2;

    for (uint32_t l = 0; l < cfg.n_layers; ++l) {
        for (uint32_t h = 0; h < cfg.n_kv_heads; ++h) {
            std::fill(raw.begin(), raw.end(), 0.0f);
            for (uint32_t g = 0; g < cfg.group_size; ++g) {
                std::vector<float> acc(n_ctx, 0.0f);
                for (uint32_t i = first_q; i < n_total; ++i) {
                    pa.row(cfg, l, h, g, i, row);
                    const uint32_t lim = std::min(n_ctx, i + 1);
                    for (uint32_t j = 0; j < lim; ++j) acc[j] += row[j];
                }
                for (uint32_t j = 0; j < n_ctx; ++j) {
                    const float mean = acc[j] / static_cast<float>(w);
                    if (mean > raw[j]) raw[j] = mean;
                }
            }
            for (uint32_t j = 0; j < n_ctx; ++j) {
                const uint32_t lo = j >= half ? j - half : 0;
                const uint32_t hi = std::min(n_ctx - 1, j + half);
                float m = raw[lo];
                for (uint32_t j2 = lo + 1; j2 <= hi; ++j2) m = std::max(m, raw[j2]);
                pooled[j] = m;
            }
            float* dst = &s.at(l, h, 0);
            std::copy(pooled.begin(), pooled.end(), dst);
            // observation-window keys inside the context are always retained
            for (uint32_t j = first_q; j < n_ctx; ++j) {
                dst[j] = std::numeric_limits<float>::infinity();
            }
        }
    }
    return s;
}

}  // namespace

ScoreTensor score_snap_window(const Model& model, const TokenSeq& context, uint32_t window,
                              uint32_t kernel) {
    return snap_scores(model, context.tokens, static_cast<uint32_t>(context.size()), window,
                       kernel);
}

ScoreTensor score_snap_window_observed(const Model& model, const TokenSeq& context,
                                       const TokenSeq& observation, uint32_t window,
                                       uint32_t kernel) {
    std::vector<int32_t> all = context.tokens;
    all.insert(all.end(), observation.tokens.begin(), observation.tokens.end());
    return snap_scores(model, all, static_cast<uint32_t>(context.size()), window, kernel);
}

HeadScore aggregate_head(const ScoreTensor& s) {
    HeadScore out;
    out.n_layers = s.n_layers;
    out.n_kv_heads = s.n_kv_heads;
    out.scores.assign(size_t(s.n_layers) * s.n_kv_heads, 0.0f);
    for (uint32_t l = 0; l < s.n_layers; ++l) {
        for (uint32_t h = 0; h < s.n_kv_heads; ++h) {
            float m = s.n_ctx > 0 ? s.at(l, h, 0) : 0.0f;
            for (uint32_t p = 1; p < s.n_ctx; ++p) m = std::max(m, s.at(l, h, p));
            out.at(l, h) = m;
        }
    }
    return out;
}

FlopReport flops_scoring(uint64_t n_ctx, uint64_t chunk_size) {
    return flops_scoring(n_ctx, chunk_size, no_repeat_prompt());
}

FlopReport flops_scoring(uint64_t n_ctx, uint64_t chunk_size, const RepeatPromptSpec& prompt) {
    if (chunk_size < 1) throw ContractError("chunk size must be >= 1");
    FlopReport r;
    r.n_ctx = n_ctx;
    r.chunk_size = chunk_size;
    r.prefill_pairs = causal_pairs(n_ctx);
    uint64_t prev_len = 0;
    for (uint64_t begin = 0, t = 0; begin < n_ctx; begin += chunk_size, ++t) {
        const uint64_t len = std::min<uint64_t>(chunk_size, n_ctx - begin);
        const uint64_t n_prompt =
            prompt.prompt_len(static_cast<uint32_t>(t), static_cast<uint32_t>(prev_len));
        r.scoring_pairs += cross_pairs(n_ctx, n_prompt + len);
        r.n_chunks += 1;
        prev_len = len;
    }
    if (r.prefill_pairs > 0) {
        r.ratio = static_cast<double>(r.scoring_pairs) / static_cast<double>(r.prefill_pairs);
    }
    r.ratio_closed_form =
        n_ctx > 0 ? 2.0 + static_cast<double>(chunk_size) / static_cast<double>(n_ctx) : 0.0;
    return r;
}

}  // namespace kvzip

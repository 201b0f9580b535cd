#include "kvzip/forward.hpp"

#include <cmath>
#include <limits>

#include "kernels.hpp"

namespace kvzip {

std::span<const float> QCapture::at(const ModelConfig& cfg, uint32_t l, uint32_t h) const {
    const size_t block = size_t(cfg.group_size) * n_in * cfg.head_dim;
    return std::span<const float>(q[l].data() + h * block, block);
}

namespace {

// attention of one query row over [cache head | first n_new_visible new rows]
void attend_one(const float* q, const HeadSeq& past, const float* new_k, const float* new_v,
                size_t n_new_visible, uint32_t d, uint32_t kv_stride, float scale, float* out,
                std::vector<float>& logits) {
    const size_t n_past = past.len();
    const size_t n_keys = n_past + n_new_visible;
    logits.resize(n_keys);

    float max_logit = -std::numeric_limits<float>::infinity();
    for (size_t j = 0; j < n_keys; ++j) {
        const float* k =
            j < n_past ? past.key_row(j, d) : new_k + (j - n_past) * kv_stride;
        float dot = 0.0f;
        for (uint32_t e = 0; e < d; ++e) dot += q[e] * k[e];
        logits[j] = dot * scale;
        if (logits[j] > max_logit) max_logit = logits[j];
    }
    float denom = 0.0f;
    for (size_t j = 0; j < n_keys; ++j) {
        logits[j] = std::exp(logits[j] - max_logit);
        denom += logits[j];
    }
    for (uint32_t e = 0; e < d; ++e) out[e] = 0.0f;
    for (size_t j = 0; j < n_keys; ++j) {
        const float w = logits[j] / denom;
        const float* v =
            j < n_past ? past.value_row(j, d) : new_v + (j - n_past) * kv_stride;
        for (uint32_t e = 0; e < d; ++e) out[e] += w * v[e];
    }
}

}  // namespace

ForwardResult forward(const Model& model, std::span<const int32_t> tokens, const KvCache& cache,
                      const ForwardOptions& opts) {
    const ModelConfig& cfg = model.config;
    const size_t n = tokens.size();
    const size_t hidden = cfg.hidden_dim;
    const uint32_t d = cfg.head_dim;
    const uint32_t H = cfg.n_kv_heads;
    const uint32_t G = cfg.group_size;
    const size_t q_dim = size_t(cfg.n_query_heads()) * d;
    const size_t kv_dim = cfg.kv_dim();

    if (cache.next_position + static_cast<int64_t>(n) > static_cast<int64_t>(cfg.max_position)) {
        throw CapacityError("position overflow: cache at " + std::to_string(cache.next_position) +
                            " + " + std::to_string(n) + " input tokens exceeds max_position " +
                            std::to_string(cfg.max_position));
    }
    for (int32_t t : tokens) {
        if (t < 0 || t >= static_cast<int32_t>(cfg.vocab_size)) {
            throw ContractError("token id out of vocabulary: " + std::to_string(t));
        }
    }

    ForwardResult res;
    res.kv.n_in = static_cast<uint32_t>(n);
    res.kv.keys.assign(cfg.n_layers, {});
    res.kv.values.assign(cfg.n_layers, {});
    if (opts.capture_q) {
        res.q.n_in = static_cast<uint32_t>(n);
        res.q.q.assign(cfg.n_layers, {});
    }
    if (n == 0) return res;

    std::vector<float> x(n * hidden);
    for (size_t i = 0; i < n; ++i) {
        const float* row = model.embedding.data() + size_t(tokens[i]) * hidden;
        std::copy(row, row + hidden, x.begin() + i * hidden);
    }

    std::vector<float> xn(n * hidden), q(n * q_dim), attn(n * q_dim), proj(n * hidden);
    std::vector<float> gate(n * cfg.ff_dim()), up(n * cfg.ff_dim());
    std::vector<float> logit_buf;
    const float scale = 1.0f / std::sqrt(static_cast<float>(d));

    for (uint32_t l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& w = model.layers[l];

        for (size_t i = 0; i < n; ++i) {
            detail::rmsnorm_row(x.data() + i * hidden, w.attn_norm.data(), xn.data() + i * hidden,
                                hidden);
        }
        detail::matmul(xn.data(), w.wq.data(), q.data(), n, hidden, q_dim);
        std::vector<float>& k = res.kv.keys[l];
        std::vector<float>& v = res.kv.values[l];
        k.resize(n * kv_dim);
        v.resize(n * kv_dim);
        detail::matmul(xn.data(), w.wk.data(), k.data(), n, hidden, kv_dim);
        detail::matmul(xn.data(), w.wv.data(), v.data(), n, hidden, kv_dim);

        for (size_t i = 0; i < n; ++i) {
            const int64_t pos = cache.next_position + static_cast<int64_t>(i);
            for (uint32_t qh = 0; qh < cfg.n_query_heads(); ++qh) {
                detail::rope_row(q.data() + i * q_dim + size_t(qh) * d, d, pos);
            }
            for (uint32_t h = 0; h < H; ++h) {
                detail::rope_row(k.data() + i * kv_dim + size_t(h) * d, d, pos);
            }
        }

        if (opts.capture_q) {
            // reorder to [H][G][n][d]
            std::vector<float>& cap = res.q.q[l];
            cap.resize(n * q_dim);
            for (uint32_t h = 0; h < H; ++h) {
                for (uint32_t g = 0; g < G; ++g) {
                    for (size_t i = 0; i < n; ++i) {
                        const float* src = q.data() + i * q_dim + (size_t(h) * G + g) * d;
                        float* dst = cap.data() + ((size_t(h) * G + g) * n + i) * d;
                        std::copy(src, src + d, dst);
                    }
                }
            }
        }

        for (size_t i = 0; i < n; ++i) {
            for (uint32_t h = 0; h < H; ++h) {
                const HeadSeq& past = cache.head(l, h);
                const float* new_k = k.data() + size_t(h) * d;
                const float* new_v = v.data() + size_t(h) * d;
                for (uint32_t g = 0; g < G; ++g) {
                    const float* qrow = q.data() + i * q_dim + (size_t(h) * G + g) * d;
                    float* orow = attn.data() + i * q_dim + (size_t(h) * G + g) * d;
                    attend_one(qrow, past, new_k, new_v, i + 1, d, static_cast<uint32_t>(kv_dim),
                               scale, orow, logit_buf);
                    if (opts.flops) opts.flops->attn_pairs += past.len() + i + 1;
                }
            }
        }

        detail::matmul(attn.data(), w.wo.data(), proj.data(), n, q_dim, hidden);
        for (size_t i = 0; i < n * hidden; ++i) x[i] += proj[i];

        for (size_t i = 0; i < n; ++i) {
            detail::rmsnorm_row(x.data() + i * hidden, w.mlp_norm.data(), xn.data() + i * hidden,
                                hidden);
        }
        detail::matmul(xn.data(), w.w_gate.data(), gate.data(), n, hidden, cfg.ff_dim());
        detail::matmul(xn.data(), w.w_up.data(), up.data(), n, hidden, cfg.ff_dim());
        for (size_t i = 0; i < n * cfg.ff_dim(); ++i) gate[i] = detail::silu(gate[i]) * up[i];
        detail::matmul(gate.data(), w.w_down.data(), proj.data(), n, cfg.ff_dim(), hidden);
        for (size_t i = 0; i < n * hidden; ++i) x[i] += proj[i];
    }

    for (size_t i = 0; i < n; ++i) {
        detail::rmsnorm_row(x.data() + i * hidden, model.final_norm.data(), xn.data() + i * hidden,
                            hidden);
    }
    res.logits.resize(n * cfg.vocab_size);
    detail::matmul(xn.data(), model.unembed.data(), res.logits.data(), n, hidden, cfg.vocab_size);
    return res;
}

void append_kv(KvCache& cache, const NewKv& kv, std::span<const TokenRole> roles) {
    const uint32_t d = cache.head_dim;
    const uint32_t H = cache.n_kv_heads;
    const size_t kv_dim = size_t(H) * d;
    for (uint32_t l = 0; l < cache.n_layers; ++l) {
        for (uint32_t h = 0; h < H; ++h) {
            HeadSeq& dst = cache.head(l, h);
            for (uint32_t i = 0; i < kv.n_in; ++i) {
                const float* krow = kv.keys[l].data() + i * kv_dim + size_t(h) * d;
                const float* vrow = kv.values[l].data() + i * kv_dim + size_t(h) * d;
                dst.keys.insert(dst.keys.end(), krow, krow + d);
                dst.values.insert(dst.values.end(), vrow, vrow + d);
                dst.positions.push_back(static_cast<int32_t>(cache.next_position + i));
                dst.roles.push_back(roles.empty() ? TokenRole::Context
                                                  : (roles[i] == TokenRole::System
                                                         ? TokenRole::System
                                                         : TokenRole::Context));
            }
        }
    }
    cache.next_position += kv.n_in;
}

KvCache prefill(const Model& model, const TokenSeq& context, FlopCounter* flops) {
    KvCache cache = make_cache(model.config);
    ForwardOptions opts;
    opts.flops = flops;
    ForwardResult res = forward(model, context.tokens, cache, opts);
    append_kv(cache, res.kv, context.roles);
    return cache;
}

namespace {

int32_t argmax_lowest(const float* logits, uint32_t vocab) {
    int32_t best = 0;
    float best_v = logits[0];
    for (uint32_t j = 1; j < vocab; ++j) {
        if (logits[j] > best_v) {
            best_v = logits[j];
            best = static_cast<int32_t>(j);
        }
    }
    return best;
}

TokenSeq decode_impl(const Model& model, KvCache working, const TokenSeq& prompt, uint32_t max_new,
                     FlopCounter* flops) {
    TokenSeq out;
    if (max_new == 0) return out;

    ForwardOptions opts;
    opts.flops = flops;
    const uint32_t vocab = model.config.vocab_size;

    ForwardResult res = forward(model, prompt.tokens, working, opts);
    append_kv(working, res.kv, prompt.roles);
    int32_t next;
    if (prompt.size() > 0) {
        next = argmax_lowest(res.logits.data() + (prompt.size() - 1) * vocab, vocab);
    } else {
        throw ContractError("decode_greedy requires a non-empty prompt");
    }
    out.push_back(next, TokenRole::Generated);

    std::vector<int32_t> one(1);
    for (uint32_t t = 1; t < max_new; ++t) {
        one[0] = next;
        ForwardResult step = forward(model, one, working, opts);
        append_kv(working, step.kv);
        next = argmax_lowest(step.logits.data(), vocab);
        out.push_back(next, TokenRole::Generated);
    }
    return out;
}

}  // namespace

TokenSeq decode_greedy(const Model& model, const KvCache& cache, const TokenSeq& prompt,
                       uint32_t max_new, FlopCounter* flops) {
    return decode_impl(model, cache, prompt, max_new, flops);
}

TokenSeq decode_greedy(const Model& model, const CompressedCache& cache, const TokenSeq& prompt,
                       uint32_t max_new, FlopCounter* flops) {
    return decode_impl(model, cache.store, prompt, max_new, flops);
}

}  // namespace kvzip

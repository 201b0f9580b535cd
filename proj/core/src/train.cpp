#include "kvzip/train.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

#include "kernels.hpp"
#include "kvzip/rng.hpp"

namespace kvzip {

namespace {

Model zeros_like(const Model& m) {
    Model z = m;
    for_each_tensor(z, [](std::vector<float>& t) { std::fill(t.begin(), t.end(), 0.0f); });
    return z;
}

std::vector<std::vector<float>*> tensor_ptrs(Model& m) {
    std::vector<std::vector<float>*> out;
    for_each_tensor(m, [&](std::vector<float>& t) { out.push_back(&t); });
    return out;
}

// inverse rotation (transpose of rope_row)
void rope_row_inv(float* v, uint32_t d, int64_t pos) {
    const uint32_t half = d / 2;
    for (uint32_t p = 0; p < half; ++p) {
        const double freq = std::pow(detail::kRopeBase, -2.0 * p / static_cast<double>(d));
        const double angle = static_cast<double>(pos) * freq;
        const float c = static_cast<float>(std::cos(angle));
        const float s = static_cast<float>(std::sin(angle));
        const float e = v[2 * p];
        const float o = v[2 * p + 1];
        v[2 * p] = e * c + o * s;
        v[2 * p + 1] = -e * s + o * c;
    }
}

// y_i = x_i * g_i / rms(x); accumulates into dx and dg
void rmsnorm_backward_row(const float* x, const float* g, const float* dy, float* dx, float* dg,
                          size_t n) {
    const float r = detail::rms_of(x, n);
    const float inv = 1.0f / r;
    float dot = 0.0f;
    for (size_t i = 0; i < n; ++i) dot += dy[i] * g[i] * x[i];
    const float coef = dot / (static_cast<float>(n) * r * r * r);
    for (size_t i = 0; i < n; ++i) {
        dx[i] += dy[i] * g[i] * inv - coef * x[i];
        dg[i] += dy[i] * x[i] * inv;
    }
}

float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

// Dense training-path forward that stores every activation needed by backward.
struct Workspace {
    const ModelConfig cfg;
    size_t T = 0;

    std::vector<float> x0;
    std::vector<std::vector<float>> x_attn_in, xn1, q, k, v, probs, attn_cat;
    std::vector<std::vector<float>> x_mlp_in, xn2, gate_pre, up;
    std::vector<float> x_final, xnf, logits;

    explicit Workspace(const ModelConfig& c)
        : cfg(c),
          x_attn_in(c.n_layers),
          xn1(c.n_layers),
          q(c.n_layers),
          k(c.n_layers),
          v(c.n_layers),
          probs(c.n_layers),
          attn_cat(c.n_layers),
          x_mlp_in(c.n_layers),
          xn2(c.n_layers),
          gate_pre(c.n_layers),
          up(c.n_layers) {}

    size_t q_dim() const { return size_t(cfg.n_query_heads()) * cfg.head_dim; }
    size_t kv_dim() const { return cfg.kv_dim(); }

    float* prob_row(uint32_t l, uint32_t h, uint32_t g, size_t i) {
        return probs[l].data() + (((size_t(h) * cfg.group_size + g) * T) + i) * T;
    }

    void run(const Model& model, std::span<const int32_t> tokens) {
        T = tokens.size();
        const size_t h_dim = cfg.hidden_dim;
        const uint32_t d = cfg.head_dim;
        const float scale = 1.0f / std::sqrt(static_cast<float>(d));

        x0.resize(T * h_dim);
        for (size_t i = 0; i < T; ++i) {
            const float* row = model.embedding.data() + size_t(tokens[i]) * h_dim;
            std::copy(row, row + h_dim, x0.begin() + i * h_dim);
        }

        std::vector<float> x = x0;
        for (uint32_t l = 0; l < cfg.n_layers; ++l) {
            const LayerWeights& w = model.layers[l];
            x_attn_in[l] = x;

            xn1[l].resize(T * h_dim);
            for (size_t i = 0; i < T; ++i) {
                detail::rmsnorm_row(x.data() + i * h_dim, w.attn_norm.data(),
                                    xn1[l].data() + i * h_dim, h_dim);
            }
            q[l].resize(T * q_dim());
            k[l].resize(T * kv_dim());
            v[l].resize(T * kv_dim());
            detail::matmul(xn1[l].data(), w.wq.data(), q[l].data(), T, h_dim, q_dim());
            detail::matmul(xn1[l].data(), w.wk.data(), k[l].data(), T, h_dim, kv_dim());
            detail::matmul(xn1[l].data(), w.wv.data(), v[l].data(), T, h_dim, kv_dim());
            for (size_t i = 0; i < T; ++i) {
                for (uint32_t qh = 0; qh < cfg.n_query_heads(); ++qh) {
                    detail::rope_row(q[l].data() + i * q_dim() + size_t(qh) * d, d,
                                     static_cast<int64_t>(i));
                }
                for (uint32_t kh = 0; kh < cfg.n_kv_heads; ++kh) {
                    detail::rope_row(k[l].data() + i * kv_dim() + size_t(kh) * d, d,
                                     static_cast<int64_t>(i));
                }
            }

            probs[l].assign(size_t(cfg.n_kv_heads) * cfg.group_size * T * T, 0.0f);
            attn_cat[l].assign(T * q_dim(), 0.0f);
            for (uint32_t hh = 0; hh < cfg.n_kv_heads; ++hh) {
                for (uint32_t g = 0; g < cfg.group_size; ++g) {
                    const size_t qh = size_t(hh) * cfg.group_size + g;
                    for (size_t i = 0; i < T; ++i) {
                        const float* qrow = q[l].data() + i * q_dim() + qh * d;
                        float* p = prob_row(l, hh, g, i);
                        float max_logit = -std::numeric_limits<float>::infinity();
                        for (size_t j = 0; j <= i; ++j) {
                            const float* krow = k[l].data() + j * kv_dim() + size_t(hh) * d;
                            float dot = 0.0f;
                            for (uint32_t e = 0; e < d; ++e) dot += qrow[e] * krow[e];
                            p[j] = dot * scale;
                            if (p[j] > max_logit) max_logit = p[j];
                        }
                        float denom = 0.0f;
                        for (size_t j = 0; j <= i; ++j) {
                            p[j] = std::exp(p[j] - max_logit);
                            denom += p[j];
                        }
                        float* o = attn_cat[l].data() + i * q_dim() + qh * d;
                        for (size_t j = 0; j <= i; ++j) {
                            p[j] /= denom;
                            const float* vrow = v[l].data() + j * kv_dim() + size_t(hh) * d;
                            for (uint32_t e = 0; e < d; ++e) o[e] += p[j] * vrow[e];
                        }
                    }
                }
            }

            std::vector<float> proj(T * h_dim);
            detail::matmul(attn_cat[l].data(), w.wo.data(), proj.data(), T, q_dim(), h_dim);
            for (size_t i = 0; i < T * h_dim; ++i) x[i] += proj[i];
            x_mlp_in[l] = x;

            xn2[l].resize(T * h_dim);
            for (size_t i = 0; i < T; ++i) {
                detail::rmsnorm_row(x.data() + i * h_dim, w.mlp_norm.data(),
                                    xn2[l].data() + i * h_dim, h_dim);
            }
            const size_t ff = cfg.ff_dim();
            gate_pre[l].resize(T * ff);
            up[l].resize(T * ff);
            detail::matmul(xn2[l].data(), w.w_gate.data(), gate_pre[l].data(), T, h_dim, ff);
            detail::matmul(xn2[l].data(), w.w_up.data(), up[l].data(), T, h_dim, ff);
            std::vector<float> act(T * ff);
            for (size_t i = 0; i < T * ff; ++i) act[i] = detail::silu(gate_pre[l][i]) * up[l][i];
            detail::matmul(act.data(), w.w_down.data(), proj.data(), T, ff, h_dim);
            for (size_t i = 0; i < T * h_dim; ++i) x[i] += proj[i];
        }

        x_final = x;
        xnf.resize(T * h_dim);
        for (size_t i = 0; i < T; ++i) {
            detail::rmsnorm_row(x.data() + i * h_dim, model.final_norm.data(),
                                xnf.data() + i * h_dim, h_dim);
        }
        logits.resize(T * cfg.vocab_size);
        detail::matmul(xnf.data(), model.unembed.data(), logits.data(), T, h_dim, cfg.vocab_size);
    }
};

// cross-entropy over target positions; writes scaled dlogits and returns summed CE
double loss_and_dlogits(const Workspace& ws, std::span<const int32_t> tokens,
                        std::span<const uint8_t> targets, double inv_total,
                        std::vector<float>& dlogits) {
    const uint32_t vocab = ws.cfg.vocab_size;
    dlogits.assign(ws.T * vocab, 0.0f);
    double loss = 0.0;
    std::vector<double> p(vocab);
    for (size_t t = 1; t < ws.T; ++t) {
        if (!targets[t]) continue;
        const float* row = ws.logits.data() + (t - 1) * vocab;
        double max_logit = row[0];
        for (uint32_t j = 1; j < vocab; ++j) max_logit = std::max(max_logit, double(row[j]));
        double denom = 0.0;
        for (uint32_t j = 0; j < vocab; ++j) {
            p[j] = std::exp(double(row[j]) - max_logit);
            denom += p[j];
        }
        const int32_t y = tokens[t];
        loss += -(std::log(p[y] / denom));
        float* drow = dlogits.data() + (t - 1) * vocab;
        for (uint32_t j = 0; j < vocab; ++j) {
            const double soft = p[j] / denom;
            drow[j] = static_cast<float>((soft - (j == static_cast<uint32_t>(y) ? 1.0 : 0.0)) *
                                         inv_total);
        }
    }
    return loss;
}

void backward(const Model& model, Workspace& ws, std::span<const int32_t> tokens,
              const std::vector<float>& dlogits, Model& grads) {
    const ModelConfig& cfg = model.config;
    const size_t T = ws.T;
    const size_t h_dim = cfg.hidden_dim;
    const uint32_t d = cfg.head_dim;
    const size_t q_dim = ws.q_dim();
    const size_t kv_dim = ws.kv_dim();
    const size_t ff = cfg.ff_dim();
    const float scale = 1.0f / std::sqrt(static_cast<float>(d));

    std::vector<float> dxnf(T * h_dim);
    detail::matmul_nt(dlogits.data(), model.unembed.data(), dxnf.data(), T, h_dim, cfg.vocab_size);
    detail::matmul_tn_acc(ws.xnf.data(), dlogits.data(), grads.unembed.data(), T, h_dim,
                          cfg.vocab_size);

    std::vector<float> dx(T * h_dim, 0.0f);
    for (size_t i = 0; i < T; ++i) {
        rmsnorm_backward_row(ws.x_final.data() + i * h_dim, model.final_norm.data(),
                             dxnf.data() + i * h_dim, dx.data() + i * h_dim,
                             grads.final_norm.data(), h_dim);
    }

    std::vector<float> dxn(T * h_dim), dact(T * ff), dgate(T * ff), dup(T * ff);
    std::vector<float> dattn(T * q_dim), dq(T * q_dim), dk(T * kv_dim), dv(T * kv_dim);
    std::vector<float> dp;

    for (int64_t li = cfg.n_layers - 1; li >= 0; --li) {
        const auto l = static_cast<uint32_t>(li);
        const LayerWeights& w = model.layers[l];
        LayerWeights& gw = grads.layers[l];

        // MLP block
        dact.assign(T * ff, 0.0f);
        detail::matmul_nt(dx.data(), w.w_down.data(), dact.data(), T, ff, h_dim);
        {
            std::vector<float> act(T * ff);
            for (size_t i = 0; i < T * ff; ++i) {
                act[i] = detail::silu(ws.gate_pre[l][i]) * ws.up[l][i];
            }
            detail::matmul_tn_acc(act.data(), dx.data(), gw.w_down.data(), T, ff, h_dim);
        }
        for (size_t i = 0; i < T * ff; ++i) {
            const float a = ws.gate_pre[l][i];
            const float sg = sigmoid(a);
            const float silu_a = a * sg;
            dgate[i] = dact[i] * ws.up[l][i] * (sg * (1.0f + a * (1.0f - sg)));
            dup[i] = dact[i] * silu_a;
        }
        dxn.assign(T * h_dim, 0.0f);
        detail::matmul_nt(dgate.data(), w.w_gate.data(), dxn.data(), T, h_dim, ff);
        {
            std::vector<float> tmp(T * h_dim);
            detail::matmul_nt(dup.data(), w.w_up.data(), tmp.data(), T, h_dim, ff);
            for (size_t i = 0; i < T * h_dim; ++i) dxn[i] += tmp[i];
        }
        detail::matmul_tn_acc(ws.xn2[l].data(), dgate.data(), gw.w_gate.data(), T, h_dim, ff);
        detail::matmul_tn_acc(ws.xn2[l].data(), dup.data(), gw.w_up.data(), T, h_dim, ff);
        for (size_t i = 0; i < T; ++i) {
            rmsnorm_backward_row(ws.x_mlp_in[l].data() + i * h_dim, w.mlp_norm.data(),
                                 dxn.data() + i * h_dim, dx.data() + i * h_dim,
                                 gw.mlp_norm.data(), h_dim);
        }

        // attention block
        dattn.assign(T * q_dim, 0.0f);
        detail::matmul_nt(dx.data(), w.wo.data(), dattn.data(), T, q_dim, h_dim);
        detail::matmul_tn_acc(ws.attn_cat[l].data(), dx.data(), gw.wo.data(), T, q_dim, h_dim);

        dq.assign(T * q_dim, 0.0f);
        dk.assign(T * kv_dim, 0.0f);
        dv.assign(T * kv_dim, 0.0f);
        for (uint32_t hh = 0; hh < cfg.n_kv_heads; ++hh) {
            for (uint32_t g = 0; g < cfg.group_size; ++g) {
                const size_t qh = size_t(hh) * cfg.group_size + g;
                for (size_t i = 0; i < T; ++i) {
                    const float* p = ws.prob_row(l, hh, g, i);
                    const float* do_row = dattn.data() + i * q_dim + qh * d;
                    dp.assign(i + 1, 0.0f);
                    double pdp = 0.0;
                    for (size_t j = 0; j <= i; ++j) {
                        const float* vrow = ws.v[l].data() + j * kv_dim + size_t(hh) * d;
                        float acc = 0.0f;
                        for (uint32_t e = 0; e < d; ++e) acc += do_row[e] * vrow[e];
                        dp[j] = acc;
                        pdp += double(p[j]) * acc;
                        float* dvrow = dv.data() + j * kv_dim + size_t(hh) * d;
                        for (uint32_t e = 0; e < d; ++e) dvrow[e] += p[j] * do_row[e];
                    }
                    const float* qrow = ws.q[l].data() + i * q_dim + qh * d;
                    float* dqrow = dq.data() + i * q_dim + qh * d;
                    for (size_t j = 0; j <= i; ++j) {
                        const float ds = p[j] * (dp[j] - static_cast<float>(pdp)) * scale;
                        const float* krow = ws.k[l].data() + j * kv_dim + size_t(hh) * d;
                        float* dkrow = dk.data() + j * kv_dim + size_t(hh) * d;
                        for (uint32_t e = 0; e < d; ++e) {
                            dqrow[e] += ds * krow[e];
                            dkrow[e] += ds * qrow[e];
                        }
                    }
                }
            }
        }
        for (size_t i = 0; i < T; ++i) {
            for (uint32_t qh = 0; qh < cfg.n_query_heads(); ++qh) {
                rope_row_inv(dq.data() + i * q_dim + size_t(qh) * d, d, static_cast<int64_t>(i));
            }
            for (uint32_t kh = 0; kh < cfg.n_kv_heads; ++kh) {
                rope_row_inv(dk.data() + i * kv_dim + size_t(kh) * d, d, static_cast<int64_t>(i));
            }
        }

        dxn.assign(T * h_dim, 0.0f);
        detail::matmul_nt(dq.data(), w.wq.data(), dxn.data(), T, h_dim, q_dim);
        {
            std::vector<float> tmp(T * h_dim);
            detail::matmul_nt(dk.data(), w.wk.data(), tmp.data(), T, h_dim, kv_dim);
            for (size_t i = 0; i < T * h_dim; ++i) dxn[i] += tmp[i];
            detail::matmul_nt(dv.data(), w.wv.data(), tmp.data(), T, h_dim, kv_dim);
            for (size_t i = 0; i < T * h_dim; ++i) dxn[i] += tmp[i];
        }
        detail::matmul_tn_acc(ws.xn1[l].data(), dq.data(), gw.wq.data(), T, h_dim, q_dim);
        detail::matmul_tn_acc(ws.xn1[l].data(), dk.data(), gw.wk.data(), T, h_dim, kv_dim);
        detail::matmul_tn_acc(ws.xn1[l].data(), dv.data(), gw.wv.data(), T, h_dim, kv_dim);
        for (size_t i = 0; i < T; ++i) {
            rmsnorm_backward_row(ws.x_attn_in[l].data() + i * h_dim, w.attn_norm.data(),
                                 dxn.data() + i * h_dim, dx.data() + i * h_dim,
                                 gw.attn_norm.data(), h_dim);
        }
    }

    for (size_t i = 0; i < T; ++i) {
        float* drow = grads.embedding.data() + size_t(tokens[i]) * h_dim;
        const float* src = dx.data() + i * h_dim;
        for (size_t e = 0; e < h_dim; ++e) drow[e] += src[e];
    }
}

}  // namespace

std::vector<float> train_forward_logits(const Model& model, std::span<const int32_t> tokens) {
    Workspace ws(model.config);
    ws.run(model, tokens);
    return ws.logits;
}

double loss_and_gradients(const Model& model, const TrainSample& sample, Model& grads) {
    for_each_tensor(grads, [](std::vector<float>& t) { std::fill(t.begin(), t.end(), 0.0f); });
    size_t n_targets = 0;
    for (size_t t = 1; t < sample.tokens.size(); ++t) n_targets += sample.target[t] ? 1 : 0;
    if (n_targets == 0) throw ContractError("sample has no target positions");

    Workspace ws(model.config);
    ws.run(model, sample.tokens);
    std::vector<float> dlogits;
    const double loss = loss_and_dlogits(ws, sample.tokens, sample.target,
                                         1.0 / static_cast<double>(n_targets), dlogits);
    backward(model, ws, sample.tokens, dlogits, grads);
    return loss / static_cast<double>(n_targets);
}

Model train(Model model, const TaskSpec& task, uint32_t steps, double lr, uint64_t seed,
            const TrainOptions& opts) {
    if (steps == 0) return model;
    validate(model.config);
    if (opts.batch_size < 1) throw ConfigError("batch_size must be >= 1");

    Model grads = zeros_like(model);
    Model m1 = zeros_like(model);
    Model m2 = zeros_like(model);
    auto p_model = tensor_ptrs(model);
    auto p_grads = tensor_ptrs(grads);
    auto p_m1 = tensor_ptrs(m1);
    auto p_m2 = tensor_ptrs(m2);

    Workspace ws(model.config);
    std::vector<float> dlogits;
    const uint64_t base = splitmix64(seed + 0x517cc1b727220a95ull);

    for (uint32_t step = 0; step < steps; ++step) {
        for (auto* g : p_grads) std::fill(g->begin(), g->end(), 0.0f);

        std::vector<TrainSample> batch;
        batch.reserve(opts.batch_size);
        size_t n_targets = 0;
        for (uint32_t b = 0; b < opts.batch_size; ++b) {
            batch.push_back(
                gen_train_sample(task, model.config, base + uint64_t(step) * opts.batch_size + b));
            const TrainSample& s = batch.back();
            for (size_t t = 1; t < s.tokens.size(); ++t) n_targets += s.target[t] ? 1 : 0;
        }
        if (n_targets == 0) throw TrainingError("batch contains no target positions", step);

        double loss_sum = 0.0;
        for (const TrainSample& s : batch) {
            ws.run(model, s.tokens);
            loss_sum += loss_and_dlogits(ws, s.tokens, s.target,
                                         1.0 / static_cast<double>(n_targets), dlogits);
            backward(model, ws, s.tokens, dlogits, grads);
        }
        const double loss = loss_sum / static_cast<double>(n_targets);
        if (!std::isfinite(loss)) {
            throw TrainingError("loss diverged to non-finite value", step);
        }

        if (opts.clip_norm > 0.0) {
            double sq = 0.0;
            for (auto* g : p_grads) {
                for (float v : *g) sq += double(v) * v;
            }
            const double norm = std::sqrt(sq);
            if (norm > opts.clip_norm) {
                const auto f = static_cast<float>(opts.clip_norm / norm);
                for (auto* g : p_grads) {
                    for (float& v : *g) v *= f;
                }
            }
        }

        const double t = step + 1;
        const double bc1 = 1.0 - std::pow(opts.beta1, t);
        const double bc2 = 1.0 - std::pow(opts.beta2, t);
        for (size_t ti = 0; ti < p_model.size(); ++ti) {
            std::vector<float>& theta = *p_model[ti];
            std::vector<float>& g = *p_grads[ti];
            std::vector<float>& mm = *p_m1[ti];
            std::vector<float>& vv = *p_m2[ti];
            for (size_t i = 0; i < theta.size(); ++i) {
                mm[i] = static_cast<float>(opts.beta1 * mm[i] + (1.0 - opts.beta1) * g[i]);
                vv[i] = static_cast<float>(opts.beta2 * vv[i] +
                                           (1.0 - opts.beta2) * double(g[i]) * g[i]);
                const double mhat = mm[i] / bc1;
                const double vhat = vv[i] / bc2;
                theta[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + opts.adam_eps));
            }
        }

        if (opts.log_every > 0 && (step % opts.log_every == 0 || step + 1 == steps)) {
            std::fprintf(stderr, "[train] step %u/%u loss %.4f\n", step + 1, steps, loss);
        }
    }
    return model;
}

double holdout_accuracy(const Model& model, const TaskSpec& task, uint32_t n_samples,
                        uint64_t seed) {
    Workspace ws(model.config);
    const uint64_t base = splitmix64(seed ^ 0xb1094e1bfa42c0d3ull);
    uint64_t correct = 0, total = 0;
    for (uint32_t i = 0; i < n_samples; ++i) {
        const TrainSample s = gen_train_sample(task, model.config, base + i);
        ws.run(model, s.tokens);
        const uint32_t vocab = model.config.vocab_size;
        for (size_t t = 1; t < s.tokens.size(); ++t) {
            if (!s.target[t]) continue;
            const float* row = ws.logits.data() + (t - 1) * vocab;
            uint32_t best = 0;
            for (uint32_t j = 1; j < vocab; ++j) {
                if (row[j] > row[best]) best = j;
            }
            correct += best == static_cast<uint32_t>(s.tokens[t]) ? 1 : 0;
            total += 1;
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

double holdout_loss(const Model& model, const TaskSpec& task, uint32_t n_samples, uint64_t seed) {
    Workspace ws(model.config);
    std::vector<float> dlogits;
    const uint64_t base = splitmix64(seed ^ 0xb1094e1bfa42c0d3ull);
    double loss = 0.0;
    uint64_t total = 0;
    for (uint32_t i = 0; i < n_samples; ++i) {
        const TrainSample s = gen_train_sample(task, model.config, base + i);
        ws.run(model, s.tokens);
        for (size_t t = 1; t < s.tokens.size(); ++t) total += s.target[t] ? 1 : 0;
        loss += loss_and_dlogits(ws, s.tokens, s.target, 0.0, dlogits);
    }
    return total == 0 ? 0.0 : loss / static_cast<double>(total);
}

}  // namespace kvzip

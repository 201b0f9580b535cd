#include "kvzip/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cinttypes>
#include <cstdio>
#include <thread>

#include "kvzip/rng.hpp"

namespace kvzip {

double eval_repeat_accuracy(const Model& model, const CompressedCache& cache,
                            const TokenSeq& context, const RepeatPromptSpec& prompt) {
    const auto n_c = static_cast<uint32_t>(context.size());
    if (n_c == 0) return 1.0;

    std::vector<int32_t> input = prompt.first;
    const auto n_prompt = static_cast<uint32_t>(input.size());
    input.insert(input.end(), context.tokens.begin(), context.tokens.end());

    const ForwardResult res = forward(model, input, cache.store);
    const uint32_t vocab = model.config.vocab_size;

    uint64_t correct = 0, total = 0;
    // context token i sits at input position n_prompt + i and is predicted
    // from the position before it; i = 0 needs at least one prompt token
    for (uint32_t i = (n_prompt == 0 ? 1 : 0); i < n_c; ++i) {
        const float* row = res.logits.data() + (size_t(n_prompt) + i - 1) * vocab;
        uint32_t best = 0;
        for (uint32_t j = 1; j < vocab; ++j) {
            if (row[j] > row[best]) best = j;
        }
        correct += best == static_cast<uint32_t>(context.tokens[i]) ? 1 : 0;
        total += 1;
    }
    return total == 0 ? 1.0 : static_cast<double>(correct) / static_cast<double>(total);
}

double eval_queries(const Model& model, const CompressedCache& cache, std::span<const Query> queries,
                    bool allow_query_conditioned) {
    if (cache.provenance == Provenance::QueryConditioned && !allow_query_conditioned) {
        throw ContractError(
            "eval_queries requires a query-agnostic cache; pass allow_query_conditioned to "
            "override for reuse experiments");
    }
    if (queries.empty()) return 1.0;
    uint64_t hits = 0;
    for (const Query& q : queries) {
        const TokenSeq out =
            decode_greedy(model, cache, q.prompt, static_cast<uint32_t>(q.gold.size()));
        hits += out.tokens == q.gold ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(queries.size());
}

namespace {

uint64_t fnv1a(uint64_t h, const void* data, size_t n) {
    const auto* bytes = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string curve_fingerprint(const Model& model, std::span<const TaskSpec> tasks,
                              std::span<const ScoreMethod> methods, std::span<const double> ratios,
                              const CurveOptions& opts) {
    uint64_t h = 0xcbf29ce484222325ull;
    h = fnv1a(h, &model.config, sizeof(ModelConfig));
    const uint64_t wc = weight_checksum(model);
    h = fnv1a(h, &wc, sizeof(wc));
    for (const TaskSpec& t : tasks) {
        h = fnv1a(h, &t.kind, sizeof(t.kind));
        h = fnv1a(h, &t.context_len, sizeof(t.context_len));
        h = fnv1a(h, &t.n_pairs, sizeof(t.n_pairs));
        h = fnv1a(h, &t.n_queries, sizeof(t.n_queries));
        h = fnv1a(h, &t.system_len, sizeof(t.system_len));
        h = fnv1a(h, &t.seed, sizeof(t.seed));
        for (double d : t.needle_depths) h = fnv1a(h, &d, sizeof(d));
    }
    for (ScoreMethod m : methods) h = fnv1a(h, &m, sizeof(m));
    for (double r : ratios) h = fnv1a(h, &r, sizeof(r));
    h = fnv1a(h, &opts.mode, sizeof(opts.mode));
    h = fnv1a(h, &opts.chunk_size, sizeof(opts.chunk_size));
    h = fnv1a(h, &opts.instances, sizeof(opts.instances));
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016" PRIx64, h);
    return buf;
}

struct CellAccum {
    double accuracy = 0.0;
    double repeat_accuracy = 0.0;
    uint64_t kept_pairs = 0;
    uint64_t total_pairs = 0;
};

}  // namespace

EvalReport compression_curve(const Model& model, std::span<const TaskSpec> tasks,
                             std::span<const ScoreMethod> methods, std::span<const double> ratios,
                             const CurveOptions& opts) {
    for (double r : ratios) {
        if (!(r > 0.0) || r > 1.0) throw ContractError("curve ratios must lie in (0, 1]");
    }
    if (opts.instances < 1) throw ContractError("instances must be >= 1");

    EvalReport report;
    report.fingerprint = curve_fingerprint(model, tasks, methods, ratios, opts);
    const size_t n_cells = tasks.size() * methods.size() * ratios.size();
    std::vector<CellAccum> accum(n_cells);

    const RepeatPromptSpec prompt = default_repeat_prompt(model.config);
    const size_t n_work = tasks.size() * opts.instances;
    std::vector<std::vector<CellAccum>> partial(n_work);

    auto run_item = [&](size_t work) {
        const size_t ti = work / opts.instances;
        const uint64_t instance = work % opts.instances;
        const TaskSpec& task = tasks[ti];

        const TaskInstance inst = gen_task(task, model.config, instance);
        const KvCache cache = prefill(model, inst.context);
        const std::vector<TokenRole> roles = cache.roles();

        std::vector<CellAccum> cells(methods.size() * ratios.size());
        for (size_t mi = 0; mi < methods.size(); ++mi) {
            ScoreTensor scores;
            switch (methods[mi]) {
                case ScoreMethod::KvZip:
                    scores = score_kvzip(model, cache, inst.context, opts.chunk_size, prompt,
                                         ScoreMode::Softmax)
                                 .scores;
                    break;
                case ScoreMethod::KvZipLogit:
                    scores = score_kvzip(model, cache, inst.context, opts.chunk_size, prompt,
                                         ScoreMode::Logit)
                                 .scores;
                    break;
                case ScoreMethod::PrefillMax:
                    scores = score_prefill_max(model, inst.context);
                    break;
                case ScoreMethod::SnapWindow:
                    scores = score_snap_window(model, inst.context, opts.snap_window,
                                               opts.snap_kernel);
                    break;
            }
            const HeadScore head = aggregate_head(scores);
            for (size_t ri = 0; ri < ratios.size(); ++ri) {
                BudgetSpec budget;
                budget.ratio = ratios[ri];
                budget.mode = opts.mode;
                budget.sink = opts.sink;
                budget.window = opts.stream_window;
                const EvictionMask mask = allocate(scores, head, budget, roles);
                const CompressedCache compressed = apply_mask(cache, mask);

                CellAccum& c = cells[mi * ratios.size() + ri];
                c.accuracy = eval_queries(model, compressed, inst.queries);
                if (opts.with_repeat) {
                    c.repeat_accuracy = eval_repeat_accuracy(model, compressed, inst.context, prompt);
                }
                c.kept_pairs = compressed.kept_pairs();
                c.total_pairs = cache.total_pairs();
            }
        }
        partial[work] = std::move(cells);
    };

    const uint32_t n_threads = std::max(1u, opts.threads);
    if (n_threads == 1) {
        for (size_t w = 0; w < n_work; ++w) run_item(w);
    } else {
        std::atomic<size_t> next{0};
        std::vector<std::thread> pool;
        pool.reserve(n_threads);
        for (uint32_t t = 0; t < n_threads; ++t) {
            pool.emplace_back([&] {
                for (size_t w = next.fetch_add(1); w < n_work; w = next.fetch_add(1)) run_item(w);
            });
        }
        for (auto& t : pool) t.join();
    }

    // deterministic reduction in work order
    for (size_t w = 0; w < n_work; ++w) {
        const size_t ti = w / opts.instances;
        for (size_t mi = 0; mi < methods.size(); ++mi) {
            for (size_t ri = 0; ri < ratios.size(); ++ri) {
                const CellAccum& src = partial[w][mi * ratios.size() + ri];
                CellAccum& dst = accum[(ti * methods.size() + mi) * ratios.size() + ri];
                dst.accuracy += src.accuracy;
                dst.repeat_accuracy += src.repeat_accuracy;
                dst.kept_pairs += src.kept_pairs;
                dst.total_pairs += src.total_pairs;
            }
        }
    }

    report.cells.reserve(n_cells);
    for (size_t ti = 0; ti < tasks.size(); ++ti) {
        for (size_t mi = 0; mi < methods.size(); ++mi) {
            for (size_t ri = 0; ri < ratios.size(); ++ri) {
                const CellAccum& a = accum[(ti * methods.size() + mi) * ratios.size() + ri];
                CurveCell cell;
                cell.task = to_string(tasks[ti].kind);
                cell.method = to_string(methods[mi]);
                cell.mode = opts.mode;
                cell.ratio = ratios[ri];
                cell.accuracy = a.accuracy / opts.instances;
                cell.repeat_accuracy = a.repeat_accuracy / opts.instances;
                cell.kept_pairs = a.kept_pairs / opts.instances;
                cell.total_pairs = a.total_pairs / opts.instances;
                report.cells.push_back(std::move(cell));
            }
        }
    }
    if (!tasks.empty()) {
        const FlopReport f = flops_scoring(tasks[0].context_len, opts.chunk_size, prompt);
        report.scoring_pairs = f.scoring_pairs;
        report.prefill_pairs = f.prefill_pairs;
    }
    return report;
}

EfficiencyReport efficiency_report(const ModelConfig& cfg, uint64_t n_ctx, uint64_t chunk_size,
                                   double ratio) {
    if (!(ratio > 0.0) || ratio > 1.0) throw ContractError("ratio must lie in (0, 1]");
    EfficiencyReport rep;
    rep.n_ctx = n_ctx;
    rep.chunk_size = chunk_size;
    rep.ratio = ratio;
    rep.scoring = flops_scoring(n_ctx, chunk_size);
    rep.total_pairs = uint64_t(cfg.n_layers) * cfg.n_kv_heads * n_ctx;
    rep.kept_pairs = ceil_count(ratio, rep.total_pairs);
    const uint64_t bytes_per_pair = 2ull * cfg.head_dim * sizeof(float);
    rep.full_cache_bytes = rep.total_pairs * bytes_per_pair;
    rep.kept_cache_bytes = rep.kept_pairs * bytes_per_pair;
    rep.decode_attn_fraction =
        rep.total_pairs == 0
            ? 1.0
            : static_cast<double>(rep.kept_pairs) / static_cast<double>(rep.total_pairs);
    return rep;
}

}  // namespace kvzip

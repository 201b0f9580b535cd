#include <doctest.h>

#include <cmath>
#include <set>

#include "kvzip/kvzip.hpp"
#include "support/test_util.hpp"

using namespace kvzip;

TEST_CASE("gen_task is deterministic and respects its shape parameters") {
    const ModelConfig cfg = make_config(2, 2, 2, 8, 64, 1024, 0);
    TaskSpec spec;
    spec.kind = TaskKind::LookupKv;
    spec.context_len = 48;
    spec.n_pairs = 8;
    spec.seed = 4;

    const TaskInstance a = gen_task(spec, cfg, 0);
    const TaskInstance b = gen_task(spec, cfg, 0);
    CHECK(a.context.tokens == b.context.tokens);
    CHECK(a.queries.size() == 1);
    CHECK(a.queries[0].gold.size() == 1);

    const TaskInstance c = gen_task(spec, cfg, 1);
    CHECK(a.context.tokens != c.context.tokens);

    // the queried key occurs exactly once and is followed by the gold value
    const int32_t key = a.queries[0].prompt.tokens[1];
    int occurrences = 0;
    for (size_t p = 0; p < a.context.size(); ++p) {
        if (a.context.tokens[p] != key) continue;
        occurrences++;
        CHECK(a.context.tokens[p + 1] == a.queries[0].gold[0]);
    }
    CHECK(occurrences == 1);
}

TEST_CASE("lookup-kv places the requested number of distinct keys") {
    const ModelConfig cfg = make_config(2, 2, 2, 8, 64, 1024, 0);
    TaskSpec spec;
    spec.kind = TaskKind::MultiQueryLookup;
    spec.context_len = 64;
    spec.n_pairs = 8;
    spec.n_queries = 4;
    spec.seed = 9;

    const TaskInstance inst = gen_task(spec, cfg, 3);
    CHECK(inst.queries.size() == 4);
    std::set<int32_t> keys;
    for (const Query& q : inst.queries) keys.insert(q.prompt.tokens[1]);
    CHECK(keys.size() == 4);  // distinct queried keys
}

TEST_CASE("niah inserts the needle at the requested depth quantiles") {
    const ModelConfig cfg = make_config(2, 2, 2, 8, 64, 1024, 0);
    TaskSpec spec;
    spec.kind = TaskKind::Niah;
    spec.context_len = 100;
    spec.needle_depths = {0.0, 0.5, 1.0};
    spec.seed = 5;

    for (uint64_t inst_i = 0; inst_i < 3; ++inst_i) {
        const TaskInstance inst = gen_task(spec, cfg, inst_i);
        const int32_t key = inst.queries[0].prompt.tokens[1];
        uint32_t pos = 0;
        int found = 0;
        for (uint32_t p = 0; p < inst.context.size(); ++p) {
            if (inst.context.tokens[p] == key) {
                pos = p;
                found++;
            }
        }
        CHECK(found == 1);
        const double depth = spec.needle_depths[inst_i % 3];
        CHECK(pos == static_cast<uint32_t>(std::llround(depth * (100 - 2))));
        CHECK(inst.context.tokens[pos + 1] == inst.queries[0].gold[0]);
    }
}

TEST_CASE("task generation validates capacity and vocabulary") {
    const ModelConfig tiny = make_config(1, 1, 1, 4, 64, 32, 0);
    TaskSpec spec;
    spec.context_len = 64;  // cannot fit twice in max_position 32
    CHECK_THROWS_AS(gen_task(spec, tiny, 0), ConfigError);
}

TEST_CASE("training gradients match central finite differences") {
    const ModelConfig cfg = make_config(1, 1, 2, 4, 16, 64, 3);
    Model m = init_model(cfg);
    TaskSpec spec;
    spec.kind = TaskKind::Copy;
    spec.context_len = 6;
    spec.seed = 8;
    const TrainSample sample = gen_train_sample(spec, cfg, 0);

    Model grads = m;
    const double base_loss = loss_and_gradients(m, sample, grads);
    CHECK(std::isfinite(base_loss));

    std::vector<std::vector<float>*> tensors, gradients;
    for_each_tensor(m, [&](std::vector<float>& t) { tensors.push_back(&t); });
    for_each_tensor(grads, [&](std::vector<float>& t) { gradients.push_back(&t); });

    Model scratch = m;
    Rng rng(404);
    const double eps = 1e-3;
    int checked = 0;
    for (size_t ti = 0; ti < tensors.size(); ++ti) {
        // a few coordinates per tensor
        for (int probe = 0; probe < 3; ++probe) {
            const size_t idx = rng.next() % tensors[ti]->size();
            const float orig = (*tensors[ti])[idx];

            (*tensors[ti])[idx] = static_cast<float>(orig + eps);
            const double up = loss_and_gradients(m, sample, scratch);
            (*tensors[ti])[idx] = static_cast<float>(orig - eps);
            const double down = loss_and_gradients(m, sample, scratch);
            (*tensors[ti])[idx] = orig;

            const double numeric = (up - down) / (2 * eps);
            const double analytic = (*gradients[ti])[idx];
            CHECK(std::abs(numeric - analytic) < 2e-3 + 0.02 * std::abs(analytic));
            checked++;
        }
    }
    CHECK(checked > 30);

    // a short training run reduces held-out loss
    const double before = holdout_loss(m, spec, 8, 0x5eed);
    const Model trained = train(m, spec, 60, 3e-3, 1);
    const double after = holdout_loss(trained, spec, 8, 0x5eed);
    CHECK(after < before);
}

TEST_CASE("train: steps=0 is bit-exact identity and seeds are reproducible") {
    const Model m = test::small_model(1, 1, 2, 4, 32, 256, 5);
    TaskSpec spec;
    spec.kind = TaskKind::LookupKv;
    spec.context_len = 24;
    spec.n_pairs = 4;
    spec.seed = 2;

    const Model same = train(m, spec, 0, 1e-3, 7);
    CHECK(weight_checksum(same) == weight_checksum(m));

    const Model a = train(m, spec, 10, 1e-3, 7);
    const Model b = train(m, spec, 10, 1e-3, 7);
    CHECK(weight_checksum(a) == weight_checksum(b));
    const Model c = train(m, spec, 10, 1e-3, 8);
    CHECK(weight_checksum(a) != weight_checksum(c));
}

TEST_CASE("training forward path agrees with the cached inference path") {
    const Model m = test::small_model(2, 2, 2, 8, 64, 256, 11);
    const TokenSeq ctx = test::random_context(m.config, 18, 6);
    const std::vector<float> train_logits = train_forward_logits(m, ctx.tokens);
    KvCache cache = make_cache(m.config);
    const ForwardResult res = forward(m, ctx.tokens, cache);
    CHECK(test::max_abs_diff(train_logits, res.logits) < 1e-5f);
}

TEST_CASE("eval_queries enforces the query-agnostic protocol") {
    const Model m = test::small_model();
    const TokenSeq ctx = test::random_context(m.config, 16, 3);
    const KvCache cache = prefill(m, ctx);
    CompressedCache cc = apply_mask(cache, make_mask(2, 2, 16, true));
    TaskSpec spec;
    spec.kind = TaskKind::LookupKv;
    spec.context_len = 16;
    spec.n_pairs = 2;
    const TaskInstance inst = gen_task(spec, m.config, 0);

    cc.provenance = Provenance::QueryConditioned;
    CHECK_THROWS_AS(eval_queries(m, cc, inst.queries), ContractError);
    CHECK_NOTHROW(eval_queries(m, cc, inst.queries, /*allow_query_conditioned=*/true));
}

TEST_CASE("ratio 1.0 evaluation equals the full cache for every method") {
    const Model m = test::small_model(2, 2, 2, 8, 64, 512, 19);
    TaskSpec spec;
    spec.kind = TaskKind::LookupKv;
    spec.context_len = 32;
    spec.n_pairs = 4;
    spec.seed = 6;
    const TaskInstance inst = gen_task(spec, m.config, 0);
    const KvCache cache = prefill(m, inst.context);
    const CompressedCache full = apply_mask(cache, make_mask(2, 2, 32, true));
    const double full_acc = eval_queries(m, full, inst.queries);
    const RepeatPromptSpec prompt = default_repeat_prompt(m.config);
    const double full_rep = eval_repeat_accuracy(m, full, inst.context, prompt);

    const std::vector<ScoreMethod> methods = {ScoreMethod::KvZip, ScoreMethod::KvZipLogit,
                                              ScoreMethod::PrefillMax, ScoreMethod::SnapWindow};
    for (ScoreMethod method : methods) {
        ScoreTensor scores;
        switch (method) {
            case ScoreMethod::KvZip:
                scores = score_kvzip(m, cache, inst.context, 16, prompt).scores;
                break;
            case ScoreMethod::KvZipLogit:
                scores = score_kvzip(m, cache, inst.context, 16, prompt, ScoreMode::Logit).scores;
                break;
            case ScoreMethod::PrefillMax:
                scores = score_prefill_max(m, inst.context);
                break;
            case ScoreMethod::SnapWindow:
                scores = score_snap_window(m, inst.context, 16, 7);
                break;
        }
        const EvictionMask mask = allocate_nonuniform(scores, 1.0);
        const CompressedCache cc = apply_mask(cache, mask);
        CHECK(eval_queries(m, cc, inst.queries) == full_acc);
        CHECK(eval_repeat_accuracy(m, cc, inst.context, prompt) == full_rep);
    }
}

TEST_CASE("compression_curve emits the full cross-product deterministically") {
    const Model m = test::small_model(1, 2, 2, 4, 64, 512, 23);
    TaskSpec spec;
    spec.kind = TaskKind::LookupKv;
    spec.context_len = 24;
    spec.n_pairs = 3;
    spec.seed = 1;
    const std::vector<TaskSpec> tasks = {spec};
    const std::vector<ScoreMethod> methods = {ScoreMethod::KvZip, ScoreMethod::PrefillMax};
    const std::vector<double> ratios = {0.25, 0.5, 1.0};
    CurveOptions opts;
    opts.instances = 2;
    opts.chunk_size = 8;
    opts.snap_window = 8;

    const EvalReport a = compression_curve(m, tasks, methods, ratios, opts);
    CHECK(a.cells.size() == 1 * 2 * 3);
    for (const CurveCell& cell : a.cells) {
        CHECK(cell.accuracy >= 0.0);
        CHECK(cell.accuracy <= 1.0);
        CHECK(cell.repeat_accuracy >= 0.0);
        CHECK(cell.repeat_accuracy <= 1.0);
    }

    const EvalReport b = compression_curve(m, tasks, methods, ratios, opts);
    REQUIRE(b.cells.size() == a.cells.size());
    for (size_t i = 0; i < a.cells.size(); ++i) {
        CHECK(a.cells[i].accuracy == b.cells[i].accuracy);
        CHECK(a.cells[i].kept_pairs == b.cells[i].kept_pairs);
    }
    CHECK(a.fingerprint == b.fingerprint);

    // threaded evaluation reduces in the same order
    CurveOptions threaded = opts;
    threaded.threads = 2;
    const EvalReport c = compression_curve(m, tasks, methods, ratios, threaded);
    for (size_t i = 0; i < a.cells.size(); ++i) {
        CHECK(a.cells[i].accuracy == c.cells[i].accuracy);
    }
}

TEST_CASE("efficiency_report scales bytes and decode flops with the kept ratio") {
    const ModelConfig cfg = make_config(2, 2, 1, 8, 64, 2048, 0);
    const EfficiencyReport full = efficiency_report(cfg, 256, 64, 1.0);
    CHECK(full.total_pairs == 2 * 2 * 256);
    // pairs * (key + value) * head_dim * sizeof(float)
    CHECK(full.full_cache_bytes == 1024ull * 2 * 8 * 4);
    CHECK(full.kept_cache_bytes == full.full_cache_bytes);
    CHECK(full.decode_attn_fraction == 1.0);

    const EfficiencyReport r03 = efficiency_report(cfg, 256, 64, 0.3);
    CHECK(r03.decode_attn_fraction == doctest::Approx(0.3).epsilon(1e-2));
    CHECK(r03.kept_cache_bytes ==
          uint64_t(ceil_count(0.3, full.total_pairs)) * 2 * 8 * 4);
    CHECK(r03.scoring.ratio_closed_form == 2.0 + 64.0 / 256.0);
}

namespace {

// one short copy training run shared by the trained-model property tests
const Model& trained_copy_model() {
    static const Model model = [] {
        TaskSpec spec;
        spec.kind = TaskKind::Copy;
        spec.context_len = 32;
        spec.len_jitter = 16;
        spec.seed = 7;
        TrainOptions opts;
        opts.batch_size = 16;
        return train(init_model(make_config(2, 2, 2, 16, 64, 512, 7)), spec, 800, 1e-3, 7, opts);
    }();
    return model;
}

double jaccard(const EvictionMask& a, const EvictionMask& b) {
    uint64_t inter = 0, uni = 0;
    for (size_t i = 0; i < a.keep.size(); ++i) {
        inter += (a.keep[i] && b.keep[i]) ? 1 : 0;
        uni += (a.keep[i] || b.keep[i]) ? 1 : 0;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace

TEST_CASE("trained copy model clears the held-out accuracy gate") {
    TaskSpec spec;
    spec.kind = TaskKind::Copy;
    spec.context_len = 32;
    spec.seed = 31;
    const double acc = holdout_accuracy(trained_copy_model(), spec, 16, 0xC0FFEE);
    MESSAGE("copy holdout accuracy: ", acc);
    CHECK(acc > 0.95);
}

TEST_CASE("scoring is robust to the repeat-prompt rendering") {
    const Model& m = trained_copy_model();
    const RepeatPromptSpec original = default_repeat_prompt(m.config);
    const RepeatPromptSpec alternate = alternate_repeat_prompt(m.config);
    REQUIRE(original.first.size() == alternate.first.size());

    // two random 30% keep-sets would overlap near Jaccard 0.18; prompt
    // renderings must agree far above that, and the reconstruction accuracy
    // they yield must match closely (gates frozen from the first measurement:
    // min Jaccard 0.63, accuracy diff 0.0)
    double worst_jaccard = 1.0;
    double worst_acc_diff = 0.0;
    for (uint64_t inst = 0; inst < 4; ++inst) {
        const TokenSeq ctx = test::random_context(m.config, 32, 5000 + inst);
        const KvCache cache = prefill(m, ctx);
        const ScoreTensor a = score_kvzip(m, cache, ctx, 16, original).scores;
        const ScoreTensor b = score_kvzip(m, cache, ctx, 16, alternate).scores;
        const EvictionMask mask_a = allocate_nonuniform(a, 0.3);
        const EvictionMask mask_b = allocate_nonuniform(b, 0.3);
        worst_jaccard = std::min(worst_jaccard, jaccard(mask_a, mask_b));
        const double acc_a = eval_repeat_accuracy(m, apply_mask(cache, mask_a), ctx, original);
        const double acc_b = eval_repeat_accuracy(m, apply_mask(cache, mask_b), ctx, original);
        worst_acc_diff = std::max(worst_acc_diff, std::abs(acc_a - acc_b));
    }
    MESSAGE("min keep-set Jaccard: ", worst_jaccard, "  max accuracy diff: ", worst_acc_diff);
    CHECK(worst_jaccard >= 0.5);
    CHECK(worst_acc_diff <= 0.15);
}

TEST_CASE("repeat accuracy improves with the keep ratio on a trained model") {
    const Model& m = trained_copy_model();
    const RepeatPromptSpec prompt = default_repeat_prompt(m.config);
    double acc_low = 0.0, acc_high = 0.0;
    for (uint64_t inst = 0; inst < 4; ++inst) {
        const TokenSeq ctx = test::random_context(m.config, 32, 7000 + inst);
        const KvCache cache = prefill(m, ctx);
        const ScoreTensor s = score_kvzip(m, cache, ctx, 16, prompt).scores;
        acc_low += eval_repeat_accuracy(m, apply_mask(cache, allocate_nonuniform(s, 0.2)), ctx,
                                        prompt);
        acc_high += eval_repeat_accuracy(m, apply_mask(cache, allocate_nonuniform(s, 0.8)), ctx,
                                         prompt);
    }
    acc_low /= 4;
    acc_high /= 4;
    MESSAGE("repeat accuracy r=0.2: ", acc_low, "  r=0.8: ", acc_high);
    CHECK(acc_high >= acc_low - 0.02);  // monotone trend, small-sample slack
}

TEST_CASE("repeat accuracy at ratio zero-equivalent is near chance") {
    const Model m = test::small_model(2, 2, 2, 8, 64, 512, 3);
    const TokenSeq ctx = test::random_context(m.config, 32, 14, /*n_system=*/1);
    const KvCache cache = prefill(m, ctx);
    const CompressedCache none = apply_mask(cache, make_mask(2, 2, 32, false));
    const RepeatPromptSpec prompt = default_repeat_prompt(m.config);
    const double acc = eval_repeat_accuracy(m, none, ctx, prompt);
    CHECK(acc < 0.5);  // untrained, systemless cache: far from reconstruction
}

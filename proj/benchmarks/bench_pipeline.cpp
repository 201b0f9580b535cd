// Microbenchmarks for the scoring/eviction pipeline. Complements the analytic
// FLOP model with wall-clock figures on the toy model.

#include <benchmark/benchmark.h>

#include "kvzip/kvzip.hpp"

using namespace kvzip;

namespace {

Model bench_model() { return init_model(make_config(2, 2, 2, 16, 64, 4096, 42)); }

TokenSeq bench_context(const ModelConfig& cfg, uint32_t n) {
    Rng rng(99, 1);
    TokenSeq seq;
    const SpecialTokens sp = SpecialTokens::of(cfg);
    for (uint32_t i = 0; i < n; ++i) {
        seq.push_back(static_cast<int32_t>(rng.below(static_cast<uint32_t>(sp.data_limit))),
                      TokenRole::Context);
    }
    return seq;
}

void BM_Prefill(benchmark::State& state) {
    const Model m = bench_model();
    const TokenSeq ctx = bench_context(m.config, static_cast<uint32_t>(state.range(0)));
    for (auto _ : state) {
        benchmark::DoNotOptimize(prefill(m, ctx));
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Prefill)->Arg(64)->Arg(256)->Arg(512);

void BM_ScoreKvzip(benchmark::State& state) {
    const Model m = bench_model();
    const uint32_t n = static_cast<uint32_t>(state.range(0));
    const auto chunk = static_cast<uint32_t>(state.range(1));
    const TokenSeq ctx = bench_context(m.config, n);
    const KvCache cache = prefill(m, ctx);
    const RepeatPromptSpec prompt = default_repeat_prompt(m.config);
    for (auto _ : state) {
        benchmark::DoNotOptimize(score_kvzip(m, cache, ctx, chunk, prompt));
    }
    state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_ScoreKvzip)->Args({256, 32})->Args({256, 64})->Args({256, 256})->Args({512, 64});

void BM_ScorePrefillMax(benchmark::State& state) {
    const Model m = bench_model();
    const TokenSeq ctx = bench_context(m.config, static_cast<uint32_t>(state.range(0)));
    for (auto _ : state) {
        benchmark::DoNotOptimize(score_prefill_max(m, ctx));
    }
}
BENCHMARK(BM_ScorePrefillMax)->Arg(256);

void BM_AllocateNonuniform(benchmark::State& state) {
    const Model m = bench_model();
    const TokenSeq ctx = bench_context(m.config, static_cast<uint32_t>(state.range(0)));
    const KvCache cache = prefill(m, ctx);
    const RepeatPromptSpec prompt = default_repeat_prompt(m.config);
    const ScoreTensor s = score_kvzip(m, cache, ctx, 64, prompt).scores;
    for (auto _ : state) {
        benchmark::DoNotOptimize(allocate_nonuniform(s, 0.3));
    }
}
BENCHMARK(BM_AllocateNonuniform)->Arg(512);

// decode latency shrinks with the kept-pair count
void BM_DecodeStep(benchmark::State& state) {
    const Model m = bench_model();
    const TokenSeq ctx = bench_context(m.config, 512);
    const KvCache cache = prefill(m, ctx);
    const RepeatPromptSpec prompt = default_repeat_prompt(m.config);
    const ScoreTensor s = score_kvzip(m, cache, ctx, 64, prompt).scores;
    const double ratio = static_cast<double>(state.range(0)) / 100.0;
    const EvictionMask mask = allocate_nonuniform(s, ratio);
    const CompressedCache cc = apply_mask(cache, mask);
    const TokenSeq one = make_seq({1}, TokenRole::Prompt);
    for (auto _ : state) {
        benchmark::DoNotOptimize(decode_greedy(m, cc, one, 1));
    }
}
BENCHMARK(BM_DecodeStep)->Arg(100)->Arg(50)->Arg(30)->Arg(10);

}  // namespace

BENCHMARK_MAIN();

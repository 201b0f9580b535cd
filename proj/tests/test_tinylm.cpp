#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "kvzip/forward.hpp"
#include "kvzip/kvzip.hpp"
#include "support/dense_reference.hpp"
#include "support/test_util.hpp"

using namespace kvzip;

TEST_CASE("init_model is deterministic per (config, seed)") {
    const ModelConfig cfg = make_config(2, 2, 2, 8, 64, 1024, 7);
    CHECK(weight_checksum(init_model(cfg)) == weight_checksum(init_model(cfg)));

    ModelConfig other = cfg;
    other.seed = 1;
    CHECK(weight_checksum(init_model(cfg)) != weight_checksum(init_model(other)));
}

TEST_CASE("init_model rejects inconsistent dimensions") {
    ModelConfig cfg = make_config(1, 1, 1, 4, 16);
    cfg.hidden_dim = 5;
    CHECK_THROWS_AS(init_model(cfg), ConfigError);
    cfg.hidden_dim = 4;
    cfg.n_layers = 0;
    CHECK_THROWS_AS(init_model(cfg), ConfigError);
}

TEST_CASE("forward produces finite logits of the right shape") {
    const Model m = init_model(make_config(1, 1, 1, 4, 16, 64, 0));
    KvCache cache = make_cache(m.config);
    const std::vector<int32_t> toks = {1, 2, 3};
    const ForwardResult res = forward(m, toks, cache);
    REQUIRE(res.logits.size() == 3 * 16);
    for (float v : res.logits) CHECK(std::isfinite(v));
    CHECK(weights_finite(m));
}

TEST_CASE("prefill appends one pair per (layer, head, position)") {
    // H = 8 with a 163-token context gives 2 * 8 * 163 = 2608 pairs
    const Model m = init_model(make_config(2, 8, 1, 4, 64, 1024, 3));
    const TokenSeq ctx = test::random_context(m.config, 163, 11);
    const KvCache cache = prefill(m, ctx);
    CHECK(cache.total_pairs() == 2608);
    CHECK(cache.n_ctx() == 163);
    CHECK(cache.next_position == 163);

    const KvCache empty = prefill(m, TokenSeq{});
    CHECK(empty.total_pairs() == 0);
}

TEST_CASE("position overflow raises a capacity error") {
    const Model m = init_model(make_config(1, 1, 1, 4, 16, 8, 0));
    KvCache cache = make_cache(m.config);
    const std::vector<int32_t> toks(9, 1);
    CHECK_THROWS_AS(forward(m, toks, cache), CapacityError);
}

TEST_CASE("incremental cached forward equals full-sequence forward") {
    const Model m = test::small_model();
    const TokenSeq xs = test::random_context(m.config, 12, 5);
    const TokenSeq ys = test::random_context(m.config, 7, 6);

    std::vector<int32_t> all = xs.tokens;
    all.insert(all.end(), ys.tokens.begin(), ys.tokens.end());
    KvCache empty = make_cache(m.config);
    const ForwardResult full = forward(m, all, empty);

    KvCache cache = prefill(m, xs);
    const ForwardResult inc = forward(m, ys.tokens, cache);

    const uint32_t vocab = m.config.vocab_size;
    float max_diff = 0.0f;
    for (size_t i = 0; i < ys.size(); ++i) {
        for (uint32_t j = 0; j < vocab; ++j) {
            const float a = full.logits[(xs.size() + i) * vocab + j];
            const float b = inc.logits[i * vocab + j];
            max_diff = std::max(max_diff, std::abs(a - b));
        }
    }
    CHECK(max_diff < 1e-5f);
}

TEST_CASE("token-by-token decoding path matches the dense reference") {
    const Model m = test::small_model(2, 2, 2, 8, 64, 256, 21);
    const TokenSeq ctx = test::random_context(m.config, 20, 9);
    KvCache cache = make_cache(m.config);
    std::vector<float> last_row;
    for (size_t i = 0; i < ctx.size(); ++i) {
        const std::vector<int32_t> one = {ctx.tokens[i]};
        const ForwardResult step = forward(m, one, cache);
        append_kv(cache, step.kv);
        last_row = step.logits;
    }
    const test::NaiveForward nf = test::naive_forward(m, ctx.tokens);
    const uint32_t vocab = m.config.vocab_size;
    float max_diff = 0.0f;
    for (uint32_t j = 0; j < vocab; ++j) {
        max_diff = std::max(max_diff,
                            std::abs(last_row[j] - nf.logits[(ctx.size() - 1) * vocab + j]));
    }
    CHECK(max_diff < 1e-5f);
}

TEST_CASE("causality: perturbing a later token never changes earlier logits") {
    const Model m = test::small_model(2, 2, 2, 8, 64, 256, 2);
    TokenSeq ctx = test::random_context(m.config, 16, 4);
    KvCache c1 = make_cache(m.config);
    const ForwardResult before = forward(m, ctx.tokens, c1);

    const size_t j = 10;
    ctx.tokens[j] = (ctx.tokens[j] + 1) % 32;
    KvCache c2 = make_cache(m.config);
    const ForwardResult after = forward(m, ctx.tokens, c2);

    const uint32_t vocab = m.config.vocab_size;
    for (size_t i = 0; i < j; ++i) {
        for (uint32_t v = 0; v < vocab; ++v) {
            CHECK(before.logits[i * vocab + v] == after.logits[i * vocab + v]);
        }
    }
}

TEST_CASE("GQA: captured K is per KV head and shared across the group") {
    const Model m = test::small_model(1, 2, 3, 4, 32, 128, 13);
    KvCache cache = make_cache(m.config);
    ForwardOptions opts;
    opts.capture_q = true;
    const std::vector<int32_t> toks = {1, 2, 3, 4, 5};
    const ForwardResult res = forward(m, toks, cache, opts);

    // keys: one row per (position, KV head), not per query head
    CHECK(res.kv.keys[0].size() == toks.size() * m.config.kv_dim());
    // queries: G rows per KV head
    CHECK(res.q.q[0].size() == toks.size() * m.config.n_query_heads() * m.config.head_dim);
}

TEST_CASE("decode_greedy is deterministic and respects max_new") {
    const Model m = test::small_model();
    const TokenSeq ctx = test::random_context(m.config, 24, 17);
    const KvCache cache = prefill(m, ctx);
    const TokenSeq prompt = make_seq({1, 2}, TokenRole::Prompt);

    CHECK(decode_greedy(m, cache, prompt, 0).size() == 0);
    const TokenSeq a = decode_greedy(m, cache, prompt, 8);
    const TokenSeq b = decode_greedy(m, cache, prompt, 8);
    CHECK(a.tokens == b.tokens);
    CHECK(a.size() == 8);
}

TEST_CASE("checkpoint round-trip reproduces forward outputs bit-exactly") {
    const Model m = test::small_model(2, 2, 2, 8, 48, 512, 99);
    const auto path = std::filesystem::temp_directory_path() / "kvzip_test_ckpt.bin";
    save_checkpoint(m, path);
    const Model loaded = load_checkpoint(path);
    std::filesystem::remove(path);

    CHECK(weight_checksum(m) == weight_checksum(loaded));
    CHECK(loaded.config == m.config);

    const TokenSeq ctx = test::random_context(m.config, 10, 3);
    KvCache c1 = make_cache(m.config);
    KvCache c2 = make_cache(loaded.config);
    const ForwardResult r1 = forward(m, ctx.tokens, c1);
    const ForwardResult r2 = forward(loaded, ctx.tokens, c2);
    CHECK(r1.logits == r2.logits);
}

TEST_CASE("attention rows sum to one") {
    // exercised through attend_compressed on a full keep-set
    const Model m = test::small_model(1, 1, 1, 4, 16, 64, 1);
    const TokenSeq ctx = test::random_context(m.config, 6, 8);
    const KvCache cache = prefill(m, ctx);
    const HeadSeq& head = cache.head(0, 0);

    Rng rng(41);
    std::vector<float> q(m.config.head_dim);
    for (auto& v : q) v = rng.normal();
    const std::vector<float> out = attend_compressed(q, 1, m.config.head_dim, head);
    // weights sum to 1, so the output lies in the convex hull of the values
    float lo = 1e30f, hi = -1e30f, olo = 1e30f, ohi = -1e30f;
    for (size_t i = 0; i < head.len(); ++i) {
        for (uint32_t e = 0; e < m.config.head_dim; ++e) {
            lo = std::min(lo, head.value_row(i, m.config.head_dim)[e]);
            hi = std::max(hi, head.value_row(i, m.config.head_dim)[e]);
        }
    }
    for (float v : out) {
        olo = std::min(olo, v);
        ohi = std::max(ohi, v);
    }
    CHECK(olo >= lo - 1e-6f);
    CHECK(ohi <= hi + 1e-6f);
}

#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "kvzip/forward.hpp"
#include "kvzip/kvzip.hpp"
#include "support/dense_reference.hpp"
#include "support/test_util.hpp"

using namespace kvzip;

TEST_CASE("apply_mask with an all-true mask preserves contents") {
    const Model m = test::small_model();
    const TokenSeq ctx = test::random_context(m.config, 12, 1);
    const KvCache cache = prefill(m, ctx);
    const EvictionMask mask = make_mask(2, 2, 12, true);
    const CompressedCache cc = apply_mask(cache, mask);

    CHECK(cc.ratio() == 1.0);
    for (uint32_t l = 0; l < 2; ++l) {
        for (uint32_t h = 0; h < 2; ++h) {
            CHECK(cc.store.head(l, h).keys == cache.head(l, h).keys);
            CHECK(cc.store.head(l, h).values == cache.head(l, h).values);
            CHECK(cc.store.head(l, h).positions == cache.head(l, h).positions);
        }
    }
    CHECK(cc.store.next_position == cache.next_position);
}

TEST_CASE("apply_mask keeps system positions even under an all-false mask") {
    const Model m = test::small_model();
    const TokenSeq ctx = test::random_context(m.config, 10, 2, /*n_system=*/1);
    const KvCache cache = prefill(m, ctx);
    const EvictionMask mask = make_mask(2, 2, 10, false);
    const CompressedCache cc = apply_mask(cache, mask);
    for (uint32_t l = 0; l < 2; ++l) {
        for (uint32_t h = 0; h < 2; ++h) {
            REQUIRE(cc.store.head(l, h).len() == 1);
            CHECK(cc.store.head(l, h).positions[0] == 0);
            CHECK(cc.store.head(l, h).roles[0] == TokenRole::System);
        }
    }
}

TEST_CASE("apply_mask gathers positions in original order") {
    const Model m = test::small_model(1, 1, 1, 4, 16, 64, 5);
    const TokenSeq ctx = test::random_context(m.config, 4, 3);
    const KvCache cache = prefill(m, ctx);
    EvictionMask mask = make_mask(1, 1, 4, false);
    mask.set(0, 0, 0, true);
    mask.set(0, 0, 2, true);
    const CompressedCache cc = apply_mask(cache, mask);
    CHECK(cc.store.head(0, 0).positions == std::vector<int32_t>{0, 2});
    CHECK(cc.kept[0] == 2);

    EvictionMask bad = make_mask(1, 1, 5, false);
    CHECK_THROWS_AS(apply_mask(cache, bad), ContractError);
}

TEST_CASE("apply_mask on an already-compressed store is identity under keep-all") {
    const Model m = test::small_model();
    const TokenSeq ctx = test::random_context(m.config, 8, 4);
    const KvCache cache = prefill(m, ctx);
    EvictionMask mask = make_mask(2, 2, 8, true);
    for (uint32_t p = 0; p < 8; p += 2) {
        for (uint32_t l = 0; l < 2; ++l) {
            for (uint32_t h = 0; h < 2; ++h) mask.set(l, h, p, false);
        }
    }
    const CompressedCache once = apply_mask(cache, mask);
    const EvictionMask all = make_mask(2, 2, once.store.n_ctx(), true);
    const CompressedCache twice = apply_mask(once.store, all);
    for (size_t i = 0; i < once.store.heads.size(); ++i) {
        CHECK(twice.store.heads[i].keys == once.store.heads[i].keys);
        CHECK(twice.store.heads[i].positions == once.store.heads[i].positions);
    }
}

TEST_CASE("cache_ratio counts kept over total") {
    EvictionMask mask = make_mask(2, 3, 8, true);
    CHECK(cache_ratio(mask) == 1.0);
    for (uint32_t l = 0; l < 2; ++l) {
        for (uint32_t h = 0; h < 3; ++h) {
            for (uint32_t p = 0; p < 4; ++p) mask.set(l, h, p, false);
        }
    }
    CHECK(cache_ratio(mask) == 0.5);
}

TEST_CASE("attend_compressed equals dense attention with -inf on evicted keys") {
    Rng rng(2024);
    const uint32_t d = 8;
    const uint32_t G = 2;
    for (int rep = 0; rep < 200; ++rep) {
        const uint32_t n_keys = 1 + rng.below(24);
        std::vector<float> keys(size_t(n_keys) * d), values(size_t(n_keys) * d);
        std::vector<float> q(size_t(G) * d);
        for (auto& v : keys) v = rng.normal();
        for (auto& v : values) v = rng.normal();
        for (auto& v : q) v = rng.normal();

        std::vector<uint8_t> keep(n_keys);
        uint32_t n_kept = 0;
        for (auto& b : keep) {
            b = rng.below(2);
            n_kept += b;
        }
        if (n_kept == 0) {
            keep[rng.below(n_keys)] = 1;
            n_kept = 1;
        }

        HeadSeq kept;
        for (uint32_t j = 0; j < n_keys; ++j) {
            if (!keep[j]) continue;
            kept.keys.insert(kept.keys.end(), keys.begin() + size_t(j) * d,
                             keys.begin() + size_t(j + 1) * d);
            kept.values.insert(kept.values.end(), values.begin() + size_t(j) * d,
                               values.begin() + size_t(j + 1) * d);
            kept.positions.push_back(static_cast<int32_t>(j));
            kept.roles.push_back(TokenRole::Context);
        }

        const std::vector<float> got = attend_compressed(q, G, d, kept);
        const std::vector<float> want = test::naive_masked_attention(q, G, d, keys, values, keep);
        CHECK(test::max_abs_diff(got, want) < 1e-5f);
    }
}

TEST_CASE("attend_compressed trivial cases") {
    const uint32_t d = 4;
    HeadSeq kept;
    kept.keys = {1.0f, 0.0f, 0.0f, 0.0f};
    kept.values = {3.0f, -1.0f, 2.0f, 0.5f};
    kept.positions = {0};
    kept.roles = {TokenRole::Context};
    const std::vector<float> q = {0.3f, -0.2f, 0.9f, 0.1f};

    // softmax over a single key puts all weight on its value
    const std::vector<float> out = attend_compressed(q, 1, d, kept);
    CHECK(test::max_abs_diff(out, kept.values) < 1e-6f);

    HeadSeq empty;
    CHECK_THROWS_AS(attend_compressed(q, 1, d, empty), ContractError);
}

TEST_CASE("decoding over a ratio-1.0 compressed cache matches the full cache") {
    const Model m = test::small_model();
    const TokenSeq ctx = test::random_context(m.config, 20, 10);
    const KvCache cache = prefill(m, ctx);
    const CompressedCache cc = apply_mask(cache, make_mask(2, 2, 20, true));
    const TokenSeq prompt = make_seq({3, 4}, TokenRole::Prompt);
    const TokenSeq full = decode_greedy(m, cache, prompt, 12);
    const TokenSeq comp = decode_greedy(m, cc, prompt, 12);
    CHECK(full.tokens == comp.tokens);
}

TEST_CASE("cache debug export round-trips") {
    const Model m = test::small_model();
    const TokenSeq ctx = test::random_context(m.config, 9, 12, /*n_system=*/2);
    const KvCache cache = prefill(m, ctx);
    const auto path = std::filesystem::temp_directory_path() / "kvzip_test_cache.bin";
    save_cache_debug(cache, path);
    const KvCache loaded = load_cache_debug(path);
    std::filesystem::remove(path);

    CHECK(loaded.next_position == cache.next_position);
    REQUIRE(loaded.heads.size() == cache.heads.size());
    for (size_t i = 0; i < cache.heads.size(); ++i) {
        CHECK(loaded.heads[i].keys == cache.heads[i].keys);
        CHECK(loaded.heads[i].values == cache.heads[i].values);
        CHECK(loaded.heads[i].positions == cache.heads[i].positions);
        CHECK(loaded.heads[i].roles == cache.heads[i].roles);
    }
}

#include "kvzip/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_set>

#include "kvzip/rng.hpp"

namespace kvzip {

const char* to_string(TaskKind k) {
    switch (k) {
        case TaskKind::Copy: return "copy";
        case TaskKind::LookupKv: return "lookup-kv";
        case TaskKind::Niah: return "niah";
        case TaskKind::MultiQueryLookup: return "multi-query-lookup";
    }
    return "?";
}

TaskKind task_kind_from_string(std::string_view s) {
    if (s == "copy") return TaskKind::Copy;
    if (s == "lookup-kv") return TaskKind::LookupKv;
    if (s == "niah") return TaskKind::Niah;
    if (s == "multi-query-lookup") return TaskKind::MultiQueryLookup;
    throw ConfigError("unknown task kind: " + std::string(s));
}

namespace {

int32_t draw_data_token(Rng& rng, int32_t data_limit) {
    return static_cast<int32_t>(rng.below(static_cast<uint32_t>(data_limit)));
}

std::vector<int32_t> draw_distinct(Rng& rng, int32_t data_limit, uint32_t count) {
    if (static_cast<uint32_t>(data_limit) < count) {
        throw ConfigError("vocabulary too small for " + std::to_string(count) + " distinct tokens");
    }
    std::unordered_set<int32_t> seen;
    std::vector<int32_t> out;
    out.reserve(count);
    while (out.size() < count) {
        const int32_t t = draw_data_token(rng, data_limit);
        if (seen.insert(t).second) out.push_back(t);
    }
    return out;
}

struct PairPlacement {
    std::vector<int32_t> keys, values;
    std::vector<uint32_t> key_pos;  // position of each key within the context
};

// Distinct (key, value) pairs at non-overlapping two-token slots; filler
// avoids the key tokens so each key occurs exactly once.
PairPlacement place_pairs(Rng& rng, TokenSeq& context, uint32_t region_begin, uint32_t region_end,
                          int32_t data_limit, uint32_t n_pairs) {
    const uint32_t region = region_end - region_begin;
    if (region < 2 * n_pairs) {
        throw ConfigError("context too short for " + std::to_string(n_pairs) + " pairs");
    }
    PairPlacement out;
    out.keys = draw_distinct(rng, data_limit, n_pairs);
    const std::unordered_set<int32_t> keyset_pre(out.keys.begin(), out.keys.end());
    out.values.reserve(n_pairs);
    for (uint32_t i = 0; i < n_pairs; ++i) {
        // values avoid the key set so every key occurs exactly once
        int32_t v = draw_data_token(rng, data_limit);
        while (keyset_pre.count(v)) v = draw_data_token(rng, data_limit);
        out.values.push_back(v);
    }

    const uint32_t n_slots = region / 2;
    std::unordered_set<uint32_t> used;
    std::vector<uint32_t> slots;
    while (slots.size() < n_pairs) {
        const uint32_t s = rng.below(n_slots);
        if (used.insert(s).second) slots.push_back(s);
    }
    std::sort(slots.begin(), slots.end());

    const std::unordered_set<int32_t> keyset(out.keys.begin(), out.keys.end());
    auto filler = [&] {
        int32_t t = draw_data_token(rng, data_limit);
        while (keyset.count(t)) t = draw_data_token(rng, data_limit);
        return t;
    };
    for (uint32_t p = region_begin; p < region_end; ++p) context.tokens[p] = filler();
    for (uint32_t i = 0; i < n_pairs; ++i) {
        const uint32_t p = region_begin + slots[i] * 2;
        context.tokens[p] = out.keys[i];
        context.tokens[p + 1] = out.values[i];
        out.key_pos.push_back(p);
    }
    return out;
}

Query lookup_query(const SpecialTokens& sp, int32_t key, int32_t value) {
    Query q;
    // the answer is predicted directly from the key token, the same
    // successor-retrieval pattern reconstruction training exercises
    q.prompt = make_seq({sp.query, key}, TokenRole::Prompt);
    q.gold = {value};
    return q;
}

}  // namespace

TaskInstance gen_task(const TaskSpec& spec, const ModelConfig& cfg, uint64_t instance) {
    if (cfg.vocab_size <= SpecialTokens::reserved + 1) {
        throw ConfigError("vocabulary too small for task generation");
    }
    const SpecialTokens sp = SpecialTokens::of(cfg);
    if (spec.context_len < spec.system_len + 2) {
        throw ConfigError("context_len must exceed system_len by at least 2");
    }
    // room for the context plus reconstruction inputs, queries and answers
    if (2ull * spec.context_len + 16 > cfg.max_position) {
        throw ConfigError("context_len does not fit max_position with queries");
    }
    if (spec.kind == TaskKind::MultiQueryLookup && spec.n_pairs < 2) {
        throw ConfigError("multi-query-lookup requires n_pairs >= 2");
    }

    Rng rng(splitmix64(spec.seed ^ 0x7a64c1e5u) + static_cast<uint64_t>(spec.kind), instance);

    TaskInstance inst;
    inst.context.tokens.assign(spec.context_len, 0);
    inst.context.roles.assign(spec.context_len, TokenRole::Context);
    for (uint32_t p = 0; p < spec.system_len; ++p) {
        inst.context.tokens[p] = draw_data_token(rng, sp.data_limit);
        inst.context.roles[p] = TokenRole::System;
    }
    const uint32_t begin = spec.system_len;
    const uint32_t end = spec.context_len;

    switch (spec.kind) {
        case TaskKind::Copy: {
            // tiled random permutations of the data alphabet: tokens repeat at
            // most ceil(n / alphabet) times, keeping reconstruction nearly
            // unambiguous for content-matching induction
            std::vector<int32_t> alphabet(sp.data_limit);
            for (int32_t t = 0; t < sp.data_limit; ++t) alphabet[t] = t;
            uint32_t p = begin;
            while (p < end) {
                for (size_t i = alphabet.size() - 1; i > 0; --i) {
                    const size_t j = rng.below(static_cast<uint32_t>(i + 1));
                    std::swap(alphabet[i], alphabet[j]);
                }
                for (size_t i = 0; i < alphabet.size() && p < end; ++i, ++p) {
                    inst.context.tokens[p] = alphabet[i];
                }
            }
            Query q;
            q.prompt = make_seq({sp.repeat, sp.sep}, TokenRole::Prompt);
            q.gold = inst.context.tokens;
            inst.queries.push_back(std::move(q));
            break;
        }
        case TaskKind::LookupKv:
        case TaskKind::MultiQueryLookup: {
            const PairPlacement pairs =
                place_pairs(rng, inst.context, begin, end, sp.data_limit, spec.n_pairs);
            const uint32_t n_q = spec.kind == TaskKind::LookupKv
                                     ? 1
                                     : std::min(std::max(spec.n_queries, 2u), spec.n_pairs);
            std::unordered_set<uint32_t> asked;
            while (inst.queries.size() < n_q) {
                const uint32_t i = rng.below(spec.n_pairs);
                if (!asked.insert(i).second) continue;
                inst.queries.push_back(lookup_query(sp, pairs.keys[i], pairs.values[i]));
            }
            break;
        }
        case TaskKind::Niah: {
            const double depth =
                spec.needle_depths.empty()
                    ? 0.5
                    : spec.needle_depths[instance % spec.needle_depths.size()];
            const int32_t needle_key = draw_data_token(rng, sp.data_limit);
            const int32_t needle_value = draw_data_token(rng, sp.data_limit);
            for (uint32_t p = begin; p < end; ++p) {
                int32_t t = draw_data_token(rng, sp.data_limit);
                while (t == needle_key) t = draw_data_token(rng, sp.data_limit);
                inst.context.tokens[p] = t;
            }
            const uint32_t span = end - begin - 2;
            const auto offset = static_cast<uint32_t>(std::llround(depth * span));
            inst.context.tokens[begin + offset] = needle_key;
            inst.context.tokens[begin + offset + 1] = needle_value;
            inst.queries.push_back(lookup_query(sp, needle_key, needle_value));
            break;
        }
    }
    return inst;
}

TrainSample gen_train_sample(const TaskSpec& spec, const ModelConfig& cfg, uint64_t sample_index) {
    const SpecialTokens sp = SpecialTokens::of(cfg);
    TaskSpec local = spec;
    if (spec.len_jitter > 0) {
        Rng jitter(splitmix64(spec.seed ^ 0x1e47c0deull), sample_index);
        const uint32_t cut = jitter.below(spec.len_jitter + 1);
        local.context_len = spec.context_len > cut + spec.system_len + 2
                                ? spec.context_len - cut
                                : spec.context_len;
    }
    const TaskInstance inst = gen_task(local, cfg, sample_index);

    TrainSample s;
    s.tokens = inst.context.tokens;
    if (spec.kind == TaskKind::Copy) {
        s.tokens.push_back(sp.repeat);
        s.tokens.push_back(sp.sep);
        const size_t start = s.tokens.size();
        s.tokens.insert(s.tokens.end(), inst.context.tokens.begin(), inst.context.tokens.end());
        s.target.assign(s.tokens.size(), 0);
        for (size_t p = start; p < s.tokens.size(); ++p) s.target[p] = 1;
        return s;
    }
    s.target.assign(s.tokens.size(), 0);
    for (const Query& q : inst.queries) {
        s.tokens.insert(s.tokens.end(), q.prompt.tokens.begin(), q.prompt.tokens.end());
        s.target.resize(s.tokens.size(), 0);
        for (int32_t gold : q.gold) {
            s.tokens.push_back(gold);
            s.target.push_back(1);
        }
    }
    return s;
}

}  // namespace kvzip

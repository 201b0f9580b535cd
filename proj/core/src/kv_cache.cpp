#include "kvzip/kv_cache.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace kvzip {

bool KvCache::uniform() const {
    if (heads.empty()) return true;
    const size_t n = heads.front().len();
    for (const auto& h : heads) {
        if (h.len() != n) return false;
    }
    return true;
}

uint32_t KvCache::n_ctx() const {
    if (!uniform()) throw ContractError("cache is ragged; uniform length undefined");
    return heads.empty() ? 0 : static_cast<uint32_t>(heads.front().len());
}

uint64_t KvCache::total_pairs() const {
    uint64_t n = 0;
    for (const auto& h : heads) n += h.len();
    return n;
}

std::vector<TokenRole> KvCache::roles() const {
    if (heads.empty()) return {};
    return heads.front().roles;
}

KvCache make_cache(const ModelConfig& cfg) {
    KvCache cache;
    cache.n_layers = cfg.n_layers;
    cache.n_kv_heads = cfg.n_kv_heads;
    cache.head_dim = cfg.head_dim;
    cache.heads.resize(size_t(cfg.n_layers) * cfg.n_kv_heads);
    return cache;
}

uint64_t EvictionMask::kept_count() const {
    uint64_t n = 0;
    for (uint8_t v : keep) n += v ? 1 : 0;
    return n;
}

uint64_t EvictionMask::kept_count(uint32_t l, uint32_t h) const {
    uint64_t n = 0;
    const size_t base = (size_t(l) * n_kv_heads + h) * n_ctx;
    for (uint32_t p = 0; p < n_ctx; ++p) n += keep[base + p] ? 1 : 0;
    return n;
}

EvictionMask make_mask(uint32_t n_layers, uint32_t n_kv_heads, uint32_t n_ctx, bool value) {
    EvictionMask mask;
    mask.n_layers = n_layers;
    mask.n_kv_heads = n_kv_heads;
    mask.n_ctx = n_ctx;
    mask.keep.assign(size_t(n_layers) * n_kv_heads * n_ctx, value ? 1 : 0);
    return mask;
}

double CompressedCache::ratio() const {
    const uint64_t total = uint64_t(source_mask.n_layers) * source_mask.n_kv_heads * source_mask.n_ctx;
    return total == 0 ? 1.0 : static_cast<double>(kept_pairs()) / static_cast<double>(total);
}

uint64_t CompressedCache::kept_pairs() const {
    uint64_t n = 0;
    for (uint32_t k : kept) n += k;
    return n;
}

CompressedCache apply_mask(const KvCache& cache, const EvictionMask& mask, Provenance provenance) {
    const uint32_t n = cache.n_ctx();
    if (mask.n_layers != cache.n_layers || mask.n_kv_heads != cache.n_kv_heads || mask.n_ctx != n) {
        throw ContractError("mask shape does not match cache");
    }
    const uint32_t d = cache.head_dim;

    CompressedCache out;
    out.store.n_layers = cache.n_layers;
    out.store.n_kv_heads = cache.n_kv_heads;
    out.store.head_dim = d;
    out.store.next_position = cache.next_position;
    out.store.heads.resize(cache.heads.size());
    out.source_mask = mask;
    out.kept.assign(cache.heads.size(), 0);
    out.provenance = provenance;

    for (uint32_t l = 0; l < cache.n_layers; ++l) {
        for (uint32_t h = 0; h < cache.n_kv_heads; ++h) {
            const HeadSeq& src = cache.head(l, h);
            HeadSeq& dst = out.store.head(l, h);
            for (uint32_t p = 0; p < n; ++p) {
                const bool keep = mask.at(l, h, p) || src.roles[p] == TokenRole::System;
                if (!keep) continue;
                dst.keys.insert(dst.keys.end(), src.key_row(p, d), src.key_row(p, d) + d);
                dst.values.insert(dst.values.end(), src.value_row(p, d), src.value_row(p, d) + d);
                dst.positions.push_back(src.positions[p]);
                dst.roles.push_back(src.roles[p]);
            }
            out.kept[l * cache.n_kv_heads + h] = static_cast<uint32_t>(dst.len());
        }
    }
    return out;
}

double cache_ratio(const EvictionMask& mask) {
    const uint64_t total = uint64_t(mask.n_layers) * mask.n_kv_heads * mask.n_ctx;
    return total == 0 ? 1.0 : static_cast<double>(mask.kept_count()) / static_cast<double>(total);
}

std::vector<float> attend_compressed(std::span<const float> queries, uint32_t n_groups,
                                     uint32_t head_dim, const HeadSeq& kept,
                                     std::span<const float> new_keys,
                                     std::span<const float> new_values) {
    if (queries.size() != size_t(n_groups) * head_dim) {
        throw ContractError("query block size does not match n_groups * head_dim");
    }
    if (kept.keys.size() != kept.len() * head_dim) {
        throw ContractError("kept key storage does not match head_dim");
    }
    if (new_keys.size() != new_values.size() || new_keys.size() % head_dim != 0) {
        throw ContractError("new-input KV block size mismatch");
    }
    const size_t n_past = kept.len();
    const size_t n_new = new_keys.size() / head_dim;
    const size_t n_keys = n_past + n_new;
    if (n_keys == 0) throw ContractError("attention over an empty key set");

    const float scale = 1.0f / std::sqrt(static_cast<float>(head_dim));
    std::vector<float> out(size_t(n_groups) * head_dim, 0.0f);
    std::vector<float> logits(n_keys);

    for (uint32_t g = 0; g < n_groups; ++g) {
        const float* q = queries.data() + size_t(g) * head_dim;
        float max_logit = -std::numeric_limits<float>::infinity();
        for (size_t j = 0; j < n_keys; ++j) {
            const float* k = j < n_past ? kept.key_row(j, head_dim)
                                        : new_keys.data() + (j - n_past) * head_dim;
            float dot = 0.0f;
            for (uint32_t e = 0; e < head_dim; ++e) dot += q[e] * k[e];
            logits[j] = dot * scale;
            if (logits[j] > max_logit) max_logit = logits[j];
        }
        float denom = 0.0f;
        for (size_t j = 0; j < n_keys; ++j) {
            logits[j] = std::exp(logits[j] - max_logit);
            denom += logits[j];
        }
        float* o = out.data() + size_t(g) * head_dim;
        for (size_t j = 0; j < n_keys; ++j) {
            const float w = logits[j] / denom;
            const float* v = j < n_past ? kept.value_row(j, head_dim)
                                        : new_values.data() + (j - n_past) * head_dim;
            for (uint32_t e = 0; e < head_dim; ++e) o[e] += w * v[e];
        }
    }
    return out;
}

namespace {

constexpr char kCacheMagic[4] = {'K', 'V', 'C', '1'};

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
T read_pod(std::ifstream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}

}  // namespace

void save_cache_debug(const KvCache& cache, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open cache export for writing: " + path.string());
    out.write(kCacheMagic, 4);
    write_pod(out, cache.n_layers);
    write_pod(out, cache.n_kv_heads);
    write_pod(out, cache.head_dim);
    write_pod(out, cache.next_position);
    for (const auto& h : cache.heads) {
        write_pod(out, static_cast<uint32_t>(h.len()));
        out.write(reinterpret_cast<const char*>(h.positions.data()),
                  static_cast<std::streamsize>(h.positions.size() * sizeof(int32_t)));
        for (TokenRole r : h.roles) write_pod(out, static_cast<uint8_t>(r));
        out.write(reinterpret_cast<const char*>(h.keys.data()),
                  static_cast<std::streamsize>(h.keys.size() * sizeof(float)));
        out.write(reinterpret_cast<const char*>(h.values.data()),
                  static_cast<std::streamsize>(h.values.size() * sizeof(float)));
    }
    if (!out) throw IoError("short write on cache export: " + path.string());
}

KvCache load_cache_debug(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open cache export: " + path.string());
    char magic[4] = {};
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kCacheMagic, 4) != 0) {
        throw IoError("bad cache magic in " + path.string());
    }
    KvCache cache;
    cache.n_layers = read_pod<uint32_t>(in);
    cache.n_kv_heads = read_pod<uint32_t>(in);
    cache.head_dim = read_pod<uint32_t>(in);
    cache.next_position = read_pod<int64_t>(in);
    cache.heads.resize(size_t(cache.n_layers) * cache.n_kv_heads);
    for (auto& h : cache.heads) {
        const uint32_t len = read_pod<uint32_t>(in);
        h.positions.resize(len);
        in.read(reinterpret_cast<char*>(h.positions.data()),
                static_cast<std::streamsize>(len * sizeof(int32_t)));
        h.roles.resize(len);
        for (auto& r : h.roles) r = static_cast<TokenRole>(read_pod<uint8_t>(in));
        h.keys.resize(size_t(len) * cache.head_dim);
        in.read(reinterpret_cast<char*>(h.keys.data()),
                static_cast<std::streamsize>(h.keys.size() * sizeof(float)));
        h.values.resize(size_t(len) * cache.head_dim);
        in.read(reinterpret_cast<char*>(h.values.data()),
                static_cast<std::streamsize>(h.values.size() * sizeof(float)));
    }
    if (!in) throw IoError("truncated cache export in " + path.string());
    return cache;
}

}  // namespace kvzip

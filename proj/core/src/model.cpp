#include "kvzip/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "kvzip/rng.hpp"

namespace kvzip {

namespace {

constexpr float kInitGain = 0.02f;

void fill_normal(std::vector<float>& w, size_t n, const CounterRng& rng, float gain) {
    w.resize(n);
    for (size_t i = 0; i < n; ++i) w[i] = gain * rng.normal(i);
}

}  // namespace

Model init_model(const ModelConfig& config) {
    validate(config);
    Model m;
    m.config = config;

    const size_t hidden = config.hidden_dim;
    const size_t q_dim = size_t(config.n_query_heads()) * config.head_dim;
    const size_t kv = size_t(config.kv_dim());
    const size_t ff = config.ff_dim();

    // one stream per tensor so layouts never alias
    uint64_t stream = 0;
    auto next_rng = [&] { return CounterRng(config.seed, stream++); };

    fill_normal(m.embedding, size_t(config.vocab_size) * hidden, next_rng(), kInitGain);
    m.layers.resize(config.n_layers);
    for (auto& layer : m.layers) {
        layer.attn_norm.assign(hidden, 1.0f);
        stream++;
        fill_normal(layer.wq, hidden * q_dim, next_rng(), kInitGain);
        fill_normal(layer.wk, hidden * kv, next_rng(), kInitGain);
        fill_normal(layer.wv, hidden * kv, next_rng(), kInitGain);
        fill_normal(layer.wo, q_dim * hidden, next_rng(), kInitGain);
        layer.mlp_norm.assign(hidden, 1.0f);
        stream++;
        fill_normal(layer.w_gate, hidden * ff, next_rng(), kInitGain);
        fill_normal(layer.w_up, hidden * ff, next_rng(), kInitGain);
        fill_normal(layer.w_down, ff * hidden, next_rng(), kInitGain);
    }
    m.final_norm.assign(hidden, 1.0f);
    fill_normal(m.unembed, hidden * config.vocab_size, next_rng(), kInitGain);
    return m;
}

void for_each_tensor(Model& m, const std::function<void(std::vector<float>&)>& fn) {
    fn(m.embedding);
    for (auto& l : m.layers) {
        fn(l.attn_norm);
        fn(l.wq);
        fn(l.wk);
        fn(l.wv);
        fn(l.wo);
        fn(l.mlp_norm);
        fn(l.w_gate);
        fn(l.w_up);
        fn(l.w_down);
    }
    fn(m.final_norm);
    fn(m.unembed);
}

void for_each_tensor(const Model& m, const std::function<void(const std::vector<float>&)>& fn) {
    for_each_tensor(const_cast<Model&>(m), [&](std::vector<float>& t) { fn(t); });
}

bool weights_finite(const Model& model) {
    bool ok = true;
    for_each_tensor(model, [&](const std::vector<float>& t) {
        for (float v : t) {
            if (!std::isfinite(v)) {
                ok = false;
                return;
            }
        }
    });
    return ok;
}

uint64_t weight_checksum(const Model& model) {
    uint64_t h = 0xcbf29ce484222325ull;
    for_each_tensor(model, [&](const std::vector<float>& t) {
        const auto* bytes = reinterpret_cast<const uint8_t*>(t.data());
        for (size_t i = 0; i < t.size() * sizeof(float); ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ull;
        }
    });
    return h;
}

namespace {

constexpr char kMagic[4] = {'T', 'L', 'M', '1'};

void write_u32(std::ofstream& out, uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint32_t read_u32(std::ifstream& in) {
    uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
    out.write(kMagic, 4);
    const ModelConfig& c = model.config;
    for (uint32_t v : {c.n_layers, c.n_kv_heads, c.group_size, c.head_dim, c.vocab_size,
                       c.max_position, c.hidden_dim, c.seed}) {
        write_u32(out, v);
    }
    for_each_tensor(model, [&](const std::vector<float>& t) {
        out.write(reinterpret_cast<const char*>(t.data()),
                  static_cast<std::streamsize>(t.size() * sizeof(float)));
    });
    if (!out) throw IoError("short write on checkpoint: " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path.string());
    char magic[4] = {};
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) {
        throw IoError("bad checkpoint magic in " + path.string());
    }
    ModelConfig c;
    c.n_layers = read_u32(in);
    c.n_kv_heads = read_u32(in);
    c.group_size = read_u32(in);
    c.head_dim = read_u32(in);
    c.vocab_size = read_u32(in);
    c.max_position = read_u32(in);
    c.hidden_dim = read_u32(in);
    c.seed = read_u32(in);
    if (!in) throw IoError("truncated checkpoint header in " + path.string());
    validate(c);

    Model m = init_model(c);  // sizes tensors; contents overwritten below
    for_each_tensor(m, [&](std::vector<float>& t) {
        in.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.size() * sizeof(float)));
    });
    if (!in) throw IoError("truncated checkpoint tensors in " + path.string());
    return m;
}

}  // namespace kvzip

#include "kvzip/io.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace kvzip {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr char kB64Alphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

ordered_json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    ordered_json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw IoError("malformed JSON in " + path.string() + ": " + e.what());
    }
    return j;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw IoError("short write on " + path.string());
}

}  // namespace

std::string to_base64(const void* data, size_t bytes) {
    const auto* p = static_cast<const uint8_t*>(data);
    std::string out;
    out.reserve((bytes + 2) / 3 * 4);
    for (size_t i = 0; i < bytes; i += 3) {
        const uint32_t b0 = p[i];
        const uint32_t b1 = i + 1 < bytes ? p[i + 1] : 0;
        const uint32_t b2 = i + 2 < bytes ? p[i + 2] : 0;
        const uint32_t triple = (b0 << 16) | (b1 << 8) | b2;
        out.push_back(kB64Alphabet[(triple >> 18) & 0x3f]);
        out.push_back(kB64Alphabet[(triple >> 12) & 0x3f]);
        out.push_back(i + 1 < bytes ? kB64Alphabet[(triple >> 6) & 0x3f] : '=');
        out.push_back(i + 2 < bytes ? kB64Alphabet[triple & 0x3f] : '=');
    }
    return out;
}

std::vector<uint8_t> from_base64(const std::string& text) {
    int8_t lut[256];
    std::memset(lut, -1, sizeof(lut));
    for (int i = 0; i < 64; ++i) lut[static_cast<uint8_t>(kB64Alphabet[i])] = static_cast<int8_t>(i);

    std::vector<uint8_t> out;
    out.reserve(text.size() / 4 * 3);
    uint32_t acc = 0;
    int n_bits = 0;
    for (char c : text) {
        if (c == '=' || c == '\n' || c == '\r') continue;
        const int8_t v = lut[static_cast<uint8_t>(c)];
        if (v < 0) throw IoError("invalid base64 character");
        acc = (acc << 6) | static_cast<uint32_t>(v);
        n_bits += 6;
        if (n_bits >= 8) {
            n_bits -= 8;
            out.push_back(static_cast<uint8_t>((acc >> n_bits) & 0xff));
        }
    }
    return out;
}

void save_scores(const ScoreTensor& s, const std::filesystem::path& path) {
    ordered_json j;
    j["schema"] = 1;
    j["kind"] = "scores";
    j["layers"] = s.n_layers;
    j["kv_heads"] = s.n_kv_heads;
    j["context_len"] = s.n_ctx;
    j["method"] = to_string(s.method);
    j["chunk_size"] = s.chunk_size;
    j["data"] = to_base64(s.scores.data(), s.scores.size() * sizeof(float));
    write_text(path, j.dump(2) + "\n");
}

ScoreTensor load_scores(const std::filesystem::path& path) {
    const ordered_json j = read_json(path);
    if (j.value("kind", "") != "scores") throw IoError("not a score file: " + path.string());
    ScoreTensor s;
    s.n_layers = j.at("layers").get<uint32_t>();
    s.n_kv_heads = j.at("kv_heads").get<uint32_t>();
    s.n_ctx = j.at("context_len").get<uint32_t>();
    s.method = score_method_from_string(j.at("method").get<std::string>());
    s.chunk_size = j.at("chunk_size").get<uint32_t>();
    const std::vector<uint8_t> raw = from_base64(j.at("data").get<std::string>());
    const size_t expect = size_t(s.n_layers) * s.n_kv_heads * s.n_ctx * sizeof(float);
    if (raw.size() != expect) throw IoError("score payload size mismatch in " + path.string());
    s.scores.resize(raw.size() / sizeof(float));
    std::memcpy(s.scores.data(), raw.data(), raw.size());
    return s;
}

namespace {
constexpr char kMaskMagic[4] = {'K', 'V', 'M', '1'};
}

void save_mask(const EvictionMask& mask, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(kMaskMagic, 4);
    for (uint32_t v : {mask.n_layers, mask.n_kv_heads, mask.n_ctx}) {
        out.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
    // bit-packed, LSB first within each byte
    uint8_t byte = 0;
    int filled = 0;
    for (uint8_t b : mask.keep) {
        if (b) byte |= static_cast<uint8_t>(1u << filled);
        if (++filled == 8) {
            out.put(static_cast<char>(byte));
            byte = 0;
            filled = 0;
        }
    }
    if (filled > 0) out.put(static_cast<char>(byte));
    if (!out) throw IoError("short write on " + path.string());
}

EvictionMask load_mask(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    char magic[4] = {};
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMaskMagic, 4) != 0) {
        throw IoError("bad mask magic in " + path.string());
    }
    EvictionMask mask;
    in.read(reinterpret_cast<char*>(&mask.n_layers), 4);
    in.read(reinterpret_cast<char*>(&mask.n_kv_heads), 4);
    in.read(reinterpret_cast<char*>(&mask.n_ctx), 4);
    if (!in) throw IoError("truncated mask header in " + path.string());
    const size_t n = size_t(mask.n_layers) * mask.n_kv_heads * mask.n_ctx;
    mask.keep.assign(n, 0);
    uint8_t byte = 0;
    for (size_t i = 0; i < n; ++i) {
        const int bit = static_cast<int>(i % 8);
        if (bit == 0) {
            int c = in.get();
            if (c == EOF) throw IoError("truncated mask payload in " + path.string());
            byte = static_cast<uint8_t>(c);
        }
        mask.keep[i] = (byte >> bit) & 1u;
    }
    return mask;
}

void save_policy(const HeadPolicy& policy, const std::filesystem::path& path) {
    ordered_json j;
    j["schema"] = 1;
    j["kind"] = "head_policy";
    j["layers"] = policy.n_layers;
    j["kv_heads"] = policy.n_kv_heads;
    j["context_len"] = policy.n_ctx;
    j["sink"] = policy.sink;
    j["window"] = policy.window;
    j["full"] = ordered_json::array();
    for (uint8_t f : policy.full) j["full"].push_back(f != 0);
    j["achieved_ratio"] = policy.achieved_ratio();
    write_text(path, j.dump(2) + "\n");
}

HeadPolicy load_policy(const std::filesystem::path& path) {
    const ordered_json j = read_json(path);
    if (j.value("kind", "") != "head_policy") throw IoError("not a policy file: " + path.string());
    HeadPolicy p;
    p.n_layers = j.at("layers").get<uint32_t>();
    p.n_kv_heads = j.at("kv_heads").get<uint32_t>();
    p.n_ctx = j.at("context_len").get<uint32_t>();
    p.sink = j.at("sink").get<uint32_t>();
    p.window = j.at("window").get<uint32_t>();
    for (const auto& f : j.at("full")) p.full.push_back(f.get<bool>() ? 1 : 0);
    if (p.full.size() != size_t(p.n_layers) * p.n_kv_heads) {
        throw IoError("policy head-flag count mismatch in " + path.string());
    }
    return p;
}

void save_report_json(const EvalReport& report, const std::filesystem::path& path) {
    ordered_json j;
    j["schema"] = report.schema;
    j["kind"] = "eval_report";
    j["fingerprint"] = report.fingerprint;
    j["scoring_pairs"] = report.scoring_pairs;
    j["prefill_pairs"] = report.prefill_pairs;
    j["cells"] = ordered_json::array();
    for (const CurveCell& c : report.cells) {
        ordered_json jc;
        jc["task"] = c.task;
        jc["method"] = c.method;
        jc["mode"] = to_string(c.mode);
        jc["ratio"] = c.ratio;
        jc["accuracy"] = c.accuracy;
        jc["repeat_accuracy"] = c.repeat_accuracy;
        jc["kept_pairs"] = c.kept_pairs;
        jc["total_pairs"] = c.total_pairs;
        j["cells"].push_back(std::move(jc));
    }
    write_text(path, j.dump(2) + "\n");
}

EvalReport load_report_json(const std::filesystem::path& path) {
    const ordered_json j = read_json(path);
    if (j.value("kind", "") != "eval_report") throw IoError("not a report file: " + path.string());
    EvalReport r;
    r.schema = j.at("schema").get<uint32_t>();
    r.fingerprint = j.at("fingerprint").get<std::string>();
    r.scoring_pairs = j.at("scoring_pairs").get<uint64_t>();
    r.prefill_pairs = j.at("prefill_pairs").get<uint64_t>();
    for (const auto& jc : j.at("cells")) {
        CurveCell c;
        c.task = jc.at("task").get<std::string>();
        c.method = jc.at("method").get<std::string>();
        c.mode = budget_mode_from_string(jc.at("mode").get<std::string>());
        c.ratio = jc.at("ratio").get<double>();
        c.accuracy = jc.at("accuracy").get<double>();
        c.repeat_accuracy = jc.at("repeat_accuracy").get<double>();
        c.kept_pairs = jc.at("kept_pairs").get<uint64_t>();
        c.total_pairs = jc.at("total_pairs").get<uint64_t>();
        r.cells.push_back(std::move(c));
    }
    return r;
}

void save_report_csv(const EvalReport& report, const std::filesystem::path& path) {
    std::string text = "task,method,mode,ratio,accuracy,repeat_accuracy,kept_pairs,total_pairs\n";
    char line[256];
    for (const CurveCell& c : report.cells) {
        std::snprintf(line, sizeof(line), "%s,%s,%s,%.6f,%.6f,%.6f,%llu,%llu\n", c.task.c_str(),
                      c.method.c_str(), to_string(c.mode), c.ratio, c.accuracy, c.repeat_accuracy,
                      static_cast<unsigned long long>(c.kept_pairs),
                      static_cast<unsigned long long>(c.total_pairs));
        text += line;
    }
    write_text(path, text);
}

}  // namespace kvzip

// kvzip command-line driver: train / score / compress / eval / bench.
// Exit codes: 0 ok, 1 configuration, 2 file I/O, 3 contract violation.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "kvzip/kvzip.hpp"

namespace {

using nlohmann::ordered_json;

std::vector<double> parse_ratio_list(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        out.push_back(std::stod(item));
    }
    if (out.empty()) throw kvzip::ConfigError("empty ratio list");
    return out;
}

std::vector<kvzip::ScoreMethod> parse_method_list(const std::string& csv) {
    std::vector<kvzip::ScoreMethod> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        out.push_back(kvzip::score_method_from_string(item));
    }
    if (out.empty()) throw kvzip::ConfigError("empty method list");
    return out;
}

struct CliOptions {
    // files
    std::string model_path;
    std::string out_path;
    std::string scores_path;
    std::string mask_path;
    std::string policy_path;
    std::string csv_path;

    // model shape (train)
    uint32_t layers = 2, kv_heads = 2, group_size = 2, head_dim = 16;
    uint32_t vocab = 64, max_pos = 2048;

    // task
    std::string task = "lookup-kv";
    uint32_t context_len = 64, n_pairs = 8, n_queries = 2, system_len = 0, len_jitter = 0;
    std::string depths = "0.0,0.5,1.0";

    // train
    uint32_t steps = 2000, batch = 8;
    double lr = 1e-3;

    // scoring
    std::string method = "kvzip";
    std::string methods = "kvzip,kvzip-logit,prefill-max,snap-window";
    uint32_t chunk_size = kvzip::kDeskChunkSize;
    uint32_t snap_window = 16, snap_kernel = 7;

    // budget
    std::string mode = "nonuniform";
    double ratio = 0.5;
    std::string ratios = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0";
    uint32_t sink = 4, window = 16;
    bool no_protect_system = false;

    // eval / bench
    uint32_t instances = 4;
    uint64_t bench_nc = 4096;
    uint32_t threads = 1;
    uint64_t seed = 0;
};

kvzip::TaskSpec task_spec_of(const CliOptions& o) {
    kvzip::TaskSpec spec;
    spec.kind = kvzip::task_kind_from_string(o.task);
    spec.context_len = o.context_len;
    spec.n_pairs = o.n_pairs;
    spec.n_queries = o.n_queries;
    spec.system_len = o.system_len;
    spec.seed = o.seed;
    spec.len_jitter = o.len_jitter;
    spec.needle_depths.clear();
    for (double d : parse_ratio_list(o.depths)) spec.needle_depths.push_back(d);
    return spec;
}

kvzip::Model load_model_checked(const CliOptions& o) {
    if (o.model_path.empty()) throw kvzip::ConfigError("--model is required");
    return kvzip::load_checkpoint(o.model_path);
}

void require_out(const CliOptions& o) {
    if (o.out_path.empty()) throw kvzip::ConfigError("--out is required");
}

int cmd_train(const CliOptions& o) {
    require_out(o);
    // --model warm-starts from an existing checkpoint (curriculum phases)
    kvzip::Model model = o.model_path.empty()
                             ? kvzip::init_model(kvzip::make_config(
                                   o.layers, o.kv_heads, o.group_size, o.head_dim, o.vocab,
                                   o.max_pos, static_cast<uint32_t>(o.seed)))
                             : kvzip::load_checkpoint(o.model_path);
    const kvzip::TaskSpec spec = task_spec_of(o);

    kvzip::TrainOptions topts;
    topts.batch_size = o.batch;
    topts.log_every = 200;
    const auto t0 = std::chrono::steady_clock::now();
    model = kvzip::train(std::move(model), spec, o.steps, o.lr, o.seed, topts);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    const double acc = kvzip::holdout_accuracy(model, spec, 32, o.seed + 1);
    std::fprintf(stderr, "[kvzip] trained %u steps in %.1fs; held-out accuracy %.4f\n", o.steps,
                 secs, acc);
    kvzip::save_checkpoint(model, o.out_path);
    return 0;
}

int cmd_score(const CliOptions& o) {
    require_out(o);
    const kvzip::Model model = load_model_checked(o);
    const kvzip::TaskSpec spec = task_spec_of(o);
    const kvzip::TaskInstance inst = kvzip::gen_task(spec, model.config, 0);
    const kvzip::KvCache cache = kvzip::prefill(model, inst.context);

    kvzip::ScoreTensor scores;
    const kvzip::ScoreMethod method = kvzip::score_method_from_string(o.method);
    const kvzip::RepeatPromptSpec prompt = kvzip::default_repeat_prompt(model.config);
    switch (method) {
        case kvzip::ScoreMethod::KvZip:
            scores = kvzip::score_kvzip(model, cache, inst.context, o.chunk_size, prompt,
                                        kvzip::ScoreMode::Softmax)
                         .scores;
            break;
        case kvzip::ScoreMethod::KvZipLogit:
            scores = kvzip::score_kvzip(model, cache, inst.context, o.chunk_size, prompt,
                                        kvzip::ScoreMode::Logit)
                         .scores;
            break;
        case kvzip::ScoreMethod::PrefillMax:
            scores = kvzip::score_prefill_max(model, inst.context);
            break;
        case kvzip::ScoreMethod::SnapWindow:
            scores = kvzip::score_snap_window(model, inst.context, o.snap_window, o.snap_kernel);
            break;
    }
    kvzip::save_scores(scores, o.out_path);
    return 0;
}

int cmd_compress(const CliOptions& o) {
    require_out(o);
    if (o.scores_path.empty()) throw kvzip::ConfigError("--scores is required");
    const kvzip::ScoreTensor scores = kvzip::load_scores(o.scores_path);
    const kvzip::HeadScore head = kvzip::aggregate_head(scores);

    std::vector<kvzip::TokenRole> roles(scores.n_ctx, kvzip::TokenRole::Context);
    for (uint32_t p = 0; p < std::min(o.system_len, scores.n_ctx); ++p) {
        roles[p] = kvzip::TokenRole::System;
    }

    kvzip::BudgetSpec budget;
    budget.ratio = o.ratio;
    budget.mode = kvzip::budget_mode_from_string(o.mode);
    budget.sink = o.sink;
    budget.window = o.window;
    budget.protect_system = !o.no_protect_system;

    ordered_json summary;
    summary["kind"] = "compress_summary";
    summary["mode"] = o.mode;
    summary["ratio_requested"] = o.ratio;

    if (budget.mode == kvzip::BudgetMode::HeadLevel) {
        const kvzip::HeadPolicy policy =
            kvzip::allocate_headlevel(head, o.ratio, o.sink, o.window, scores.n_ctx);
        kvzip::save_policy(policy, o.out_path);
        const kvzip::BudgetSummary sum = kvzip::mask_to_policy_report(policy);
        summary["ratio_achieved"] = sum.ratio;
        summary["kept_pairs"] = sum.kept;
        summary["total_pairs"] = sum.total;
        summary["full_heads"] = policy.n_full();
    } else {
        const kvzip::EvictionMask mask =
            kvzip::allocate(scores, head, budget, roles);
        kvzip::save_mask(mask, o.out_path);
        const kvzip::BudgetSummary sum = kvzip::mask_to_policy_report(mask);
        summary["ratio_achieved"] = sum.ratio;
        summary["kept_pairs"] = sum.kept;
        summary["total_pairs"] = sum.total;
        summary["per_layer_kept"] = sum.per_layer_kept;
        summary["min_head_kept"] = sum.min_head_kept;
        summary["max_head_kept"] = sum.max_head_kept;
    }
    std::cout << summary.dump(2) << "\n";
    return 0;
}

int cmd_eval(const CliOptions& o) {
    require_out(o);
    const kvzip::Model model = load_model_checked(o);
    const kvzip::TaskSpec spec = task_spec_of(o);

    if (!o.mask_path.empty() || !o.policy_path.empty()) {
        // single-setting evaluation of a prebuilt mask/policy on instance 0
        const kvzip::TaskInstance inst = kvzip::gen_task(spec, model.config, 0);
        const kvzip::KvCache cache = kvzip::prefill(model, inst.context);
        kvzip::EvictionMask mask;
        if (!o.mask_path.empty()) {
            mask = kvzip::load_mask(o.mask_path);
        } else {
            const kvzip::HeadPolicy policy = kvzip::load_policy(o.policy_path);
            mask = kvzip::policy_to_mask(policy, cache.roles(), !o.no_protect_system);
        }
        const kvzip::CompressedCache cc = kvzip::apply_mask(cache, mask);
        const kvzip::RepeatPromptSpec prompt = kvzip::default_repeat_prompt(model.config);

        kvzip::EvalReport report;
        report.fingerprint = "single";
        kvzip::CurveCell cell;
        cell.task = kvzip::to_string(spec.kind);
        cell.method = "file";
        cell.mode = kvzip::budget_mode_from_string(o.mode);
        cell.ratio = cc.ratio();
        cell.accuracy = kvzip::eval_queries(model, cc, inst.queries);
        cell.repeat_accuracy = kvzip::eval_repeat_accuracy(model, cc, inst.context, prompt);
        cell.kept_pairs = cc.kept_pairs();
        cell.total_pairs = cache.total_pairs();
        report.cells.push_back(cell);
        kvzip::save_report_json(report, o.out_path);
        return 0;
    }

    const std::vector<kvzip::TaskSpec> tasks = {spec};
    const std::vector<kvzip::ScoreMethod> methods = parse_method_list(o.methods);
    const std::vector<double> ratios = parse_ratio_list(o.ratios);

    kvzip::CurveOptions copts;
    copts.mode = kvzip::budget_mode_from_string(o.mode);
    copts.chunk_size = o.chunk_size;
    copts.instances = o.instances;
    copts.snap_window = o.snap_window;
    copts.snap_kernel = o.snap_kernel;
    copts.sink = o.sink;
    copts.stream_window = o.window;
    copts.threads = o.threads;

    const auto t0 = std::chrono::steady_clock::now();
    const kvzip::EvalReport report = kvzip::compression_curve(model, tasks, methods, ratios, copts);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::fprintf(stderr, "[kvzip] evaluated %zu cells in %.1fs\n", report.cells.size(), secs);

    kvzip::save_report_json(report, o.out_path);
    if (!o.csv_path.empty()) kvzip::save_report_csv(report, o.csv_path);
    return 0;
}

int cmd_bench(const CliOptions& o) {
    kvzip::ModelConfig cfg;
    if (!o.model_path.empty()) {
        cfg = kvzip::load_checkpoint(o.model_path).config;
    } else {
        cfg = kvzip::make_config(o.layers, o.kv_heads, o.group_size, o.head_dim, o.vocab,
                                 o.max_pos, static_cast<uint32_t>(o.seed));
    }
    const kvzip::EfficiencyReport rep =
        kvzip::efficiency_report(cfg, o.bench_nc, o.chunk_size, o.ratio);

    ordered_json j;
    j["kind"] = "efficiency_report";
    j["context_len"] = rep.n_ctx;
    j["chunk_size"] = rep.chunk_size;
    j["ratio"] = rep.ratio;
    j["prefill_pairs"] = rep.scoring.prefill_pairs;
    j["scoring_pairs"] = rep.scoring.scoring_pairs;
    j["scoring_over_prefill"] = rep.scoring.ratio;
    j["scoring_over_prefill_closed_form"] = rep.scoring.ratio_closed_form;
    j["total_pairs"] = rep.total_pairs;
    j["kept_pairs"] = rep.kept_pairs;
    j["full_cache_bytes"] = rep.full_cache_bytes;
    j["kept_cache_bytes"] = rep.kept_cache_bytes;
    j["decode_attn_fraction"] = rep.decode_attn_fraction;

    const std::string text = j.dump(2) + "\n";
    if (!o.out_path.empty()) {
        std::ofstream out(o.out_path);
        if (!out) throw kvzip::IoError("cannot open " + o.out_path);
        out << text;
    } else {
        std::cout << text;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale KV-cache compression: reconstruction-based importance scoring, "
                 "budgeted eviction and evaluation on a toy GQA transformer"};
    app.fallthrough();
    app.set_config("--config", "", "flat key=value configuration file; flags override");

    CliOptions o;
    app.add_option("--model", o.model_path, "model checkpoint path");
    app.add_option("--out", o.out_path, "output artifact path");
    app.add_option("--seed", o.seed, "top-level seed; all randomness flows from it");
    app.add_option("--threads", o.threads, "worker threads for evaluation sweeps");

    app.add_option("--layers", o.layers, "transformer layers (train/bench)");
    app.add_option("--kv-heads", o.kv_heads, "KV heads per layer");
    app.add_option("--group-size", o.group_size, "query heads per KV head");
    app.add_option("--head-dim", o.head_dim, "feature dimension per head");
    app.add_option("--vocab", o.vocab, "vocabulary size");
    app.add_option("--max-pos", o.max_pos, "maximum position");

    app.add_option("--task", o.task, "copy | lookup-kv | niah | multi-query-lookup");
    app.add_option("--context-len", o.context_len, "context length in tokens");
    app.add_option("--pairs", o.n_pairs, "key/value pairs in lookup tasks");
    app.add_option("--queries", o.n_queries, "queries per context (multi-query tasks)");
    app.add_option("--system-len", o.system_len, "system-tagged prefix length");
    app.add_option("--len-jitter", o.len_jitter, "training context-length jitter");
    app.add_option("--depths", o.depths, "needle depth quantiles, comma-separated");

    app.add_option("--steps", o.steps, "training steps");
    app.add_option("--lr", o.lr, "learning rate");
    app.add_option("--batch", o.batch, "training batch size");

    app.add_option("--method", o.method, "kvzip | kvzip-logit | prefill-max | snap-window");
    app.add_option("--methods", o.methods, "comma-separated methods for eval sweeps");
    app.add_option("--chunk-size", o.chunk_size, "scoring chunk size m");
    app.add_option("--snap-window", o.snap_window, "snap observation window");
    app.add_option("--snap-kernel", o.snap_kernel, "snap max-pooling kernel (odd)");

    app.add_option("--mode", o.mode, "nonuniform | uniform | headlevel");
    app.add_option("--ratio", o.ratio, "budget ratio in (0, 1]");
    app.add_option("--ratios", o.ratios, "comma-separated ratios for eval sweeps");
    app.add_option("--sink", o.sink, "headlevel: sink positions kept by streaming heads");
    app.add_option("--window", o.window, "headlevel: recent positions kept by streaming heads");
    app.add_flag("--no-protect-system", o.no_protect_system, "allow evicting system positions");

    app.add_option("--scores", o.scores_path, "score tensor file (compress input)");
    app.add_option("--mask", o.mask_path, "mask file (eval input)");
    app.add_option("--policy", o.policy_path, "head policy file (eval input)");
    app.add_option("--csv", o.csv_path, "also write the report as CSV");

    app.add_option("--instances", o.instances, "contexts averaged per task");
    app.add_option("--nc", o.bench_nc, "context length for bench");

    CLI::App* train = app.add_subcommand("train", "train a checkpoint on a synthetic task");
    CLI::App* score = app.add_subcommand("score", "compute importance scores for a task context");
    CLI::App* compress = app.add_subcommand("compress", "turn scores into a mask or head policy");
    CLI::App* eval = app.add_subcommand("eval", "evaluate compressed caches (sweep or mask file)");
    CLI::App* bench = app.add_subcommand("bench", "analytic FLOP and memory accounting");
    app.require_subcommand(1);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;  // help/version exit 0; parse failures exit 1
    }

    try {
        if (train->parsed()) return cmd_train(o);
        if (score->parsed()) return cmd_score(o);
        if (compress->parsed()) return cmd_compress(o);
        if (eval->parsed()) return cmd_eval(o);
        if (bench->parsed()) return cmd_bench(o);
        throw kvzip::ConfigError("no subcommand given");
    } catch (const kvzip::ConfigError& e) {
        std::fprintf(stderr, "error (config): %s\n", e.what());
        return 1;
    } catch (const kvzip::IoError& e) {
        std::fprintf(stderr, "error (io): %s\n", e.what());
        return 2;
    } catch (const kvzip::ContractError& e) {
        std::fprintf(stderr, "error (contract): %s\n", e.what());
        return 3;
    } catch (const kvzip::TrainingError& e) {
        std::fprintf(stderr, "error (training, step %llu): %s\n",
                     static_cast<unsigned long long>(e.step), e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "kvzip/config.hpp"

namespace kvzip {

enum class TaskKind : uint8_t { Copy, LookupKv, Niah, MultiQueryLookup };

const char* to_string(TaskKind k);
TaskKind task_kind_from_string(std::string_view s);

// Synthetic task family. context_len counts the whole context including the
// optional system prefix; needle_depths are quantile insertion points.
struct TaskSpec {
    TaskKind kind = TaskKind::LookupKv;
    uint32_t context_len = 64;
    uint32_t n_pairs = 8;
    std::vector<double> needle_depths = {0.0, 0.5, 1.0};
    uint32_t n_queries = 2;  // multi-query variants emit this many
    uint32_t system_len = 0;
    uint64_t seed = 0;
    // training only: sample context lengths from [context_len - len_jitter,
    // context_len] so positional shortcuts cannot solve the task
    uint32_t len_jitter = 0;
};

struct Query {
    TokenSeq prompt;
    std::vector<int32_t> gold;
};

struct TaskInstance {
    TokenSeq context;
    std::vector<Query> queries;
};

// Deterministic given (spec.seed, instance). Throws ConfigError when the
// context cannot fit the task parameters or max_position.
TaskInstance gen_task(const TaskSpec& spec, const ModelConfig& cfg, uint64_t instance = 0);

// Training sample: token sequence plus a target mask marking label positions
// (a position p is a target when tokens[p] is to be predicted from p-1).
struct TrainSample {
    std::vector<int32_t> tokens;
    std::vector<uint8_t> target;
};

TrainSample gen_train_sample(const TaskSpec& spec, const ModelConfig& cfg, uint64_t sample_index);

}  // namespace kvzip

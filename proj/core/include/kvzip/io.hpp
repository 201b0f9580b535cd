#pragma once

#include <filesystem>

#include "kvzip/eval.hpp"
#include "kvzip/eviction.hpp"
#include "kvzip/scoring.hpp"

namespace kvzip {

// Score tensor: JSON header (dims, method, chunk size) with row-major f32
// data embedded as base64.
void save_scores(const ScoreTensor& scores, const std::filesystem::path& path);
ScoreTensor load_scores(const std::filesystem::path& path);

// Pair-level mask, magic "KVM1": u32 dims then bit-packed keep flags,
// row-major (layer, head, position), LSB first within each byte.
void save_mask(const EvictionMask& mask, const std::filesystem::path& path);
EvictionMask load_mask(const std::filesystem::path& path);

// Head-level policy as JSON.
void save_policy(const HeadPolicy& policy, const std::filesystem::path& path);
HeadPolicy load_policy(const std::filesystem::path& path);

void save_report_json(const EvalReport& report, const std::filesystem::path& path);
EvalReport load_report_json(const std::filesystem::path& path);
// Flat CSV: one row per cell.
void save_report_csv(const EvalReport& report, const std::filesystem::path& path);

std::string to_base64(const void* data, size_t bytes);
std::vector<uint8_t> from_base64(const std::string& text);

}  // namespace kvzip

#pragma once

#include <filesystem>
#include <functional>
#include <vector>

#include "kvzip/config.hpp"

namespace kvzip {

// Pre-norm transformer block weights. Matrices are row-major with the input
// dimension outermost, so y = x @ W iterates contiguous rows of W.
struct LayerWeights {
    std::vector<float> attn_norm;  // hidden
    std::vector<float> wq;         // hidden x (H*G*d)
    std::vector<float> wk;         // hidden x (H*d)
    std::vector<float> wv;         // hidden x (H*d)
    std::vector<float> wo;         // (H*G*d) x hidden
    std::vector<float> mlp_norm;   // hidden
    std::vector<float> w_gate;     // hidden x ff
    std::vector<float> w_up;       // hidden x ff
    std::vector<float> w_down;     // ff x hidden
};

struct Model {
    ModelConfig config;
    std::vector<float> embedding;   // vocab x hidden
    std::vector<LayerWeights> layers;
    std::vector<float> final_norm;  // hidden
    std::vector<float> unembed;     // hidden x vocab
};

// Deterministically seeded weights; identical (config, seed) gives bit-identical
// parameters. Matrices ~ N(0, 0.02^2), norm gains 1.
Model init_model(const ModelConfig& config);

bool weights_finite(const Model& model);
uint64_t weight_checksum(const Model& model);  // FNV-1a over raw parameter bytes

// Visits parameter tensors in checkpoint declaration order:
// embedding, per layer [attn_norm, wq, wk, wv, wo, mlp_norm, w_gate, w_up, w_down],
// final_norm, unembed.
void for_each_tensor(Model& m, const std::function<void(std::vector<float>&)>& fn);
void for_each_tensor(const Model& m, const std::function<void(const std::vector<float>&)>& fn);

// "TLM1" checkpoint: magic, 8 config fields as u32 little-endian
// (n_layers, n_kv_heads, group_size, head_dim, vocab_size, max_position,
// hidden_dim, seed), then tensors as raw f32 in declaration order.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace kvzip

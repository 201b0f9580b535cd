#pragma once

#include <cstdint>
#include <span>

#include "kvzip/model.hpp"
#include "kvzip/tasks.hpp"

namespace kvzip {

struct TrainOptions {
    uint32_t batch_size = 8;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double clip_norm = 1.0;  // global gradient-norm clip; 0 disables
    uint32_t log_every = 0;  // 0 = silent
};

// Adam on masked next-token cross-entropy. Deterministic given (model, spec,
// steps, lr, seed). steps = 0 returns the model bit-exactly unchanged.
// Throws TrainingError with the step index when the loss becomes non-finite.
Model train(Model model, const TaskSpec& task, uint32_t steps, double lr, uint64_t seed,
            const TrainOptions& opts = {});

// Fraction of held-out target positions whose argmax prediction matches.
double holdout_accuracy(const Model& model, const TaskSpec& task, uint32_t n_samples,
                        uint64_t seed);

// Mean masked cross-entropy on held-out samples.
double holdout_loss(const Model& model, const TaskSpec& task, uint32_t n_samples, uint64_t seed);

// Dense training-path forward (no cache); returns [n][vocab] logits.
// Exposed for parity checks against the cached inference path.
std::vector<float> train_forward_logits(const Model& model, std::span<const int32_t> tokens);

// Mean cross-entropy over the sample's target positions plus its gradient;
// `grads` must be model-shaped and is overwritten.
double loss_and_gradients(const Model& model, const TrainSample& sample, Model& grads);

}  // namespace kvzip

#pragma once

#include <cstdint>

#include "fedft/dataset.hpp"
#include "fedft/model.hpp"
#include "fedft/network.hpp"

namespace fedft {

struct TrainStats {
  double last_epoch_loss = 0.0;  // mean mini-batch BCE over the final epoch
  std::size_t steps = 0;
};

/// Mini-batch SGD-momentum over `epochs` passes. Batch order comes from
/// `seed` (one shuffle per epoch); the last partial batch is kept. Only the
/// tensors `cfg` marks trainable change. `state` carries velocity across calls
/// when provided; otherwise a fresh zero state is used.
TrainStats train_epochs(ModelParams& params, const Architecture& arch, const FineTuneConfig& cfg,
                        const FeatureMatrix& x, const LabelVector& y, std::uint32_t epochs,
                        std::uint64_t seed, OptimizerState<float>* state = nullptr);

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
};

inline constexpr double kDefaultThreshold = 0.5;

/// accuracy = mean([p >= threshold] == label); loss = BCE.
EvalResult evaluate(const ModelParams& params, const Architecture& arch, const FeatureMatrix& x,
                    const LabelVector& y, double threshold = kDefaultThreshold);

/// Accuracy/loss from precomputed probabilities.
EvalResult score_probabilities(std::span<const float> probs, std::span<const std::uint8_t> labels,
                               double threshold = kDefaultThreshold);

/// Probabilities for every row, computed in fixed-size chunks.
std::vector<float> predict(const ModelParams& params, const Architecture& arch,
                           const FeatureMatrix& x);

}  // namespace fedft

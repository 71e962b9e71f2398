#include "fedft/training.hpp"

#include "fedft/error.hpp"
#include "fedft/rng.hpp"

namespace fedft {

namespace {

constexpr std::size_t kPredictChunk = 1024;

Matrix<float> gather_columns(const FeatureMatrix& x, std::span<const std::size_t> rows) {
  Matrix<float> m(static_cast<Eigen::Index>(x.n_cols), static_cast<Eigen::Index>(rows.size()));
  for (std::size_t j = 0; j < rows.size(); ++j) {
    const auto src = x.row(rows[j]);
    for (std::size_t c = 0; c < x.n_cols; ++c) {
      m(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(j)) = static_cast<float>(src[c]);
    }
  }
  return m;
}

}  // namespace

TrainStats train_epochs(ModelParams& params, const Architecture& arch, const FineTuneConfig& cfg,
                        const FeatureMatrix& x, const LabelVector& y, std::uint32_t epochs,
                        std::uint64_t seed, OptimizerState<float>* state) {
  cfg.validate(arch);
  if (x.n_rows != y.size()) throw DataError("train: feature/label length mismatch");
  if (x.n_rows == 0) throw DataError("train: empty training set");
  OptimizerState<float> local;
  if (!state) {
    local = OptimizerState<float>::zeros_for(params, arch, cfg);
    state = &local;
  }

  TrainStats stats;
  std::vector<std::size_t> order(x.n_rows);
  LabelVector batch_labels;
  for (std::uint32_t epoch = 0; epoch < epochs; ++epoch) {
    order = shuffled_indices(x.n_rows, mix_seed(seed, epoch));
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> rows(order.data() + start, end - start);
      const Matrix<float> input = gather_columns(x, rows);
      batch_labels.resize(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) batch_labels[i] = y[rows[i]];

      const auto fwd = forward_matrix<float>(params, arch, input, &cfg);
      loss_sum += bce_loss<float>(fwd.probs, batch_labels);
      const auto grads = backward<float>(*fwd.cache, params, arch, fwd.probs, batch_labels, cfg);
      sgd_momentum_step(params, grads, *state, cfg.learning_rate, cfg.momentum);
      ++batches;
      ++stats.steps;
    }
    stats.last_epoch_loss = loss_sum / static_cast<double>(batches);
  }
  return stats;
}

std::vector<float> predict(const ModelParams& params, const Architecture& arch,
                           const FeatureMatrix& x) {
  std::vector<float> probs;
  probs.reserve(x.n_rows);
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < x.n_rows; start += kPredictChunk) {
    const std::size_t end = std::min(x.n_rows, start + kPredictChunk);
    rows.resize(end - start);
    for (std::size_t i = start; i < end; ++i) rows[i - start] = i;
    const auto out = forward_matrix<float>(params, arch, gather_columns(x, rows), nullptr);
    probs.insert(probs.end(), out.probs.begin(), out.probs.end());
  }
  return probs;
}

EvalResult score_probabilities(std::span<const float> probs, std::span<const std::uint8_t> labels,
                               double threshold) {
  if (probs.empty()) throw DataError("evaluate: empty evaluation set");
  if (probs.size() != labels.size()) throw DataError("evaluate: probability/label length mismatch");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const bool predicted = static_cast<double>(probs[i]) >= threshold;
    if (predicted == (labels[i] != 0)) ++correct;
  }
  EvalResult r;
  r.accuracy = static_cast<double>(correct) / static_cast<double>(probs.size());
  r.loss = bce_loss<float>(probs, labels);
  return r;
}

EvalResult evaluate(const ModelParams& params, const Architecture& arch, const FeatureMatrix& x,
                    const LabelVector& y, double threshold) {
  if (x.n_rows == 0) throw DataError("evaluate: empty evaluation set");
  const auto probs = predict(params, arch, x);
  return score_probabilities(probs, y, threshold);
}

}  // namespace fedft

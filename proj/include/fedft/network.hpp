#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fedft/dataset.hpp"
#include "fedft/error.hpp"
#include "fedft/model.hpp"
#include "fedft/rng.hpp"

namespace fedft {

template <typename S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

template <typename S>
using RowMajorMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// What backward() needs, for layers at or after the first trainable one.
/// Conv activations are laid out channels x (batch * length); FC activations
/// are features x batch.
template <typename S>
struct ActivationCache {
  std::size_t batch_size = 0;
  std::size_t first_trainable = 0;
  std::vector<Matrix<S>> inputs;   // FC input, or the im2col matrix for conv
  std::vector<Matrix<S>> preacts;  // pre-ReLU / pre-sigmoid outputs
  std::vector<std::vector<Eigen::Index>> pool_argmax;  // conv only: source column per pooled cell

  bool stores_layer(std::size_t layer) const { return layer >= first_trainable; }
};

template <typename S>
struct ForwardResult {
  std::vector<S> probs;
  std::optional<ActivationCache<S>> cache;
};

namespace detail {

template <typename S>
Eigen::Map<const RowMajorMatrix<S>> weight_map(const Tensor<S>& t) {
  const auto rows = static_cast<Eigen::Index>(t.shape[0]);
  return {t.data.data(), rows, static_cast<Eigen::Index>(t.data.size()) / rows};
}

template <typename S>
Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> bias_map(const Tensor<S>& t) {
  return {t.data.data(), static_cast<Eigen::Index>(t.data.size())};
}

/// channels x (batch*length) -> (channels*kernel) x (batch*length), zero "same" padding.
template <typename S>
Matrix<S> im2col(const Matrix<S>& x, Eigen::Index batch, Eigen::Index length, Eigen::Index kernel) {
  const Eigen::Index channels = x.rows();
  const Eigen::Index pad = (kernel - 1) / 2;
  Matrix<S> col(channels * kernel, batch * length);
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index t = 0; t < length; ++t) {
      const Eigen::Index j = b * length + t;
      for (Eigen::Index c = 0; c < channels; ++c) {
        for (Eigen::Index k = 0; k < kernel; ++k) {
          const Eigen::Index src = t + k - pad;
          col(c * kernel + k, j) = (src >= 0 && src < length) ? x(c, b * length + src) : S(0);
        }
      }
    }
  }
  return col;
}

template <typename S>
Matrix<S> col2im(const Matrix<S>& dcol, Eigen::Index channels, Eigen::Index batch,
                 Eigen::Index length, Eigen::Index kernel) {
  const Eigen::Index pad = (kernel - 1) / 2;
  Matrix<S> dx = Matrix<S>::Zero(channels, batch * length);
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index t = 0; t < length; ++t) {
      const Eigen::Index j = b * length + t;
      for (Eigen::Index c = 0; c < channels; ++c) {
        for (Eigen::Index k = 0; k < kernel; ++k) {
          const Eigen::Index src = t + k - pad;
          if (src >= 0 && src < length) dx(c, b * length + src) += dcol(c * kernel + k, j);
        }
      }
    }
  }
  return dx;
}

/// Max over non-overlapping windows; first maximum wins.
template <typename S>
Matrix<S> max_pool(const Matrix<S>& a, Eigen::Index batch, Eigen::Index length, Eigen::Index pool,
                   std::vector<Eigen::Index>* argmax) {
  const Eigen::Index out_len = length / pool;
  Matrix<S> out(a.rows(), batch * out_len);
  if (argmax) argmax->assign(static_cast<std::size_t>(out.size()), 0);
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index j = 0; j < out_len; ++j) {
      const Eigen::Index dst = b * out_len + j;
      const Eigen::Index base = b * length + j * pool;
      for (Eigen::Index c = 0; c < a.rows(); ++c) {
        Eigen::Index best = base;
        for (Eigen::Index q = 1; q < pool; ++q) {
          if (a(c, base + q) > a(c, best)) best = base + q;
        }
        out(c, dst) = a(c, best);
        if (argmax) (*argmax)[static_cast<std::size_t>(dst * a.rows() + c)] = best;
      }
    }
  }
  return out;
}

template <typename S>
Matrix<S> max_pool_backward(const Matrix<S>& dout, const std::vector<Eigen::Index>& argmax,
                            Eigen::Index in_cols) {
  Matrix<S> din = Matrix<S>::Zero(dout.rows(), in_cols);
  for (Eigen::Index j = 0; j < dout.cols(); ++j) {
    for (Eigen::Index c = 0; c < dout.rows(); ++c) {
      din(c, argmax[static_cast<std::size_t>(j * dout.rows() + c)]) += dout(c, j);
    }
  }
  return din;
}

/// channels x (batch*length) -> (channels*length) x batch, feature = c*length + t.
template <typename S>
Matrix<S> flatten(const Matrix<S>& p, Eigen::Index batch, Eigen::Index length) {
  Matrix<S> f(p.rows() * length, batch);
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index c = 0; c < p.rows(); ++c) {
      for (Eigen::Index t = 0; t < length; ++t) f(c * length + t, b) = p(c, b * length + t);
    }
  }
  return f;
}

template <typename S>
Matrix<S> unflatten(const Matrix<S>& f, Eigen::Index channels, Eigen::Index length) {
  const Eigen::Index batch = f.cols();
  Matrix<S> p(channels, batch * length);
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index c = 0; c < channels; ++c) {
      for (Eigen::Index t = 0; t < length; ++t) p(c, b * length + t) = f(c * length + t, b);
    }
  }
  return p;
}

template <typename S>
S sigmoid(S z) {
  if (z >= S(0)) return S(1) / (S(1) + std::exp(-z));
  const S e = std::exp(z);
  return e / (S(1) + e);
}

inline void check_params(const Architecture& arch, std::size_t tensor_count) {
  if (tensor_count != 2 * arch.layer_count()) {
    throw ModelError("model has " + std::to_string(tensor_count) + " tensors, architecture needs " +
                     std::to_string(2 * arch.layer_count()));
  }
}

}  // namespace detail

/// Forward pass over a d x B input. With `cache_mode`, records what backward
/// needs for the trainable suffix of the network.
template <typename S>
ForwardResult<S> forward_matrix(const BasicModelParams<S>& params, const Architecture& arch,
                                const Matrix<S>& input, const FineTuneConfig* cache_mode) {
  detail::check_params(arch, params.tensors.size());
  if (input.rows() != static_cast<Eigen::Index>(arch.input_dim)) {
    throw ModelError("forward: input has " + std::to_string(input.rows()) +
                     " features, model expects " + std::to_string(arch.input_dim));
  }
  const Eigen::Index batch = input.cols();
  ForwardResult<S> result;
  ActivationCache<S>* cache = nullptr;
  if (cache_mode) {
    result.cache.emplace();
    cache = &*result.cache;
    cache->batch_size = static_cast<std::size_t>(batch);
    cache->first_trainable = cache_mode->first_trainable_layer(arch);
    cache->inputs.resize(arch.layer_count());
    cache->preacts.resize(arch.layer_count());
    cache->pool_argmax.resize(arch.conv.size());
  }
  auto keep = [&](std::size_t layer) { return cache && cache->stores_layer(layer); };

  const auto lengths = arch.conv_lengths();
  Matrix<S> act = input;  // 1 x (B*d) once reshaped below; d x B for conv-free models
  if (!arch.conv.empty()) {
    Matrix<S> seq(1, batch * input.rows());
    for (Eigen::Index b = 0; b < batch; ++b) {
      seq.block(0, b * input.rows(), 1, input.rows()) = input.col(b).transpose();
    }
    act = std::move(seq);
  }

  for (std::size_t i = 0; i < arch.conv.size(); ++i) {
    const auto& blk = arch.conv[i];
    const auto len = static_cast<Eigen::Index>(lengths[i]);
    Matrix<S> col = detail::im2col(act, batch, len, static_cast<Eigen::Index>(blk.kernel_size));
    Matrix<S> z = detail::weight_map(params.tensors[2 * i]) * col;
    z.colwise() += detail::bias_map(params.tensors[2 * i + 1]);
    const Matrix<S> a = z.cwiseMax(S(0));
    act = detail::max_pool(a, batch, len, static_cast<Eigen::Index>(blk.pool_size),
                           keep(i) ? &cache->pool_argmax[i] : nullptr);
    if (keep(i)) {
      cache->inputs[i] = std::move(col);
      cache->preacts[i] = std::move(z);
    }
  }
  if (!arch.conv.empty()) {
    act = detail::flatten(act, batch, static_cast<Eigen::Index>(lengths.back()));
  }

  const std::size_t n_conv = arch.conv.size();
  for (std::size_t j = 0; j < arch.fc.size(); ++j) {
    const std::size_t layer = n_conv + j;
    Matrix<S> z = detail::weight_map(params.tensors[2 * layer]) * act;
    z.colwise() += detail::bias_map(params.tensors[2 * layer + 1]);
    const bool last = j + 1 == arch.fc.size();
    Matrix<S> next = last ? z : Matrix<S>(z.cwiseMax(S(0)));
    if (keep(layer)) {
      cache->inputs[layer] = std::move(act);
      cache->preacts[layer] = std::move(z);
    }
    act = std::move(next);
  }

  result.probs.resize(static_cast<std::size_t>(batch));
  for (Eigen::Index b = 0; b < batch; ++b) {
    result.probs[static_cast<std::size_t>(b)] = detail::sigmoid(act(0, b));
  }
  return result;
}

/// Row-per-sample convenience wrapper over forward_matrix.
template <typename S>
ForwardResult<S> forward(const BasicModelParams<S>& params, const Architecture& arch,
                         const FeatureMatrix& batch, const FineTuneConfig* cache_mode = nullptr) {
  if (batch.n_cols != arch.input_dim) {
    throw ModelError("forward: batch has " + std::to_string(batch.n_cols) +
                     " columns, model expects " + std::to_string(arch.input_dim));
  }
  Matrix<S> input(static_cast<Eigen::Index>(batch.n_cols), static_cast<Eigen::Index>(batch.n_rows));
  for (std::size_t r = 0; r < batch.n_rows; ++r) {
    for (std::size_t c = 0; c < batch.n_cols; ++c) {
      input(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(r)) =
          static_cast<S>(batch.at(r, c));
    }
  }
  return forward_matrix(params, arch, input, cache_mode);
}

inline constexpr double kProbClamp = 1e-7;

/// Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7].
template <typename S>
double bce_loss(std::span<const S> probs, std::span<const std::uint8_t> labels) {
  if (probs.size() != labels.size()) {
    throw ModelError("bce_loss: " + std::to_string(probs.size()) + " probabilities vs " +
                     std::to_string(labels.size()) + " labels");
  }
  if (probs.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = std::clamp(static_cast<double>(probs[i]), kProbClamp, 1.0 - kProbClamp);
    total -= labels[i] ? std::log(p) : std::log(1.0 - p);
  }
  return total / static_cast<double>(probs.size());
}

/// Gradients of mean BCE (sigmoid folded in: dL/dlogit = (p - y) / B) for
/// exactly the tensors `cfg` marks trainable, in parameter order.
template <typename S>
std::vector<Tensor<S>> backward(const ActivationCache<S>& cache, const BasicModelParams<S>& params,
                                const Architecture& arch, std::span<const S> probs,
                                std::span<const std::uint8_t> labels, const FineTuneConfig& cfg) {
  detail::check_params(arch, params.tensors.size());
  const std::size_t first = cfg.first_trainable_layer(arch);
  if (cache.first_trainable != first) {
    throw ModelError("backward: cache was recorded from layer " +
                     std::to_string(cache.first_trainable) + " but config trains from layer " +
                     std::to_string(first));
  }
  if (probs.size() != cache.batch_size || labels.size() != cache.batch_size) {
    throw ModelError("backward: batch size mismatch between cache, probabilities and labels");
  }
  const std::size_t n_layers = arch.layer_count();
  const std::size_t n_conv = arch.conv.size();
  const auto batch = static_cast<Eigen::Index>(cache.batch_size);
  const auto lengths = arch.conv_lengths();

  std::vector<Tensor<S>> grads(2 * (n_layers - first));
  auto store = [&](std::size_t layer, const Matrix<S>& gw, const Matrix<S>& gb) {
    const std::size_t slot = 2 * (layer - first);
    const auto& wt = params.tensors[2 * layer];
    const auto& bt = params.tensors[2 * layer + 1];
    const RowMajorMatrix<S> gw_row = gw;
    grads[slot] = {wt.name, wt.shape, std::vector<S>(gw_row.data(), gw_row.data() + gw_row.size())};
    grads[slot + 1] = {bt.name, bt.shape, std::vector<S>(gb.data(), gb.data() + gb.size())};
  };
  auto relu_mask = [](const Matrix<S>& d, const Matrix<S>& z) {
    return Matrix<S>(d.cwiseProduct((z.array() > S(0)).template cast<S>().matrix()));
  };

  if (first == n_layers) return grads;

  Matrix<S> delta(1, batch);
  const S inv_batch = S(1) / static_cast<S>(batch);
  for (Eigen::Index b = 0; b < batch; ++b) {
    const auto i = static_cast<std::size_t>(b);
    delta(0, b) = (probs[i] - static_cast<S>(labels[i])) * inv_batch;
  }

  for (std::size_t layer = n_layers; layer-- > first;) {
    const auto& w = detail::weight_map(params.tensors[2 * layer]);
    const Matrix<S>& in = cache.inputs[layer];
    store(layer, delta * in.transpose(), delta.rowwise().sum().transpose());
    if (layer == first) break;

    Matrix<S> d_in = w.transpose() * delta;
    if (layer > n_conv) {
      delta = relu_mask(d_in, cache.preacts[layer - 1]);
      continue;
    }
    // Gradient w.r.t. the pooled output of conv block `prev`.
    const std::size_t prev = layer - 1;
    const auto pooled_len = static_cast<Eigen::Index>(lengths[prev + 1]);
    const auto channels = static_cast<Eigen::Index>(arch.conv[prev].out_channels);
    Matrix<S> d_pooled;
    if (layer == n_conv) {
      d_pooled = detail::unflatten(d_in, channels, pooled_len);
    } else {
      d_pooled = detail::col2im(d_in, channels, batch, pooled_len,
                                static_cast<Eigen::Index>(arch.conv[layer].kernel_size));
    }
    const Matrix<S>& z_prev = cache.preacts[prev];
    const Matrix<S> d_act = detail::max_pool_backward(d_pooled, cache.pool_argmax[prev], z_prev.cols());
    delta = relu_mask(d_act, z_prev);
  }
  return grads;
}

/// Per-tensor velocity buffers for the trainable tensors.
template <typename S>
struct OptimizerState {
  std::vector<Tensor<S>> velocity;

  static OptimizerState zeros_for(const BasicModelParams<S>& params, const Architecture& arch,
                                  const FineTuneConfig& cfg) {
    OptimizerState st;
    const auto mask = cfg.trainable_mask(arch);
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
      if (!mask[i]) continue;
      const auto& t = params.tensors[i];
      st.velocity.push_back({t.name, t.shape, std::vector<S>(t.data.size(), S(0))});
    }
    return st;
  }
};

/// Heavy-ball momentum: v <- mu*v + g; w <- w - lr*v. Only tensors named in
/// `grads` are touched.
template <typename S>
void sgd_momentum_step(BasicModelParams<S>& params, const std::vector<Tensor<S>>& grads,
                       OptimizerState<S>& state, double lr, double mu) {
  const S lr_s = static_cast<S>(lr);
  const S mu_s = static_cast<S>(mu);
  for (const auto& g : grads) {
    const auto pi = params.index_of(g.name);
    if (!pi) throw ModelError("sgd: no parameter named '" + g.name + "'");
    auto vit = std::find_if(state.velocity.begin(), state.velocity.end(),
                            [&](const Tensor<S>& v) { return v.name == g.name; });
    if (vit == state.velocity.end()) throw ModelError("sgd: no velocity buffer for '" + g.name + "'");
    auto& w = params.tensors[*pi];
    if (w.shape != g.shape || vit->shape != g.shape || w.data.size() != g.data.size()) {
      throw ModelError("sgd: shape mismatch for '" + g.name + "'");
    }
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      vit->data[i] = mu_s * vit->data[i] + g.data[i];
      w.data[i] -= lr_s * vit->data[i];
    }
  }
}

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12});
}

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t checked = 0;   // coordinates compared
  std::size_t refined = 0;   // needed a smaller step to avoid a kink
  std::size_t on_kink = 0;   // still crossed a kink at the smallest step; not compared
};

namespace detail {

// ReLU signs and pool winners: the piecewise-linear region a forward pass sits in.
template <typename S>
std::vector<std::uint8_t> activation_pattern(const ActivationCache<S>& cache) {
  std::vector<std::uint8_t> bits;
  for (const auto& z : cache.preacts) {
    for (Eigen::Index i = 0; i < z.size(); ++i) bits.push_back(z.data()[i] > S(0));
  }
  for (const auto& am : cache.pool_argmax) {
    for (auto idx : am) {
      for (std::size_t b = 0; b < sizeof(idx); ++b) bits.push_back(static_cast<std::uint8_t>(idx >> (8 * b)));
    }
  }
  return bits;
}

}  // namespace detail

/// Compares backward() with central finite differences over every trainable
/// parameter, in double precision on a random model and batch. A coordinate
/// whose +-epsilon probe changes a ReLU sign or pool winner is retried with a
/// step ten times smaller (down to `min_epsilon`); if it still straddles a
/// kink it is counted in `on_kink` and left out of the maximum.
inline GradCheckReport grad_check_report(const Architecture& arch, std::uint64_t seed,
                                         std::size_t batch_size, double epsilon,
                                         const FineTuneConfig& cfg, double min_epsilon = 1e-7) {
  arch.validate();
  auto params = cast_params<double>(init_params(arch, seed));
  Rng rng(mix_seed(seed, 0x67636b));
  for (auto& t : params.tensors) {
    if (t.shape.size() == 1) {
      for (auto& v : t.data) v = rng.uniform(-0.1, 0.1);
    }
  }
  Matrix<double> x(arch.input_dim, static_cast<Eigen::Index>(batch_size));
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    for (Eigen::Index r = 0; r < x.rows(); ++r) x(r, c) = rng.uniform(-2.0, 2.0);
  }
  LabelVector y(batch_size);
  for (auto& v : y) v = static_cast<std::uint8_t>(rng.below(2));

  const FineTuneConfig all = FineTuneConfig::full(arch);
  auto probe = [&](const BasicModelParams<double>& p) {
    const auto out = forward_matrix<double>(p, arch, x, &all);
    return std::pair{bce_loss<double>(out.probs, y), detail::activation_pattern(*out.cache)};
  };

  const auto fwd = forward_matrix<double>(params, arch, x, &cfg);
  const auto grads = backward<double>(*fwd.cache, params, arch, fwd.probs, y, cfg);
  const auto base_pattern = probe(params).second;

  GradCheckReport report;
  for (const auto& g : grads) {
    const std::size_t ti = *params.index_of(g.name);
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      double& w = params.tensors[ti].data[i];
      const double orig = w;
      bool smooth = false;
      bool first_try = true;
      for (double eps = epsilon; eps >= min_epsilon * (1 - 1e-9); eps /= 10.0, first_try = false) {
        w = orig + eps;
        const auto up = probe(params);
        w = orig - eps;
        const auto down = probe(params);
        w = orig;
        if (up.second != base_pattern || down.second != base_pattern) continue;
        smooth = true;
        if (!first_try) ++report.refined;
        ++report.checked;
        report.max_relative_error = std::max(
            report.max_relative_error, relative_error(g.data[i], (up.first - down.first) / (2.0 * eps)));
        break;
      }
      if (!smooth) ++report.on_kink;
    }
  }
  return report;
}

/// Worst relative error reported by grad_check_report.
inline double grad_check(const Architecture& arch, std::uint64_t seed, std::size_t batch_size,
                         double epsilon, const FineTuneConfig& cfg) {
  return grad_check_report(arch, seed, batch_size, epsilon, cfg).max_relative_error;
}

}  // namespace fedft

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "fedft/error.hpp"
#include "fedft/model.hpp"
#include "fedft/network.hpp"
#include "fedft/training.hpp"
#include "test_util.hpp"

using namespace fedft;

namespace {

// Straightforward per-sample forward pass used as an oracle.
double naive_prob(const BasicModelParams<double>& p, const Architecture& arch,
                  const std::vector<double>& x) {
  std::vector<std::vector<double>> seq{x};
  std::size_t t_idx = 0;
  for (const auto& blk : arch.conv) {
    const auto& w = p.tensors[t_idx].data;
    const auto& b = p.tensors[t_idx + 1].data;
    t_idx += 2;
    const int len = static_cast<int>(seq[0].size());
    const int pad = static_cast<int>(blk.kernel_size - 1) / 2;
    std::vector<std::vector<double>> out(blk.out_channels, std::vector<double>(len));
    for (std::size_t o = 0; o < blk.out_channels; ++o) {
      for (int t = 0; t < len; ++t) {
        double z = b[o];
        for (std::size_t c = 0; c < blk.in_channels; ++c) {
          for (std::size_t k = 0; k < blk.kernel_size; ++k) {
            const int src = t + static_cast<int>(k) - pad;
            if (src < 0 || src >= len) continue;
            z += w[(o * blk.in_channels + c) * blk.kernel_size + k] * seq[c][src];
          }
        }
        out[o][t] = std::max(0.0, z);
      }
    }
    const int plen = len / static_cast<int>(blk.pool_size);
    std::vector<std::vector<double>> pooled(blk.out_channels, std::vector<double>(plen));
    for (std::size_t o = 0; o < blk.out_channels; ++o) {
      for (int j = 0; j < plen; ++j) {
        double m = out[o][j * blk.pool_size];
        for (std::size_t q = 1; q < blk.pool_size; ++q) m = std::max(m, out[o][j * blk.pool_size + q]);
        pooled[o][j] = m;
      }
    }
    seq = pooled;
  }
  std::vector<double> h;
  if (arch.conv.empty()) {
    h = x;
  } else {
    for (const auto& ch : seq) h.insert(h.end(), ch.begin(), ch.end());
  }
  for (std::size_t j = 0; j < arch.fc.size(); ++j) {
    const auto& w = p.tensors[t_idx].data;
    const auto& b = p.tensors[t_idx + 1].data;
    t_idx += 2;
    const auto& layer = arch.fc[j];
    std::vector<double> z(layer.out_features);
    for (std::size_t o = 0; o < layer.out_features; ++o) {
      z[o] = b[o];
      for (std::size_t i = 0; i < layer.in_features; ++i) z[o] += w[o * layer.in_features + i] * h[i];
      if (j + 1 < arch.fc.size()) z[o] = std::max(0.0, z[o]);
    }
    h = z;
  }
  return 1.0 / (1.0 + std::exp(-h[0]));
}

double naive_loss(const BasicModelParams<double>& p, const Architecture& arch,
                  const std::vector<std::vector<double>>& xs, const LabelVector& y) {
  double total = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double q = naive_prob(p, arch, xs[i]);
    total -= y[i] ? std::log(q) : std::log(1.0 - q);
  }
  return total / static_cast<double>(xs.size());
}

Architecture small_arch() {
  const std::uint32_t ch[] = {16, 32, 64};
  const std::uint32_t hid[] = {64, 32};
  return Architecture::make(8, ch, hid);
}

BasicModelParams<double> random_params(const Architecture& arch, std::uint64_t seed) {
  auto p = cast_params<double>(init_params(arch, seed));
  Rng rng(seed + 100);
  for (auto& t : p.tensors) {
    if (t.shape.size() == 1) {
      for (auto& v : t.data) v = rng.uniform(-0.1, 0.1);
    }
  }
  return p;
}

FeatureMatrix to_matrix(const std::vector<std::vector<double>>& xs) {
  FeatureMatrix m(xs.size(), xs[0].size());
  for (std::size_t r = 0; r < xs.size(); ++r)
    for (std::size_t c = 0; c < xs[r].size(); ++c) m.at(r, c) = xs[r][c];
  return m;
}

std::vector<std::vector<double>> random_inputs(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<double>> xs(n, std::vector<double>(d));
  for (auto& row : xs)
    for (auto& v : row) v = rng.uniform(-2.0, 2.0);
  return xs;
}

FineTuneConfig tail(std::uint32_t k) {
  FineTuneConfig c;
  c.trainable_fc_tail = k;
  return c;
}

}  // namespace

TEST(Architecture, DefaultShapesFollowLayerRules) {
  const auto arch = Architecture::default_for(20);
  // Oracle: same-padded conv keeps length, pool 2/2 floors it.
  std::uint32_t len = 20;
  std::vector<std::uint32_t> expect_lengths{len};
  for (int i = 0; i < 3; ++i) {
    len /= 2;
    expect_lengths.push_back(len);
  }
  EXPECT_EQ(arch.conv_lengths(), expect_lengths);
  EXPECT_EQ(expect_lengths.back(), 2u);
  EXPECT_EQ(arch.flatten_size(), 64u * 2u);
  ASSERT_EQ(arch.conv.size(), 3u);
  ASSERT_EQ(arch.fc.size(), 3u);
  EXPECT_EQ(arch.fc[0].in_features, 128u);
  EXPECT_EQ(arch.fc[2].out_features, 1u);

  std::size_t count = 0;
  for (const auto& c : arch.conv) count += c.out_channels * c.in_channels * c.kernel_size + c.out_channels;
  for (const auto& f : arch.fc) count += f.out_features * f.in_features + f.out_features;
  EXPECT_EQ(arch.parameter_count(), count);
  EXPECT_EQ(count, 18209u);

  const auto specs = arch.tensor_specs();
  ASSERT_EQ(specs.size(), 12u);
  EXPECT_EQ(specs[0].name, "conv0.weight");
  EXPECT_EQ(specs[0].shape, (std::vector<std::uint32_t>{16, 1, 3}));
  EXPECT_EQ(specs[11].name, "fc2.bias");
}

TEST(Architecture, RejectsNonChainingDims) {
  auto arch = Architecture::default_for(20);
  arch.fc[1].in_features = 63;
  EXPECT_THROW(arch.validate(), ModelError);
  const std::uint32_t ch[] = {16, 32, 64, 128, 256};
  const std::uint32_t hid[] = {8};
  EXPECT_THROW(Architecture::make(20, ch, hid), ModelError);  // pooled length hits zero
}

TEST(FineTune, ConfigValidation) {
  const auto arch = Architecture::default_for(20);
  EXPECT_THROW(tail(0).validate(arch), ConfigError);
  EXPECT_THROW(tail(4).validate(arch), ConfigError);
  EXPECT_NO_THROW(tail(1).validate(arch));
  EXPECT_EQ(tail(1).trainable_names(arch), (std::vector<std::string>{"fc2.weight", "fc2.bias"}));
  EXPECT_EQ(tail(1).trainable_parameter_count(arch), 33u);
  EXPECT_EQ(tail(3).first_trainable_layer(arch), 3u);
  EXPECT_EQ(FineTuneConfig::full(arch).first_trainable_layer(arch), 0u);
  EXPECT_EQ(FineTuneConfig::full(arch).trainable_parameter_count(arch), 18209u);
}

TEST(Init, BoundsZeroBiasesDeterminism) {
  const auto arch = Architecture::default_for(20);
  const auto p = init_params(arch, 7);
  const auto specs = arch.tensor_specs();
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    const auto& t = p.tensors[i];
    EXPECT_EQ(t.name, specs[i].name);
    EXPECT_EQ(t.shape, specs[i].shape);
    if (t.shape.size() == 1) {
      for (float v : t.data) EXPECT_EQ(v, 0.0f);
    } else {
      std::size_t fan_in = 1;
      for (std::size_t d = 1; d < t.shape.size(); ++d) fan_in *= t.shape[d];
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      for (float v : t.data) EXPECT_LT(std::abs(v), bound);
    }
  }
  const auto& last = p.tensors[10];
  for (float v : last.data) EXPECT_LT(std::abs(v), 0.4331);
  EXPECT_EQ(serialize_params(init_params(arch, 7)), serialize_params(p));
  EXPECT_NE(serialize_params(init_params(arch, 8)), serialize_params(p));
}

TEST(Forward, ZeroParamsGiveHalf) {
  const auto arch = Architecture::default_for(20);
  const auto x = fedft::testing::random_matrix(5, 20, 3);
  const auto out = forward(zero_params(arch), arch, x);
  ASSERT_EQ(out.probs.size(), 5u);
  for (float p : out.probs) EXPECT_EQ(p, 0.5f);
  EXPECT_FALSE(out.cache.has_value());
}

TEST(Forward, MatchesNaiveOracle) {
  for (const auto& arch : {Architecture::default_for(20), small_arch()}) {
    const auto p = random_params(arch, 5);
    const auto xs = random_inputs(6, arch.input_dim, 9);
    const auto fast = forward(p, arch, to_matrix(xs));
    const auto fast32 = forward(cast_params<float>(p), arch, to_matrix(xs));
    ASSERT_EQ(fast.probs.size(), xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double expect = naive_prob(p, arch, xs[i]);
      EXPECT_NEAR(fast.probs[i], expect, 1e-12);
      EXPECT_NEAR(fast32.probs[i], expect, 1e-5);
      EXPECT_GT(fast32.probs[i], 0.0f);
      EXPECT_LT(fast32.probs[i], 1.0f);
    }
  }
}

TEST(Forward, DimensionMismatchThrows) {
  const auto arch = Architecture::default_for(20);
  EXPECT_THROW(forward(init_params(arch, 1), arch, fedft::testing::random_matrix(2, 19, 1)),
               ModelError);
}

TEST(Loss, AnalyticValues) {
  const std::vector<double> half{0.5};
  const LabelVector one{1}, zero{0};
  EXPECT_NEAR(bce_loss<double>(half, one), std::log(2.0), 1e-12);
  const std::vector<double> p09{0.9};
  EXPECT_NEAR(bce_loss<double>(p09, zero), -std::log(0.1), 1e-12);
  const std::vector<double> exact{1.0, 0.0};
  const LabelVector y{1, 0};
  EXPECT_LE(bce_loss<double>(exact, y), 1e-6);
  EXPECT_THROW(bce_loss<double>(exact, one), ModelError);
}

TEST(MaxPool, FirstMaximumWinsAndRoutesOnce) {
  Matrix<double> a(1, 4);
  a << 3.0, 3.0, 1.0, 2.0;
  std::vector<Eigen::Index> argmax;
  const auto out = detail::max_pool<double>(a, 1, 4, 2, &argmax);
  EXPECT_EQ(out(0, 0), 3.0);
  EXPECT_EQ(out(0, 1), 2.0);
  EXPECT_EQ(argmax, (std::vector<Eigen::Index>{0, 3}));
  Matrix<double> d(1, 2);
  d << 1.0, 1.0;
  const auto back = detail::max_pool_backward<double>(d, argmax, 4);
  EXPECT_EQ(back(0, 0), 1.0);
  EXPECT_EQ(back(0, 1), 0.0);
  EXPECT_EQ(back(0, 2), 0.0);
  EXPECT_EQ(back(0, 3), 1.0);
}

TEST(Backward, MatchesFiniteDifferencesOnNaiveOracle) {
  const auto arch = small_arch();
  const double eps = 1e-5;
  for (std::size_t batch : {1u, 4u}) {
    for (auto cfg : {tail(1), tail(3), FineTuneConfig::full(arch)}) {
      auto p = random_params(arch, 21 + batch);
      const auto xs = random_inputs(batch, arch.input_dim, 33 + batch);
      LabelVector y(batch);
      for (std::size_t i = 0; i < batch; ++i) y[i] = static_cast<std::uint8_t>(i % 2);
      const auto fwd = forward(p, arch, to_matrix(xs), &cfg);
      const auto grads = backward<double>(*fwd.cache, p, arch, fwd.probs, y, cfg);
      EXPECT_EQ(grads.size(), cfg.trainable_names(arch).size());
      double worst = 0.0;
      for (const auto& g : grads) {
        auto& t = p.tensors[*p.index_of(g.name)];
        // Every bias entry, and a stride through the weights to keep the naive oracle cheap.
        const std::size_t stride = t.shape.size() == 1 ? 1 : 7;
        for (std::size_t i = 0; i < t.data.size(); i += stride) {
          const double orig = t.data[i];
          t.data[i] = orig + eps;
          const double up = naive_loss(p, arch, xs, y);
          t.data[i] = orig - eps;
          const double down = naive_loss(p, arch, xs, y);
          t.data[i] = orig;
          const double fd = (up - down) / (2 * eps);
          if (std::abs(fd) < 1e-9 && std::abs(g.data[i]) < 1e-9) continue;
          worst = std::max(worst, relative_error(g.data[i], fd));
        }
      }
      EXPECT_LT(worst, 1e-4) << "batch " << batch << " k " << cfg.trainable_fc_tail;
    }
  }
}

TEST(Backward, GradCheckBelowTolerance) {
  const auto arch = small_arch();
  for (std::size_t batch : {1u, 4u}) {
    for (auto cfg : {tail(1), tail(3)}) {
      const auto r = grad_check_report(arch, 3, batch, 1e-4, cfg);
      EXPECT_LT(r.max_relative_error, 1e-4);
      EXPECT_EQ(r.checked, cfg.trainable_parameter_count(arch));
      EXPECT_EQ(r.on_kink, 0u);
    }
  }
}

TEST(Backward, GradCheckRefinesStepsThatCrossKinks) {
  const auto arch = small_arch();
  const auto full = FineTuneConfig::full(arch);
  // A coarse step crosses ReLU/pool kinks on a full-network check; those
  // coordinates get re-probed with smaller steps instead of being dropped.
  const auto r = grad_check_report(arch, 2, 4, 1e-3, full);
  EXPECT_GT(r.refined, 0u);
  EXPECT_EQ(r.checked + r.on_kink, arch.parameter_count());
  EXPECT_LT(grad_check(arch, 2, 4, 1e-4, full), 1e-4);
}

TEST(Backward, TailOneYieldsTwoTensors) {
  const auto arch = Architecture::default_for(20);
  const auto p = init_params(arch, 1);
  const auto x = fedft::testing::random_matrix(3, 20, 2);
  const auto cfg = tail(1);
  const auto fwd = forward(p, arch, x, &cfg);
  const LabelVector y{0, 1, 1};
  const auto g = backward<float>(*fwd.cache, p, arch, fwd.probs, y, cfg);
  ASSERT_EQ(g.size(), 2u);
  EXPECT_EQ(g[0].name, "fc2.weight");
  EXPECT_EQ(g[1].name, "fc2.bias");
  // The frozen prefix stores nothing.
  for (std::size_t layer = 0; layer < 5; ++layer) EXPECT_EQ(fwd.cache->inputs[layer].size(), 0);
}

TEST(Backward, StationaryWhenPredictionsEqualLabels) {
  const auto arch = Architecture::default_for(20);
  const auto p = init_params(arch, 1);
  const auto x = fedft::testing::random_matrix(4, 20, 2);
  const auto cfg = FineTuneConfig::full(arch);
  const auto fwd = forward(p, arch, x, &cfg);
  const LabelVector y{0, 1, 1, 0};
  const std::vector<float> probs{0.f, 1.f, 1.f, 0.f};
  for (const auto& g : backward<float>(*fwd.cache, p, arch, probs, y, cfg)) {
    double norm = 0.0;
    for (float v : g.data) norm += double(v) * v;
    EXPECT_LE(std::sqrt(norm), 1e-6);
  }
}

TEST(Backward, CacheConfigMismatchThrows) {
  const auto arch = Architecture::default_for(20);
  const auto p = init_params(arch, 1);
  const auto x = fedft::testing::random_matrix(2, 20, 2);
  const auto k1 = tail(1), k3 = tail(3);
  const auto fwd = forward(p, arch, x, &k1);
  const LabelVector y{0, 1};
  EXPECT_THROW(backward<float>(*fwd.cache, p, arch, fwd.probs, y, k3), ModelError);
}

TEST(Sgd, HeavyBallExamples) {
  Architecture arch;
  arch.input_dim = 1;
  arch.fc = {{1, 1}};
  BasicModelParams<double> p{{{"fc0.weight", {1, 1}, {1.0}}, {"fc0.bias", {1}, {0.0}}}};
  auto st = OptimizerState<double>::zeros_for(p, arch, FineTuneConfig::full(arch));
  const std::vector<Tensor<double>> g{{"fc0.weight", {1, 1}, {1.0}}};
  sgd_momentum_step(p, g, st, 0.1, 0.9);
  EXPECT_DOUBLE_EQ(st.velocity[0].data[0], 1.0);
  EXPECT_NEAR(p.tensors[0].data[0], 0.9, 1e-15);
  sgd_momentum_step(p, g, st, 0.1, 0.9);
  EXPECT_DOUBLE_EQ(st.velocity[0].data[0], 1.9);
  EXPECT_NEAR(1.0 - p.tensors[0].data[0], 0.29, 1e-15);
  EXPECT_EQ(p.tensors[1].data[0], 0.0);

  auto plain = OptimizerState<double>::zeros_for(p, arch, FineTuneConfig::full(arch));
  const double before = p.tensors[0].data[0];
  const std::vector<Tensor<double>> g2{{"fc0.weight", {1, 1}, {0.5}}};
  sgd_momentum_step(p, g2, plain, 0.2, 0.0);
  sgd_momentum_step(p, g2, plain, 0.2, 0.0);
  EXPECT_NEAR(p.tensors[0].data[0], before - 0.2, 1e-15);

  const std::vector<Tensor<double>> bad{{"fc0.weight", {2}, {1.0, 1.0}}};
  EXPECT_THROW(sgd_momentum_step(p, bad, st, 0.1, 0.9), ModelError);
}

TEST(Training, FreezingLeavesFrozenTensorsBitIdentical) {
  const auto arch = Architecture::default_for(20);
  const auto start = init_params(arch, 4);
  const auto x = fedft::testing::random_matrix(100, 20, 6);
  LabelVector y(100);
  for (std::size_t i = 0; i < 100; ++i) y[i] = x.at(i, 0) > 0;
  for (std::uint32_t k : {1u, 2u, 3u}) {
    auto p = start;
    train_epochs(p, arch, tail(k), x, y, 3, 11);
    const auto mask = tail(k).trainable_mask(arch);
    for (std::size_t i = 0; i < p.tensors.size(); ++i) {
      const auto& a = p.tensors[i].data;
      const auto& b = start.tensors[i].data;
      const bool same = std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
      if (mask[i]) {
        EXPECT_FALSE(same) << p.tensors[i].name << " should have changed (k=" << k << ")";
      } else {
        EXPECT_TRUE(same) << p.tensors[i].name << " changed while frozen (k=" << k << ")";
      }
    }
  }
}

TEST(Training, DeterministicGivenSeed) {
  const auto arch = Architecture::default_for(20);
  const auto x = fedft::testing::random_matrix(70, 20, 6);
  LabelVector y(70);
  for (std::size_t i = 0; i < 70; ++i) y[i] = x.at(i, 1) > 0;
  auto a = init_params(arch, 4), b = a;
  const auto sa = train_epochs(a, arch, FineTuneConfig::full(arch), x, y, 2, 5);
  const auto sb = train_epochs(b, arch, FineTuneConfig::full(arch), x, y, 2, 5);
  EXPECT_EQ(serialize_params(a), serialize_params(b));
  EXPECT_EQ(sa.last_epoch_loss, sb.last_epoch_loss);
  EXPECT_EQ(sa.steps, 2u * 3u);  // ceil(70 / 32) batches per epoch
}

TEST(Training, LossDecreasesOnSeparableToy) {
  const std::uint32_t ch[] = {4};
  const std::uint32_t hid[] = {8};
  const auto arch = Architecture::make(2, ch, hid, 3, 2);
  FeatureMatrix x(64, 2);
  LabelVector y(64);
  Rng rng(3);
  for (std::size_t i = 0; i < 64; ++i) {
    const bool pos = i % 2 == 0;
    x.at(i, 0) = rng.uniform(0.5, 1.5) * (pos ? 1 : -1);
    x.at(i, 1) = rng.uniform(-0.5, 0.5);
    y[i] = pos;
  }
  auto cfg = FineTuneConfig::full(arch);
  cfg.batch_size = 64;
  auto p = init_params(arch, 2);
  OptimizerState<float> st = OptimizerState<float>::zeros_for(p, arch, cfg);
  double prev = evaluate(p, arch, x, y).loss;
  int decreases = 0;
  for (int step = 0; step < 50; ++step) {
    train_epochs(p, arch, cfg, x, y, 1, 1, &st);
    const double now = evaluate(p, arch, x, y).loss;
    if (now < prev) ++decreases;
    prev = now;
  }
  EXPECT_GE(decreases, 45);
}

TEST(Serialize, RoundTripAndErrors) {
  const auto arch = Architecture::default_for(20);
  const auto p = init_params(arch, 9);
  const auto bytes = serialize_params(p);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "FFTP");
  const auto back = deserialize_params(bytes, arch);
  EXPECT_EQ(back, p);
  EXPECT_EQ(serialize_params(back), bytes);

  for (std::size_t cut : {std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    EXPECT_THROW(deserialize_params(std::span(bytes.data(), cut), arch), ModelError);
  }
  auto bad_magic = bytes;
  bad_magic[1] = 'X';
  EXPECT_THROW(deserialize_params(bad_magic, arch), ModelError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(deserialize_params(bad_version, arch), ModelError);

  auto partial = p;
  partial.tensors.pop_back();
  try {
    deserialize_params(serialize_params(partial), arch);
    FAIL();
  } catch (const ModelError& e) {
    EXPECT_NE(std::string(e.what()).find("fc2.bias"), std::string::npos) << e.what();
  }
  auto extra = p;
  extra.tensors.push_back({"fc9.weight", {1}, {1.0f}});
  try {
    deserialize_params(serialize_params(extra), arch);
    FAIL();
  } catch (const ModelError& e) {
    EXPECT_NE(std::string(e.what()).find("fc9.weight"), std::string::npos) << e.what();
  }
  auto wrong_shape = p;
  wrong_shape.tensors[3].shape = {16, 2, 3};
  wrong_shape.tensors[3].data.resize(96);
  EXPECT_THROW(deserialize_params(serialize_params(wrong_shape), arch), ModelError);

  const auto subset = select_tensors(p, tail(1).trainable_mask(arch));
  const auto sub_back = deserialize_tensor_subset(serialize_tensors(subset), arch);
  EXPECT_EQ(sub_back, subset);
  std::vector<Tensor<float>> dup{subset[0], subset[0]};
  EXPECT_THROW(deserialize_tensor_subset(serialize_tensors(dup), arch), ModelError);
}

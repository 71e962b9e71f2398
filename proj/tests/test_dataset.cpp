#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "fedft/dataset.hpp"
#include "fedft/error.hpp"
#include "test_util.hpp"

using namespace fedft;
using fedft::testing::kdd_line;
using fedft::testing::random_matrix;

namespace {

// Cyclic Jacobi eigenvalue iteration for a small symmetric matrix.
// Returns eigenvalues (descending) and eigenvectors as columns.
std::pair<std::vector<double>, std::vector<std::vector<double>>> jacobi_eigen(
    std::vector<std::vector<double>> a) {
  const std::size_t n = a.size();
  std::vector<std::vector<double>> v(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) v[i][i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k][p], vkq = v[k][q];
          v[k][p] = c * vkp - s * vkq;
          v[k][q] = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto i, auto j) { return a[i][i] > a[j][j]; });
  std::vector<double> vals;
  std::vector<std::vector<double>> vecs;
  for (auto i : order) {
    vals.push_back(a[i][i]);
    std::vector<double> col(n);
    for (std::size_t k = 0; k < n; ++k) col[k] = v[k][i];
    vecs.push_back(col);
  }
  return {vals, vecs};
}

std::vector<std::vector<double>> sample_covariance(const FeatureMatrix& x) {
  const std::size_t n = x.n_rows, d = x.n_cols;
  std::vector<double> mean(d, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) mean[c] += x.at(r, c) / static_cast<double>(n);
  std::vector<std::vector<double>> cov(d, std::vector<double>(d, 0.0));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j)
        cov[i][j] += (x.at(r, i) - mean[i]) * (x.at(r, j) - mean[j]) / static_cast<double>(n - 1);
  return cov;
}

// Random matrix with correlated columns so eigenvalues are well separated.
FeatureMatrix correlated(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  auto base = random_matrix(rows, cols, seed);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 1; c < cols; ++c)
      base.at(r, c) = base.at(r, c) * (1.0 + 0.3 * static_cast<double>(c)) + 0.5 * base.at(r, c - 1);
  return base;
}

}  // namespace

TEST(ParseCsv, AcceptsDifficultyColumnAndDropsIt) {
  const auto rs = parse_csv(kdd_line("tcp", "http", "SF", "normal"), true);
  ASSERT_EQ(rs.size(), 1u);
  EXPECT_EQ(rs.rows[0].label, "normal");
  EXPECT_EQ(rs.rows[0].categorical[0], "tcp");
  EXPECT_EQ(rs.rows[0].categorical[1], "http");
  EXPECT_EQ(rs.rows[0].categorical[2], "SF");
}

TEST(ParseCsv, AcceptsFortyTwoFields) {
  const auto rs = parse_csv(kdd_line("udp", "private", "SF", "smurf", 3, false), false);
  ASSERT_EQ(rs.size(), 1u);
  EXPECT_EQ(rs.rows[0].numeric[0], 3.0);
}

TEST(ParseCsv, WrongFieldCountNamesLine) {
  std::string line = "0,tcp,http,SF";
  for (int i = 0; i < 36; ++i) line += ",0";  // 40 fields
  try {
    parse_csv(line, true);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("line 1: expected 42 or 43 fields"), std::string::npos)
        << e.what();
  }
}

TEST(ParseCsv, DifficultyColumnRejectedWhenNotAllowed) {
  EXPECT_THROW(parse_csv(kdd_line("tcp", "http", "SF", "normal"), false), DataError);
}

TEST(ParseCsv, BadNumericNamesLineAndColumn) {
  std::string text = kdd_line("tcp", "http", "SF", "normal") + "\n";
  std::string bad = kdd_line("tcp", "http", "SF", "normal");
  bad.replace(0, 1, "x1");
  text += bad;
  try {
    parse_csv(text, true);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("column 1"), std::string::npos) << msg;
  }
}

TEST(ParseCsv, EmptyInputAndBlankLines) {
  EXPECT_EQ(parse_csv(std::string_view(""), true).size(), 0u);
  const std::string text = "\n" + kdd_line("tcp", "http", "SF", "normal") + "\n\n" +
                           kdd_line("icmp", "ecr_i", "SF", "smurf") + "\n";
  EXPECT_EQ(parse_csv(text, true).size(), 2u);
}

TEST(ParseCsv, HandlesCarriageReturns) {
  const std::string text = kdd_line("tcp", "http", "SF", "normal") + "\r\n";
  const auto rs = parse_csv(text, true);
  ASSERT_EQ(rs.size(), 1u);
  EXPECT_EQ(rs.rows[0].label, "normal");
}

TEST(Vocab, CanonicalSizes) {
  const auto& v = CategoryVocab::nsl_kdd();
  EXPECT_EQ(v.tokens[0].size(), 3u);
  EXPECT_EQ(v.tokens[1].size(), 70u);
  EXPECT_EQ(v.tokens[2].size(), 11u);
  EXPECT_EQ(v.encoded_width(), 38u + 3u + 70u + 11u);
  for (const auto& list : v.tokens) {
    EXPECT_EQ(std::set<std::string>(list.begin(), list.end()).size(), list.size());
  }
  EXPECT_EQ(v.tokens[0], (std::vector<std::string>{"tcp", "udp", "icmp"}));
}

TEST(Encode, OneHotBlocksAndPassthrough) {
  const auto& v = CategoryVocab::nsl_kdd();
  const auto rs = parse_csv(kdd_line("tcp", "no_such_service", "SF", "normal", 0) + "\n" +
                                kdd_line("icmp", "http", "REJ", "normal", 7),
                            true);
  const auto x = encode_features(rs, v);
  ASSERT_EQ(x.n_cols, 122u);
  EXPECT_EQ(x.at(0, 0), 0.0);
  EXPECT_EQ(x.at(1, 0), 7.0);
  // protocol block: tcp -> (1,0,0), icmp -> (0,0,1)
  EXPECT_EQ(x.at(0, 38), 1.0);
  EXPECT_EQ(x.at(0, 39), 0.0);
  EXPECT_EQ(x.at(0, 40), 0.0);
  EXPECT_EQ(x.at(1, 40), 1.0);
  // unseen service -> all-zero block
  double service_sum = 0.0;
  for (std::size_t c = 41; c < 41 + 70; ++c) service_sum += x.at(0, c);
  EXPECT_EQ(service_sum, 0.0);
  const auto http = std::find(v.tokens[1].begin(), v.tokens[1].end(), "http") - v.tokens[1].begin();
  EXPECT_EQ(x.at(1, 41 + static_cast<std::size_t>(http)), 1.0);
  const auto rej = std::find(v.tokens[2].begin(), v.tokens[2].end(), "REJ") - v.tokens[2].begin();
  EXPECT_EQ(x.at(1, 111 + static_cast<std::size_t>(rej)), 1.0);
}

TEST(Labels, NormalIsZeroEverythingElseOne) {
  const auto rs = parse_csv(kdd_line("tcp", "http", "SF", "normal") + "\n" +
                                kdd_line("tcp", "private", "S0", "neptune"),
                            true);
  EXPECT_EQ(binarize_labels(rs), (LabelVector{0, 1}));
}

TEST(Scaler, AnalyticExamples) {
  FeatureMatrix x(2, 2);
  x.at(0, 0) = 1; x.at(1, 0) = 3;
  x.at(0, 1) = 5; x.at(1, 1) = 5;
  const auto s = fit_scaler(x);
  EXPECT_DOUBLE_EQ(s.mean[0], 2.0);
  EXPECT_DOUBLE_EQ(s.std[0], 1.0);
  EXPECT_DOUBLE_EQ(s.mean[1], 5.0);
  EXPECT_DOUBLE_EQ(s.std[1], 0.0);
  const auto z = apply_scaler(x, s);
  EXPECT_DOUBLE_EQ(z.at(0, 0), -1.0);
  EXPECT_DOUBLE_EQ(z.at(1, 0), 1.0);
  EXPECT_EQ(z.at(0, 1), 0.0);
  EXPECT_EQ(z.at(1, 1), 0.0);
}

TEST(Scaler, Errors) {
  EXPECT_THROW(fit_scaler(FeatureMatrix(0, 3)), DataError);
  const auto s = fit_scaler(random_matrix(4, 3, 1));
  EXPECT_THROW(apply_scaler(random_matrix(4, 2, 1), s), DataError);
}

TEST(Scaler, StandardizesToZeroMeanUnitStd) {
  auto x = random_matrix(200, 6, 5, -10.0, 40.0);
  for (std::size_t r = 0; r < x.n_rows; ++r) x.at(r, 3) = 2.5;
  const auto z = apply_scaler(x, fit_scaler(x));
  for (std::size_t c = 0; c < z.n_cols; ++c) {
    double mean = 0.0, sq = 0.0;
    for (std::size_t r = 0; r < z.n_rows; ++r) mean += z.at(r, c);
    mean /= static_cast<double>(z.n_rows);
    for (std::size_t r = 0; r < z.n_rows; ++r) sq += (z.at(r, c) - mean) * (z.at(r, c) - mean);
    const double sd = std::sqrt(sq / static_cast<double>(z.n_rows));
    EXPECT_LT(std::abs(mean), 1e-9);
    if (c == 3) {
      EXPECT_EQ(sd, 0.0);
    } else {
      EXPECT_NEAR(sd, 1.0, 1e-6);
    }
  }
}

TEST(Pca, PointsOnDiagonal) {
  FeatureMatrix x(5, 2);
  for (std::size_t r = 0; r < 5; ++r) x.at(r, 0) = x.at(r, 1) = static_cast<double>(r) - 1.5;
  const auto p = fit_pca(x, 1);
  EXPECT_NEAR(p.components.at(0, 0), 1.0 / std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(p.components.at(1, 0), 1.0 / std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(p.explained_variance_ratio(), 1.0, 1e-12);
}

TEST(Pca, EigenvaluesMatchJacobiOracle) {
  const auto x = correlated(50, 10, 11);
  const auto p = fit_pca(x, 4);
  const auto [vals, vecs] = jacobi_eigen(sample_covariance(x));
  ASSERT_EQ(p.explained_variance.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(p.explained_variance[i], vals[i], 1e-8);
    // Same direction up to sign; our sign rule fixes the largest-|entry| positive.
    std::size_t arg = 0;
    for (std::size_t k = 1; k < 10; ++k)
      if (std::abs(vecs[i][k]) > std::abs(vecs[i][arg])) arg = k;
    const double sign = vecs[i][arg] >= 0 ? 1.0 : -1.0;
    for (std::size_t k = 0; k < 10; ++k) {
      EXPECT_NEAR(p.components.at(k, i), sign * vecs[i][k], 1e-7);
    }
  }
  double total = 0.0;
  for (double v : vals) total += v;
  EXPECT_NEAR(p.total_variance, total, 1e-8);
}

TEST(Pca, OrthonormalComponentsAndNonIncreasingVariance) {
  const auto x = correlated(80, 12, 3);
  const auto p = fit_pca(x, 6);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 6; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < 12; ++k) dot += p.components.at(k, i) * p.components.at(k, j);
      EXPECT_NEAR(dot, i == j ? 1.0 : 0.0, 1e-6);
    }
  }
  const auto proj = apply_pca(x, p);
  const auto [vals, vecs] = jacobi_eigen(sample_covariance(x));
  std::vector<double> col_var(6, 0.0);
  for (std::size_t c = 0; c < 6; ++c) {
    double m = 0.0;
    for (std::size_t r = 0; r < proj.n_rows; ++r) m += proj.at(r, c);
    m /= static_cast<double>(proj.n_rows);
    for (std::size_t r = 0; r < proj.n_rows; ++r)
      col_var[c] += (proj.at(r, c) - m) * (proj.at(r, c) - m) / static_cast<double>(proj.n_rows - 1);
    EXPECT_NEAR(col_var[c], vals[c], 1e-8);
    if (c > 0) EXPECT_LE(col_var[c], col_var[c - 1] + 1e-12);
  }
}

TEST(Pca, FullRankReconstructsAndPreservesDistances) {
  const auto x = correlated(30, 5, 9);
  const auto p = fit_pca(x, 5);
  const auto y = apply_pca(x, p);
  for (std::size_t r = 0; r < x.n_rows; ++r) {
    for (std::size_t c = 0; c < 5; ++c) {
      double back = p.mean[c];
      for (std::size_t k = 0; k < 5; ++k) back += y.at(r, k) * p.components.at(c, k);
      EXPECT_NEAR(back, x.at(r, c), 1e-6);
    }
  }
  for (std::size_t a = 0; a < 5; ++a) {
    for (std::size_t b = a + 1; b < 6; ++b) {
      double dx = 0.0, dy = 0.0;
      for (std::size_t c = 0; c < 5; ++c) {
        dx += std::pow(x.at(a, c) - x.at(b, c), 2);
        dy += std::pow(y.at(a, c) - y.at(b, c), 2);
      }
      EXPECT_NEAR(std::sqrt(dx), std::sqrt(dy), 1e-6);
    }
  }
}

TEST(Pca, MeanRowsProjectToZero) {
  const auto x = correlated(20, 4, 2);
  const auto p = fit_pca(x, 2);
  FeatureMatrix m(3, 4);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) m.at(r, c) = p.mean[c];
  const auto y = apply_pca(m, p);
  for (double v : y.data) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(Pca, Errors) {
  const auto x = random_matrix(5, 3, 1);
  EXPECT_THROW(fit_pca(x, 0), DataError);
  EXPECT_THROW(fit_pca(x, 4), DataError);
  EXPECT_THROW(fit_pca(random_matrix(2, 6, 1), 3), DataError);
  EXPECT_THROW(apply_pca(random_matrix(2, 4, 1), fit_pca(x, 2)), DataError);
}

TEST(Partition, FloorRuleDisjointDeterministic) {
  const auto x = random_matrix(10, 2, 4);
  LabelVector y(10, 0);
  const auto parts = partition_iid(x, y, 3, 42);
  ASSERT_EQ(parts.size(), 3u);
  std::set<std::size_t> seen;
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(parts[i].client_id, i);
    EXPECT_EQ(parts[i].features.n_rows, 3u);
    EXPECT_EQ(parts[i].labels.size(), 3u);
    for (std::size_t r = 0; r < 3; ++r) {
      const auto src = parts[i].source_rows[r];
      EXPECT_LT(src, 10u);
      EXPECT_TRUE(seen.insert(src).second);
      EXPECT_EQ(parts[i].features.at(r, 1), x.at(src, 1));
    }
  }
  const auto again = partition_iid(x, y, 3, 42);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(again[i].source_rows, parts[i].source_rows);
    EXPECT_EQ(again[i].features, parts[i].features);
  }
  EXPECT_NE(partition_iid(x, y, 3, 43)[0].source_rows, parts[0].source_rows);
  EXPECT_THROW(partition_iid(x, y, 11, 1), DataError);
  EXPECT_THROW(partition_iid(x, y, 0, 1), DataError);
}

TEST(ProxySplit, CeilRuleAndDeterminism) {
  std::string text;
  for (int i = 0; i < 100; ++i) text += kdd_line("tcp", "http", "SF", "normal", i) + "\n";
  const auto rs = parse_csv(text, true);
  const auto [proxy, eval] = make_proxy_split(rs, 0.1, 5);
  EXPECT_EQ(proxy.size(), 90u);
  EXPECT_EQ(eval.size(), 10u);
  std::set<double> ids;
  for (const auto& r : proxy.rows) ids.insert(r.numeric[0]);
  for (const auto& r : eval.rows) EXPECT_FALSE(ids.count(r.numeric[0]));
  const auto [proxy2, eval2] = make_proxy_split(rs, 0.1, 5);
  for (std::size_t i = 0; i < eval.size(); ++i) EXPECT_EQ(eval.rows[i].numeric, eval2.rows[i].numeric);

  RecordSet three;
  three.rows.assign(rs.rows.begin(), rs.rows.begin() + 3);
  const auto [p3, e3] = make_proxy_split(three, 0.5, 1);
  EXPECT_EQ(p3.size(), 1u);
  EXPECT_EQ(e3.size(), 2u);
  EXPECT_THROW(make_proxy_split(rs, 0.0, 1), DataError);
  EXPECT_THROW(make_proxy_split(rs, 1.0, 1), DataError);
}

TEST(Fftd, RoundTripAndErrors) {
  auto x = random_matrix(7, 3, 8);
  for (auto& v : x.data) v = static_cast<double>(static_cast<float>(v));
  const LabelVector y{0, 1, 1, 0, 1, 0, 0};
  const auto bytes = encode_dataset(x, y);
  EXPECT_EQ(bytes.size(), 4u + 2u + 8u + 8u + 7u * 3u * 4u + 7u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "FFTD");
  const auto [x2, y2] = decode_dataset(bytes);
  EXPECT_EQ(x2, x);
  EXPECT_EQ(y2, y);

  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_THROW(decode_dataset(truncated), DataError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_dataset(bad_magic), DataError);

  fedft::testing::TempDir dir("fftd");
  write_dataset(dir.path() / "a.fftd", x, y);
  EXPECT_EQ(read_dataset(dir.path() / "a.fftd").first, x);
  EXPECT_THROW(read_dataset(dir.path() / "missing.fftd"), DataError);
}

TEST(Pipeline, SyntheticPrepareIsDeterministic) {
  ExperimentConfig cfg;
  const auto a = fedft::testing::synthetic_prepared(cfg, 600, 200);
  const auto b = fedft::testing::synthetic_prepared(cfg, 600, 200);
  ASSERT_EQ(a.clients.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a.clients[i].features.n_rows, 200u);
    EXPECT_EQ(a.clients[i].features.n_cols, 20u);
    EXPECT_EQ(encode_dataset(a.clients[i].features, a.clients[i].labels),
              encode_dataset(b.clients[i].features, b.clients[i].labels));
  }
  EXPECT_EQ(a.eval_x.n_rows, 20u);
  EXPECT_EQ(a.proxy_x.n_rows, 180u);
  EXPECT_EQ(a.eval_x, b.eval_x);
}

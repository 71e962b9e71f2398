#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace fedft {

inline constexpr std::size_t kRawFeatureCount = 41;
inline constexpr std::size_t kNumericFeatureCount = 38;
inline constexpr std::size_t kCategoricalFeatureCount = 3;

/// Positions of protocol_type, service and flag among the 41 raw columns.
inline constexpr std::array<std::size_t, kCategoricalFeatureCount> kCategoricalColumns = {1, 2, 3};

/// One NSL-KDD connection record. Numeric values keep their raw column
/// order with the three categorical columns removed.
struct Record {
  std::array<double, kNumericFeatureCount> numeric{};
  std::array<std::string, kCategoricalFeatureCount> categorical;
  std::string label;
};

struct RecordSet {
  std::vector<Record> rows;
  std::string source_name;

  std::size_t size() const { return rows.size(); }
};

/// Parses comma-separated NSL-KDD text. Lines carry 41 features and a label,
/// plus a trailing difficulty score when `allow_difficulty_column` is set
/// (the score is discarded). Blank lines are skipped.
/// Throws DataError naming the 1-based line (and column for numeric errors).
RecordSet parse_csv(std::istream& in, bool allow_difficulty_column,
                    std::string source_name = "<stream>");
RecordSet parse_csv(std::string_view text, bool allow_difficulty_column,
                    std::string source_name = "<string>");
RecordSet parse_csv_file(const std::filesystem::path& path, bool allow_difficulty_column);

/// Ordered token lists for the categorical columns.
struct CategoryVocab {
  std::array<std::vector<std::string>, kCategoricalFeatureCount> tokens;

  /// Canonical NSL-KDD vocabulary: 3 protocols, 70 services, 11 flags.
  static const CategoryVocab& nsl_kdd();

  std::size_t encoded_width() const;
};

/// Dense row-major matrix of finite reals.
struct FeatureMatrix {
  std::size_t n_rows = 0;
  std::size_t n_cols = 0;
  std::vector<double> data;

  FeatureMatrix() = default;
  FeatureMatrix(std::size_t rows, std::size_t cols)
      : n_rows(rows), n_cols(cols), data(rows * cols, 0.0) {}

  double& at(std::size_t r, std::size_t c) { return data[r * n_cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * n_cols + c]; }
  std::span<const double> row(std::size_t r) const {
    return {data.data() + r * n_cols, n_cols};
  }
  std::span<double> row(std::size_t r) { return {data.data() + r * n_cols, n_cols}; }

  bool operator==(const FeatureMatrix&) const = default;
};

/// 0 = normal, 1 = intrusion.
using LabelVector = std::vector<std::uint8_t>;

/// Numeric columns pass through; each categorical column becomes a one-hot
/// block in vocab order. Unknown tokens give an all-zero block.
FeatureMatrix encode_features(const RecordSet& records, const CategoryVocab& vocab);

/// "normal" maps to 0, any other label to 1.
LabelVector binarize_labels(const RecordSet& records);

struct Scaler {
  std::vector<double> mean;
  std::vector<double> std;  // population standard deviation
};

inline constexpr double kMinScale = 1e-8;

Scaler fit_scaler(const FeatureMatrix& x);
/// z = (x - mean) / std; columns with std below kMinScale map to 0.
FeatureMatrix apply_scaler(const FeatureMatrix& x, const Scaler& s);

struct PcaModel {
  std::vector<double> mean;            // length d
  FeatureMatrix components;            // d x k, columns are principal directions
  std::vector<double> explained_variance;  // length k, non-increasing
  double total_variance = 0.0;

  std::size_t input_dim() const { return components.n_rows; }
  std::size_t output_dim() const { return components.n_cols; }
  double explained_variance_ratio() const;
};

/// Top-k eigenvectors of the sample covariance, ordered by decreasing
/// variance. Each component is signed so its largest-magnitude entry is
/// positive (first such entry on ties).
PcaModel fit_pca(const FeatureMatrix& x, std::size_t k);
/// (x - mean) * components.
FeatureMatrix apply_pca(const FeatureMatrix& x, const PcaModel& p);

struct Partition {
  std::uint32_t client_id = 0;
  FeatureMatrix features;
  LabelVector labels;
  std::vector<std::size_t> source_rows;
};

/// Seeded shuffle, then n_clients shards of floor(n / n_clients) rows each.
/// Remainder rows are dropped.
std::vector<Partition> partition_iid(const FeatureMatrix& x, const LabelVector& y,
                                     std::size_t n_clients, std::uint64_t seed);

/// Seeded shuffle; the last ceil(eval_fraction * n) rows become the eval set.
std::pair<RecordSet, RecordSet> make_proxy_split(const RecordSet& test_records,
                                                 double eval_fraction, std::uint64_t seed);

/// Selects rows (in the given order) from a matrix/label pair.
FeatureMatrix take_rows(const FeatureMatrix& x, std::span<const std::size_t> rows);
LabelVector take_labels(const LabelVector& y, std::span<const std::size_t> rows);

/// Scaler followed by PCA, both fitted on `x`.
struct FittedTransform {
  Scaler scaler;
  PcaModel pca;

  FeatureMatrix apply(const FeatureMatrix& x) const;
  static FittedTransform fit(const FeatureMatrix& x, std::size_t k);
};

// "FFTD" container: magic, u16 version, u64 rows, u64 cols, row-major f32
// features, one u8 label per row. All little-endian.
inline constexpr std::uint16_t kDatasetFormatVersion = 1;

std::vector<std::uint8_t> encode_dataset(const FeatureMatrix& x, const LabelVector& y);
std::pair<FeatureMatrix, LabelVector> decode_dataset(std::span<const std::uint8_t> bytes);
void write_dataset(const std::filesystem::path& path, const FeatureMatrix& x,
                   const LabelVector& y);
std::pair<FeatureMatrix, LabelVector> read_dataset(const std::filesystem::path& path);

/// Reads a whole file; throws DataError with the path on failure.
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace fedft

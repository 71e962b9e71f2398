#include "fedft/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <Eigen/Dense>

#include "fedft/byte_io.hpp"
#include "fedft/error.hpp"
#include "fedft/rng.hpp"

namespace fedft {

namespace {

std::string line_prefix(std::size_t line_no) { return "line " + std::to_string(line_no); }

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return fields;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

double parse_number(std::string_view token, std::size_t line_no, std::size_t column) {
  double value = 0.0;
  const char* first = token.data();
  const char* last = token.data() + token.size();
  if (!token.empty() && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (token.empty() || ec != std::errc() || ptr != last || !std::isfinite(value)) {
    throw DataError(line_prefix(line_no) + ", column " + std::to_string(column) +
                    ": invalid numeric value '" + std::string(token) + "'");
  }
  return value;
}

Record parse_record(std::string_view line, std::size_t line_no, bool allow_difficulty) {
  const auto fields = split_commas(line);
  const std::size_t n = fields.size();
  if (n != kRawFeatureCount + 1 && n != kRawFeatureCount + 2) {
    throw DataError(line_prefix(line_no) + ": expected 42 or 43 fields, got " +
                    std::to_string(n));
  }
  if (n == kRawFeatureCount + 2 && !allow_difficulty) {
    throw DataError(line_prefix(line_no) +
                    ": expected 42 fields, got 43 (difficulty column not allowed)");
  }

  Record rec;
  std::size_t numeric_pos = 0;
  std::size_t cat_pos = 0;
  for (std::size_t col = 0; col < kRawFeatureCount; ++col) {
    const auto token = trim(fields[col]);
    if (cat_pos < kCategoricalFeatureCount && col == kCategoricalColumns[cat_pos]) {
      if (token.empty()) {
        throw DataError(line_prefix(line_no) + ", column " + std::to_string(col + 1) +
                        ": empty categorical value");
      }
      rec.categorical[cat_pos++] = std::string(token);
    } else {
      rec.numeric[numeric_pos++] = parse_number(token, line_no, col + 1);
    }
  }
  const auto label = trim(fields[kRawFeatureCount]);
  if (label.empty()) {
    throw DataError(line_prefix(line_no) + ", column 42: empty label");
  }
  rec.label = std::string(label);
  if (n == kRawFeatureCount + 2) {
    parse_number(trim(fields[kRawFeatureCount + 1]), line_no, kRawFeatureCount + 2);
  }
  return rec;
}

void check_finite(const FeatureMatrix& x, const char* what) {
  for (double v : x.data) {
    if (!std::isfinite(v)) throw DataError(std::string(what) + ": non-finite matrix entry");
  }
}

}  // namespace

RecordSet parse_csv(std::istream& in, bool allow_difficulty_column, std::string source_name) {
  RecordSet out;
  out.source_name = std::move(source_name);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    out.rows.push_back(parse_record(line, line_no, allow_difficulty_column));
  }
  return out;
}

RecordSet parse_csv(std::string_view text, bool allow_difficulty_column,
                    std::string source_name) {
  std::istringstream in{std::string(text)};
  return parse_csv(in, allow_difficulty_column, std::move(source_name));
}

RecordSet parse_csv_file(const std::filesystem::path& path, bool allow_difficulty_column) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return parse_csv(in, allow_difficulty_column, path.filename().string());
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

const CategoryVocab& CategoryVocab::nsl_kdd() {
  static const CategoryVocab vocab{{{
      {"tcp", "udp", "icmp"},
      {"ftp_data", "other",      "private",   "http",      "remote_job", "name",
       "netbios_ns", "eco_i",    "mtp",       "telnet",    "finger",     "domain_u",
       "supdup",   "uucp_path",  "Z39_50",    "smtp",      "csnet_ns",   "uucp",
       "netbios_dgm", "urp_i",   "auth",      "domain",    "ftp",        "bgp",
       "ldap",     "ecr_i",      "gopher",    "vmnet",     "systat",     "http_443",
       "efs",      "whois",      "imap4",     "iso_tsap",  "echo",       "klogin",
       "link",     "sunrpc",     "login",     "kshell",    "sql_net",    "time",
       "hostnames", "exec",      "ntp_u",     "discard",   "nntp",       "courier",
       "ctf",      "ssh",        "daytime",   "shell",     "netstat",    "pop_3",
       "nnsp",     "IRC",        "pop_2",     "printer",   "tim_i",      "pm_dump",
       "red_i",    "netbios_ssn", "rje",      "X11",       "urh_i",      "http_8001",
       "aol",      "http_2784",  "tftp_u",    "harvest"},
      {"SF", "S0", "REJ", "RSTR", "SH", "RSTO", "S1", "RSTOS0", "S3", "S2", "OTH"},
  }}};
  return vocab;
}

std::size_t CategoryVocab::encoded_width() const {
  std::size_t w = kNumericFeatureCount;
  for (const auto& t : tokens) w += t.size();
  return w;
}

FeatureMatrix encode_features(const RecordSet& records, const CategoryVocab& vocab) {
  FeatureMatrix x(records.size(), vocab.encoded_width());
  for (std::size_t r = 0; r < records.size(); ++r) {
    const Record& rec = records.rows[r];
    auto row = x.row(r);
    std::copy(rec.numeric.begin(), rec.numeric.end(), row.begin());
    std::size_t offset = kNumericFeatureCount;
    for (std::size_t c = 0; c < kCategoricalFeatureCount; ++c) {
      const auto& tokens = vocab.tokens[c];
      const auto it = std::find(tokens.begin(), tokens.end(), rec.categorical[c]);
      if (it != tokens.end()) row[offset + static_cast<std::size_t>(it - tokens.begin())] = 1.0;
      offset += tokens.size();
    }
  }
  return x;
}

LabelVector binarize_labels(const RecordSet& records) {
  LabelVector y(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    y[i] = records.rows[i].label == "normal" ? 0 : 1;
  }
  return y;
}

Scaler fit_scaler(const FeatureMatrix& x) {
  if (x.n_rows == 0) throw DataError("fit_scaler: empty matrix");
  Scaler s;
  s.mean.assign(x.n_cols, 0.0);
  s.std.assign(x.n_cols, 0.0);
  for (std::size_t r = 0; r < x.n_rows; ++r) {
    for (std::size_t c = 0; c < x.n_cols; ++c) s.mean[c] += x.at(r, c);
  }
  const double n = static_cast<double>(x.n_rows);
  for (auto& m : s.mean) m /= n;
  for (std::size_t r = 0; r < x.n_rows; ++r) {
    for (std::size_t c = 0; c < x.n_cols; ++c) {
      const double d = x.at(r, c) - s.mean[c];
      s.std[c] += d * d;
    }
  }
  for (auto& v : s.std) v = std::sqrt(v / n);
  return s;
}

FeatureMatrix apply_scaler(const FeatureMatrix& x, const Scaler& s) {
  if (s.mean.size() != x.n_cols || s.std.size() != x.n_cols) {
    throw DataError("apply_scaler: matrix has " + std::to_string(x.n_cols) +
                    " columns, scaler has " + std::to_string(s.mean.size()));
  }
  FeatureMatrix z(x.n_rows, x.n_cols);
  for (std::size_t r = 0; r < x.n_rows; ++r) {
    for (std::size_t c = 0; c < x.n_cols; ++c) {
      z.at(r, c) = s.std[c] < kMinScale ? 0.0 : (x.at(r, c) - s.mean[c]) / s.std[c];
    }
  }
  return z;
}

double PcaModel::explained_variance_ratio() const {
  if (total_variance <= 0.0) return 0.0;
  double kept = 0.0;
  for (double v : explained_variance) kept += v;
  return kept / total_variance;
}

PcaModel fit_pca(const FeatureMatrix& x, std::size_t k) {
  const std::size_t n = x.n_rows;
  const std::size_t d = x.n_cols;
  if (k == 0 || k > std::min(n, d)) {
    throw DataError("fit_pca: k=" + std::to_string(k) + " must be in [1, min(rows=" +
                    std::to_string(n) + ", cols=" + std::to_string(d) + ")]");
  }
  check_finite(x, "fit_pca");

  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMajor> xm(x.data.data(), static_cast<Eigen::Index>(n),
                                static_cast<Eigen::Index>(d));
  const Eigen::RowVectorXd mean = xm.colwise().mean();
  const Eigen::MatrixXd centered = xm.rowwise() - mean;
  const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / denom;

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw DataError("fit_pca: eigendecomposition failed");
  // Eigen returns eigenvalues in increasing order.
  const Eigen::VectorXd& evals = solver.eigenvalues();
  const Eigen::MatrixXd& evecs = solver.eigenvectors();

  PcaModel p;
  p.mean.assign(mean.data(), mean.data() + d);
  p.components = FeatureMatrix(d, k);
  p.total_variance = std::max(0.0, evals.sum());
  for (std::size_t j = 0; j < k; ++j) {
    const auto src = static_cast<Eigen::Index>(d - 1 - j);
    Eigen::VectorXd v = evecs.col(src);
    Eigen::Index arg = 0;
    for (Eigen::Index i = 1; i < v.size(); ++i) {
      if (std::abs(v[i]) > std::abs(v[arg])) arg = i;
    }
    if (v[arg] < 0) v = -v;
    for (std::size_t i = 0; i < d; ++i) p.components.at(i, j) = v[static_cast<Eigen::Index>(i)];
    p.explained_variance.push_back(std::max(0.0, evals[src]));
  }
  return p;
}

FeatureMatrix apply_pca(const FeatureMatrix& x, const PcaModel& p) {
  const std::size_t d = p.input_dim();
  const std::size_t k = p.output_dim();
  if (x.n_cols != d) {
    throw DataError("apply_pca: matrix has " + std::to_string(x.n_cols) +
                    " columns, PCA expects " + std::to_string(d));
  }
  FeatureMatrix out(x.n_rows, k);
  std::vector<double> centered(d);
  for (std::size_t r = 0; r < x.n_rows; ++r) {
    for (std::size_t i = 0; i < d; ++i) centered[i] = x.at(r, i) - p.mean[i];
    for (std::size_t j = 0; j < k; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < d; ++i) acc += centered[i] * p.components.at(i, j);
      out.at(r, j) = acc;
    }
  }
  return out;
}

FeatureMatrix take_rows(const FeatureMatrix& x, std::span<const std::size_t> rows) {
  FeatureMatrix out(rows.size(), x.n_cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto src = x.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

LabelVector take_labels(const LabelVector& y, std::span<const std::size_t> rows) {
  LabelVector out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = y[rows[i]];
  return out;
}

std::vector<Partition> partition_iid(const FeatureMatrix& x, const LabelVector& y,
                                     std::size_t n_clients, std::uint64_t seed) {
  if (x.n_rows != y.size()) throw DataError("partition_iid: feature/label length mismatch");
  if (n_clients == 0) throw DataError("partition_iid: n_clients must be >= 1");
  if (n_clients > x.n_rows) {
    throw DataError("partition_iid: " + std::to_string(n_clients) + " clients but only " +
                    std::to_string(x.n_rows) + " rows");
  }
  const auto order = shuffled_indices(x.n_rows, seed);
  const std::size_t per_client = x.n_rows / n_clients;
  std::vector<Partition> parts;
  parts.reserve(n_clients);
  for (std::size_t c = 0; c < n_clients; ++c) {
    Partition p;
    p.client_id = static_cast<std::uint32_t>(c);
    p.source_rows.assign(order.begin() + static_cast<std::ptrdiff_t>(c * per_client),
                         order.begin() + static_cast<std::ptrdiff_t>((c + 1) * per_client));
    p.features = take_rows(x, p.source_rows);
    p.labels = take_labels(y, p.source_rows);
    parts.push_back(std::move(p));
  }
  return parts;
}

std::pair<RecordSet, RecordSet> make_proxy_split(const RecordSet& test_records,
                                                 double eval_fraction, std::uint64_t seed) {
  if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) {
    throw DataError("make_proxy_split: eval_fraction must be in (0, 1), got " +
                    std::to_string(eval_fraction));
  }
  const std::size_t n = test_records.size();
  const auto order = shuffled_indices(n, seed);
  // Guard against products like 0.1 * 100 landing a hair above an integer.
  const auto n_eval = std::min(
      n, static_cast<std::size_t>(std::ceil(eval_fraction * static_cast<double>(n) - 1e-9)));
  RecordSet proxy;
  RecordSet eval;
  proxy.source_name = test_records.source_name + "#proxy";
  eval.source_name = test_records.source_name + "#eval";
  for (std::size_t i = 0; i < n; ++i) {
    auto& dst = i < n - n_eval ? proxy : eval;
    dst.rows.push_back(test_records.rows[order[i]]);
  }
  return {std::move(proxy), std::move(eval)};
}

FeatureMatrix FittedTransform::apply(const FeatureMatrix& x) const {
  return apply_pca(apply_scaler(x, scaler), pca);
}

FittedTransform FittedTransform::fit(const FeatureMatrix& x, std::size_t k) {
  FittedTransform t;
  t.scaler = fit_scaler(x);
  t.pca = fit_pca(apply_scaler(x, t.scaler), k);
  return t;
}

std::vector<std::uint8_t> encode_dataset(const FeatureMatrix& x, const LabelVector& y) {
  if (x.n_rows != y.size()) throw DataError("encode_dataset: feature/label length mismatch");
  std::vector<std::uint8_t> out;
  out.reserve(22 + x.data.size() * 4 + y.size());
  ByteWriter w(out);
  w.put_chars("FFTD");
  w.put<std::uint16_t>(kDatasetFormatVersion);
  w.put<std::uint64_t>(x.n_rows);
  w.put<std::uint64_t>(x.n_cols);
  for (double v : x.data) w.put<float>(static_cast<float>(v));
  w.put_bytes(y);
  return out;
}

std::pair<FeatureMatrix, LabelVector> decode_dataset(std::span<const std::uint8_t> bytes) {
  ByteReader<DataError> r(bytes, "FFTD");
  const auto magic = r.get_bytes(4);
  if (!std::equal(magic.begin(), magic.end(), "FFTD")) throw DataError("FFTD: bad magic");
  const auto version = r.get<std::uint16_t>();
  if (version != kDatasetFormatVersion) {
    throw DataError("FFTD: unsupported version " + std::to_string(version));
  }
  const auto rows = r.get<std::uint64_t>();
  const auto cols = r.get<std::uint64_t>();
  if (cols != 0 && rows > r.remaining() / 4 / cols) throw DataError("FFTD: truncated features");
  FeatureMatrix x(rows, cols);
  std::vector<float> tmp(rows * cols);
  r.get_array(std::span<float>(tmp));
  std::copy(tmp.begin(), tmp.end(), x.data.begin());
  check_finite(x, "FFTD");
  const auto labels = r.get_bytes(rows);
  LabelVector y(labels.begin(), labels.end());
  for (auto v : y) {
    if (v > 1) throw DataError("FFTD: label value " + std::to_string(v) + " not in {0,1}");
  }
  if (r.remaining() != 0) throw DataError("FFTD: trailing bytes after labels");
  return {std::move(x), std::move(y)};
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

void write_dataset(const std::filesystem::path& path, const FeatureMatrix& x,
                   const LabelVector& y) {
  write_file_bytes(path, encode_dataset(x, y));
}

std::pair<FeatureMatrix, LabelVector> read_dataset(const std::filesystem::path& path) {
  try {
    return decode_dataset(read_file_bytes(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace fedft

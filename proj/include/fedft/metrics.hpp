#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedft/federation.hpp"
#include "fedft/model.hpp"
#include "fedft/timing.hpp"

namespace fedft {

/// Analytic training-memory model in bytes, f32 throughout.
struct MemoryEstimate {
  std::uint64_t weights_bytes = 0;
  std::uint64_t grads_bytes = 0;
  std::uint64_t optimizer_bytes = 0;
  std::uint64_t activations_bytes = 0;
  std::uint64_t total_bytes = 0;

  std::uint64_t trainable_state_bytes() const { return grads_bytes + optimizer_bytes; }
  bool operator==(const MemoryEstimate&) const = default;
};

/// weights: every parameter. grads and optimizer: trainable parameters
/// (one velocity each). activations: batch_size times the elements held
/// from the first trainable layer onward (conv pre-activation + pooled
/// output; FC output) plus the frozen-boundary tensor feeding that layer.
/// With nothing trainable the boundary is the network output.
MemoryEstimate estimate_memory(const Architecture& arch, const FineTuneConfig& cfg,
                               std::uint32_t batch_size);

/// Per-sample activation elements counted by estimate_memory.
std::uint64_t activation_elements(const Architecture& arch, const FineTuneConfig& cfg);

inline constexpr int kReportSchemaVersion = 1;

struct ExperimentReport {
  int schema_version = kReportSchemaVersion;
  std::string framework;
  nlohmann::json config;
  std::vector<RoundReport> rounds;
  double final_accuracy = 0.0;
  double final_loss = 0.0;
  MemoryEstimate memory;
  double mean_client_time_ms = 0.0;
  std::uint64_t total_time_ms = 0;
};

nlohmann::json config_to_json(const ExperimentConfig& cfg);

/// Assembles the report for a finished run; memory is estimated for the
/// client-side trainable set (full network for the centralized baseline).
ExperimentReport build_report(const ExperimentConfig& cfg, const ExperimentResult& result,
                              std::uint64_t total_time_ms);

nlohmann::json report_to_json(const ExperimentReport& r);
ExperimentReport report_from_json(const nlohmann::json& j);

/// Shortest decimal that parses back to the same double.
std::string format_double(double v);

/// round,accuracy,loss,mem_bytes,round_time_ms
std::string report_to_csv(const ExperimentReport& r);

struct CsvRow {
  std::uint32_t round = 0;
  double accuracy = 0.0;
  double loss = 0.0;
  std::uint64_t mem_bytes = 0;
  std::uint64_t round_time_ms = 0;
  bool operator==(const CsvRow&) const = default;
};
std::vector<CsvRow> parse_report_csv(const std::string& text);

enum class ReportFormat { kCsv, kJson };

/// Writes the report; throws DataError naming the path on IO failure.
void emit_report(const ExperimentReport& r, ReportFormat format, const std::filesystem::path& path);
/// Reads a JSON report; throws DataError naming the path on failure.
ExperimentReport read_report(const std::filesystem::path& path);

/// Framework / accuracy / loss / memory / time comparison, one row per report.
std::string comparison_table(const std::vector<ExperimentReport>& reports);
std::string comparison_csv(const std::vector<ExperimentReport>& reports);

}  // namespace fedft

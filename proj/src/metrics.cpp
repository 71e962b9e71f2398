#include "fedft/metrics.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "fedft/error.hpp"

namespace fedft {

std::uint64_t activation_elements(const Architecture& arch, const FineTuneConfig& cfg) {
  const std::size_t first = cfg.first_trainable_layer(arch);
  const std::size_t n_conv = arch.conv.size();
  const auto lengths = arch.conv_lengths();
  if (first >= arch.layer_count()) return 1;

  std::uint64_t elems = 0;
  if (first == 0) {
    elems += arch.input_dim;
  } else if (first < n_conv) {
    elems += std::uint64_t{arch.conv[first].in_channels} * lengths[first];
  } else {
    elems += arch.fc[first - n_conv].in_features;
  }
  for (std::size_t layer = first; layer < arch.layer_count(); ++layer) {
    if (layer < n_conv) {
      const auto ch = std::uint64_t{arch.conv[layer].out_channels};
      elems += ch * lengths[layer] + ch * lengths[layer + 1];
    } else {
      elems += arch.fc[layer - n_conv].out_features;
    }
  }
  return elems;
}

MemoryEstimate estimate_memory(const Architecture& arch, const FineTuneConfig& cfg,
                               std::uint32_t batch_size) {
  constexpr std::uint64_t kBytes = sizeof(float);
  MemoryEstimate m;
  m.weights_bytes = kBytes * arch.parameter_count();
  m.grads_bytes = kBytes * cfg.trainable_parameter_count(arch);
  m.optimizer_bytes = m.grads_bytes;
  m.activations_bytes = kBytes * batch_size * activation_elements(arch, cfg);
  m.total_bytes = m.weights_bytes + m.grads_bytes + m.optimizer_bytes + m.activations_bytes;
  return m;
}

namespace {

using nlohmann::json;

json arch_to_json(const Architecture& a) {
  json conv = json::array();
  for (const auto& c : a.conv) {
    conv.push_back({{"in_channels", c.in_channels},
                    {"out_channels", c.out_channels},
                    {"kernel_size", c.kernel_size},
                    {"pool_size", c.pool_size}});
  }
  json fc = json::array();
  for (const auto& f : a.fc) fc.push_back({{"in_features", f.in_features}, {"out_features", f.out_features}});
  return {{"input_dim", a.input_dim}, {"conv", conv}, {"fc", fc}};
}

json memory_to_json(const MemoryEstimate& m) {
  return {{"weights_bytes", m.weights_bytes},   {"grads_bytes", m.grads_bytes},
          {"optimizer_bytes", m.optimizer_bytes}, {"activations_bytes", m.activations_bytes},
          {"total_bytes", m.total_bytes}};
}

MemoryEstimate memory_from_json(const json& j) {
  MemoryEstimate m;
  m.weights_bytes = j.at("weights_bytes").get<std::uint64_t>();
  m.grads_bytes = j.at("grads_bytes").get<std::uint64_t>();
  m.optimizer_bytes = j.at("optimizer_bytes").get<std::uint64_t>();
  m.activations_bytes = j.at("activations_bytes").get<std::uint64_t>();
  m.total_bytes = j.at("total_bytes").get<std::uint64_t>();
  return m;
}

json round_to_json(const RoundReport& r) {
  return {{"round", r.round},
          {"accuracy", r.accuracy},
          {"loss", r.loss},
          {"client_losses", r.client_losses},
          {"client_times_ms", r.client_times_ms},
          {"client_eval_losses", r.client_eval_losses},
          {"round_time_ms", r.round_time_ms}};
}

RoundReport round_from_json(const json& j) {
  RoundReport r;
  r.round = j.at("round").get<std::uint32_t>();
  r.accuracy = j.at("accuracy").get<double>();
  r.loss = j.at("loss").get<double>();
  r.client_losses = j.at("client_losses").get<std::vector<double>>();
  r.client_times_ms = j.at("client_times_ms").get<std::vector<std::uint64_t>>();
  r.client_eval_losses = j.at("client_eval_losses").get<std::vector<double>>();
  r.round_time_ms = j.at("round_time_ms").get<std::uint64_t>();
  return r;
}

}  // namespace

nlohmann::json config_to_json(const ExperimentConfig& cfg) {
  const auto& ft = cfg.fine_tune;
  return {{"mode", to_string(cfg.mode)},
          {"n_clients", cfg.n_clients},
          {"n_rounds", cfg.n_rounds},
          {"pretrain_epochs", cfg.pretrain_epochs},
          {"pca_k", cfg.pca_k},
          {"eval_fraction", cfg.eval_fraction},
          {"fine_tune_k", ft.trainable_fc_tail},
          {"learning_rate", ft.learning_rate},
          {"momentum", ft.momentum},
          {"batch_size", ft.batch_size},
          {"local_epochs", ft.local_epochs},
          {"seeds", {{"init", cfg.seeds.init}, {"partition", cfg.seeds.partition}, {"shuffle", cfg.seeds.shuffle}}},
          {"client_eval", cfg.client_eval},
          {"persist_optimizer_state", cfg.persist_optimizer_state},
          {"architecture", arch_to_json(cfg.arch)}};
}

ExperimentReport build_report(const ExperimentConfig& cfg, const ExperimentResult& result,
                              std::uint64_t total_time_ms) {
  ExperimentReport r;
  r.framework = cfg.framework_label();
  r.config = config_to_json(cfg);
  r.rounds = result.rounds;
  if (!r.rounds.empty()) {
    r.final_accuracy = r.rounds.back().accuracy;
    r.final_loss = r.rounds.back().loss;
  }
  const FineTuneConfig mem_cfg =
      cfg.mode == Mode::kCentralized ? cfg.full_config() : cfg.client_config();
  r.memory = estimate_memory(cfg.arch, mem_cfg, cfg.fine_tune.batch_size);
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& round : r.rounds) {
    for (auto t : round.client_times_ms) {
      sum += static_cast<double>(t);
      ++n;
    }
  }
  r.mean_client_time_ms = n ? sum / static_cast<double>(n) : 0.0;
  r.total_time_ms = total_time_ms;
  return r;
}

nlohmann::json report_to_json(const ExperimentReport& r) {
  json rounds = json::array();
  for (const auto& round : r.rounds) rounds.push_back(round_to_json(round));
  return {{"schema_version", r.schema_version},
          {"framework", r.framework},
          {"config", r.config},
          {"rounds", rounds},
          {"final_accuracy", r.final_accuracy},
          {"final_loss", r.final_loss},
          {"memory", memory_to_json(r.memory)},
          {"mean_client_time_ms", r.mean_client_time_ms},
          {"total_time_ms", r.total_time_ms}};
}

ExperimentReport report_from_json(const nlohmann::json& j) {
  ExperimentReport r;
  r.schema_version = j.at("schema_version").get<int>();
  if (r.schema_version != kReportSchemaVersion) {
    throw DataError("unsupported report schema_version " + std::to_string(r.schema_version) +
                    " (expected " + std::to_string(kReportSchemaVersion) + ")");
  }
  r.framework = j.at("framework").get<std::string>();
  r.config = j.at("config");
  for (const auto& round : j.at("rounds")) r.rounds.push_back(round_from_json(round));
  r.final_accuracy = j.at("final_accuracy").get<double>();
  r.final_loss = j.at("final_loss").get<double>();
  r.memory = memory_from_json(j.at("memory"));
  r.mean_client_time_ms = j.at("mean_client_time_ms").get<double>();
  r.total_time_ms = j.at("total_time_ms").get<std::uint64_t>();
  return r;
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::string report_to_csv(const ExperimentReport& r) {
  std::string out = "round,accuracy,loss,mem_bytes,round_time_ms\n";
  for (const auto& round : r.rounds) {
    out += std::to_string(round.round) + "," + format_double(round.accuracy) + "," +
           format_double(round.loss) + "," + std::to_string(r.memory.total_bytes) + "," +
           std::to_string(round.round_time_ms) + "\n";
  }
  return out;
}

namespace {

template <typename T>
T parse_field(const std::string& s, std::size_t line) {
  T v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw DataError("report csv line " + std::to_string(line) + ": bad value '" + s + "'");
  }
  return v;
}

}  // namespace

std::vector<CsvRow> parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "round,accuracy,loss,mem_bytes,round_time_ms") {
    throw DataError("report csv: missing or unexpected header");
  }
  std::vector<CsvRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) f.push_back(tok);
    if (f.size() != 5) throw DataError("report csv line " + std::to_string(line_no) + ": expected 5 fields");
    rows.push_back({parse_field<std::uint32_t>(f[0], line_no), parse_field<double>(f[1], line_no),
                    parse_field<double>(f[2], line_no), parse_field<std::uint64_t>(f[3], line_no),
                    parse_field<std::uint64_t>(f[4], line_no)});
  }
  return rows;
}

void emit_report(const ExperimentReport& r, ReportFormat format, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write report " + path.string());
  if (format == ReportFormat::kCsv) {
    out << report_to_csv(r);
  } else {
    out << report_to_json(r).dump(2) << "\n";
  }
  if (!out) throw DataError("write failed: " + path.string());
}

ExperimentReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open report " + path.string());
  try {
    return report_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::string comparison_table(const std::vector<ExperimentReport>& reports) {
  std::ostringstream out;
  out << std::left << std::setw(14) << "Framework" << std::right << std::setw(10) << "Accuracy"
      << std::setw(9) << "Loss" << std::setw(12) << "Memory,MB" << std::setw(14) << "ClientTime,s"
      << std::setw(12) << "Total,s" << "\n";
  out << std::fixed;
  for (const auto& r : reports) {
    out << std::left << std::setw(14) << r.framework << std::right << std::setprecision(2)
        << std::setw(10) << r.final_accuracy * 100.0 << std::setprecision(4) << std::setw(9)
        << r.final_loss << std::setprecision(3) << std::setw(12)
        << static_cast<double>(r.memory.total_bytes) / (1024.0 * 1024.0) << std::setprecision(2)
        << std::setw(14) << r.mean_client_time_ms / 1000.0 << std::setw(12)
        << static_cast<double>(r.total_time_ms) / 1000.0 << "\n";
  }
  return out.str();
}

std::string comparison_csv(const std::vector<ExperimentReport>& reports) {
  std::string out = "framework,accuracy,loss,mem_bytes,mean_client_time_ms,total_time_ms\n";
  for (const auto& r : reports) {
    out += r.framework + "," + format_double(r.final_accuracy) + "," + format_double(r.final_loss) +
           "," + std::to_string(r.memory.total_bytes) + "," + format_double(r.mean_client_time_ms) +
           "," + std::to_string(r.total_time_ms) + "\n";
  }
  return out;
}

}  // namespace fedft

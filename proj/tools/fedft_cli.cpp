// fedft: prepare NSL-KDD shards, run experiments, compare reports.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"

#include "fedft/config.hpp"
#include "fedft/dataset.hpp"
#include "fedft/error.hpp"
#include "fedft/federation.hpp"
#include "fedft/metrics.hpp"
#include "fedft/timing.hpp"
#include "fedft/transport.hpp"

namespace fs = std::filesystem;
using namespace fedft;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitRuntime = 3;

struct Options {
  std::string config_path;
  std::string mode = "simulate";
  std::string listen;
  std::string server;
  std::string out;
  std::string data_dir;
  std::optional<std::uint32_t> client_id;
  std::optional<std::uint32_t> accept_timeout_s;
  std::vector<std::string> reports;
  std::string format = "text";
};

AppConfig load(const Options& opt) {
  AppConfig cfg = opt.config_path.empty() ? config_from_json(nlohmann::json::object())
                                          : load_config(opt.config_path);
  apply_seed_override(cfg, std::getenv("FEDFT_SEED"));
  if (!opt.listen.empty()) cfg.listen = opt.listen;
  if (!opt.server.empty()) cfg.server = opt.server;
  if (opt.accept_timeout_s) cfg.accept_timeout_s = *opt.accept_timeout_s;
  return cfg;
}

fs::path data_dir(const Options& opt, const AppConfig& cfg) {
  return opt.data_dir.empty() ? cfg.prepared_dir : fs::path(opt.data_dir);
}

void require_file(const fs::path& p) {
  if (!fs::is_regular_file(p)) throw DataError("no such file: " + p.string());
}

int cmd_prepare(const Options& opt) {
  const AppConfig cfg = load(opt);
  require_file(cfg.train_path);
  require_file(cfg.test_path);
  const auto train = parse_csv_file(cfg.train_path, true);
  const auto test = parse_csv_file(cfg.test_path, true);
  const auto data = prepare_data(train, test, cfg.experiment);
  const fs::path dir = opt.out.empty() ? cfg.prepared_dir : fs::path(opt.out);
  write_prepared(dir, data);
  for (const auto& part : data.clients) {
    std::cout << "client_" << part.client_id << ".fftd " << part.features.n_rows << " rows\n";
  }
  std::cout << "proxy.fftd " << data.proxy_x.n_rows << " rows\n";
  std::cout << "eval.fftd " << data.eval_x.n_rows << " rows\n";
  return kExitOk;
}

void write_outputs(const Options& opt, const ExperimentConfig& cfg, const ExperimentResult& result,
                   std::uint64_t total_ms) {
  const fs::path dir = opt.out.empty() ? fs::path("reports") : fs::path(opt.out);
  fs::create_directories(dir);
  const auto report = build_report(cfg, result, total_ms);
  emit_report(report, ReportFormat::kJson, dir / "report.json");
  emit_report(report, ReportFormat::kCsv, dir / "report.csv");
  write_file_bytes(dir / "final_params.fftp", serialize_params(result.final_params));
  std::cout << report.framework << ": " << report.rounds.size() << " round(s), accuracy "
            << format_double(report.final_accuracy) << ", loss " << format_double(report.final_loss)
            << "\n";
}

PreparedData load_prepared_or_raw(const AppConfig& cfg, const fs::path& dir) {
  if (fs::is_regular_file(dir / "eval.fftd")) return read_prepared(dir, cfg.experiment.n_clients);
  require_file(cfg.train_path);
  require_file(cfg.test_path);
  return prepare_data(parse_csv_file(cfg.train_path, true), parse_csv_file(cfg.test_path, true),
                      cfg.experiment);
}

int cmd_run_local(const Options& opt, bool centralized) {
  AppConfig cfg = load(opt);
  if (centralized) cfg.experiment.mode = Mode::kCentralized;
  const fs::path dir = data_dir(opt, cfg);
  const PreparedData data = centralized ? load_prepared_or_raw(cfg, dir)
                                        : read_prepared(dir, cfg.experiment.n_clients);
  Stopwatch sw;
  const std::string endpoint = cfg.transport_mode == "tcp" && !centralized ? "127.0.0.1:0" : "";
  const auto result = run_experiment(cfg.experiment, data, endpoint);
  write_outputs(opt, cfg.experiment, result, sw.elapsed_whole_ms());
  return kExitOk;
}

int cmd_serve(const Options& opt) {
  const AppConfig cfg = load(opt);
  const fs::path dir = data_dir(opt, cfg);
  PreparedData data;
  std::tie(data.proxy_x, data.proxy_y) = read_dataset(dir / "proxy.fftd");
  std::tie(data.eval_x, data.eval_y) = read_dataset(dir / "eval.fftd");

  Stopwatch sw;
  const ModelParams initial = initial_global(cfg.experiment, data);
  auto listener = serve(cfg.listen);
  std::cout << "listening on " << listener->endpoint() << std::endl;
  auto channels = accept_clients(*listener, cfg.experiment.n_clients,
                                 std::chrono::seconds(cfg.accept_timeout_s));
  listener->close();
  auto run = run_server(channels, cfg.experiment, initial, data.eval_x, data.eval_y);
  ExperimentResult result{std::move(run.rounds), std::move(run.initial),
                          std::move(run.final_params)};
  write_outputs(opt, cfg.experiment, result, sw.elapsed_whole_ms());
  return kExitOk;
}

int cmd_client(const Options& opt) {
  const AppConfig cfg = load(opt);
  if (!opt.client_id) throw ConfigError("--mode client requires --client-id");
  if (*opt.client_id >= cfg.experiment.n_clients) {
    throw ConfigError("--client-id must be below n_clients");
  }
  const Partition shard = read_client_partition(data_dir(opt, cfg), *opt.client_id);

  // The server may still be pre-training; keep retrying until the timeout.
  const auto deadline =
      std::chrono::steady_clock::now() + std::chrono::seconds(cfg.accept_timeout_s);
  std::unique_ptr<Channel> channel;
  for (;;) {
    try {
      channel = connect(cfg.server);
      break;
    } catch (const TransportError&) {
      if (std::chrono::steady_clock::now() >= deadline) throw;
      std::this_thread::sleep_for(std::chrono::milliseconds(200));
    }
  }
  run_client(*channel, shard, cfg.experiment);
  std::cout << "client " << *opt.client_id << " done\n";
  return kExitOk;
}

int cmd_report(const Options& opt) {
  std::vector<ExperimentReport> reports;
  for (const auto& p : opt.reports) reports.push_back(read_report(p));
  std::cout << (opt.format == "csv" ? comparison_csv(reports) : comparison_table(reports));
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated fine-tuning for NSL-KDD intrusion detection"};
  app.require_subcommand(1);
  Options opt;

  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config_path, "JSON config file (defaults apply when omitted)")
        ->check(CLI::ExistingFile);
  };

  auto* prepare = app.add_subcommand("prepare", "Parse NSL-KDD, split and write FFTD shards");
  add_config(prepare);
  prepare->add_option("--out", opt.out, "Output directory (default: dataset.prepared_dir)");

  auto* run = app.add_subcommand("run", "Run an experiment and write report.json/report.csv");
  add_config(run);
  run->add_option("--mode", opt.mode, "centralized | simulate | serve | client")
      ->check(CLI::IsMember({"centralized", "simulate", "serve", "client"}))
      ->capture_default_str();
  run->add_option("--listen", opt.listen, "Server bind address host:port (serve)");
  run->add_option("--server", opt.server, "Server address host:port (client)");
  run->add_option("--client-id", opt.client_id, "Shard index of this client (client)");
  run->add_option("--accept-timeout", opt.accept_timeout_s,
                  "Seconds to wait for clients (serve) or the server (client)");
  run->add_option("--data", opt.data_dir, "Prepared data directory (default: dataset.prepared_dir)");
  run->add_option("--out", opt.out, "Report directory")->default_str("reports");

  auto* report = app.add_subcommand("report", "Tabulate one or more report.json files");
  report->add_option("paths", opt.reports, "Report files")->required();
  report->add_option("--format", opt.format, "text | csv")
      ->check(CLI::IsMember({"text", "csv"}))
      ->capture_default_str();

  app.footer("Env: FEDFT_SEED=S overrides seeds (init S, partition S+1, shuffle S+2).\n"
             "Exit codes: 0 ok, 2 input error, 3 runtime or transport error.");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInput;
  }

  try {
    if (prepare->parsed()) return cmd_prepare(opt);
    if (report->parsed()) return cmd_report(opt);
    if (opt.mode == "serve") return cmd_serve(opt);
    if (opt.mode == "client") return cmd_client(opt);
    return cmd_run_local(opt, opt.mode == "centralized");
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitInput;
  } catch (const DataError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

#include "fedft/config.hpp"

#include <fstream>
#include <set>

#include "fedft/error.hpp"

namespace fedft {

namespace {

using nlohmann::json;

void reject_unknown(const json& obj, const std::set<std::string>& known, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : obj.items()) {
    if (!known.count(key)) throw ConfigError("unknown config key '" + where + "." + key + "'");
  }
}

template <typename T>
void read(const json& obj, const char* key, T& dst, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    dst = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config value '" + where + "." + key + "' has the wrong type");
  }
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::filesystem::path& p) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

const json& section(const json& root, const char* name) {
  static const json empty = json::object();
  return root.contains(name) ? root.at(name) : empty;
}

}  // namespace

AppConfig config_from_json(const json& root, const std::filesystem::path& base_dir) {
  reject_unknown(root, {"dataset", "model", "training", "federation", "transport"}, "config");
  AppConfig cfg;
  auto& ex = cfg.experiment;

  const auto& ds = section(root, "dataset");
  reject_unknown(ds, {"train_path", "test_path", "pca_k", "eval_fraction", "prepared_dir"}, "dataset");
  std::string train = cfg.train_path.string(), test = cfg.test_path.string(),
              prepared = cfg.prepared_dir.string();
  read(ds, "train_path", train, "dataset");
  read(ds, "test_path", test, "dataset");
  read(ds, "prepared_dir", prepared, "dataset");
  read(ds, "pca_k", ex.pca_k, "dataset");
  read(ds, "eval_fraction", ex.eval_fraction, "dataset");
  cfg.train_path = resolve(base_dir, train);
  cfg.test_path = resolve(base_dir, test);
  cfg.prepared_dir = resolve(base_dir, prepared);

  const auto& model = section(root, "model");
  reject_unknown(model, {"conv_channels", "hidden", "kernel_size", "pool_size"}, "model");
  std::vector<std::uint32_t> channels{16, 32, 64};
  std::vector<std::uint32_t> hidden{64, 32};
  std::uint32_t kernel = 3, pool = 2;
  read(model, "conv_channels", channels, "model");
  read(model, "hidden", hidden, "model");
  read(model, "kernel_size", kernel, "model");
  read(model, "pool_size", pool, "model");
  try {
    ex.arch = Architecture::make(ex.pca_k, channels, hidden, kernel, pool);
  } catch (const ModelError& e) {
    throw ConfigError(e.what());
  }

  const auto& tr = section(root, "training");
  reject_unknown(tr,
                 {"batch_size", "local_epochs", "lr", "momentum", "pretrain_epochs", "rounds",
                  "fine_tune_k", "framework", "persist_optimizer_state"},
                 "training");
  read(tr, "batch_size", ex.fine_tune.batch_size, "training");
  read(tr, "local_epochs", ex.fine_tune.local_epochs, "training");
  read(tr, "lr", ex.fine_tune.learning_rate, "training");
  read(tr, "momentum", ex.fine_tune.momentum, "training");
  read(tr, "pretrain_epochs", ex.pretrain_epochs, "training");
  read(tr, "rounds", ex.n_rounds, "training");
  read(tr, "fine_tune_k", ex.fine_tune.trainable_fc_tail, "training");
  read(tr, "persist_optimizer_state", ex.persist_optimizer_state, "training");
  std::string framework = "fedft";
  read(tr, "framework", framework, "training");
  if (framework != "fedft" && framework != "fedavg_full") {
    throw ConfigError("training.framework must be 'fedft' or 'fedavg_full'");
  }
  ex.mode = mode_from_string(framework);

  const auto& fed = section(root, "federation");
  reject_unknown(fed, {"n_clients", "seeds", "client_eval"}, "federation");
  read(fed, "n_clients", ex.n_clients, "federation");
  read(fed, "client_eval", ex.client_eval, "federation");
  const auto& seeds = section(fed, "seeds");
  reject_unknown(seeds, {"init", "partition", "shuffle"}, "federation.seeds");
  read(seeds, "init", ex.seeds.init, "federation.seeds");
  read(seeds, "partition", ex.seeds.partition, "federation.seeds");
  read(seeds, "shuffle", ex.seeds.shuffle, "federation.seeds");

  const auto& tp = section(root, "transport");
  reject_unknown(tp, {"mode", "listen", "server", "accept_timeout_s"}, "transport");
  read(tp, "mode", cfg.transport_mode, "transport");
  read(tp, "listen", cfg.listen, "transport");
  read(tp, "server", cfg.server, "transport");
  read(tp, "accept_timeout_s", cfg.accept_timeout_s, "transport");
  if (cfg.transport_mode != "loopback" && cfg.transport_mode != "tcp") {
    throw ConfigError("transport.mode must be 'loopback' or 'tcp'");
  }

  ex.validate();
  return cfg;
}

AppConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j, path.parent_path());
}

void apply_seed_override(AppConfig& cfg, const char* env_value) {
  if (!env_value || !*env_value) return;
  std::uint64_t seed = 0;
  try {
    std::size_t used = 0;
    seed = std::stoull(env_value, &used);
    if (env_value[used] != '\0') throw std::invalid_argument("trailing");
  } catch (const std::exception&) {
    throw ConfigError(std::string("FEDFT_SEED is not an unsigned integer: ") + env_value);
  }
  cfg.experiment.seeds = {seed, seed + 1, seed + 2};
}

}  // namespace fedft

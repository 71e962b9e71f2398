#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "json.hpp"

#include "fedft/federation.hpp"

namespace fedft {

/// Contents of the JSON config file. Every field has a default, so an empty
/// document reproduces the reference setup: batch 32, 5 local epochs,
/// lr 0.01, momentum 0.9, 3 clients, 10 rounds, FedFT-3.
struct AppConfig {
  std::filesystem::path train_path = "KDDTrain+.txt";
  std::filesystem::path test_path = "KDDTest+.txt";
  std::filesystem::path prepared_dir = "prepared";
  ExperimentConfig experiment;
  std::string transport_mode = "loopback";  // loopback | tcp
  std::string listen = "0.0.0.0:7070";
  std::string server = "127.0.0.1:7070";
  std::uint32_t accept_timeout_s = 60;
};

/// Relative paths resolve against `base_dir`. Unknown keys are rejected.
AppConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
AppConfig load_config(const std::filesystem::path& path);

/// FEDFT_SEED=S sets seeds to (init S, partition S+1, shuffle S+2).
void apply_seed_override(AppConfig& cfg, const char* env_value);

}  // namespace fedft

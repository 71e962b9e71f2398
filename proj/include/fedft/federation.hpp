#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fedft/dataset.hpp"
#include "fedft/model.hpp"
#include "fedft/training.hpp"
#include "fedft/transport.hpp"

namespace fedft {

enum class Mode {
  kCentralized,  // one model trained on all client shards pooled together
  kFedFT,        // server pre-training + client fine-tuning of the FC tail
  kFedAvgFull,   // no pre-training; clients train every layer
};

std::string to_string(Mode m);
Mode mode_from_string(const std::string& s);

struct Seeds {
  std::uint64_t init = 1;
  std::uint64_t partition = 2;
  std::uint64_t shuffle = 3;

  bool operator==(const Seeds&) const = default;
};

struct ExperimentConfig {
  Mode mode = Mode::kFedFT;
  std::uint32_t n_clients = 3;
  std::uint32_t n_rounds = 10;
  std::uint32_t pretrain_epochs = 10;
  std::uint32_t pca_k = 20;
  double eval_fraction = 0.1;
  Architecture arch = Architecture::default_for(20);
  FineTuneConfig fine_tune;  // k, lr, momentum, batch size, local epochs
  Seeds seeds;
  bool client_eval = true;               // federated evaluation of each global model
  bool persist_optimizer_state = false;  // keep client velocity across rounds

  void validate() const;
  /// Trainable set used on clients: the FC tail for FedFT, everything for
  /// the full-FedAvg baseline.
  FineTuneConfig client_config() const;
  /// Same hyperparameters with every layer trainable.
  FineTuneConfig full_config() const;
  /// Epoch budget of the centralized baseline (rounds x local epochs).
  std::uint32_t centralized_epochs() const;
  /// "Centralized", "FL-full", "FedFT-3", ...
  std::string framework_label() const;
};

struct ClientUpdate {
  std::uint32_t client_id = 0;
  std::uint32_t round = 0;
  std::vector<Tensor<float>> tensors;
  std::uint64_t num_samples = 0;
  double local_loss = 0.0;
  std::uint64_t local_time_ms = 0;
};

struct RoundReport {
  std::uint32_t round = 0;
  double accuracy = 0.0;
  double loss = 0.0;
  std::vector<double> client_losses;
  std::vector<std::uint64_t> client_times_ms;
  std::vector<double> client_eval_losses;
  std::uint64_t round_time_ms = 0;
};

/// Data a run consumes: per-client shards plus the server's proxy and eval sets,
/// all already standardized and projected.
struct PreparedData {
  std::vector<Partition> clients;
  FeatureMatrix proxy_x;
  LabelVector proxy_y;
  FeatureMatrix eval_x;
  LabelVector eval_y;
};

/// Encode, split and transform raw NSL-KDD records. Each client fits its own
/// scaler and PCA on its shard; the server fits one on the proxy set and
/// applies it to the eval set. Values are rounded to f32 so in-memory and
/// on-disk runs see identical inputs.
PreparedData prepare_data(const RecordSet& train, const RecordSet& test,
                          const ExperimentConfig& cfg);

/// client_<i>.fftd, proxy.fftd and eval.fftd inside `dir`.
void write_prepared(const std::filesystem::path& dir, const PreparedData& data);
PreparedData read_prepared(const std::filesystem::path& dir, std::uint32_t n_clients);
Partition read_client_partition(const std::filesystem::path& dir, std::uint32_t client_id);

/// Full-network training from init_params(init_seed).
ModelParams pretrain(const Architecture& arch, const FeatureMatrix& x, const LabelVector& y,
                     std::uint32_t epochs, const FineTuneConfig& hyper, std::uint64_t init_seed,
                     std::uint64_t shuffle_seed);

/// Fine-tunes the trainable tail on a shard and packages the result.
ClientUpdate local_finetune(const ModelParams& global, const Architecture& arch,
                            const Partition& shard, const FineTuneConfig& cfg, std::uint32_t round,
                            std::uint64_t seed, OptimizerState<float>* state = nullptr);

/// n_i / N per update, in the order given.
std::vector<double> fedavg_weights(const std::vector<ClientUpdate>& updates);

/// Sample-weighted mean of the updated tensors; everything else is copied
/// from `global`.
ModelParams fedavg(const ModelParams& global, const std::vector<ClientUpdate>& updates);

/// Server side of a federated run over already-handshaken channels
/// (index = client id).
struct FederatedRun {
  ModelParams initial;  // model distributed in round 1 (pre-trained for FedFT)
  ModelParams final_params;
  std::vector<RoundReport> rounds;
};

FederatedRun run_server(std::vector<std::unique_ptr<Channel>>& clients, const ExperimentConfig& cfg,
                        const ModelParams& initial, const FeatureMatrix& eval_x,
                        const LabelVector& eval_y);

/// Accepts n_clients connections and orders them by their Hello client id.
std::vector<std::unique_ptr<Channel>> accept_clients(Listener& listener, std::uint32_t n_clients,
                                                     Timeout timeout);

/// Client loop: Hello, then answer GlobalParams/EvalRequest until Shutdown.
void run_client(Channel& channel, const Partition& shard, const ExperimentConfig& cfg);

/// Global model before round 1: init for FL-full, pre-trained for FedFT.
ModelParams initial_global(const ExperimentConfig& cfg, const PreparedData& data);

struct ExperimentResult {
  std::vector<RoundReport> rounds;
  ModelParams initial;
  ModelParams final_params;
};

/// End-to-end run. Federated modes host the server here and run every client
/// on its own thread, connected over `endpoint` (in-process loopback by
/// default; pass a "host:port" to use TCP).
ExperimentResult run_experiment(const ExperimentConfig& cfg, const PreparedData& data,
                                const std::string& endpoint = "");

/// Parses the raw files and prepares them first.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& train_path,
                                const std::filesystem::path& test_path);

}  // namespace fedft

#include "fedft/federation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <set>
#include <thread>

#include "fedft/error.hpp"
#include "fedft/rng.hpp"
#include "fedft/timing.hpp"

namespace fedft {

std::string to_string(Mode m) {
  switch (m) {
    case Mode::kCentralized:
      return "centralized";
    case Mode::kFedFT:
      return "fedft";
    case Mode::kFedAvgFull:
      return "fedavg_full";
  }
  return "unknown";
}

Mode mode_from_string(const std::string& s) {
  if (s == "centralized") return Mode::kCentralized;
  if (s == "fedft") return Mode::kFedFT;
  if (s == "fedavg_full") return Mode::kFedAvgFull;
  throw ConfigError("unknown experiment mode '" + s + "' (centralized|fedft|fedavg_full)");
}

void ExperimentConfig::validate() const {
  if (n_clients < 1) throw ConfigError("n_clients must be >= 1");
  if (n_rounds < 1) throw ConfigError("n_rounds must be >= 1");
  if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) throw ConfigError("eval_fraction must be in (0, 1)");
  try {
    arch.validate();
  } catch (const ModelError& e) {
    throw ConfigError(e.what());
  }
  if (arch.input_dim != pca_k) {
    throw ConfigError("model input_dim " + std::to_string(arch.input_dim) +
                      " does not match pca_k " + std::to_string(pca_k));
  }
  if (fine_tune.trainable_fc_tail < 1) throw ConfigError("fine_tune_k must be >= 1");
  fine_tune.validate(arch);
}

FineTuneConfig ExperimentConfig::full_config() const {
  FineTuneConfig c = fine_tune;
  c.trainable_fc_tail = static_cast<std::uint32_t>(arch.fc.size());
  c.train_feature_extractor = true;
  return c;
}

FineTuneConfig ExperimentConfig::client_config() const {
  if (mode == Mode::kFedFT) {
    FineTuneConfig c = fine_tune;
    c.train_feature_extractor = false;
    return c;
  }
  return full_config();
}

std::uint32_t ExperimentConfig::centralized_epochs() const {
  return n_rounds * fine_tune.local_epochs;
}

std::string ExperimentConfig::framework_label() const {
  switch (mode) {
    case Mode::kCentralized:
      return "Centralized";
    case Mode::kFedAvgFull:
      return "FL-full";
    case Mode::kFedFT:
      return "FedFT-" + std::to_string(fine_tune.trainable_fc_tail);
  }
  return "unknown";
}

namespace {

void round_to_float(FeatureMatrix& x) {
  for (auto& v : x.data) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace

PreparedData prepare_data(const RecordSet& train, const RecordSet& test,
                          const ExperimentConfig& cfg) {
  const auto& vocab = CategoryVocab::nsl_kdd();
  PreparedData out;
  out.clients = partition_iid(encode_features(train, vocab), binarize_labels(train), cfg.n_clients,
                              cfg.seeds.partition);
  for (auto& part : out.clients) {
    const auto transform = FittedTransform::fit(part.features, cfg.pca_k);
    part.features = transform.apply(part.features);
    round_to_float(part.features);
  }

  auto [proxy, eval] = make_proxy_split(test, cfg.eval_fraction, cfg.seeds.partition);
  if (proxy.size() == 0) throw DataError("prepare: proxy split is empty");
  const auto proxy_raw = encode_features(proxy, vocab);
  const auto transform = FittedTransform::fit(proxy_raw, cfg.pca_k);
  out.proxy_x = transform.apply(proxy_raw);
  out.proxy_y = binarize_labels(proxy);
  out.eval_x = transform.apply(encode_features(eval, vocab));
  out.eval_y = binarize_labels(eval);
  round_to_float(out.proxy_x);
  round_to_float(out.eval_x);
  return out;
}

void write_prepared(const std::filesystem::path& dir, const PreparedData& data) {
  std::filesystem::create_directories(dir);
  for (const auto& part : data.clients) {
    write_dataset(dir / ("client_" + std::to_string(part.client_id) + ".fftd"), part.features,
                  part.labels);
  }
  write_dataset(dir / "proxy.fftd", data.proxy_x, data.proxy_y);
  write_dataset(dir / "eval.fftd", data.eval_x, data.eval_y);
}

Partition read_client_partition(const std::filesystem::path& dir, std::uint32_t client_id) {
  Partition p;
  p.client_id = client_id;
  std::tie(p.features, p.labels) =
      read_dataset(dir / ("client_" + std::to_string(client_id) + ".fftd"));
  return p;
}

PreparedData read_prepared(const std::filesystem::path& dir, std::uint32_t n_clients) {
  PreparedData data;
  for (std::uint32_t c = 0; c < n_clients; ++c) data.clients.push_back(read_client_partition(dir, c));
  std::tie(data.proxy_x, data.proxy_y) = read_dataset(dir / "proxy.fftd");
  std::tie(data.eval_x, data.eval_y) = read_dataset(dir / "eval.fftd");
  return data;
}

ModelParams pretrain(const Architecture& arch, const FeatureMatrix& x, const LabelVector& y,
                     std::uint32_t epochs, const FineTuneConfig& hyper, std::uint64_t init_seed,
                     std::uint64_t shuffle_seed) {
  if (x.n_rows == 0) throw DataError("pretrain: empty proxy data");
  FineTuneConfig cfg = hyper;
  cfg.trainable_fc_tail = static_cast<std::uint32_t>(arch.fc.size());
  cfg.train_feature_extractor = true;
  ModelParams params = init_params(arch, init_seed);
  if (epochs > 0) train_epochs(params, arch, cfg, x, y, epochs, shuffle_seed);
  return params;
}

ClientUpdate local_finetune(const ModelParams& global, const Architecture& arch,
                            const Partition& shard, const FineTuneConfig& cfg, std::uint32_t round,
                            std::uint64_t seed, OptimizerState<float>* state) {
  if (shard.features.n_rows == 0) throw DataError("local_finetune: empty shard");
  Stopwatch sw;
  ModelParams local = global;
  const auto stats = train_epochs(local, arch, cfg, shard.features, shard.labels, cfg.local_epochs,
                                  seed, state);
  ClientUpdate u;
  u.client_id = shard.client_id;
  u.round = round;
  u.tensors = select_tensors(local, cfg.trainable_mask(arch));
  u.num_samples = shard.features.n_rows;
  u.local_loss = stats.last_epoch_loss;
  u.local_time_ms = sw.elapsed_whole_ms();
  return u;
}

std::vector<double> fedavg_weights(const std::vector<ClientUpdate>& updates) {
  double total = 0.0;
  for (const auto& u : updates) total += static_cast<double>(u.num_samples);
  std::vector<double> w;
  for (const auto& u : updates) w.push_back(static_cast<double>(u.num_samples) / total);
  return w;
}

ModelParams fedavg(const ModelParams& global, const std::vector<ClientUpdate>& updates) {
  if (updates.empty()) throw ModelError("fedavg: no client updates");
  const auto& ref = updates.front();
  for (const auto& u : updates) {
    if (u.round != ref.round) {
      throw ModelError("fedavg: updates from rounds " + std::to_string(ref.round) + " and " +
                       std::to_string(u.round));
    }
    if (u.num_samples == 0) {
      throw ModelError("fedavg: client " + std::to_string(u.client_id) + " reported zero samples");
    }
    if (u.tensors.size() != ref.tensors.size()) {
      throw ModelError("fedavg: client " + std::to_string(u.client_id) + " sent " +
                       std::to_string(u.tensors.size()) + " tensors, expected " +
                       std::to_string(ref.tensors.size()));
    }
    for (std::size_t t = 0; t < u.tensors.size(); ++t) {
      if (u.tensors[t].name != ref.tensors[t].name) {
        throw ModelError("fedavg: client " + std::to_string(u.client_id) + " tensor '" +
                         u.tensors[t].name + "' where '" + ref.tensors[t].name + "' expected");
      }
    }
  }
  const auto weights = fedavg_weights(updates);
  ModelParams out = global;
  std::vector<double> acc;
  for (std::size_t t = 0; t < ref.tensors.size(); ++t) {
    const auto idx = global.index_of(ref.tensors[t].name);
    if (!idx) throw ModelError("fedavg: global model has no tensor '" + ref.tensors[t].name + "'");
    auto& dst = out.tensors[*idx];
    acc.assign(dst.data.size(), 0.0);
    for (std::size_t i = 0; i < updates.size(); ++i) {
      const auto& src = updates[i].tensors[t];
      if (src.shape != dst.shape || src.data.size() != dst.data.size()) {
        throw ModelError("fedavg: shape mismatch for '" + src.name + "' from client " +
                         std::to_string(updates[i].client_id));
      }
      for (std::size_t e = 0; e < acc.size(); ++e) {
        acc[e] += weights[i] * static_cast<double>(src.data[e]);
      }
    }
    for (std::size_t e = 0; e < acc.size(); ++e) dst.data[e] = static_cast<float>(acc[e]);
  }
  return out;
}

namespace {

template <typename T>
T expect(Message m, std::uint32_t client_id) {
  if (auto* v = std::get_if<T>(&m)) return std::move(*v);
  throw ProtocolError("client " + std::to_string(client_id) + " sent unexpected " + message_name(m));
}

}  // namespace

std::vector<std::unique_ptr<Channel>> accept_clients(Listener& listener, std::uint32_t n_clients,
                                                     Timeout timeout) {
  std::vector<std::unique_ptr<Channel>> slots(n_clients);
  for (std::uint32_t i = 0; i < n_clients; ++i) {
    auto ch = listener.accept(timeout);
    const auto hello = expect<Hello>(ch->receive(timeout), i);
    if (hello.client_id >= n_clients) {
      throw ProtocolError("client id " + std::to_string(hello.client_id) + " out of range [0, " +
                          std::to_string(n_clients) + ")");
    }
    if (slots[hello.client_id]) {
      throw ProtocolError("duplicate client id " + std::to_string(hello.client_id));
    }
    slots[hello.client_id] = std::move(ch);
  }
  return slots;
}

FederatedRun run_server(std::vector<std::unique_ptr<Channel>>& clients, const ExperimentConfig& cfg,
                        const ModelParams& initial, const FeatureMatrix& eval_x,
                        const LabelVector& eval_y) {
  const FineTuneConfig client_cfg = cfg.client_config();
  const auto trainable = client_cfg.trainable_names(cfg.arch);
  const std::set<std::string> allowed(trainable.begin(), trainable.end());

  FederatedRun run;
  run.initial = initial;
  ModelParams global = initial;
  for (std::uint32_t round = 1; round <= cfg.n_rounds; ++round) {
    Stopwatch sw;
    const auto blob = serialize_params(global);
    for (auto& ch : clients) {
      ch->send(GlobalParams{round, blob});
      if (cfg.client_eval) ch->send(EvalRequest{round});
    }

    RoundReport report;
    report.round = round;
    std::vector<ClientUpdate> updates;
    for (std::uint32_t id = 0; id < clients.size(); ++id) {
      auto msg = expect<ClientUpdateMsg>(clients[id]->receive(), id);
      if (msg.round != round) {
        throw ProtocolError("client " + std::to_string(id) + " answered round " +
                            std::to_string(msg.round) + " during round " + std::to_string(round));
      }
      ClientUpdate u;
      u.client_id = id;
      u.round = round;
      u.tensors = deserialize_tensor_subset(msg.blob, cfg.arch);
      for (const auto& t : u.tensors) {
        if (!allowed.count(t.name)) {
          throw ProtocolError("client " + std::to_string(id) + " sent frozen tensor '" + t.name + "'");
        }
      }
      u.num_samples = msg.num_samples;
      u.local_loss = msg.local_loss;
      u.local_time_ms = msg.local_time_ms;
      report.client_losses.push_back(u.local_loss);
      report.client_times_ms.push_back(u.local_time_ms);
      updates.push_back(std::move(u));

      if (cfg.client_eval) {
        const auto ev = expect<ClientUpdateMsg>(clients[id]->receive(), id);
        if (ev.round != round) throw ProtocolError("evaluation reply for the wrong round");
        report.client_eval_losses.push_back(ev.local_loss);
      }
    }
    global = fedavg(global, updates);
    const auto eval = evaluate(global, cfg.arch, eval_x, eval_y);
    report.accuracy = eval.accuracy;
    report.loss = eval.loss;
    report.round_time_ms = sw.elapsed_whole_ms();
    run.rounds.push_back(std::move(report));
  }
  for (auto& ch : clients) ch->send(Shutdown{});
  run.final_params = std::move(global);
  return run;
}

void run_client(Channel& channel, const Partition& shard, const ExperimentConfig& cfg) {
  const FineTuneConfig client_cfg = cfg.client_config();
  channel.send(Hello{shard.client_id});
  ModelParams received;
  std::uint32_t received_round = 0;
  std::optional<OptimizerState<float>> persistent;
  while (true) {
    Message m = channel.receive();
    if (std::holds_alternative<Shutdown>(m)) return;
    if (auto* g = std::get_if<GlobalParams>(&m)) {
      received = deserialize_params(g->blob, cfg.arch);
      received_round = g->round;
      OptimizerState<float>* state = nullptr;
      if (cfg.persist_optimizer_state) {
        if (!persistent) persistent = OptimizerState<float>::zeros_for(received, cfg.arch, client_cfg);
        state = &*persistent;
      }
      const auto update =
          local_finetune(received, cfg.arch, shard, client_cfg, g->round,
                         mix_seed(cfg.seeds.shuffle, shard.client_id + 1, g->round), state);
      ClientUpdateMsg reply;
      reply.round = g->round;
      reply.num_samples = update.num_samples;
      reply.blob = serialize_tensors(update.tensors);
      reply.local_loss = static_cast<float>(update.local_loss);
      reply.local_time_ms = update.local_time_ms;
      channel.send(reply);
    } else if (auto* e = std::get_if<EvalRequest>(&m)) {
      if (e->round != received_round || received.tensors.empty()) {
        throw ProtocolError("evaluation requested for round " + std::to_string(e->round) +
                            " without matching global parameters");
      }
      Stopwatch sw;
      const auto result = evaluate(received, cfg.arch, shard.features, shard.labels);
      ClientUpdateMsg reply;
      reply.round = e->round;
      reply.num_samples = shard.features.n_rows;
      reply.blob = serialize_tensors({});
      reply.local_loss = static_cast<float>(result.loss);
      reply.local_time_ms = sw.elapsed_whole_ms();
      channel.send(reply);
    } else {
      throw ProtocolError("client received unexpected " + message_name(m));
    }
  }
}

ModelParams initial_global(const ExperimentConfig& cfg, const PreparedData& data) {
  if (cfg.mode == Mode::kFedFT) {
    return pretrain(cfg.arch, data.proxy_x, data.proxy_y, cfg.pretrain_epochs, cfg.full_config(),
                    cfg.seeds.init, cfg.seeds.shuffle);
  }
  return init_params(cfg.arch, cfg.seeds.init);
}

namespace {

ExperimentResult run_centralized(const ExperimentConfig& cfg, const PreparedData& data) {
  FeatureMatrix pooled_x(0, cfg.arch.input_dim);
  LabelVector pooled_y;
  for (const auto& part : data.clients) {
    pooled_x.data.insert(pooled_x.data.end(), part.features.data.begin(), part.features.data.end());
    pooled_x.n_rows += part.features.n_rows;
    pooled_y.insert(pooled_y.end(), part.labels.begin(), part.labels.end());
  }
  ExperimentResult result;
  result.initial = init_params(cfg.arch, cfg.seeds.init);
  Stopwatch sw;
  if (pooled_x.n_rows == 0) throw DataError("centralized: no training data");
  result.final_params = result.initial;
  const auto stats = train_epochs(result.final_params, cfg.arch, cfg.full_config(), pooled_x,
                                  pooled_y, cfg.centralized_epochs(), cfg.seeds.shuffle);
  RoundReport report;
  report.round = 1;
  report.client_losses = {stats.last_epoch_loss};
  report.client_times_ms = {sw.elapsed_whole_ms()};
  const auto eval = evaluate(result.final_params, cfg.arch, data.eval_x, data.eval_y);
  report.accuracy = eval.accuracy;
  report.loss = eval.loss;
  report.round_time_ms = sw.elapsed_whole_ms();
  result.rounds.push_back(std::move(report));
  return result;
}

std::string unique_inproc_name() {
  static std::atomic<std::uint64_t> counter{0};
  return "inproc://fedft-sim-" + std::to_string(counter.fetch_add(1));
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, const PreparedData& data,
                                const std::string& endpoint) {
  cfg.validate();
  if (data.clients.size() != cfg.n_clients) {
    throw ConfigError("prepared data has " + std::to_string(data.clients.size()) +
                      " client shards, config expects " + std::to_string(cfg.n_clients));
  }
  if (cfg.mode == Mode::kCentralized) return run_centralized(cfg, data);

  const ModelParams initial = initial_global(cfg, data);
  auto listener = serve(endpoint.empty() ? unique_inproc_name() : endpoint);
  const std::string address = listener->endpoint();

  std::vector<std::exception_ptr> client_errors(cfg.n_clients);
  std::vector<std::thread> threads;
  std::vector<std::unique_ptr<Channel>> channels;
  auto join_all = [&] {
    for (auto& t : threads) {
      if (t.joinable()) t.join();
    }
  };
  FederatedRun run;
  try {
    for (std::uint32_t c = 0; c < cfg.n_clients; ++c) {
      auto ch = connect(address);
      threads.emplace_back([&, c, ch = std::shared_ptr<Channel>(std::move(ch))] {
        try {
          run_client(*ch, data.clients[c], cfg);
        } catch (...) {
          client_errors[c] = std::current_exception();
          ch->close();
        }
      });
    }
    channels = accept_clients(*listener, cfg.n_clients, std::chrono::seconds(60));
    listener->close();
    run = run_server(channels, cfg, initial, data.eval_x, data.eval_y);
  } catch (...) {
    for (auto& ch : channels) {
      if (ch) ch->close();
    }
    listener->close();
    join_all();
    // A client failure shows up on the server as a closed channel; surface the
    // client's own error in that case.
    for (auto& e : client_errors) {
      if (!e) continue;
      try {
        std::rethrow_exception(e);
      } catch (const TransportError&) {
      }
    }
    throw;
  }
  join_all();
  for (auto& e : client_errors) {
    if (e) std::rethrow_exception(e);
  }
  return {std::move(run.rounds), std::move(run.initial), std::move(run.final_params)};
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& train_path,
                                const std::filesystem::path& test_path) {
  const auto train = parse_csv_file(train_path, true);
  const auto test = parse_csv_file(test_path, true);
  return run_experiment(cfg, prepare_data(train, test, cfg));
}

}  // namespace fedft

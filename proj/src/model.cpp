#include "fedft/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "fedft/byte_io.hpp"
#include "fedft/error.hpp"
#include "fedft/rng.hpp"

namespace fedft {

Architecture Architecture::make(std::uint32_t input_dim,
                                std::span<const std::uint32_t> conv_channels,
                                std::span<const std::uint32_t> hidden_widths,
                                std::uint32_t kernel_size, std::uint32_t pool_size) {
  Architecture a;
  a.input_dim = input_dim;
  std::uint32_t in_ch = 1;
  for (auto ch : conv_channels) {
    a.conv.push_back({in_ch, ch, kernel_size, pool_size});
    in_ch = ch;
  }
  std::uint32_t in_features = a.flatten_size();
  for (auto w : hidden_widths) {
    a.fc.push_back({in_features, w});
    in_features = w;
  }
  a.fc.push_back({in_features, 1});
  a.validate();
  return a;
}

Architecture Architecture::default_for(std::uint32_t input_dim) {
  const std::uint32_t channels[] = {16, 32, 64};
  const std::uint32_t hidden[] = {64, 32};
  return make(input_dim, channels, hidden);
}

std::vector<std::uint32_t> Architecture::conv_lengths() const {
  std::vector<std::uint32_t> lengths{input_dim};
  for (const auto& c : conv) {
    lengths.push_back(c.pool_size == 0 ? 0 : lengths.back() / c.pool_size);
  }
  return lengths;
}

std::uint32_t Architecture::flatten_size() const {
  if (conv.empty()) return input_dim;
  return conv.back().out_channels * conv_lengths().back();
}

void Architecture::validate() const {
  if (input_dim == 0) throw ModelError("architecture: input_dim must be positive");
  if (fc.empty()) throw ModelError("architecture: at least one FC layer required");
  std::uint32_t in_ch = 1;
  const auto lengths = conv_lengths();
  for (std::size_t i = 0; i < conv.size(); ++i) {
    const auto& c = conv[i];
    const std::string where = "architecture: conv" + std::to_string(i);
    if (c.in_channels != in_ch) {
      throw ModelError(where + " expects " + std::to_string(c.in_channels) +
                       " input channels, previous layer provides " + std::to_string(in_ch));
    }
    if (c.out_channels == 0 || c.kernel_size == 0 || c.pool_size == 0) {
      throw ModelError(where + " has a zero-sized dimension");
    }
    if (lengths[i + 1] == 0) {
      throw ModelError(where + " pools length " + std::to_string(lengths[i]) + " down to zero");
    }
    in_ch = c.out_channels;
  }
  std::uint32_t in_features = flatten_size();
  for (std::size_t j = 0; j < fc.size(); ++j) {
    if (fc[j].in_features != in_features) {
      throw ModelError("architecture: fc" + std::to_string(j) + " expects " +
                       std::to_string(fc[j].in_features) + " inputs, previous layer provides " +
                       std::to_string(in_features));
    }
    if (fc[j].out_features == 0) {
      throw ModelError("architecture: fc" + std::to_string(j) + " has zero outputs");
    }
    in_features = fc[j].out_features;
  }
  if (fc.back().out_features != 1) throw ModelError("architecture: final FC layer must have 1 output");
}

std::vector<TensorSpec> Architecture::tensor_specs() const {
  std::vector<TensorSpec> specs;
  for (std::size_t i = 0; i < conv.size(); ++i) {
    const auto& c = conv[i];
    const auto prefix = "conv" + std::to_string(i);
    specs.push_back({prefix + ".weight", {c.out_channels, c.in_channels, c.kernel_size}});
    specs.push_back({prefix + ".bias", {c.out_channels}});
  }
  for (std::size_t j = 0; j < fc.size(); ++j) {
    const auto prefix = "fc" + std::to_string(j);
    specs.push_back({prefix + ".weight", {fc[j].out_features, fc[j].in_features}});
    specs.push_back({prefix + ".bias", {fc[j].out_features}});
  }
  return specs;
}

namespace {

std::size_t element_count(const std::vector<std::uint32_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::uint32_t b) { return a * b; });
}

}  // namespace

std::size_t Architecture::parameter_count() const {
  std::size_t n = 0;
  for (const auto& s : tensor_specs()) n += element_count(s.shape);
  return n;
}

FineTuneConfig FineTuneConfig::full(const Architecture& arch) {
  FineTuneConfig cfg;
  cfg.trainable_fc_tail = static_cast<std::uint32_t>(arch.fc.size());
  cfg.train_feature_extractor = true;
  return cfg;
}

void FineTuneConfig::validate(const Architecture& arch) const {
  if (trainable_fc_tail < 1 || trainable_fc_tail > arch.fc.size()) {
    throw ConfigError("fine-tune: trainable_fc_tail=" + std::to_string(trainable_fc_tail) +
                      " must be between 1 and the " + std::to_string(arch.fc.size()) + " FC layers");
  }
  if (train_feature_extractor && trainable_fc_tail != arch.fc.size()) {
    throw ConfigError("fine-tune: training the feature extractor requires every FC layer trainable");
  }
  if (batch_size == 0) throw ConfigError("fine-tune: batch_size must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("fine-tune: learning_rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("fine-tune: momentum must be in [0, 1)");
}

std::size_t FineTuneConfig::first_trainable_layer(const Architecture& arch) const {
  if (train_feature_extractor) return 0;
  const std::size_t tail = std::min<std::size_t>(trainable_fc_tail, arch.fc.size());
  return arch.layer_count() - tail;
}

std::vector<bool> FineTuneConfig::trainable_mask(const Architecture& arch) const {
  const std::size_t first = first_trainable_layer(arch);
  std::vector<bool> mask;
  for (std::size_t layer = 0; layer < arch.layer_count(); ++layer) {
    mask.push_back(layer >= first);  // weight
    mask.push_back(layer >= first);  // bias
  }
  return mask;
}

std::vector<std::string> FineTuneConfig::trainable_names(const Architecture& arch) const {
  const auto specs = arch.tensor_specs();
  const auto mask = trainable_mask(arch);
  std::vector<std::string> names;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (mask[i]) names.push_back(specs[i].name);
  }
  return names;
}

std::size_t FineTuneConfig::trainable_parameter_count(const Architecture& arch) const {
  const auto specs = arch.tensor_specs();
  const auto mask = trainable_mask(arch);
  std::size_t n = 0;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (mask[i]) n += element_count(specs[i].shape);
  }
  return n;
}

ModelParams zero_params(const Architecture& arch) {
  arch.validate();
  ModelParams p;
  for (auto& spec : arch.tensor_specs()) {
    const auto n = element_count(spec.shape);
    p.tensors.push_back({std::move(spec.name), std::move(spec.shape), std::vector<float>(n, 0.0f)});
  }
  return p;
}

ModelParams init_params(const Architecture& arch, std::uint64_t seed) {
  ModelParams p = zero_params(arch);
  Rng rng(seed);
  for (auto& t : p.tensors) {
    if (t.shape.size() == 1) continue;  // bias
    std::size_t fan_in = 1;
    for (std::size_t i = 1; i < t.shape.size(); ++i) fan_in *= t.shape[i];
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& w : t.data) {
      do {
        w = static_cast<float>(rng.uniform(-bound, bound));
      } while (!(std::abs(static_cast<double>(w)) < bound));
    }
  }
  return p;
}

std::vector<Tensor<float>> select_tensors(const ModelParams& params, const std::vector<bool>& mask) {
  std::vector<Tensor<float>> out;
  for (std::size_t i = 0; i < params.tensors.size() && i < mask.size(); ++i) {
    if (mask[i]) out.push_back(params.tensors[i]);
  }
  return out;
}

std::vector<std::uint8_t> serialize_tensors(std::span<const Tensor<float>> tensors) {
  std::vector<std::uint8_t> out;
  ByteWriter w(out);
  w.put_chars("FFTP");
  w.put<std::uint16_t>(kParamsFormatVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > UINT16_MAX) throw ModelError("tensor name too long: " + t.name);
    if (t.shape.size() > UINT8_MAX) throw ModelError("tensor rank too large: " + t.name);
    if (element_count(t.shape) != t.data.size()) {
      throw ModelError("tensor '" + t.name + "' data size does not match its shape");
    }
    w.put<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
    w.put_chars(t.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) w.put<std::uint32_t>(d);
    w.put_array(std::span<const float>(t.data));
  }
  return out;
}

std::vector<std::uint8_t> serialize_params(const ModelParams& params) {
  return serialize_tensors(params.tensors);
}

namespace {

std::vector<Tensor<float>> parse_blob(std::span<const std::uint8_t> bytes) {
  ByteReader<ModelError> r(bytes, "FFTP");
  const auto magic = r.get_bytes(4);
  if (!std::equal(magic.begin(), magic.end(), "FFTP")) throw ModelError("FFTP: bad magic");
  const auto version = r.get<std::uint16_t>();
  if (version != kParamsFormatVersion) {
    throw ModelError("FFTP: unsupported version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>();
  std::vector<Tensor<float>> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    Tensor<float> t;
    const auto name_len = r.get<std::uint16_t>();
    const auto name = r.get_bytes(name_len);
    t.name.assign(name.begin(), name.end());
    const auto rank = r.get<std::uint8_t>();
    for (std::uint8_t k = 0; k < rank; ++k) t.shape.push_back(r.get<std::uint32_t>());
    const auto n = element_count(t.shape);
    if (n > r.remaining() / sizeof(float)) {
      throw ModelError("FFTP: truncated data for tensor '" + t.name + "'");
    }
    t.data.resize(n);
    r.get_array(std::span<float>(t.data));
    tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw ModelError("FFTP: trailing bytes after last tensor");
  return tensors;
}

std::string shape_string(const std::vector<std::uint32_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace

ModelParams deserialize_params(std::span<const std::uint8_t> bytes, const Architecture& arch) {
  auto tensors = parse_blob(bytes);
  const auto specs = arch.tensor_specs();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (i >= tensors.size()) throw ModelError("FFTP: missing tensor '" + specs[i].name + "'");
    if (tensors[i].name != specs[i].name) {
      throw ModelError("FFTP: tensor " + std::to_string(i) + " is '" + tensors[i].name +
                       "', expected '" + specs[i].name + "'");
    }
    if (tensors[i].shape != specs[i].shape) {
      throw ModelError("FFTP: tensor '" + specs[i].name + "' has shape " +
                       shape_string(tensors[i].shape) + ", expected " +
                       shape_string(specs[i].shape));
    }
  }
  if (tensors.size() > specs.size()) {
    throw ModelError("FFTP: unexpected tensor '" + tensors[specs.size()].name + "'");
  }
  return ModelParams{std::move(tensors)};
}

std::vector<Tensor<float>> deserialize_tensor_subset(std::span<const std::uint8_t> bytes,
                                                     const Architecture& arch) {
  auto tensors = parse_blob(bytes);
  const auto specs = arch.tensor_specs();
  std::set<std::string> seen;
  for (const auto& t : tensors) {
    const auto it = std::find_if(specs.begin(), specs.end(),
                                 [&](const TensorSpec& s) { return s.name == t.name; });
    if (it == specs.end()) throw ModelError("FFTP: unexpected tensor '" + t.name + "'");
    if (!seen.insert(t.name).second) throw ModelError("FFTP: duplicate tensor '" + t.name + "'");
    if (t.shape != it->shape) {
      throw ModelError("FFTP: tensor '" + t.name + "' has shape " + shape_string(t.shape) +
                       ", expected " + shape_string(it->shape));
    }
  }
  return tensors;
}

}  // namespace fedft

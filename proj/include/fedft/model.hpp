#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace fedft {

/// Conv1D (stride 1, zero "same" padding) -> ReLU -> MaxPool(pool, stride pool).
struct ConvBlock {
  std::uint32_t in_channels = 1;
  std::uint32_t out_channels = 1;
  std::uint32_t kernel_size = 3;
  std::uint32_t pool_size = 2;

  bool operator==(const ConvBlock&) const = default;
};

struct DenseLayer {
  std::uint32_t in_features = 1;
  std::uint32_t out_features = 1;

  bool operator==(const DenseLayer&) const = default;
};

struct TensorSpec {
  std::string name;
  std::vector<std::uint32_t> shape;
};

/// Conv feature extractor followed by an FC head. ReLU sits between FC
/// layers; the last FC layer feeds a sigmoid.
struct Architecture {
  std::uint32_t input_dim = 20;
  std::vector<ConvBlock> conv;
  std::vector<DenseLayer> fc;

  /// Chains conv channels and FC widths from `input_dim`, deriving the
  /// flatten size. The last FC layer always has one output.
  static Architecture make(std::uint32_t input_dim, std::span<const std::uint32_t> conv_channels,
                           std::span<const std::uint32_t> hidden_widths,
                           std::uint32_t kernel_size = 3, std::uint32_t pool_size = 2);
  /// 1->16->32->64 conv channels, kernel 3, pool 2; FC 128->64->32->1 at d=20.
  static Architecture default_for(std::uint32_t input_dim = 20);

  /// Throws ModelError when dimensions do not chain.
  void validate() const;

  std::size_t layer_count() const { return conv.size() + fc.size(); }
  /// Sequence length entering each conv block, plus the final pooled length.
  std::vector<std::uint32_t> conv_lengths() const;
  std::uint32_t flatten_size() const;
  std::vector<TensorSpec> tensor_specs() const;
  std::size_t parameter_count() const;

  bool operator==(const Architecture&) const = default;
};

/// Which parameters a training run may change. Clients train the trailing
/// `trainable_fc_tail` FC layers; server pre-training trains everything.
struct FineTuneConfig {
  std::uint32_t trainable_fc_tail = 3;
  bool train_feature_extractor = false;
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::uint32_t batch_size = 32;
  std::uint32_t local_epochs = 5;

  static FineTuneConfig full(const Architecture& arch);

  void validate(const Architecture& arch) const;
  /// Index into the conv-then-FC layer sequence; layer_count() when nothing trains.
  std::size_t first_trainable_layer(const Architecture& arch) const;
  /// One flag per tensor, in ModelParams order.
  std::vector<bool> trainable_mask(const Architecture& arch) const;
  std::vector<std::string> trainable_names(const Architecture& arch) const;
  std::size_t trainable_parameter_count(const Architecture& arch) const;
};

template <typename Scalar>
struct Tensor {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::vector<Scalar> data;

  std::size_t size() const { return data.size(); }
  bool operator==(const Tensor&) const = default;
};

/// Ordered, named tensors; order matches Architecture::tensor_specs().
template <typename Scalar>
struct BasicModelParams {
  std::vector<Tensor<Scalar>> tensors;

  std::optional<std::size_t> index_of(std::string_view name) const {
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      if (tensors[i].name == name) return i;
    }
    return std::nullopt;
  }

  bool operator==(const BasicModelParams&) const = default;
};

using ModelParams = BasicModelParams<float>;

template <typename To, typename From>
BasicModelParams<To> cast_params(const BasicModelParams<From>& in) {
  BasicModelParams<To> out;
  out.tensors.reserve(in.tensors.size());
  for (const auto& t : in.tensors) {
    out.tensors.push_back({t.name, t.shape, std::vector<To>(t.data.begin(), t.data.end())});
  }
  return out;
}

/// Weights ~ U(-sqrt(6/fan_in), +sqrt(6/fan_in)), biases zero.
ModelParams init_params(const Architecture& arch, std::uint64_t seed);

/// Zero-valued parameters with the architecture's shapes.
ModelParams zero_params(const Architecture& arch);

/// Copies the tensors selected by `mask`.
std::vector<Tensor<float>> select_tensors(const ModelParams& params, const std::vector<bool>& mask);

// "FFTP" blob: magic, u16 version, u32 tensor count, then per tensor a u16
// name length, UTF-8 name, u8 rank, u32 dims, f32 data. Little-endian.
inline constexpr std::uint16_t kParamsFormatVersion = 1;

std::vector<std::uint8_t> serialize_tensors(std::span<const Tensor<float>> tensors);
std::vector<std::uint8_t> serialize_params(const ModelParams& params);

/// Full parameter set; names, order and shapes must match `arch` exactly.
ModelParams deserialize_params(std::span<const std::uint8_t> bytes, const Architecture& arch);

/// Any subset of the architecture's tensors (each name at most once, shapes
/// checked). Returned in blob order.
std::vector<Tensor<float>> deserialize_tensor_subset(std::span<const std::uint8_t> bytes,
                                                     const Architecture& arch);

}  // namespace fedft

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ranp/autodiff.hpp"
#include "ranp/tensor.hpp"

namespace ranp {

enum class LayerKind { conv3d, relu, maxpool, upsample, concat, linear, softmax_head };

const char* kind_name(LayerKind kind);
LayerKind parse_kind(std::string_view name);  // throws ParseError

// Reserved layer id that refers to the network input.
inline constexpr std::string_view kInputId = "input";

struct LayerSpec {
  std::string id;
  LayerKind kind = LayerKind::relu;
  int out_channels = 0;                 // conv3d / linear only
  std::array<int, 3> kernel{1, 1, 1};   // conv kernel; kernel[0] is the pooling window
  int stride = 1;
  int padding = 0;
  int factor = 2;                       // upsample only
  bool bias = true;
  std::vector<std::string> inputs;
  bool is_protected = false;

  // Filled by shape inference.
  int in_channels = 0;
  std::array<std::size_t, 4> out_shape{};  // (C, D, H, W), batch excluded

  bool is_compute() const noexcept { return kind == LayerKind::conv3d || kind == LayerKind::linear; }
  std::size_t kernel_volume() const noexcept {
    return static_cast<std::size_t>(kernel[0]) * kernel[1] * kernel[2];
  }
  std::size_t output_elements() const noexcept {
    return out_shape[0] * out_shape[1] * out_shape[2] * out_shape[3];
  }
};

struct NetSpec {
  std::array<int, 4> input_shape{};  // (C, D, H, W)
  int class_count = 0;
  std::vector<LayerSpec> layers;

  std::size_t index_of(std::string_view id) const;  // throws ParseError
  const LayerSpec& layer(std::string_view id) const { return layers[index_of(id)]; }
  // Indices of conv3d / linear layers in declaration order.
  std::vector<std::size_t> compute_layers() const;
  // Index of the layer producing class scores (the last compute layer).
  std::size_t head_index() const;
};

// Validates the graph and fills in_channels / out_shape for every layer.
// Layers must reference only earlier layers (or "input"). Errors name the
// offending layer.
void infer_shapes(NetSpec& spec);

NetSpec parse_netspec(std::string_view json_text);
NetSpec load_netspec(const std::filesystem::path& path);
std::string netspec_to_json(const NetSpec& spec);

struct LayerParams {
  std::string layer;
  Tensor weight;              // conv: [out, in, kd, kh, kw]; linear: [out, in]
  std::optional<Tensor> bias; // [out]
};

struct ParamSet {
  std::vector<LayerParams> layers;  // compute layers in declaration order

  const LayerParams& at(std::string_view layer) const;
  LayerParams& at(std::string_view layer);
  std::size_t count() const;  // total scalars
};

enum class InitScheme { glorot, orthogonal };
InitScheme parse_init(std::string_view name);

ParamSet init_params(const NetSpec& spec, InitScheme scheme, std::uint64_t seed);

// Provenance of one channel: the compute layer (or the network input) that
// produced it, and its index there.
struct ChannelRef {
  static constexpr std::size_t kNetworkInput = static_cast<std::size_t>(-1);
  std::size_t layer = kNetworkInput;
  std::size_t channel = 0;
  bool operator==(const ChannelRef&) const = default;
};

// An input channel slot of a compute layer.
struct ConsumerSlot {
  std::size_t layer = 0;
  std::size_t input_channel = 0;
  bool operator==(const ConsumerSlot&) const = default;
};

/// Channel wiring between compute layers. Pass-through layers (relu, pooling,
/// upsampling, softmax) keep channel identity; concat shifts later inputs by
/// the channel counts of earlier ones.
class DependencyMap {
 public:
  static DependencyMap build(const NetSpec& spec);

  // Channel provenance of every output channel of `layer`.
  const std::vector<ChannelRef>& sources(std::size_t layer) const { return sources_.at(layer); }
  // Provenance of each input channel of a compute layer.
  const std::vector<ChannelRef>& inputs_of(std::size_t compute_layer) const { return inputs_.at(compute_layer); }
  // Input slots fed by output channel `channel` of compute layer `producer`.
  const std::vector<ConsumerSlot>& consumers(std::size_t producer, std::size_t channel) const;

 private:
  std::vector<std::vector<ChannelRef>> sources_;
  std::vector<std::vector<ChannelRef>> inputs_;
  std::map<std::pair<std::size_t, std::size_t>, std::vector<ConsumerSlot>> consumers_;
};

// Autodiff handles for a ParamSet, keyed by layer id.
struct ParamVars {
  struct Entry {
    ad::Var weight;
    ad::Var bias;
  };
  std::map<std::string, Entry, std::less<>> layers;
  std::vector<std::string> order;  // declaration order of the source ParamSet

  static ParamVars from(const ParamSet& params, bool trainable);
  ParamSet to_params() const;
  std::vector<ad::Var> all() const;  // declaration order, weight before bias
};

enum class MaskPlacement { pre_activation, post_activation };

struct ForwardOptions {
  // Per compute layer channel scales (neuron masks), shape [out_channels].
  std::map<std::string, ad::Var, std::less<>> neuron_masks;
  MaskPlacement placement = MaskPlacement::post_activation;
  // Explicit parameter masks: the layer uses mask ⊙ weight (and mask ⊙ bias).
  std::map<std::string, ad::Var, std::less<>> weight_masks;
  std::map<std::string, ad::Var, std::less<>> bias_masks;
  // Compute layer outputs replaced by fixed tensors (used for wiring probes).
  std::map<std::string, Tensor, std::less<>> frozen_outputs;
  // Apply the softmax head; otherwise the class scores are returned as logits.
  bool apply_softmax = false;
};

struct ForwardResult {
  ad::Var output;                    // [N, classes, D, H, W] (spatial 1 for classifiers)
  std::vector<ad::Var> activations;  // per layer, in declaration order
};

// Evaluates the graph on a batch [N, C, D, H, W]. Linear layers consume a
// [N, C, 1, 1, 1] activation and produce [N, out, 1, 1, 1].
ForwardResult forward(const NetSpec& spec, const ParamVars& params, const ad::Var& input,
                      const ForwardOptions& options = {});

}  // namespace ranp

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "ranp/netgraph.hpp"

namespace ranp {

struct MaskSet;

enum class ResourceKind { flops, memory, none };
ResourceKind parse_resource(std::string_view name);  // "flops" | "mem" | "memory" | "none"
const char* resource_name(ResourceKind kind);

// Per-layer cost:
//   FLOPs  = (2 * kd * kh * kw * C_in - 1 + [bias]) * C_out * D' * H' * W'
//   memory = C_out * D' * H' * W'  (output elements, batch excluded)
// Non-compute layers cost 0 FLOPs and their output elements in memory.
std::uint64_t layer_flops(const LayerSpec& layer);
std::uint64_t layer_mem(const LayerSpec& layer);
std::uint64_t layer_params(const LayerSpec& layer);

struct LayerResources {
  std::string layer;
  LayerKind kind = LayerKind::relu;
  bool compute = false;
  int in_channels = 0;
  int out_channels = 0;  // channels of the layer output after masking
  std::uint64_t flops = 0;
  std::uint64_t mem = 0;
  std::uint64_t params = 0;
};

struct ResourceProfile {
  std::vector<LayerResources> layers;  // every layer, declaration order
  std::uint64_t total_flops = 0;
  std::uint64_t total_mem = 0;
  std::uint64_t total_params = 0;

  double memory_mb() const { return static_cast<double>(total_mem) * 4.0 / (1024.0 * 1024.0); }
  double params_mb() const { return static_cast<double>(total_params) * 4.0 / (1024.0 * 1024.0); }
  double gflops() const { return static_cast<double>(total_flops) * 1e-9; }

  const LayerResources& at(std::string_view layer) const;
  // tau_l for compute layers, declaration order. kind must not be none.
  std::vector<double> tau(ResourceKind kind) const;
};

// With masks, producer output channels and consumer input channels shrink to
// the retained neurons (wiring resolved through the DependencyMap).
ResourceProfile profile(const NetSpec& spec, const MaskSet* masks = nullptr);

enum class TauNormalization { max, mean, sum };
TauNormalization parse_tau_normalization(std::string_view name);

// tau divided by max (default), mean, or sum over the compute layers.
std::vector<double> normalized_tau(const ResourceProfile& profile, ResourceKind kind,
                                   TauNormalization norm = TauNormalization::max);

// 100 * (1 - reduced / full); 0 when full is 0.
double reduction_percent(double full, double reduced);

std::string profile_table(const ResourceProfile& profile, const ResourceProfile* full = nullptr);
std::string profile_csv(const ResourceProfile& profile);
std::string profile_json(const ResourceProfile& profile, const ResourceProfile* full = nullptr);

}  // namespace ranp

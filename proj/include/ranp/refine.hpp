#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ranp/mask_search.hpp"
#include "ranp/netgraph.hpp"

namespace ranp {

/// A physically smaller network: pruned filters and the input-channel slices
/// they fed are gone.
struct SlimBuild {
  NetSpec spec;
  ParamSet params;
  // Per compute layer: old output channel -> new index, -1 when pruned.
  std::map<std::string, std::vector<int>, std::less<>> channel_maps;
};

// Copies retained filters, dropping pruned input channels (through concat
// offsets) and biases. Protected layers stay full width. Throws
// InfeasibleError naming the layers that would be empty.
SlimBuild refine(const NetSpec& spec, const ParamSet& params, const MaskSet& masks, const DependencyMap& dep);

// Same layers and weights, shapes re-inferred for a new spatial input size.
// Throws ShapeError when an extent underflows.
SlimBuild rebuild_at(const SlimBuild& slim, const std::array<int, 3>& spatial);

// Carries masks to a structurally identical network by layer id. Target
// protected layers become all-ones at the target width.
MaskSet transfer_masks(const MaskSet& masks, const NetSpec& target);

// Forward options that multiply each compute layer's post-activation output
// by its 0/1 mask, i.e. the masked full network.
ForwardOptions masked_forward_options(const MaskSet& masks);

// Parameter blob: "RANPPAR1", u32 layer count, then per layer in declared
// order: u32 id length, id bytes, u32 rank, u64 extents, u8 has_bias,
// weight values (f64, row-major), bias values (f64). Little-endian.
void save_params(const ParamSet& params, const std::filesystem::path& path);
ParamSet load_params(const std::filesystem::path& path, const NetSpec& spec);

// Writes <stem>.json and <stem>.params.
void save_slim(const SlimBuild& slim, const std::filesystem::path& stem);
SlimBuild load_slim(const std::filesystem::path& stem);

}  // namespace ranp

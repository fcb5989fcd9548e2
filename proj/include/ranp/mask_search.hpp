#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "ranp/importance.hpp"
#include "ranp/netgraph.hpp"

namespace ranp {

struct LayerMask {
  std::string layer;
  std::vector<std::uint8_t> keep;  // 1 = retained neuron
  bool is_protected = false;

  std::size_t retained() const;
};

/// Binary neuron masks over every compute layer, declaration order.
struct MaskSet {
  std::vector<LayerMask> layers;
  double sparsity_achieved = 0.0;  // pruned / candidate neurons (protected layers excluded)

  const LayerMask* find(std::string_view layer) const;
  const LayerMask& at(std::string_view layer) const;
  bool feasible() const { return empty_layers().empty(); }
  std::vector<std::string> empty_layers() const;
  void recompute_sparsity();

  static MaskSet all_ones(const NetSpec& spec);
};

// Throws InfeasibleError listing the empty layers.
void require_feasible(const MaskSet& masks);

// Keeps r = n - floor(kappa * n) of the n pooled non-protected neurons with the
// highest scores. Ties at the threshold go to the lower (layer, neuron) index.
// Protected layers stay all-ones. kappa must lie in [0, 1).
MaskSet select_topk(const ImportanceMap& scores, double kappa);

// Random NP: shuffles the non-protected pool and keeps the same r.
MaskSet random_masks(const NetSpec& spec, double kappa, std::uint64_t seed);

// Layer-wise NP: each non-protected layer keeps ceil((1 - kappa) * N_l) of its
// own top scorers, at least one.
MaskSet layerwise_masks(const ImportanceMap& scores, double kappa);

// Number of neurons kept out of n at sparsity kappa.
std::size_t retained_count(std::size_t n, double kappa);
void check_kappa(double kappa);

struct SearchConfig {
  double kappa_min = 0.0;
  double kappa_max = 1.0;
  double delta = 1e-4;
};

struct SearchResult {
  double kappa = 0.0;  // largest probed sparsity found feasible
  int iterations = 0;
};

// Bisection for the largest feasible sparsity. `feasible_at` must be monotone
// (true up to some boundary, false after). Throws InfeasibleError if
// kappa_min itself is infeasible.
SearchResult search_max_sparsity(const std::function<bool(double)>& feasible_at, const SearchConfig& config = {});

std::string masks_to_json(const MaskSet& masks);
// Validates layer ids and widths against spec; protection flags come from spec.
MaskSet masks_from_json(std::string_view text, const NetSpec& spec);

}  // namespace ranp

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "ranp/harness.hpp"
#include "ranp/importance.hpp"
#include "ranp/mask_search.hpp"
#include "ranp/resources.hpp"
#include "ranp/reweight.hpp"

namespace ranp {

enum class PruneMode { vanilla, weighted, ranp_f, ranp_m, random, layerwise };
PruneMode parse_prune_mode(std::string_view name);
const char* prune_mode_name(PruneMode mode);

struct PruneConfig {
  PruneMode mode = PruneMode::ranp_f;
  ImportanceConfig importance{};
  double lambda = 11.0;
  TauNormalization normalization = TauNormalization::max;
  std::uint64_t seed = 0;  // random-mode shuffle
};

// All score stages for one network, computed once and reused for every kappa.
struct ScoreStages {
  ImportanceMap raw;
  ImportanceMap weighted;
  ImportanceMap reweighted;
  std::vector<std::string> warnings;
};

// Reweighting uses the resource matching the mode (FLOPs for ranp-f, memory
// for ranp-m); other modes leave the reweighted stage equal to the weighted one.
ScoreStages score_stages(const NetSpec& spec, const ParamSet& params, std::span<const Batch> batches,
                         const PruneConfig& config);

class Pruner {
 public:
  Pruner(const NetSpec& spec, ScoreStages stages, PruneConfig config);

  MaskSet masks_at(double kappa) const;
  bool feasible_at(double kappa) const { return masks_at(kappa).feasible(); }
  SearchResult search(const SearchConfig& config = {}) const;

  const ScoreStages& stages() const noexcept { return stages_; }
  // The stage the mode selects from.
  const ImportanceMap& selection_scores() const;

 private:
  const NetSpec* spec_;
  ScoreStages stages_;
  PruneConfig config_;
};

// Pruning data drawn from the synthetic task that matches the network's
// input shape and head.
std::vector<Batch> pruning_batches(const NetSpec& spec, std::size_t batch_count, std::size_t batch_size,
                                   std::uint64_t seed);
SynthTask task_for_network(const NetSpec& spec, int samples, std::uint64_t seed);

}  // namespace ranp

#include "ranp/pipeline.hpp"

#include "ranp/errors.hpp"

namespace ranp {

PruneMode parse_prune_mode(std::string_view name) {
  if (name == "vanilla") return PruneMode::vanilla;
  if (name == "weighted") return PruneMode::weighted;
  if (name == "ranp-f") return PruneMode::ranp_f;
  if (name == "ranp-m") return PruneMode::ranp_m;
  if (name == "random") return PruneMode::random;
  if (name == "layerwise" || name == "layer-wise") return PruneMode::layerwise;
  throw ContractError("unknown mode '" + std::string(name) +
                      "' (expected vanilla, weighted, ranp-f, ranp-m, random, or layerwise)");
}

const char* prune_mode_name(PruneMode mode) {
  switch (mode) {
    case PruneMode::vanilla: return "vanilla";
    case PruneMode::weighted: return "weighted";
    case PruneMode::ranp_f: return "ranp-f";
    case PruneMode::ranp_m: return "ranp-m";
    case PruneMode::random: return "random";
    case PruneMode::layerwise: return "layerwise";
  }
  return "?";
}

ScoreStages score_stages(const NetSpec& spec, const ParamSet& params, std::span<const Batch> batches,
                         const PruneConfig& config) {
  ScoreStages s;
  s.raw = compute_importance(spec, params, batches, config.importance);
  s.weighted = weight_layers(s.raw, &s.warnings);
  ReweightConfig rc{config.lambda, ResourceKind::none, config.normalization};
  if (config.mode == PruneMode::ranp_f) rc.resource = ResourceKind::flops;
  if (config.mode == PruneMode::ranp_m) rc.resource = ResourceKind::memory;
  s.reweighted = reweight_resources(s.weighted, profile(spec), rc);
  return s;
}

Pruner::Pruner(const NetSpec& spec, ScoreStages stages, PruneConfig config)
    : spec_(&spec), stages_(std::move(stages)), config_(config) {}

const ImportanceMap& Pruner::selection_scores() const {
  switch (config_.mode) {
    case PruneMode::vanilla:
    case PruneMode::layerwise:
    case PruneMode::random: return stages_.raw;
    case PruneMode::weighted: return stages_.weighted;
    case PruneMode::ranp_f:
    case PruneMode::ranp_m: return stages_.reweighted;
  }
  return stages_.raw;
}

MaskSet Pruner::masks_at(double kappa) const {
  switch (config_.mode) {
    case PruneMode::random: return random_masks(*spec_, kappa, config_.seed);
    case PruneMode::layerwise: return layerwise_masks(stages_.raw, kappa);
    default: return select_topk(selection_scores(), kappa);
  }
}

SearchResult Pruner::search(const SearchConfig& config) const {
  return search_max_sparsity([this](double kappa) { return feasible_at(kappa); }, config);
}

SynthTask task_for_network(const NetSpec& spec, int samples, std::uint64_t seed) {
  SynthTask task;
  task.kind = task_for(spec);
  task.volume_shape = spec.input_shape;
  task.classes = spec.class_count;
  task.samples = samples;
  task.seed = seed;
  return task;
}

std::vector<Batch> pruning_batches(const NetSpec& spec, std::size_t batch_count, std::size_t batch_size,
                                   std::uint64_t seed) {
  if (batch_count == 0) throw ContractError("at least one pruning batch is required");
  Dataset data = gen_synth(task_for_network(spec, static_cast<int>(batch_count * batch_size), seed));
  return make_batches(data, batch_size, batch_count);
}

}  // namespace ranp

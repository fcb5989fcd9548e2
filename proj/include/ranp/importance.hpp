#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ranp/harness.hpp"
#include "ranp/netgraph.hpp"

namespace ranp {

// MPMG: sum of |parameter mask gradients| per neuron.
// MNMG: |sum of parameter mask gradients| per neuron, which equals the
// magnitude of a neuron mask gradient for ReLU networks.
enum class ImportanceMode { mpmg, mnmg };
enum class Aggregator { sum, mean, max };
enum class ScoreStage { raw, weighted, reweighted };

ImportanceMode parse_importance_mode(std::string_view name);
Aggregator parse_aggregator(std::string_view name);
ScoreStage parse_stage(std::string_view name);
const char* stage_name(ScoreStage stage);

struct LayerScores {
  std::string layer;
  std::vector<double> scores;  // one per output channel
  bool is_protected = false;

  double mean() const;
};

struct ImportanceMap {
  ScoreStage stage = ScoreStage::raw;
  std::vector<LayerScores> layers;  // compute layers, declaration order

  const LayerScores& at(std::string_view layer) const;
  std::size_t neuron_count(bool include_protected = false) const;
};

// Weight-shaped mask gradients of one compute layer: grad ⊙ weight (and
// grad ⊙ bias when the layer has a bias).
struct LayerGradient {
  std::string layer;
  Tensor weight;
  std::optional<Tensor> bias;
  bool is_protected = false;
};

using MaskGradients = std::vector<LayerGradient>;

// d L(c ⊙ w) / dc at c = 1, computed as (dL/dw) ⊙ w without mask variables.
MaskGradients mask_gradients(const NetSpec& spec, const ParamSet& params, const Batch& batch,
                             const LossConfig& loss = {});

class GradAccumulator {
 public:
  explicit GradAccumulator(ImportanceMode mode) : mode_(mode) {}

  // MPMG adds |g|, MNMG adds g.
  void accumulate(const MaskGradients& grads);

  ImportanceMode mode() const noexcept { return mode_; }
  int batch_count() const noexcept { return batches_; }
  const MaskGradients& totals() const noexcept { return totals_; }

 private:
  ImportanceMode mode_;
  int batches_ = 0;
  MaskGradients totals_;
};

// Averages over batches, then aggregates each neuron's parameter group
// (weights across all input channels and taps, plus its bias).
ImportanceMap vanilla_importance(const GradAccumulator& acc, Aggregator aggregator = Aggregator::sum);

struct ImportanceConfig {
  ImportanceMode mode = ImportanceMode::mpmg;
  Aggregator aggregator = Aggregator::sum;
  LossConfig loss{};
};

ImportanceMap compute_importance(const NetSpec& spec, const ParamSet& params, std::span<const Batch> batches,
                                 const ImportanceConfig& config = {});

// {"stage": "...", "layers": {"id": [s_1, ...], ...}} with layers in declaration order.
std::string importance_to_json(const ImportanceMap& map);
ImportanceMap importance_from_json(std::string_view text);
// Long format for plotting: stage,layer_index,layer,neuron,score,layer_mean.
std::string importance_to_csv(std::span<const ImportanceMap> stages);

}  // namespace ranp

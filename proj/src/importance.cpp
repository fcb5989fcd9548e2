#include "ranp/importance.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "ranp/errors.hpp"

namespace ranp {

ImportanceMode parse_importance_mode(std::string_view name) {
  if (name == "mpmg") return ImportanceMode::mpmg;
  if (name == "mnmg") return ImportanceMode::mnmg;
  throw ContractError("unknown importance mode '" + std::string(name) + "' (expected mpmg or mnmg)");
}

Aggregator parse_aggregator(std::string_view name) {
  if (name == "sum") return Aggregator::sum;
  if (name == "mean") return Aggregator::mean;
  if (name == "max") return Aggregator::max;
  throw ContractError("unknown aggregator '" + std::string(name) + "' (expected sum, mean, or max)");
}

ScoreStage parse_stage(std::string_view name) {
  if (name == "raw") return ScoreStage::raw;
  if (name == "weighted") return ScoreStage::weighted;
  if (name == "reweighted") return ScoreStage::reweighted;
  throw ParseError("unknown importance stage '" + std::string(name) + "'");
}

const char* stage_name(ScoreStage stage) {
  switch (stage) {
    case ScoreStage::raw: return "raw";
    case ScoreStage::weighted: return "weighted";
    case ScoreStage::reweighted: return "reweighted";
  }
  return "?";
}

double LayerScores::mean() const {
  if (scores.empty()) return 0.0;
  return std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
}

const LayerScores& ImportanceMap::at(std::string_view layer) const {
  for (const auto& l : layers)
    if (l.layer == layer) return l;
  throw ContractError("importance map has no layer '" + std::string(layer) + "'");
}

std::size_t ImportanceMap::neuron_count(bool include_protected) const {
  std::size_t n = 0;
  for (const auto& l : layers)
    if (include_protected || !l.is_protected) n += l.scores.size();
  return n;
}

MaskGradients mask_gradients(const NetSpec& spec, const ParamSet& params, const Batch& batch, const LossConfig& loss) {
  ParamVars vars = ParamVars::from(params, /*trainable=*/true);
  ad::Var input = ad::Var::constant(batch.inputs);
  ForwardResult out = forward(spec, vars, input);
  LossValue value = compute_loss(out.output, batch.targets, loss);
  ad::backward(value.total);

  MaskGradients grads;
  for (std::size_t li : spec.compute_layers()) {
    const LayerSpec& layer = spec.layers[li];
    const auto& entry = vars.layers.at(layer.id);
    LayerGradient g{layer.id, entry.weight.grad(), std::nullopt, layer.is_protected};
    const auto& w = entry.weight.value();
    for (std::size_t i = 0; i < g.weight.size(); ++i) g.weight[i] *= w[i];
    if (entry.bias) {
      Tensor b = entry.bias.grad();
      for (std::size_t i = 0; i < b.size(); ++i) b[i] *= entry.bias.value()[i];
      g.bias = std::move(b);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

void GradAccumulator::accumulate(const MaskGradients& grads) {
  auto fold = [this](Tensor& into, const Tensor& from) {
    if (into.shape() != from.shape())
      throw ShapeError("accumulate: gradient shape " + to_string(from.shape()) + " does not match " +
                       to_string(into.shape()));
    for (std::size_t i = 0; i < into.size(); ++i) into[i] += mode_ == ImportanceMode::mpmg ? std::abs(from[i]) : from[i];
  };
  if (batches_ == 0) {
    totals_.clear();
    for (const auto& g : grads) {
      LayerGradient zero{g.layer, Tensor(g.weight.shape(), 0.0), std::nullopt, g.is_protected};
      if (g.bias) zero.bias = Tensor(g.bias->shape(), 0.0);
      totals_.push_back(std::move(zero));
    }
  } else if (grads.size() != totals_.size()) {
    throw ShapeError("accumulate: expected gradients for " + std::to_string(totals_.size()) + " layers, got " +
                     std::to_string(grads.size()));
  }
  for (std::size_t l = 0; l < grads.size(); ++l) {
    if (grads[l].layer != totals_[l].layer)
      throw ShapeError("accumulate: layer '" + grads[l].layer + "' where '" + totals_[l].layer + "' was expected");
    fold(totals_[l].weight, grads[l].weight);
    if (grads[l].bias.has_value() != totals_[l].bias.has_value())
      throw ShapeError("accumulate: bias presence differs for layer '" + grads[l].layer + "'");
    if (grads[l].bias) fold(*totals_[l].bias, *grads[l].bias);
  }
  ++batches_;
}

ImportanceMap vanilla_importance(const GradAccumulator& acc, Aggregator aggregator) {
  if (acc.batch_count() == 0) throw ContractError("vanilla_importance: no batches accumulated");
  const double batches = static_cast<double>(acc.batch_count());
  ImportanceMap map;
  map.stage = ScoreStage::raw;
  std::vector<double> group;
  for (const auto& layer : acc.totals()) {
    const std::size_t neurons = layer.weight.dim(0);
    const std::size_t per_neuron = layer.weight.size() / neurons;
    LayerScores scores{layer.layer, std::vector<double>(neurons, 0.0), layer.is_protected};
    for (std::size_t u = 0; u < neurons; ++u) {
      group.assign(layer.weight.data().begin() + static_cast<std::ptrdiff_t>(u * per_neuron),
                   layer.weight.data().begin() + static_cast<std::ptrdiff_t>((u + 1) * per_neuron));
      if (layer.bias) group.push_back((*layer.bias)[u]);
      for (double& v : group) v /= batches;
      double value = 0.0;
      switch (aggregator) {
        case Aggregator::sum: value = std::accumulate(group.begin(), group.end(), 0.0); break;
        case Aggregator::mean:
          value = std::accumulate(group.begin(), group.end(), 0.0) / static_cast<double>(group.size());
          break;
        case Aggregator::max: value = *std::max_element(group.begin(), group.end()); break;
      }
      scores.scores[u] = std::abs(value);
    }
    map.layers.push_back(std::move(scores));
  }
  return map;
}

ImportanceMap compute_importance(const NetSpec& spec, const ParamSet& params, std::span<const Batch> batches,
                                 const ImportanceConfig& config) {
  if (batches.empty()) throw ContractError("compute_importance: at least one pruning batch is required");
  GradAccumulator acc(config.mode);
  for (const Batch& batch : batches) acc.accumulate(mask_gradients(spec, params, batch, config.loss));
  return vanilla_importance(acc, config.aggregator);
}

std::string importance_to_json(const ImportanceMap& map) {
  nlohmann::ordered_json doc;
  doc["stage"] = stage_name(map.stage);
  doc["layers"] = nlohmann::ordered_json::object();
  doc["protected"] = nlohmann::ordered_json::array();
  for (const auto& l : map.layers) {
    doc["layers"][l.layer] = l.scores;
    if (l.is_protected) doc["protected"].push_back(l.layer);
  }
  return doc.dump(2);
}

ImportanceMap importance_from_json(std::string_view text) {
  try {
    auto doc = nlohmann::ordered_json::parse(text);
    ImportanceMap map;
    map.stage = parse_stage(doc.at("stage").get<std::string>());
    std::vector<std::string> protected_layers;
    if (doc.contains("protected")) protected_layers = doc["protected"].get<std::vector<std::string>>();
    for (const auto& [id, values] : doc.at("layers").items()) {
      LayerScores l{id, values.get<std::vector<double>>(), false};
      l.is_protected = std::find(protected_layers.begin(), protected_layers.end(), id) != protected_layers.end();
      for (double s : l.scores)
        if (!(s >= 0.0)) throw ParseError("importance for '" + id + "' has a negative or NaN score");
      map.layers.push_back(std::move(l));
    }
    return map;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("importance dump: ") + e.what());
  }
}

std::string importance_to_csv(std::span<const ImportanceMap> stages) {
  std::ostringstream out;
  out.precision(17);
  out << "stage,layer_index,layer,neuron,score,layer_mean\n";
  for (const auto& map : stages)
    for (std::size_t li = 0; li < map.layers.size(); ++li) {
      const auto& l = map.layers[li];
      const double m = l.mean();
      for (std::size_t u = 0; u < l.scores.size(); ++u)
        out << stage_name(map.stage) << ',' << li << ',' << l.layer << ',' << u << ',' << l.scores[u] << ',' << m
            << '\n';
    }
  return out.str();
}

}  // namespace ranp

#include "ranp/reweight.hpp"

#include <algorithm>
#include <cmath>

#include "ranp/errors.hpp"

namespace ranp {

ImportanceMap weight_layers(const ImportanceMap& raw, std::vector<std::string>* warnings) {
  if (raw.layers.empty()) throw ContractError("weight_layers: empty importance map");
  double top = 0.0;
  for (const auto& l : raw.layers) {
    if (l.scores.empty()) throw ContractError("weight_layers: layer '" + l.layer + "' has no neurons");
    top = std::max(top, l.mean());
  }
  if (!(top > 0.0)) throw ContractError("weight_layers: every layer has zero mean importance");

  ImportanceMap out = raw;
  out.stage = ScoreStage::weighted;
  for (auto& l : out.layers) {
    const double m = l.mean();
    if (m == 0.0) {
      if (warnings) warnings->push_back("layer '" + l.layer + "' has zero mean importance; weighting factor set to 1");
      continue;
    }
    const double factor = top / m;
    for (double& s : l.scores) s *= factor;
  }
  return out;
}

std::vector<double> reweight_factors(const std::vector<double>& tau, double lambda) {
  if (lambda < 0.0) throw ContractError("reweight: lambda must be non-negative");
  if (tau.empty()) return {};
  // Shift by the smallest tau so the largest exponent is 0.
  const double lo = *std::min_element(tau.begin(), tau.end());
  std::vector<double> weights(tau.size());
  double total = 0.0;
  for (std::size_t i = 0; i < tau.size(); ++i) {
    weights[i] = std::exp(-(tau[i] - lo));
    total += weights[i];
  }
  for (double& w : weights) w = 1.0 + lambda * (w / total);
  return weights;
}

ImportanceMap reweight_resources(const ImportanceMap& weighted, const ResourceProfile& profile,
                                 const ReweightConfig& config) {
  if (config.lambda < 0.0) throw ContractError("reweight: lambda must be non-negative");
  ImportanceMap out = weighted;
  out.stage = ScoreStage::reweighted;
  if (config.resource == ResourceKind::none) return out;

  const std::vector<double> tau_all = normalized_tau(profile, config.resource, config.normalization);
  std::vector<std::string> compute_ids;
  for (const auto& r : profile.layers)
    if (r.compute) compute_ids.push_back(r.layer);

  std::vector<double> tau;
  for (const auto& l : weighted.layers) {
    auto it = std::find(compute_ids.begin(), compute_ids.end(), l.layer);
    if (it == compute_ids.end()) throw ContractError("reweight: layer '" + l.layer + "' is missing from the profile");
    tau.push_back(tau_all[static_cast<std::size_t>(it - compute_ids.begin())]);
  }
  if (config.lambda == 0.0) return out;

  const std::vector<double> factors = reweight_factors(tau, config.lambda);
  for (std::size_t i = 0; i < out.layers.size(); ++i)
    for (double& s : out.layers[i].scores) s *= factors[i];
  return out;
}

}  // namespace ranp

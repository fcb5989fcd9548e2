#pragma once

#include <string>
#include <vector>

#include "ranp/importance.hpp"
#include "ranp/resources.hpp"

namespace ranp {

// Scales each layer by max_k(mean_k) / mean_l so every layer shares the
// largest layer mean. A layer whose mean is zero keeps factor 1 and a warning
// is appended to `warnings` (when given).
ImportanceMap weight_layers(const ImportanceMap& raw, std::vector<std::string>* warnings = nullptr);

struct ReweightConfig {
  double lambda = 11.0;
  ResourceKind resource = ResourceKind::flops;
  TauNormalization normalization = TauNormalization::max;
};

// 1 + lambda * softmax(-tau) over the given (already normalized) tau values.
std::vector<double> reweight_factors(const std::vector<double>& tau, double lambda);

// Multiplies layer l by 1 + lambda * softmax(-tau)_l. With resource == none
// the scores pass through unchanged (only the stage tag moves).
ImportanceMap reweight_resources(const ImportanceMap& weighted, const ResourceProfile& profile,
                                 const ReweightConfig& config);

}  // namespace ranp

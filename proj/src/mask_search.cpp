#include "ranp/mask_search.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <tuple>

#include "json.hpp"
#include "ranp/errors.hpp"

namespace ranp {

std::size_t LayerMask::retained() const {
  return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), std::uint8_t{1}));
}

const LayerMask* MaskSet::find(std::string_view layer) const {
  for (const auto& m : layers)
    if (m.layer == layer) return &m;
  return nullptr;
}

const LayerMask& MaskSet::at(std::string_view layer) const {
  if (const LayerMask* m = find(layer)) return *m;
  throw ContractError("mask set has no layer '" + std::string(layer) + "'");
}

std::vector<std::string> MaskSet::empty_layers() const {
  std::vector<std::string> out;
  for (const auto& m : layers)
    if (m.retained() == 0) out.push_back(m.layer);
  return out;
}

void MaskSet::recompute_sparsity() {
  std::size_t total = 0, pruned = 0;
  for (const auto& m : layers) {
    if (m.is_protected) continue;
    total += m.keep.size();
    pruned += m.keep.size() - m.retained();
  }
  sparsity_achieved = total == 0 ? 0.0 : static_cast<double>(pruned) / static_cast<double>(total);
}

MaskSet MaskSet::all_ones(const NetSpec& spec) {
  MaskSet masks;
  for (std::size_t li : spec.compute_layers()) {
    const LayerSpec& layer = spec.layers[li];
    masks.layers.push_back(
        {layer.id, std::vector<std::uint8_t>(static_cast<std::size_t>(layer.out_channels), 1), layer.is_protected});
  }
  return masks;
}

void require_feasible(const MaskSet& masks) {
  auto empty = masks.empty_layers();
  if (empty.empty()) return;
  std::string list;
  for (const auto& id : empty) list += (list.empty() ? "" : ", ") + id;
  throw InfeasibleError("infeasible masks: no neurons left in " + list, std::move(empty));
}

void check_kappa(double kappa) {
  if (!(kappa >= 0.0 && kappa < 1.0))
    throw ContractError("sparsity must lie in [0, 1), got " + std::to_string(kappa));
}

std::size_t retained_count(std::size_t n, double kappa) {
  check_kappa(kappa);
  const auto pruned = static_cast<std::size_t>(std::floor(kappa * static_cast<double>(n)));
  return n - std::min(pruned, n);
}

namespace {

struct Candidate {
  double score;
  std::size_t layer;
  std::size_t neuron;
};

// Descending score, then ascending (layer, neuron).
bool ranks_before(const Candidate& a, const Candidate& b) {
  if (a.score != b.score) return a.score > b.score;
  return std::tie(a.layer, a.neuron) < std::tie(b.layer, b.neuron);
}

MaskSet empty_masks_like(const ImportanceMap& scores) {
  MaskSet masks;
  for (const auto& l : scores.layers) {
    for (double s : l.scores)
      if (!(s >= 0.0)) throw ContractError("scores for '" + l.layer + "' must be non-negative and finite");
    masks.layers.push_back({l.layer, std::vector<std::uint8_t>(l.scores.size(), l.is_protected ? 1 : 0), l.is_protected});
  }
  return masks;
}

}  // namespace

MaskSet select_topk(const ImportanceMap& scores, double kappa) {
  check_kappa(kappa);
  MaskSet masks = empty_masks_like(scores);
  std::vector<Candidate> pool;
  for (std::size_t li = 0; li < scores.layers.size(); ++li) {
    const auto& l = scores.layers[li];
    if (l.is_protected) continue;
    for (std::size_t u = 0; u < l.scores.size(); ++u) pool.push_back({l.scores[u], li, u});
  }
  const std::size_t keep = retained_count(pool.size(), kappa);
  std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(keep), pool.end(), ranks_before);
  for (std::size_t i = 0; i < keep; ++i) masks.layers[pool[i].layer].keep[pool[i].neuron] = 1;
  masks.recompute_sparsity();
  return masks;
}

MaskSet random_masks(const NetSpec& spec, double kappa, std::uint64_t seed) {
  check_kappa(kappa);
  MaskSet masks = MaskSet::all_ones(spec);
  std::vector<std::pair<std::size_t, std::size_t>> pool;
  for (std::size_t li = 0; li < masks.layers.size(); ++li) {
    auto& m = masks.layers[li];
    if (m.is_protected) continue;
    for (std::size_t u = 0; u < m.keep.size(); ++u) {
      pool.emplace_back(li, u);
      m.keep[u] = 0;
    }
  }
  const std::size_t keep = retained_count(pool.size(), kappa);
  std::mt19937_64 rng(seed);
  std::shuffle(pool.begin(), pool.end(), rng);
  for (std::size_t i = 0; i < keep; ++i) masks.layers[pool[i].first].keep[pool[i].second] = 1;
  masks.recompute_sparsity();
  return masks;
}

MaskSet layerwise_masks(const ImportanceMap& scores, double kappa) {
  check_kappa(kappa);
  MaskSet masks = empty_masks_like(scores);
  for (std::size_t li = 0; li < scores.layers.size(); ++li) {
    const auto& l = scores.layers[li];
    if (l.is_protected) continue;
    const double share = (1.0 - kappa) * static_cast<double>(l.scores.size());
    std::size_t keep = static_cast<std::size_t>(std::ceil(share - 1e-9));
    keep = std::clamp<std::size_t>(keep, 1, l.scores.size());
    std::vector<Candidate> pool;
    for (std::size_t u = 0; u < l.scores.size(); ++u) pool.push_back({l.scores[u], li, u});
    std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(keep), pool.end(), ranks_before);
    for (std::size_t i = 0; i < keep; ++i) masks.layers[li].keep[pool[i].neuron] = 1;
  }
  masks.recompute_sparsity();
  return masks;
}

SearchResult search_max_sparsity(const std::function<bool(double)>& feasible_at, const SearchConfig& config) {
  if (!(config.kappa_min < config.kappa_max) || config.kappa_min < 0.0 || config.kappa_max > 1.0)
    throw ContractError("search: need 0 <= kappa_min < kappa_max <= 1");
  if (!(config.delta > 0.0)) throw ContractError("search: delta must be positive");
  if (!feasible_at(config.kappa_min))
    throw InfeasibleError("search: network is infeasible already at kappa_min = " + std::to_string(config.kappa_min),
                          {});

  SearchResult result{config.kappa_min, 0};
  double lo = config.kappa_min;
  double hi = config.kappa_max;
  while (hi - lo > config.delta) {
    const double mid = 0.5 * (lo + hi);
    ++result.iterations;
    if (feasible_at(mid)) {
      lo = mid;
      result.kappa = mid;
    } else {
      hi = mid;
    }
  }
  return result;
}

std::string masks_to_json(const MaskSet& masks) {
  nlohmann::ordered_json doc = nlohmann::ordered_json::object();
  for (const auto& m : masks.layers) {
    std::vector<int> bits(m.keep.begin(), m.keep.end());
    doc[m.layer] = bits;
  }
  return doc.dump();
}

MaskSet masks_from_json(std::string_view text, const NetSpec& spec) {
  nlohmann::ordered_json doc;
  try {
    doc = nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("mask file: ") + e.what());
  }
  if (!doc.is_object()) throw ParseError("mask file must be a JSON object of layer id -> [0/1, ...]");
  for (const auto& [id, bits] : doc.items()) {
    std::size_t li = 0;
    try {
      li = spec.index_of(id);
    } catch (const ParseError&) {
      throw ParseError("mask file names unknown layer '" + id + "'");
    }
    if (!spec.layers[li].is_compute()) throw ParseError("mask file names non-compute layer '" + id + "'");
    (void)bits;
  }
  MaskSet masks = MaskSet::all_ones(spec);
  for (auto& m : masks.layers) {
    if (!doc.contains(m.layer)) continue;
    const auto& bits = doc[m.layer];
    if (!bits.is_array() || bits.size() != m.keep.size())
      throw ParseError("mask for '" + m.layer + "' must list " + std::to_string(m.keep.size()) + " entries");
    for (std::size_t u = 0; u < m.keep.size(); ++u) {
      const int b = bits[u].get<int>();
      if (b != 0 && b != 1) throw ParseError("mask for '" + m.layer + "' contains a value other than 0/1");
      m.keep[u] = static_cast<std::uint8_t>(b);
    }
    if (m.is_protected && m.retained() != m.keep.size())
      throw ParseError("protected layer '" + m.layer + "' must keep every neuron");
  }
  masks.recompute_sparsity();
  return masks;
}

}  // namespace ranp

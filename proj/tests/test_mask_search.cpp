#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "ranp/errors.hpp"
#include "ranp/mask_search.hpp"
#include "support.hpp"

using namespace ranp;
using namespace testing_support;

namespace {

ImportanceMap map_of(std::vector<std::vector<double>> layers, std::vector<bool> prot = {}) {
  ImportanceMap m;
  m.stage = ScoreStage::reweighted;
  for (std::size_t l = 0; l < layers.size(); ++l)
    m.layers.push_back({"L" + std::to_string(l), layers[l], l < prot.size() && prot[l]});
  return m;
}

// Brute-force oracle: enumerate all (layer, neuron) pairs, sort fully with the
// documented order, keep the first r.
std::vector<std::vector<std::uint8_t>> brute_force(const ImportanceMap& m, double kappa) {
  struct Item {
    double s;
    std::size_t l, u;
  };
  std::vector<Item> items;
  std::vector<std::vector<std::uint8_t>> keep;
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    keep.emplace_back(m.layers[l].scores.size(), m.layers[l].is_protected ? 1 : 0);
    if (m.layers[l].is_protected) continue;
    for (std::size_t u = 0; u < m.layers[l].scores.size(); ++u) items.push_back({m.layers[l].scores[u], l, u});
  }
  std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.s > b.s; });
  const std::size_t n = items.size();
  const std::size_t r = n - static_cast<std::size_t>(std::floor(kappa * static_cast<double>(n)));
  for (std::size_t i = 0; i < r; ++i) keep[items[i].l][items[i].u] = 1;
  return keep;
}

ImportanceMap random_small_map(Rng& rng, std::size_t total) {
  std::vector<std::vector<double>> layers;
  std::size_t left = total;
  while (left > 0) {
    const std::size_t w = std::min<std::size_t>(left, static_cast<std::size_t>(rng.integer(1, 4)));
    std::vector<double> s(w);
    // Few distinct values so ties are common.
    for (double& v : s) v = rng.integer(0, 3) * 0.5;
    layers.push_back(s);
    left -= w;
  }
  return map_of(layers);
}

}  // namespace

TEST_CASE("top-k worked examples") {
  MaskSet m = select_topk(map_of({{0.9, 0.1}, {0.5, 0.7}}), 0.5);
  CHECK(m.layers[0].keep == std::vector<std::uint8_t>{1, 0});
  CHECK(m.layers[1].keep == std::vector<std::uint8_t>{0, 1});
  CHECK(m.sparsity_achieved == 0.5);

  MaskSet zero = select_topk(map_of({{0.9, 0.1}, {0.5, 0.7}}), 0.0);
  for (const auto& l : zero.layers) CHECK(l.retained() == l.keep.size());

  MaskSet prot = select_topk(map_of({{0.9, 0.8}, {0.01, 0.02}}, {false, true}), 0.5);
  CHECK(prot.layers[1].keep == std::vector<std::uint8_t>{1, 1});
  CHECK(prot.layers[0].retained() == 1);

  CHECK_THROWS_AS(select_topk(map_of({{1.0}}), 1.0), ContractError);
  CHECK_THROWS_AS(select_topk(map_of({{1.0}}), -0.1), ContractError);
}

TEST_CASE("top-k matches a brute-force sorter for every small pool") {
  Rng rng(1);
  int cases = 0;
  for (std::size_t n = 1; n <= 12; ++n) {
    for (int draw = 0; draw < 25; ++draw) {
      ImportanceMap m = random_small_map(rng, n);
      // Every distinct retained count, plus random kappas in between.
      std::vector<double> kappas;
      for (std::size_t k = 0; k < n; ++k) kappas.push_back(static_cast<double>(k) / static_cast<double>(n));
      for (int i = 0; i < 4; ++i) kappas.push_back(rng.uniform(0.0, 0.999));
      for (double kappa : kappas) {
        MaskSet got = select_topk(m, kappa);
        auto want = brute_force(m, kappa);
        std::size_t retained = 0;
        double min_kept = INFINITY, max_pruned = -INFINITY;
        for (std::size_t l = 0; l < m.layers.size(); ++l) {
          CHECK(got.layers[l].keep == want[l]);
          retained += got.layers[l].retained();
          for (std::size_t u = 0; u < want[l].size(); ++u)
            (got.layers[l].keep[u] ? min_kept : max_pruned) =
                got.layers[l].keep[u] ? std::min(min_kept, m.layers[l].scores[u]) : std::max(max_pruned, m.layers[l].scores[u]);
        }
        CHECK(retained == n - static_cast<std::size_t>(std::floor(kappa * static_cast<double>(n))));
        CHECK(min_kept >= max_pruned);
        ++cases;
      }
    }
  }
  CHECK(cases > 1000);
}

TEST_CASE("top-k is nested in kappa and invariant to global rescaling") {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    ImportanceMap m = random_small_map(rng, static_cast<std::size_t>(rng.integer(2, 30)));
    double k1 = rng.uniform(0, 0.99), k2 = rng.uniform(0, 0.99);
    if (k1 > k2) std::swap(k1, k2);
    MaskSet a = select_topk(m, k1), b = select_topk(m, k2);
    for (std::size_t l = 0; l < m.layers.size(); ++l)
      for (std::size_t u = 0; u < a.layers[l].keep.size(); ++u) CHECK(a.layers[l].keep[u] >= b.layers[l].keep[u]);

    ImportanceMap scaled = m;
    for (auto& l : scaled.layers)
      for (double& s : l.scores) s *= 3.5;
    MaskSet c = select_topk(scaled, k1);
    for (std::size_t l = 0; l < m.layers.size(); ++l) CHECK(c.layers[l].keep == a.layers[l].keep);
  }
}

TEST_CASE("per-layer rescaling keeps within-layer order") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    ImportanceMap m = map_of({{rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 1)},
                              {rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 1)}});
    ImportanceMap scaled = m;
    for (double& s : scaled.layers[1].scores) s *= 10.0;
    for (double kappa : {0.3, 0.6}) {
      MaskSet a = select_topk(scaled, kappa);
      // Within a layer the kept neurons are always the top scorers.
      for (std::size_t l = 0; l < 2; ++l) {
        const auto& s = m.layers[l].scores;
        for (std::size_t i = 0; i < s.size(); ++i)
          for (std::size_t j = 0; j < s.size(); ++j)
            if (s[i] > s[j] && a.layers[l].keep[j]) CHECK(a.layers[l].keep[i]);
      }
    }
  }
}

TEST_CASE("random and layer-wise baselines") {
  NetSpec spec = load_netspec(config_path("mini-unet3d.json"));
  MaskSet r0 = random_masks(spec, 0.0, 3);
  for (const auto& l : r0.layers) CHECK(l.retained() == l.keep.size());
  MaskSet r1 = random_masks(spec, 0.4, 3), r2 = random_masks(spec, 0.4, 3);
  std::size_t n = 0, kept = 0;
  for (std::size_t l = 0; l < r1.layers.size(); ++l) {
    CHECK(r1.layers[l].keep == r2.layers[l].keep);
    if (r1.layers[l].is_protected) {
      CHECK(r1.layers[l].retained() == r1.layers[l].keep.size());
      continue;
    }
    n += r1.layers[l].keep.size();
    kept += r1.layers[l].retained();
  }
  CHECK(kept == retained_count(n, 0.4));

  ImportanceMap widths = map_of({{1, 2, 3, 4}, {1, 2, 3, 4, 5, 6, 7, 8}});
  MaskSet lw = layerwise_masks(widths, 0.5);
  CHECK(lw.layers[0].retained() == 2);
  CHECK(lw.layers[1].retained() == 4);
  CHECK(lw.layers[0].keep == std::vector<std::uint8_t>{0, 0, 1, 1});
  MaskSet lw0 = layerwise_masks(widths, 0.0);
  for (const auto& l : lw0.layers) CHECK(l.retained() == l.keep.size());
  CHECK(layerwise_masks(widths, 0.99).layers[0].retained() == 1);
}

TEST_CASE("feasibility") {
  MaskSet m = select_topk(map_of({{0.9, 0.8}, {0.1, 0.2}}), 0.5);
  CHECK_FALSE(m.feasible());
  CHECK(m.empty_layers() == std::vector<std::string>{"L1"});
  try {
    require_feasible(m);
    FAIL("expected InfeasibleError");
  } catch (const InfeasibleError& e) {
    CHECK(e.empty_layers() == std::vector<std::string>{"L1"});
  }
}

TEST_CASE("bisection against a linear scan") {
  SUBCASE("boundary at 0.73") {
    auto feasible = [](double k) { return k <= 0.73; };
    SearchResult r = search_max_sparsity(feasible);
    double scan = 0.0;
    for (int i = 0; i <= 100000; ++i)
      if (feasible(i * 1e-5)) scan = i * 1e-5;
    CHECK(std::abs(r.kappa - scan) <= 1e-4);
    CHECK(feasible(r.kappa));
    CHECK(r.iterations <= 14);
  }
  SUBCASE("feasible everywhere") {
    SearchResult r = search_max_sparsity([](double) { return true; });
    CHECK(1.0 - r.kappa <= 1e-4);
    CHECK(r.iterations == 14);
  }
  SUBCASE("infeasible at kappa_min") {
    CHECK_THROWS_AS(search_max_sparsity([](double) { return false; }), InfeasibleError);
  }
  SUBCASE("bad configs") {
    CHECK_THROWS_AS(search_max_sparsity([](double) { return true; }, {0.5, 0.5, 1e-4}), ContractError);
    CHECK_THROWS_AS(search_max_sparsity([](double) { return true; }, {0.0, 1.0, 0.0}), ContractError);
  }
  SUBCASE("real pruning scores") {
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
      ImportanceMap m;
      for (int l = 0; l < 4; ++l) {
        LayerScores s{"L" + std::to_string(l), {}, false};
        const double scale = std::pow(10.0, rng.uniform(-2, 2));
        for (int u = rng.integer(2, 10); u > 0; --u) s.scores.push_back(scale * rng.uniform(0, 1));
        m.layers.push_back(s);
      }
      auto feasible = [&](double k) { return select_topk(m, k).feasible(); };
      SearchResult r = search_max_sparsity(feasible);
      CHECK(feasible(r.kappa));
      CHECK_FALSE(feasible(std::min(0.9999, r.kappa + 1.5e-4)));
    }
  }
}

TEST_CASE("mask files") {
  NetSpec spec = parse_netspec(R"({"input_shape": [1, 2, 2, 2], "classes": 2, "layers": [
    {"id": "a", "kind": "conv3d", "out_channels": 3, "inputs": ["input"]},
    {"id": "r", "kind": "relu"},
    {"id": "h", "kind": "conv3d", "out_channels": 2},
    {"id": "out", "kind": "softmax-head"}]})");
  MaskSet m = masks_from_json(R"({"a": [1, 0, 1]})", spec);
  CHECK(m.at("a").keep == std::vector<std::uint8_t>{1, 0, 1});
  CHECK(m.at("h").retained() == 2);
  CHECK(masks_to_json(m) == R"({"a":[1,0,1],"h":[1,1]})");
  CHECK(masks_from_json(masks_to_json(m), spec).at("a").keep == m.at("a").keep);
  CHECK_THROWS_AS(masks_from_json(R"({"zz": [1]})", spec), ParseError);
  CHECK_THROWS_AS(masks_from_json(R"({"r": [1]})", spec), ParseError);
  CHECK_THROWS_AS(masks_from_json(R"({"a": [1, 1]})", spec), ParseError);
  CHECK_THROWS_AS(masks_from_json(R"({"a": [1, 2, 1]})", spec), ParseError);
  CHECK_THROWS_AS(masks_from_json(R"({"h": [1, 0]})", spec), ParseError);
}

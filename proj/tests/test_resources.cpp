#include "doctest.h"
#include "ranp/errors.hpp"
#include "ranp/mask_search.hpp"
#include "ranp/resources.hpp"
#include "support.hpp"

using namespace ranp;
using namespace testing_support;

namespace {

LayerSpec conv_layer(int k, int cin, int cout, bool bias, std::array<std::size_t, 3> out) {
  LayerSpec l;
  l.id = "c";
  l.kind = LayerKind::conv3d;
  l.kernel = {k, k, k};
  l.in_channels = cin;
  l.out_channels = cout;
  l.bias = bias;
  l.out_shape = {static_cast<std::size_t>(cout), out[0], out[1], out[2]};
  return l;
}

// Walks every output element and every tap: one multiply and one add per tap,
// minus the final add, plus one for the bias.
std::uint64_t counted_flops(const LayerSpec& l) {
  std::uint64_t ops = 0;
  for (std::size_t e = 0; e < l.output_elements(); ++e) {
    std::uint64_t here = 0;
    for (int c = 0; c < l.in_channels; ++c)
      for (int a = 0; a < l.kernel[0]; ++a)
        for (int b = 0; b < l.kernel[1]; ++b)
          for (int d = 0; d < l.kernel[2]; ++d) here += 2;
    here -= 1;
    if (l.bias) here += 1;
    ops += here;
  }
  return ops;
}

}  // namespace

TEST_CASE("layer_flops worked values") {
  CHECK(layer_flops(conv_layer(1, 1, 1, false, {1, 1, 1})) == 1);
  CHECK(layer_flops(conv_layer(3, 2, 4, true, {8, 8, 8})) == 221184);
  CHECK(layer_flops(conv_layer(3, 2, 8, true, {8, 8, 8})) == 2 * 221184);
  LayerSpec relu;
  relu.kind = LayerKind::relu;
  relu.out_shape = {3, 4, 4, 4};
  CHECK(layer_flops(relu) == 0);
  CHECK(layer_mem(relu) == 192);
  CHECK(layer_mem(conv_layer(1, 1, 1, false, {1, 1, 1})) == 1);
}

TEST_CASE("layer_flops equals the per-element counting oracle") {
  Rng rng(17);
  for (int trial = 0; trial < 1000; ++trial) {
    LayerSpec l = conv_layer(rng.integer(1, 3), rng.integer(1, 6), rng.integer(1, 6), rng.coin(),
                             {static_cast<std::size_t>(rng.integer(1, 6)), static_cast<std::size_t>(rng.integer(1, 6)),
                              static_cast<std::size_t>(rng.integer(1, 6))});
    l.kernel[1] = rng.integer(1, 3);
    CHECK(layer_flops(l) == counted_flops(l));
  }
}

TEST_CASE("layer_mem matches instrumented forward element counts") {
  Rng rng(3);
  for (int trial = 0; trial < 15; ++trial) {
    NetSpec spec = random_relu_net(rng);
    ParamSet params = init_params(spec, InitScheme::glorot, 1);
    const auto& s = spec.input_shape;
    ad::Var x = ad::Var::constant(random_tensor(
        {1, static_cast<size_t>(s[0]), static_cast<size_t>(s[1]), static_cast<size_t>(s[2]), static_cast<size_t>(s[3])},
        rng));
    ForwardResult out = forward(spec, ParamVars::from(params, false), x);
    ResourceProfile prof = profile(spec);
    for (std::size_t i = 0; i < spec.layers.size(); ++i) CHECK(prof.layers[i].mem == out.activations[i].value().size());
  }
}

TEST_CASE("profile with masks") {
  NetSpec spec = parse_netspec(R"({"input_shape": [1, 4, 4, 4], "classes": 2, "layers": [
    {"id": "c1", "kind": "conv3d", "out_channels": 8, "kernel": 3, "padding": 1, "inputs": ["input"]},
    {"id": "r1", "kind": "relu"},
    {"id": "c2", "kind": "conv3d", "out_channels": 8, "kernel": 3, "padding": 1, "bias": false},
    {"id": "r2", "kind": "relu"},
    {"id": "c3", "kind": "conv3d", "out_channels": 2, "kernel": 1},
    {"id": "out", "kind": "softmax-head"}]})");
  const ResourceProfile full = profile(spec);

  MaskSet ones = MaskSet::all_ones(spec);
  const ResourceProfile same = profile(spec, &ones);
  CHECK(same.total_flops == full.total_flops);
  CHECK(same.total_mem == full.total_mem);
  CHECK(same.total_params == full.total_params);

  MaskSet half = ones;
  for (auto& m : half.layers)
    if (!m.is_protected)
      for (std::size_t u = 0; u < m.keep.size(); u += 2) m.keep[u] = 0;
  const ResourceProfile reduced = profile(spec, &half);
  // c2 loses half its inputs and half its outputs: (2*27*4 - 1) * 4 vs (2*27*8 - 1) * 8.
  CHECK(reduced.at("c2").flops == (2 * 27 * 4 - 1) * 4 * 64);
  const double ratio = static_cast<double>(reduced.at("c2").flops) / static_cast<double>(full.at("c2").flops);
  CHECK(ratio == doctest::Approx(0.25).epsilon(0.01));
  CHECK(reduced.at("r1").mem == full.at("r1").mem / 2);
  CHECK(reduced.total_flops < full.total_flops);

  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    MaskSet m = ones;
    auto& layer = m.layers[static_cast<std::size_t>(rng.integer(0, 1))];
    layer.keep[static_cast<std::size_t>(rng.integer(0, 7))] = 0;
    const ResourceProfile p = profile(spec, &m);
    CHECK(p.total_flops < full.total_flops);
    CHECK(p.total_mem < full.total_mem);
  }

  MaskSet unknown = ones;
  unknown.layers[0].layer = "ghost";
  CHECK_THROWS(profile(spec, &unknown));
  MaskSet wrong_width = ones;
  wrong_width.layers[0].keep.push_back(1);
  CHECK_THROWS_AS(profile(spec, &wrong_width), ContractError);
}

TEST_CASE("normalised tau and reductions") {
  NetSpec spec = load_netspec(config_path("mini-unet3d.json"));
  const ResourceProfile prof = profile(spec);
  for (ResourceKind kind : {ResourceKind::flops, ResourceKind::memory}) {
    auto tau = normalized_tau(prof, kind);
    double top = 0.0;
    for (double t : tau) {
      CHECK(t > 0.0);
      CHECK(t <= 1.0);
      top = std::max(top, t);
    }
    CHECK(top == 1.0);
  }
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const double full = rng.uniform(1.0, 1e9), reduced = rng.uniform(0.0, full);
    CHECK(std::abs(reduction_percent(full, reduced) - 100.0 * (1.0 - reduced / full)) < 1e-9);
  }
  CHECK(reduction_percent(0.0, 0.0) == 0.0);
  CHECK(prof.memory_mb() == doctest::Approx(static_cast<double>(prof.total_mem) * 4.0 / (1024.0 * 1024.0)));
}

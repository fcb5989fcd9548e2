#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "ranp/errors.hpp"
#include "ranp/netgraph.hpp"
#include "support.hpp"

using namespace ranp;
using namespace testing_support;

namespace {

std::string chain_config(const std::string& second_input = "p1", int extent = 4) {
  return R"({"input_shape": [2, )" + std::to_string(extent) + ", " + std::to_string(extent) + ", " +
         std::to_string(extent) + R"(], "classes": 8, "layers": [
    {"id": "c1", "kind": "conv3d", "out_channels": 4, "kernel": 3, "padding": 1, "inputs": ["input"]},
    {"id": "r1", "kind": "relu"},
    {"id": "p1", "kind": "maxpool", "kernel": 2},
    {"id": "c2", "kind": "conv3d", "out_channels": 8, "kernel": 1, "inputs": [")" +
         second_input + R"("]},
    {"id": "out", "kind": "softmax-head"}]})";
}

int file_layer_count(const std::string& path) {
  std::ifstream in(path);
  return static_cast<int>(nlohmann::json::parse(in).at("layers").size());
}

}  // namespace

TEST_CASE("bundled configs parse with the layer count of the file") {
  for (const char* name : {"mini-unet3d.json", "mini-cls3d.json"}) {
    CAPTURE(name);
    NetSpec spec = load_netspec(config_path(name));
    CHECK(static_cast<int>(spec.layers.size()) == file_layer_count(config_path(name)));
    CHECK(spec.layers[spec.head_index()].is_protected);
    int protected_count = 0;
    for (const auto& l : spec.layers) protected_count += l.is_protected;
    CHECK(protected_count == 1);
  }
  NetSpec unet = load_netspec(config_path("mini-unet3d.json"));
  CHECK(unet.compute_layers().size() == 7);
  CHECK(unet.layer("cat1").out_shape[0] == 24);
  CHECK(unet.layers.back().out_shape == std::array<std::size_t, 4>{3, 16, 16, 16});
}

TEST_CASE("shape inference agrees with forward execution") {
  for (const char* name : {"mini-unet3d.json", "mini-cls3d.json"}) {
    NetSpec spec = load_netspec(config_path(name));
    ParamSet params = init_params(spec, InitScheme::glorot, 3);
    Rng rng(1);
    const auto& s = spec.input_shape;
    Tensor x = random_tensor({2, static_cast<size_t>(s[0]), static_cast<size_t>(s[1]), static_cast<size_t>(s[2]),
                              static_cast<size_t>(s[3])},
                             rng);
    ForwardResult out = forward(spec, ParamVars::from(params, false), ad::Var::constant(x));
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
      const auto& o = spec.layers[i].out_shape;
      CHECK(out.activations[i].shape() == Shape{2, o[0], o[1], o[2], o[3]});
    }
  }
}

TEST_CASE("parse errors name the offending layer") {
  CHECK_NOTHROW(parse_netspec(chain_config()));
  try {
    parse_netspec(chain_config("nope"));
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("unknown input layer") != std::string::npos);
    CHECK(std::string(e.what()).find("c2") != std::string::npos);
  }
  try {
    parse_netspec(chain_config("p1", 1));
    FAIL("expected a shape-inference error");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("p1") != std::string::npos);
  }
  std::string bad_kind = chain_config();
  bad_kind.replace(bad_kind.find("maxpool"), 7, "avgpool");
  CHECK_THROWS_AS(parse_netspec(bad_kind), ParseError);
  CHECK_THROWS_AS(parse_netspec("{not json"), ParseError);
}

TEST_CASE("config round trip") {
  NetSpec a = load_netspec(config_path("mini-unet3d.json"));
  NetSpec b = parse_netspec(netspec_to_json(a));
  REQUIRE(a.layers.size() == b.layers.size());
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    CHECK(a.layers[i].id == b.layers[i].id);
    CHECK(a.layers[i].out_shape == b.layers[i].out_shape);
    CHECK(a.layers[i].is_protected == b.layers[i].is_protected);
    CHECK(a.layers[i].inputs == b.layers[i].inputs);
  }
}

TEST_CASE("glorot initialisation") {
  NetSpec spec = load_netspec(config_path("mini-unet3d.json"));
  ParamSet a = init_params(spec, InitScheme::glorot, 5);
  ParamSet b = init_params(spec, InitScheme::glorot, 5);
  ParamSet c = init_params(spec, InitScheme::glorot, 6);
  CHECK(a.layers[0].weight == b.layers[0].weight);
  CHECK_FALSE(a.layers[0].weight == c.layers[0].weight);
  int checked = 0;
  for (const auto& p : a.layers) {
    for (double v : p.bias->data()) CHECK(v == 0.0);
    const Shape& s = p.weight.shape();
    const double taps = static_cast<double>(p.weight.size()) / static_cast<double>(s[0] * s[1]);
    const double fan_in = static_cast<double>(s[1]) * taps, fan_out = static_cast<double>(s[0]) * taps;
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    double var = 0.0;
    for (double v : p.weight.data()) {
      CHECK(std::abs(v) <= limit);
      var += v * v;
    }
    var /= static_cast<double>(p.weight.size());
    if (p.weight.size() >= 1000) {
      ++checked;
      CHECK(std::abs(var / (2.0 / (fan_in + fan_out)) - 1.0) < 0.2);
    }
  }
  CHECK(checked >= 4);
}

TEST_CASE("orthogonal initialisation") {
  NetSpec spec = load_netspec(config_path("mini-unet3d.json"));
  ParamSet params = init_params(spec, InitScheme::orthogonal, 9);
  for (const auto& p : params.layers) {
    CAPTURE(p.layer);
    const std::size_t rows = p.weight.dim(0), cols = p.weight.size() / rows;
    const bool by_rows = rows <= cols;
    const std::size_t count = by_rows ? rows : cols, length = by_rows ? cols : rows;
    auto at = [&](std::size_t vec, std::size_t k) { return by_rows ? p.weight[vec * cols + k] : p.weight[k * cols + vec]; };
    double worst = 0.0;
    for (std::size_t i = 0; i < count; ++i)
      for (std::size_t j = 0; j < count; ++j) {
        double dot = 0.0;
        for (std::size_t k = 0; k < length; ++k) dot += at(i, k) * at(j, k);
        worst = std::max(worst, std::abs(dot - (i == j ? 1.0 : 0.0)));
      }
    CHECK(worst < 1e-10);
    for (double v : p.bias->data()) CHECK(v == 0.0);
  }
}

TEST_CASE("dependency map: chain and concat offsets") {
  NetSpec chain = parse_netspec(R"({"input_shape": [1, 2, 2, 2], "classes": 8, "layers": [
    {"id": "c1", "kind": "conv3d", "out_channels": 4, "inputs": ["input"]},
    {"id": "r1", "kind": "relu"},
    {"id": "c2", "kind": "conv3d", "out_channels": 8},
    {"id": "out", "kind": "softmax-head"}]})");
  DependencyMap dep = DependencyMap::build(chain);
  for (std::size_t u = 0; u < 4; ++u) CHECK(dep.consumers(0, u) == std::vector<ConsumerSlot>{{2, u}});

  NetSpec cat = parse_netspec(R"({"input_shape": [1, 2, 2, 2], "classes": 2, "layers": [
    {"id": "a", "kind": "conv3d", "out_channels": 3, "inputs": ["input"]},
    {"id": "b", "kind": "conv3d", "out_channels": 5, "inputs": ["input"]},
    {"id": "cat", "kind": "concat", "inputs": ["a", "b"]},
    {"id": "c", "kind": "conv3d", "out_channels": 2},
    {"id": "out", "kind": "softmax-head"}]})");
  DependencyMap d2 = DependencyMap::build(cat);
  CHECK(d2.consumers(1, 0) == std::vector<ConsumerSlot>{{3, 3}});
  CHECK(d2.consumers(0, 2) == std::vector<ConsumerSlot>{{3, 2}});
  CHECK(d2.inputs_of(3)[7] == ChannelRef{1, 4});
}

TEST_CASE("dependency map is a bijection onto consumer input slots") {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    NetSpec spec = trial == 0 ? load_netspec(config_path("mini-unet3d.json")) : random_relu_net(rng);
    DependencyMap dep = DependencyMap::build(spec);
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (std::size_t li : spec.compute_layers()) {
      const auto& inputs = dep.inputs_of(li);
      CHECK(inputs.size() == static_cast<std::size_t>(spec.layers[li].in_channels));
      for (std::size_t v = 0; v < inputs.size(); ++v) {
        if (inputs[v].layer == ChannelRef::kNetworkInput) continue;
        const auto& slots = dep.consumers(inputs[v].layer, inputs[v].channel);
        CHECK(std::count(slots.begin(), slots.end(), ConsumerSlot{li, v}) == 1);
        CHECK(seen.insert({li, v}).second);
      }
    }
    std::size_t total = 0;
    for (std::size_t li : spec.compute_layers())
      for (std::size_t u = 0; u < static_cast<std::size_t>(spec.layers[li].out_channels); ++u)
        total += dep.consumers(li, u).size();
    CHECK(total == seen.size());
  }
}

TEST_CASE("perturbation probe on the mini-UNet skip connections") {
  NetSpec spec = load_netspec(config_path("mini-unet3d.json"));
  ParamSet params = init_params(spec, InitScheme::glorot, 4);
  for (auto& p : params.layers)
    for (double& v : p.bias->data()) v = 0.5;  // every channel carries signal
  ParamVars vars = ParamVars::from(params, false);
  Rng rng(2);
  const auto& s = spec.input_shape;
  ad::Var x = ad::Var::constant(random_tensor(
      {1, static_cast<size_t>(s[0]), static_cast<size_t>(s[1]), static_cast<size_t>(s[2]), static_cast<size_t>(s[3])},
      rng, 0.0, 1.0));
  ForwardResult base = forward(spec, vars, x);
  DependencyMap dep = DependencyMap::build(spec);

  auto channel_changed = [](const Tensor& a, const Tensor& b, std::size_t c) {
    const std::size_t vol = a.size() / a.dim(1);
    for (std::size_t i = 0; i < vol; ++i)
      if (a[c * vol + i] != b[c * vol + i]) return true;
    return false;
  };

  const auto compute = spec.compute_layers();
  for (std::size_t producer : compute) {
    if (spec.layers[producer].is_protected) continue;
    ForwardOptions opts;
    for (std::size_t other : compute)
      if (other != producer) opts.frozen_outputs[spec.layers[other].id] = base.activations[other].value();
    const std::size_t width = static_cast<std::size_t>(spec.layers[producer].out_channels);
    for (std::size_t u = 0; u < width; u += 3) {
      Tensor mask({width}, 1.0);
      mask[u] = 0.0;
      opts.neuron_masks[spec.layers[producer].id] = ad::Var::constant(mask);
      ForwardResult probe = forward(spec, vars, x, opts);
      std::set<std::pair<std::size_t, std::size_t>> changed;
      for (std::size_t consumer : compute) {
        if (spec.layers[consumer].inputs.front() == "input") continue;
        const std::size_t src = spec.index_of(spec.layers[consumer].inputs.front());
        const Tensor& before = base.activations[src].value();
        const Tensor& after = probe.activations[src].value();
        for (std::size_t c = 0; c < before.dim(1); ++c)
          if (channel_changed(before, after, c)) changed.insert({consumer, c});
      }
      std::set<std::pair<std::size_t, std::size_t>> predicted;
      for (const auto& slot : dep.consumers(producer, u)) predicted.insert({slot.layer, slot.input_channel});
      CAPTURE(spec.layers[producer].id);
      CAPTURE(u);
      CHECK(changed == predicted);
    }
  }
}

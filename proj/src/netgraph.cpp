#include "ranp/netgraph.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"
#include "ranp/errors.hpp"

namespace ranp {

using nlohmann::json;

const char* kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv3d: return "conv3d";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::upsample: return "upsample";
    case LayerKind::concat: return "concat";
    case LayerKind::linear: return "linear";
    case LayerKind::softmax_head: return "softmax-head";
  }
  return "?";
}

LayerKind parse_kind(std::string_view name) {
  for (LayerKind k : {LayerKind::conv3d, LayerKind::relu, LayerKind::maxpool, LayerKind::upsample, LayerKind::concat,
                      LayerKind::linear, LayerKind::softmax_head})
    if (name == kind_name(k)) return k;
  throw ParseError("unknown layer kind '" + std::string(name) + "'");
}

std::size_t NetSpec::index_of(std::string_view id) const {
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].id == id) return i;
  throw ParseError("unknown layer '" + std::string(id) + "'");
}

std::vector<std::size_t> NetSpec::compute_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].is_compute()) out.push_back(i);
  return out;
}

std::size_t NetSpec::head_index() const {
  for (std::size_t i = layers.size(); i-- > 0;)
    if (layers[i].is_compute()) return i;
  throw ParseError("network has no conv3d or linear layer");
}

namespace {

[[noreturn]] void fail(const LayerSpec& layer, const std::string& why) {
  throw ParseError("layer '" + layer.id + "' (" + kind_name(layer.kind) + "): " + why);
}

std::size_t pooled(const LayerSpec& layer, std::size_t extent, int kernel, int stride, int padding, const char* axis) {
  long out = ad::window_extent(static_cast<long>(extent), kernel, stride, padding);
  if (out < 1)
    throw ShapeError("layer '" + layer.id + "': " + axis + " extent " + std::to_string(extent) +
                     " is too small for kernel " + std::to_string(kernel) + " (output extent " + std::to_string(out) +
                     ")");
  return static_cast<std::size_t>(out);
}

}  // namespace

void infer_shapes(NetSpec& spec) {
  if (spec.layers.empty()) throw ParseError("network has no layers");
  for (int e : spec.input_shape)
    if (e < 1) throw ParseError("input_shape extents must be positive");
  if (spec.class_count < 1) throw ParseError("classes must be positive");

  const std::array<std::size_t, 4> input{static_cast<std::size_t>(spec.input_shape[0]),
                                         static_cast<std::size_t>(spec.input_shape[1]),
                                         static_cast<std::size_t>(spec.input_shape[2]),
                                         static_cast<std::size_t>(spec.input_shape[3])};
  std::set<std::string, std::less<>> seen;
  std::vector<int> use_count(spec.layers.size(), 0);

  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    LayerSpec& layer = spec.layers[li];
    if (layer.id.empty()) throw ParseError("layer #" + std::to_string(li) + " has no id");
    if (layer.id == kInputId) fail(layer, "'input' is reserved for the network input");
    if (!seen.insert(layer.id).second) fail(layer, "duplicate layer id");
    if (layer.inputs.empty()) fail(layer, "no inputs");
    if (layer.kind != LayerKind::concat && layer.inputs.size() != 1) fail(layer, "expects exactly one input");

    std::vector<std::array<std::size_t, 4>> in_shapes;
    for (const auto& name : layer.inputs) {
      if (name == kInputId) {
        in_shapes.push_back(input);
        continue;
      }
      if (!seen.contains(name) || name == layer.id) fail(layer, "unknown input layer '" + name + "'");
      std::size_t at = spec.index_of(name);
      ++use_count[at];
      in_shapes.push_back(spec.layers[at].out_shape);
    }
    const auto& x = in_shapes.front();

    switch (layer.kind) {
      case LayerKind::conv3d: {
        if (layer.out_channels < 1) fail(layer, "out_channels must be positive");
        if (layer.stride < 1 || layer.padding < 0) fail(layer, "stride must be positive and padding non-negative");
        for (int k : layer.kernel)
          if (k < 1) fail(layer, "kernel extents must be positive");
        layer.in_channels = static_cast<int>(x[0]);
        layer.out_shape = {static_cast<std::size_t>(layer.out_channels),
                           pooled(layer, x[1], layer.kernel[0], layer.stride, layer.padding, "depth"),
                           pooled(layer, x[2], layer.kernel[1], layer.stride, layer.padding, "height"),
                           pooled(layer, x[3], layer.kernel[2], layer.stride, layer.padding, "width")};
        break;
      }
      case LayerKind::linear:
        if (layer.out_channels < 1) fail(layer, "out_channels must be positive");
        if (x[1] != 1 || x[2] != 1 || x[3] != 1)
          throw ShapeError("layer '" + layer.id + "': linear needs a 1x1x1 spatial input, got " +
                           std::to_string(x[1]) + "x" + std::to_string(x[2]) + "x" + std::to_string(x[3]));
        layer.kernel = {1, 1, 1};
        layer.stride = 1;
        layer.padding = 0;
        layer.in_channels = static_cast<int>(x[0]);
        layer.out_shape = {static_cast<std::size_t>(layer.out_channels), 1, 1, 1};
        break;
      case LayerKind::relu:
      case LayerKind::softmax_head:
        layer.out_shape = x;
        break;
      case LayerKind::maxpool: {
        const int window = layer.kernel[0];
        if (window < 1 || layer.stride < 1) fail(layer, "window and stride must be positive");
        layer.kernel = {window, window, window};
        layer.out_shape = {x[0], pooled(layer, x[1], window, layer.stride, 0, "depth"),
                           pooled(layer, x[2], window, layer.stride, 0, "height"),
                           pooled(layer, x[3], window, layer.stride, 0, "width")};
        break;
      }
      case LayerKind::upsample: {
        if (layer.factor < 1) fail(layer, "factor must be positive");
        const auto f = static_cast<std::size_t>(layer.factor);
        layer.out_shape = {x[0], x[1] * f, x[2] * f, x[3] * f};
        break;
      }
      case LayerKind::concat: {
        std::size_t channels = 0;
        for (const auto& s : in_shapes) {
          if (s[1] != x[1] || s[2] != x[2] || s[3] != x[3])
            throw ShapeError("layer '" + layer.id + "': concat inputs have mismatched spatial extents");
          channels += s[0];
        }
        layer.out_shape = {channels, x[1], x[2], x[3]};
        break;
      }
    }
    if (layer.kind == LayerKind::softmax_head && li + 1 != spec.layers.size())
      fail(layer, "softmax-head must be the last layer");
  }

  for (std::size_t i = 0; i + 1 < spec.layers.size(); ++i)
    if (use_count[i] == 0)
      fail(spec.layers[i], "output is never consumed (the network must have a single head)");

  spec.head_index();
  if (spec.layers.back().out_shape[0] != static_cast<std::size_t>(spec.class_count))
    throw ParseError("layer '" + spec.layers.back().id + "' produces " + std::to_string(spec.layers.back().out_shape[0]) +
                     " channels but classes = " + std::to_string(spec.class_count));
}

namespace {

std::array<int, 3> read_kernel(const json& v, const std::string& id) {
  if (v.is_number_integer()) {
    int k = v.get<int>();
    return {k, k, k};
  }
  if (v.is_array() && v.size() == 3) return {v[0].get<int>(), v[1].get<int>(), v[2].get<int>()};
  throw ParseError("layer '" + id + "': kernel must be an integer or a list of three integers");
}

}  // namespace

NetSpec parse_netspec(std::string_view json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("architecture config is not valid JSON: ") + e.what());
  }
  NetSpec spec;
  try {
    const auto& shape = doc.at("input_shape");
    if (!shape.is_array() || shape.size() != 4) throw ParseError("input_shape must be [C, D, H, W]");
    for (int i = 0; i < 4; ++i) spec.input_shape[i] = shape[i].get<int>();
    spec.class_count = doc.at("classes").get<int>();

    std::vector<std::optional<bool>> explicit_protection;
    for (const auto& item : doc.at("layers")) {
      LayerSpec layer;
      layer.id = item.at("id").get<std::string>();
      layer.kind = parse_kind(item.at("kind").get<std::string>());
      layer.out_channels = item.value("out_channels", 0);
      if (item.contains("kernel")) layer.kernel = read_kernel(item["kernel"], layer.id);
      else if (layer.kind == LayerKind::maxpool) layer.kernel = {2, 2, 2};
      layer.stride = item.value("stride", layer.kind == LayerKind::maxpool ? layer.kernel[0] : 1);
      layer.padding = item.value("padding", 0);
      layer.factor = item.value("factor", 2);
      layer.bias = item.value("bias", true);
      if (item.contains("inputs")) {
        layer.inputs = item["inputs"].get<std::vector<std::string>>();
      } else {
        layer.inputs = {spec.layers.empty() ? std::string(kInputId) : spec.layers.back().id};
      }
      explicit_protection.push_back(item.contains("protected") ? std::optional<bool>(item["protected"].get<bool>())
                                                               : std::nullopt);
      spec.layers.push_back(std::move(layer));
    }
    try {
      infer_shapes(spec);
    } catch (const ShapeError& e) {
      throw ParseError(std::string("shape inference failed: ") + e.what());
    }
    const std::size_t head = spec.head_index();
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
      auto& layer = spec.layers[i];
      layer.is_protected = explicit_protection[i].value_or(i == head);
      if (layer.is_protected && !layer.is_compute()) layer.is_protected = false;
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("architecture config: ") + e.what());
  }
  return spec;
}

NetSpec load_netspec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open architecture config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_netspec(buf.str());
}

std::string netspec_to_json(const NetSpec& spec) {
  json doc;
  doc["input_shape"] = spec.input_shape;
  doc["classes"] = spec.class_count;
  doc["layers"] = json::array();
  for (const auto& layer : spec.layers) {
    json item;
    item["id"] = layer.id;
    item["kind"] = kind_name(layer.kind);
    item["inputs"] = layer.inputs;
    switch (layer.kind) {
      case LayerKind::conv3d:
        item["out_channels"] = layer.out_channels;
        item["kernel"] = layer.kernel;
        item["stride"] = layer.stride;
        item["padding"] = layer.padding;
        item["bias"] = layer.bias;
        item["protected"] = layer.is_protected;
        break;
      case LayerKind::linear:
        item["out_channels"] = layer.out_channels;
        item["bias"] = layer.bias;
        item["protected"] = layer.is_protected;
        break;
      case LayerKind::maxpool:
        item["kernel"] = layer.kernel[0];
        item["stride"] = layer.stride;
        break;
      case LayerKind::upsample:
        item["factor"] = layer.factor;
        break;
      default:
        break;
    }
    doc["layers"].push_back(std::move(item));
  }
  return doc.dump(2);
}

const LayerParams& ParamSet::at(std::string_view layer) const {
  for (const auto& p : layers)
    if (p.layer == layer) return p;
  throw ContractError("no parameters for layer '" + std::string(layer) + "'");
}

LayerParams& ParamSet::at(std::string_view layer) {
  return const_cast<LayerParams&>(std::as_const(*this).at(layer));
}

std::size_t ParamSet::count() const {
  std::size_t total = 0;
  for (const auto& p : layers) total += p.weight.size() + (p.bias ? p.bias->size() : 0);
  return total;
}

InitScheme parse_init(std::string_view name) {
  if (name == "glorot") return InitScheme::glorot;
  if (name == "orthogonal") return InitScheme::orthogonal;
  throw ContractError("unknown init scheme '" + std::string(name) + "' (expected glorot or orthogonal)");
}

namespace {

Shape weight_shape(const LayerSpec& layer) {
  const auto out = static_cast<std::size_t>(layer.out_channels);
  const auto in = static_cast<std::size_t>(layer.in_channels);
  if (layer.kind == LayerKind::linear) return {out, in};
  return {out, in, static_cast<std::size_t>(layer.kernel[0]), static_cast<std::size_t>(layer.kernel[1]),
          static_cast<std::size_t>(layer.kernel[2])};
}

// Rows orthonormal when rows <= cols, columns orthonormal otherwise.
std::vector<double> orthogonal_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  const bool wide = rows <= cols;
  const Eigen::Index m = static_cast<Eigen::Index>(wide ? cols : rows);
  const Eigen::Index n = static_cast<Eigen::Index>(wide ? rows : cols);
  Eigen::MatrixXd a(m, n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < m; ++i) a(i, j) = gauss(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(m, n);
  const Eigen::MatrixXd& r = qr.matrixQR();
  for (Eigen::Index j = 0; j < n; ++j)
    if (r(j, j) < 0) q.col(j) *= -1.0;
  Eigen::MatrixXd w = wide ? Eigen::MatrixXd(q.transpose()) : q;
  std::vector<double> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = w(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  return out;
}

}  // namespace

ParamSet init_params(const NetSpec& spec, InitScheme scheme, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamSet params;
  for (std::size_t li : spec.compute_layers()) {
    const LayerSpec& layer = spec.layers[li];
    Shape shape = weight_shape(layer);
    const std::size_t kvol = layer.kernel_volume();
    const std::size_t fan_in = static_cast<std::size_t>(layer.in_channels) * kvol;
    const std::size_t fan_out = static_cast<std::size_t>(layer.out_channels) * kvol;
    std::vector<double> values;
    if (scheme == InitScheme::glorot) {
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      std::uniform_real_distribution<double> dist(-limit, limit);
      values.resize(numel(shape));
      for (double& v : values) v = dist(rng);
    } else {
      values = orthogonal_matrix(static_cast<std::size_t>(layer.out_channels), fan_in, rng);
    }
    LayerParams p{layer.id, Tensor(shape, std::move(values)), std::nullopt};
    if (layer.bias) p.bias = Tensor({static_cast<std::size_t>(layer.out_channels)}, 0.0);
    params.layers.push_back(std::move(p));
  }
  return params;
}

DependencyMap DependencyMap::build(const NetSpec& spec) {
  DependencyMap map;
  const std::size_t count = spec.layers.size();
  map.sources_.resize(count);
  map.inputs_.resize(count);

  std::vector<ChannelRef> network_input;
  for (int c = 0; c < spec.input_shape[0]; ++c)
    network_input.push_back({ChannelRef::kNetworkInput, static_cast<std::size_t>(c)});
  auto sources_of = [&](const std::string& id) -> const std::vector<ChannelRef>& {
    return id == kInputId ? network_input : map.sources_[spec.index_of(id)];
  };

  for (std::size_t li = 0; li < count; ++li) {
    const LayerSpec& layer = spec.layers[li];
    auto& out = map.sources_[li];
    if (layer.is_compute()) {
      map.inputs_[li] = sources_of(layer.inputs.front());
      for (int u = 0; u < layer.out_channels; ++u) out.push_back({li, static_cast<std::size_t>(u)});
      for (std::size_t slot = 0; slot < map.inputs_[li].size(); ++slot) {
        const ChannelRef& from = map.inputs_[li][slot];
        if (from.layer != ChannelRef::kNetworkInput) map.consumers_[{from.layer, from.channel}].push_back({li, slot});
      }
    } else if (layer.kind == LayerKind::concat) {
      for (const auto& id : layer.inputs) {
        const auto& part = sources_of(id);
        out.insert(out.end(), part.begin(), part.end());
      }
    } else {
      out = sources_of(layer.inputs.front());
    }
  }
  return map;
}

const std::vector<ConsumerSlot>& DependencyMap::consumers(std::size_t producer, std::size_t channel) const {
  static const std::vector<ConsumerSlot> none;
  auto it = consumers_.find({producer, channel});
  return it == consumers_.end() ? none : it->second;
}

ParamVars ParamVars::from(const ParamSet& params, bool trainable) {
  ParamVars vars;
  auto make = [trainable](const Tensor& t) { return trainable ? ad::Var::parameter(t) : ad::Var::constant(t); };
  for (const auto& p : params.layers) {
    Entry e{make(p.weight), p.bias ? make(*p.bias) : ad::Var{}};
    vars.layers.emplace(p.layer, std::move(e));
    vars.order.push_back(p.layer);
  }
  return vars;
}

ParamSet ParamVars::to_params() const {
  ParamSet params;
  for (const auto& id : order) {
    const Entry& e = layers.at(id);
    LayerParams p{id, e.weight.value(), std::nullopt};
    if (e.bias) p.bias = e.bias.value();
    params.layers.push_back(std::move(p));
  }
  return params;
}

std::vector<ad::Var> ParamVars::all() const {
  std::vector<ad::Var> out;
  for (const auto& id : order) {
    const Entry& e = layers.at(id);
    out.push_back(e.weight);
    if (e.bias) out.push_back(e.bias);
  }
  return out;
}

ForwardResult forward(const NetSpec& spec, const ParamVars& params, const ad::Var& input,
                      const ForwardOptions& options) {
  const Shape& xs = input.shape();
  if (xs.size() != 5 || xs[1] != static_cast<std::size_t>(spec.input_shape[0]) ||
      xs[2] != static_cast<std::size_t>(spec.input_shape[1]) || xs[3] != static_cast<std::size_t>(spec.input_shape[2]) ||
      xs[4] != static_cast<std::size_t>(spec.input_shape[3]))
    throw ShapeError("forward: input " + to_string(xs) + " does not match network input [N, " +
                     std::to_string(spec.input_shape[0]) + ", " + std::to_string(spec.input_shape[1]) + ", " +
                     std::to_string(spec.input_shape[2]) + ", " + std::to_string(spec.input_shape[3]) + "]");
  const std::size_t batch = xs[0];
  const std::size_t count = spec.layers.size();

  // Where each neuron mask applies: the compute layer itself, or its sole
  // relu consumer when masking post-activations.
  std::vector<std::vector<std::string>> masks_at(count);
  for (const auto& [id, mask] : options.neuron_masks) {
    const std::size_t li = spec.index_of(id);
    if (!spec.layers[li].is_compute()) throw ContractError("neuron mask on non-compute layer '" + id + "'");
    std::size_t site = li;
    if (options.placement == MaskPlacement::post_activation) {
      std::vector<std::size_t> users;
      for (std::size_t j = li + 1; j < count; ++j)
        if (std::find(spec.layers[j].inputs.begin(), spec.layers[j].inputs.end(), id) != spec.layers[j].inputs.end())
          users.push_back(j);
      if (users.size() == 1 && spec.layers[users[0]].kind == LayerKind::relu) site = users[0];
    }
    masks_at[site].push_back(id);
  }

  ForwardResult result;
  result.activations.reserve(count);
  auto fetch = [&](const std::string& id) -> const ad::Var& {
    return id == kInputId ? input : result.activations[spec.index_of(id)];
  };

  for (std::size_t li = 0; li < count; ++li) {
    const LayerSpec& layer = spec.layers[li];
    ad::Var out;
    if (layer.is_compute()) {
      auto frozen = options.frozen_outputs.find(layer.id);
      if (frozen != options.frozen_outputs.end()) {
        out = ad::Var::constant(frozen->second);
      } else {
        auto entry = params.layers.find(layer.id);
        if (entry == params.layers.end()) throw ContractError("no parameters for layer '" + layer.id + "'");
        ad::Var weight = entry->second.weight;
        ad::Var bias = entry->second.bias;
        if (auto m = options.weight_masks.find(layer.id); m != options.weight_masks.end()) weight = ad::mul(m->second, weight);
        if (auto m = options.bias_masks.find(layer.id); m != options.bias_masks.end() && bias) bias = ad::mul(m->second, bias);
        const ad::Var& x = fetch(layer.inputs.front());
        if (layer.kind == LayerKind::conv3d) {
          out = ad::conv3d(x, weight, bias, layer.stride, layer.padding);
        } else {
          const std::size_t in = x.shape()[1];
          ad::Var flat = ad::reshape(x, {batch, in});
          out = ad::reshape(ad::linear(flat, weight, bias), {batch, static_cast<std::size_t>(layer.out_channels), 1, 1, 1});
        }
      }
    } else {
      switch (layer.kind) {
        case LayerKind::relu: out = ad::relu(fetch(layer.inputs.front())); break;
        case LayerKind::maxpool: out = ad::maxpool3d(fetch(layer.inputs.front()), layer.kernel[0], layer.stride); break;
        case LayerKind::upsample: out = ad::upsample_nearest3d(fetch(layer.inputs.front()), layer.factor); break;
        case LayerKind::concat: {
          std::vector<ad::Var> parts;
          for (const auto& id : layer.inputs) parts.push_back(fetch(id));
          out = ad::concat_channels(parts);
          break;
        }
        case LayerKind::softmax_head: {
          const ad::Var& x = fetch(layer.inputs.front());
          out = options.apply_softmax ? ad::softmax(x, 1) : x;
          break;
        }
        default: break;
      }
    }
    for (const auto& id : masks_at[li]) out = ad::scale_channels(out, options.neuron_masks.at(id));
    result.activations.push_back(out);
  }
  result.output = result.activations.back();
  return result;
}

}  // namespace ranp

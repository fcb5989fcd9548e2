#include "ranp/refine.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "ranp/errors.hpp"

namespace ranp {

SlimBuild refine(const NetSpec& spec, const ParamSet& params, const MaskSet& masks, const DependencyMap& dep) {
  require_feasible(masks);

  // Keep-flags per compute layer; protected layers are full width.
  std::vector<std::vector<std::uint8_t>> keep(spec.layers.size());
  SlimBuild slim;
  slim.spec = spec;
  for (std::size_t li : spec.compute_layers()) {
    const LayerSpec& layer = spec.layers[li];
    std::vector<std::uint8_t> k(static_cast<std::size_t>(layer.out_channels), 1);
    if (const LayerMask* m = masks.find(layer.id); m && !layer.is_protected) {
      if (m->keep.size() != k.size())
        throw ContractError("mask for '" + layer.id + "' has " + std::to_string(m->keep.size()) +
                            " entries, layer has " + std::to_string(k.size()) + " neurons");
      k = m->keep;
    }
    std::vector<int> map(k.size(), -1);
    int next = 0;
    for (std::size_t u = 0; u < k.size(); ++u)
      if (k[u]) map[u] = next++;
    slim.spec.layers[li].out_channels = next;
    slim.channel_maps.emplace(layer.id, std::move(map));
    keep[li] = std::move(k);
  }
  infer_shapes(slim.spec);

  auto alive = [&](const ChannelRef& ref) {
    return ref.layer == ChannelRef::kNetworkInput || keep[ref.layer][ref.channel] != 0;
  };

  for (std::size_t li : spec.compute_layers()) {
    const LayerSpec& layer = spec.layers[li];
    const LayerSpec& reduced = slim.spec.layers[li];
    const LayerParams& full = params.at(layer.id);
    const auto& rows = keep[li];
    std::vector<std::size_t> cols;
    const auto& inputs = dep.inputs_of(li);
    for (std::size_t v = 0; v < inputs.size(); ++v)
      if (alive(inputs[v])) cols.push_back(v);
    if (cols.size() != static_cast<std::size_t>(reduced.in_channels))
      throw ContractError("refine: wiring disagrees with shape inference at '" + layer.id + "'");

    Shape shape = full.weight.shape();
    const std::size_t in_full = shape[1];
    const std::size_t taps = full.weight.size() / (shape[0] * in_full);
    shape[0] = static_cast<std::size_t>(reduced.out_channels);
    shape[1] = cols.size();
    std::vector<double> values;
    values.reserve(numel(shape));
    for (std::size_t u = 0; u < rows.size(); ++u) {
      if (!rows[u]) continue;
      for (std::size_t v : cols) {
        const double* src = full.weight.data().data() + (u * in_full + v) * taps;
        values.insert(values.end(), src, src + taps);
      }
    }
    LayerParams p{layer.id, Tensor(shape, std::move(values)), std::nullopt};
    if (full.bias) {
      std::vector<double> b;
      for (std::size_t u = 0; u < rows.size(); ++u)
        if (rows[u]) b.push_back((*full.bias)[u]);
      const std::size_t n = b.size();
      p.bias = Tensor({n}, std::move(b));
    }
    slim.params.layers.push_back(std::move(p));
  }
  return slim;
}

SlimBuild rebuild_at(const SlimBuild& slim, const std::array<int, 3>& spatial) {
  SlimBuild out = slim;
  out.spec.input_shape = {slim.spec.input_shape[0], spatial[0], spatial[1], spatial[2]};
  infer_shapes(out.spec);
  return out;
}

MaskSet transfer_masks(const MaskSet& masks, const NetSpec& target) {
  const auto compute = target.compute_layers();
  const std::size_t common = std::min(compute.size(), masks.layers.size());
  for (std::size_t i = 0; i < common; ++i) {
    const LayerSpec& layer = target.layers[compute[i]];
    const LayerMask& m = masks.layers[i];
    if (layer.id != m.layer)
      throw ContractError("transfer: layer '" + m.layer + "' does not match target layer '" + layer.id + "'");
    if (!layer.is_protected && m.keep.size() != static_cast<std::size_t>(layer.out_channels))
      throw ContractError("transfer: layer '" + layer.id + "' has " + std::to_string(layer.out_channels) +
                          " neurons in the target but " + std::to_string(m.keep.size()) + " in the masks");
  }
  if (compute.size() != masks.layers.size()) {
    const std::string first = compute.size() > common ? target.layers[compute[common]].id : masks.layers[common].layer;
    throw ContractError("transfer: layer count differs (" + std::to_string(masks.layers.size()) + " masked vs " +
                        std::to_string(compute.size()) + " in target); first divergent layer '" + first + "'");
  }
  MaskSet out;
  for (std::size_t i = 0; i < compute.size(); ++i) {
    const LayerSpec& layer = target.layers[compute[i]];
    if (layer.is_protected)
      out.layers.push_back({layer.id, std::vector<std::uint8_t>(static_cast<std::size_t>(layer.out_channels), 1), true});
    else
      out.layers.push_back({layer.id, masks.layers[i].keep, false});
  }
  out.recompute_sparsity();
  return out;
}

ForwardOptions masked_forward_options(const MaskSet& masks) {
  ForwardOptions options;
  options.placement = MaskPlacement::post_activation;
  for (const auto& m : masks.layers) {
    std::vector<double> scales(m.keep.begin(), m.keep.end());
    const std::size_t n = scales.size();
    options.neuron_masks.emplace(m.layer, ad::Var::constant(Tensor({n}, std::move(scales))));
  }
  return options;
}

namespace {

constexpr char kMagic[8] = {'R', 'A', 'N', 'P', 'P', 'A', 'R', '1'};

template <typename T>
void put(std::ofstream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::ifstream& in, const std::filesystem::path& path) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) throw ParseError("truncated parameter blob " + path.string());
  return value;
}

void put_values(std::ofstream& out, const Tensor& t) {
  out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
}

std::vector<double> get_values(std::ifstream& in, std::size_t count, const std::filesystem::path& path) {
  std::vector<double> values(count);
  if (!in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(count * sizeof(double))))
    throw ParseError("truncated parameter blob " + path.string());
  return values;
}

}  // namespace

void save_params(const ParamSet& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write parameter blob " + path.string());
  out.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.layers.size()));
  for (const auto& p : params.layers) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.layer.size()));
    out.write(p.layer.data(), static_cast<std::streamsize>(p.layer.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.weight.rank()));
    for (std::size_t d : p.weight.shape()) put<std::uint64_t>(out, d);
    put<std::uint8_t>(out, p.bias ? 1 : 0);
    put_values(out, p.weight);
    if (p.bias) put_values(out, *p.bias);
  }
}

ParamSet load_params(const std::filesystem::path& path, const NetSpec& spec) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open parameter blob " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0)
    throw ParseError(path.string() + " is not a parameter blob");
  const auto count = get<std::uint32_t>(in, path);
  const auto compute = spec.compute_layers();
  if (count != compute.size())
    throw ParseError("parameter blob has " + std::to_string(count) + " layers, network has " +
                     std::to_string(compute.size()));
  ParamSet params;
  for (std::uint32_t i = 0; i < count; ++i) {
    const LayerSpec& layer = spec.layers[compute[i]];
    std::string id(get<std::uint32_t>(in, path), '\0');
    if (!in.read(id.data(), static_cast<std::streamsize>(id.size()))) throw ParseError("truncated parameter blob");
    if (id != layer.id) throw ParseError("parameter blob layer '" + id + "' where '" + layer.id + "' was expected");
    Shape shape(get<std::uint32_t>(in, path));
    for (auto& d : shape) d = static_cast<std::size_t>(get<std::uint64_t>(in, path));
    const bool has_bias = get<std::uint8_t>(in, path) != 0;
    if (shape.empty() || shape[0] != static_cast<std::size_t>(layer.out_channels) ||
        shape[1] != static_cast<std::size_t>(layer.in_channels) || has_bias != layer.bias)
      throw ParseError("parameter blob shape " + to_string(shape) + " does not fit layer '" + id + "'");
    LayerParams p{id, Tensor(shape, get_values(in, numel(shape), path)), std::nullopt};
    if (has_bias) p.bias = Tensor({shape[0]}, get_values(in, shape[0], path));
    params.layers.push_back(std::move(p));
  }
  return params;
}

void save_slim(const SlimBuild& slim, const std::filesystem::path& stem) {
  std::filesystem::path config = stem;
  config += ".json";
  std::filesystem::path blob = stem;
  blob += ".params";
  std::ofstream out(config);
  if (!out) throw ParseError("cannot write " + config.string());
  out << netspec_to_json(slim.spec) << '\n';
  save_params(slim.params, blob);
}

SlimBuild load_slim(const std::filesystem::path& stem) {
  std::filesystem::path config = stem;
  config += ".json";
  std::filesystem::path blob = stem;
  blob += ".params";
  SlimBuild slim;
  slim.spec = load_netspec(config);
  slim.params = load_params(blob, slim.spec);
  return slim;
}

}  // namespace ranp

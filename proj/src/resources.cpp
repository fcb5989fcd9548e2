#include "ranp/resources.hpp"

#include <algorithm>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "ranp/errors.hpp"
#include "ranp/mask_search.hpp"

namespace ranp {

ResourceKind parse_resource(std::string_view name) {
  if (name == "flops" || name == "f") return ResourceKind::flops;
  if (name == "mem" || name == "memory" || name == "m") return ResourceKind::memory;
  if (name == "none") return ResourceKind::none;
  throw ContractError("unknown resource '" + std::string(name) + "' (expected flops, mem, or none)");
}

const char* resource_name(ResourceKind kind) {
  switch (kind) {
    case ResourceKind::flops: return "flops";
    case ResourceKind::memory: return "mem";
    case ResourceKind::none: return "none";
  }
  return "?";
}

std::uint64_t layer_mem(const LayerSpec& layer) { return layer.output_elements(); }

std::uint64_t layer_flops(const LayerSpec& layer) {
  if (!layer.is_compute()) return 0;
  const std::uint64_t per_output =
      2 * static_cast<std::uint64_t>(layer.kernel_volume()) * static_cast<std::uint64_t>(layer.in_channels) - 1 +
      (layer.bias ? 1 : 0);
  return per_output * layer.output_elements();
}

std::uint64_t layer_params(const LayerSpec& layer) {
  if (!layer.is_compute()) return 0;
  const auto out = static_cast<std::uint64_t>(layer.out_channels);
  return out * static_cast<std::uint64_t>(layer.in_channels) * layer.kernel_volume() + (layer.bias ? out : 0);
}

const LayerResources& ResourceProfile::at(std::string_view layer) const {
  for (const auto& r : layers)
    if (r.layer == layer) return r;
  throw ContractError("profile has no layer '" + std::string(layer) + "'");
}

std::vector<double> ResourceProfile::tau(ResourceKind kind) const {
  if (kind == ResourceKind::none) throw ContractError("tau requested for resource kind 'none'");
  std::vector<double> out;
  for (const auto& r : layers)
    if (r.compute) out.push_back(static_cast<double>(kind == ResourceKind::flops ? r.flops : r.mem));
  return out;
}

ResourceProfile profile(const NetSpec& spec, const MaskSet* masks) {
  // Effective width of every layer output: count the source channels that
  // survive. The network input never shrinks.
  const DependencyMap dep = DependencyMap::build(spec);
  std::vector<const LayerMask*> mask_of(spec.layers.size(), nullptr);
  if (masks) {
    for (const auto& m : masks->layers) {
      const std::size_t li = spec.index_of(m.layer);
      if (!spec.layers[li].is_compute()) throw ContractError("mask on non-compute layer '" + m.layer + "'");
      if (m.keep.size() != static_cast<std::size_t>(spec.layers[li].out_channels))
        throw ContractError("mask for '" + m.layer + "' has " + std::to_string(m.keep.size()) + " entries, layer has " +
                            std::to_string(spec.layers[li].out_channels) + " neurons");
      mask_of[li] = &m;
    }
  }
  auto alive = [&](const ChannelRef& ref) {
    if (ref.layer == ChannelRef::kNetworkInput) return true;
    const LayerMask* m = mask_of[ref.layer];
    return m == nullptr || m->keep[ref.channel] != 0;
  };
  auto count_alive = [&](const std::vector<ChannelRef>& refs) {
    return static_cast<int>(std::count_if(refs.begin(), refs.end(), alive));
  };

  ResourceProfile prof;
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    LayerSpec reduced = spec.layers[li];
    reduced.out_shape[0] = static_cast<std::size_t>(count_alive(dep.sources(li)));
    if (reduced.is_compute()) {
      reduced.in_channels = count_alive(dep.inputs_of(li));
      reduced.out_channels = static_cast<int>(reduced.out_shape[0]);
    }
    LayerResources r;
    r.layer = reduced.id;
    r.kind = reduced.kind;
    r.compute = reduced.is_compute();
    r.in_channels = reduced.in_channels;
    r.out_channels = static_cast<int>(reduced.out_shape[0]);
    // A fully pruned layer costs nothing; the formula's "-1" would underflow.
    const bool dead = r.compute && (reduced.in_channels == 0 || reduced.out_channels == 0);
    r.flops = dead ? 0 : layer_flops(reduced);
    r.mem = layer_mem(reduced);
    r.params = r.out_channels == 0 ? 0 : layer_params(reduced);
    prof.total_flops += r.flops;
    prof.total_mem += r.mem;
    prof.total_params += r.params;
    prof.layers.push_back(std::move(r));
  }
  return prof;
}

TauNormalization parse_tau_normalization(std::string_view name) {
  if (name == "max") return TauNormalization::max;
  if (name == "mean") return TauNormalization::mean;
  if (name == "sum") return TauNormalization::sum;
  throw ContractError("unknown tau normalization '" + std::string(name) + "' (expected max, mean, or sum)");
}

std::vector<double> normalized_tau(const ResourceProfile& prof, ResourceKind kind, TauNormalization norm) {
  std::vector<double> tau = prof.tau(kind);
  if (tau.empty()) return tau;
  double scale = 0.0;
  switch (norm) {
    case TauNormalization::max: scale = *std::max_element(tau.begin(), tau.end()); break;
    case TauNormalization::sum: scale = std::accumulate(tau.begin(), tau.end(), 0.0); break;
    case TauNormalization::mean:
      scale = std::accumulate(tau.begin(), tau.end(), 0.0) / static_cast<double>(tau.size());
      break;
  }
  if (scale <= 0.0) throw ContractError("resource profile has no positive tau to normalize by");
  for (double& t : tau) t /= scale;
  return tau;
}

double reduction_percent(double full, double reduced) {
  if (full == 0.0) return 0.0;
  return 100.0 * (1.0 - reduced / full);
}

std::string profile_table(const ResourceProfile& prof, const ResourceProfile* full) {
  std::ostringstream out;
  out << std::left << std::setw(14) << "layer" << std::setw(14) << "kind" << std::right << std::setw(6) << "in"
      << std::setw(6) << "out" << std::setw(16) << "flops" << std::setw(12) << "mem" << std::setw(10) << "params"
      << '\n';
  for (const auto& r : prof.layers) {
    out << std::left << std::setw(14) << r.layer << std::setw(14) << kind_name(r.kind) << std::right << std::setw(6)
        << (r.compute ? std::to_string(r.in_channels) : "-") << std::setw(6) << r.out_channels << std::setw(16)
        << r.flops << std::setw(12) << r.mem << std::setw(10) << r.params << '\n';
  }
  out << std::fixed << std::setprecision(6);
  out << "total flops  " << prof.total_flops << " (" << prof.gflops() << " GFLOPs)\n";
  out << "total memory " << prof.total_mem << " elements (" << prof.memory_mb()
      << " MB activations, 4 B/element, batch 1)\n";
  out << "total params " << prof.total_params << " (" << prof.params_mb() << " MB)\n";
  if (full) {
    out << std::setprecision(2);
    out << "reduction    flops " << reduction_percent(double(full->total_flops), double(prof.total_flops))
        << "%  memory " << reduction_percent(double(full->total_mem), double(prof.total_mem)) << "%  params "
        << reduction_percent(double(full->total_params), double(prof.total_params)) << "%\n";
  }
  return out.str();
}

std::string profile_csv(const ResourceProfile& prof) {
  std::ostringstream out;
  out << "layer,kind,in_channels,out_channels,flops,mem,params\n";
  for (const auto& r : prof.layers)
    out << r.layer << ',' << kind_name(r.kind) << ',' << r.in_channels << ',' << r.out_channels << ',' << r.flops
        << ',' << r.mem << ',' << r.params << '\n';
  out << "total,,,," << prof.total_flops << ',' << prof.total_mem << ',' << prof.total_params << '\n';
  return out.str();
}

std::string profile_json(const ResourceProfile& prof, const ResourceProfile* full) {
  nlohmann::json doc;
  doc["layers"] = nlohmann::json::array();
  for (const auto& r : prof.layers)
    doc["layers"].push_back({{"layer", r.layer},
                             {"kind", kind_name(r.kind)},
                             {"in_channels", r.in_channels},
                             {"out_channels", r.out_channels},
                             {"flops", r.flops},
                             {"mem", r.mem},
                             {"params", r.params}});
  doc["total_flops"] = prof.total_flops;
  doc["total_mem"] = prof.total_mem;
  doc["total_params"] = prof.total_params;
  doc["memory_mb"] = prof.memory_mb();
  doc["params_mb"] = prof.params_mb();
  if (full) {
    doc["flops_reduction_pct"] = reduction_percent(double(full->total_flops), double(prof.total_flops));
    doc["mem_reduction_pct"] = reduction_percent(double(full->total_mem), double(prof.total_mem));
    doc["params_reduction_pct"] = reduction_percent(double(full->total_params), double(prof.total_params));
  }
  return doc.dump(2);
}

}  // namespace ranp

// ranp: resource-aware neuron pruning at initialization for small 3D CNNs.
//
// Exit codes: 0 success, 2 user error (bad flags, configs, or files),
// 3 infeasible masks or sparsity, 1 anything else (e.g. diverged training).

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "ranp/errors.hpp"
#include "ranp/harness.hpp"
#include "ranp/pipeline.hpp"
#include "ranp/refine.hpp"
#include "ranp/report.hpp"
#include "ranp/resources.hpp"

namespace fs = std::filesystem;
using namespace ranp;

namespace {

struct UserError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UserError("cannot read '" + path.string() + "'");
  std::ostringstream text;
  text << in.rdbuf();
  return text.str();
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UserError("cannot write '" + path.string() + "'");
  out << text;
}

void check_format(const std::string& format) {
  if (format != "text" && format != "csv" && format != "json")
    throw UserError("--format must be text, csv, or json");
}

// A network plus parameters: a config initialised from --init/--seed, or a
// refined network saved as <stem>.json + <stem>.params.
struct Network {
  NetSpec spec;
  ParamSet params;
  bool slim = false;
};

Network load_network(const std::string& net, const std::string& init, std::uint64_t seed) {
  fs::path path(net);
  fs::path stem = path;
  stem.replace_extension();
  if (fs::exists(stem.string() + ".params")) {
    SlimBuild build = load_slim(stem);
    return {std::move(build.spec), std::move(build.params), true};
  }
  Network n;
  n.spec = load_netspec(path);
  n.params = init_params(n.spec, parse_init(init), seed);
  return n;
}

struct ScoringFlags {
  std::string net;
  std::string mode = "ranp-f";
  double lambda = 11.0;
  std::string resource;
  std::string importance = "mpmg";
  std::string agg = "sum";
  std::string tau_norm = "max";
  std::size_t prune_batches = 1;
  std::size_t batch_size = 2;
  std::string init = "glorot";
  std::uint64_t seed = 0;
  std::string out = ".";
  std::string format = "text";
};

void add_scoring_flags(CLI::App* cmd, ScoringFlags& f) {
  cmd->add_option("--net", f.net, "network config JSON")->required();
  cmd->add_option("--mode", f.mode, "vanilla | weighted | ranp-f | ranp-m | random | layerwise")
      ->capture_default_str();
  cmd->add_option("--lambda", f.lambda, "resource reweighting strength")->capture_default_str();
  cmd->add_option("--resource", f.resource,
                  "flops | mem; must agree with the mode (ranp-f uses flops, ranp-m uses mem)");
  cmd->add_option("--importance", f.importance, "mpmg | mnmg")->capture_default_str();
  cmd->add_option("--agg", f.agg, "sum | mean | max")->capture_default_str();
  cmd->add_option("--tau-norm", f.tau_norm, "normalise layer costs by max | mean | sum")->capture_default_str();
  cmd->add_option("--prune-batches", f.prune_batches, "mini-batches of synthetic data used for scoring")
      ->capture_default_str();
  cmd->add_option("--batch-size", f.batch_size, "samples per scoring batch")->capture_default_str();
  cmd->add_option("--init", f.init, "glorot | orthogonal")->capture_default_str();
  cmd->add_option("--seed", f.seed, "seeds initialisation, scoring data, and random masks")->capture_default_str();
  cmd->add_option("--out", f.out, "output directory")->capture_default_str();
  cmd->add_option("--format", f.format, "stdout format: text | csv | json")->capture_default_str();
}

PruneConfig prune_config(const ScoringFlags& f) {
  PruneConfig cfg;
  cfg.mode = parse_prune_mode(f.mode);
  cfg.importance.mode = parse_importance_mode(f.importance);
  cfg.importance.aggregator = parse_aggregator(f.agg);
  cfg.lambda = f.lambda;
  cfg.normalization = parse_tau_normalization(f.tau_norm);
  cfg.seed = f.seed;
  if (!f.resource.empty()) {
    const ResourceKind kind = parse_resource(f.resource);
    const bool ok = (cfg.mode == PruneMode::ranp_f && kind == ResourceKind::flops) ||
                    (cfg.mode == PruneMode::ranp_m && kind == ResourceKind::memory);
    if (!ok) throw UserError("--resource " + f.resource + " does not match --mode " + f.mode);
  }
  if (f.lambda < 0.0) throw UserError("--lambda must be non-negative");
  return cfg;
}

struct Scored {
  Network net;
  Pruner pruner;
};

Scored score(const ScoringFlags& f) {
  check_format(f.format);
  PruneConfig cfg = prune_config(f);
  Network net = load_network(f.net, f.init, f.seed);
  if (net.slim) throw UserError("--net must be an architecture config, not a refined network");
  auto batches = pruning_batches(net.spec, f.prune_batches, f.batch_size, f.seed);
  ScoreStages stages = score_stages(net.spec, net.params, batches, cfg);
  for (const auto& w : stages.warnings) std::cerr << "warning: " << w << '\n';
  Pruner pruner(net.spec, std::move(stages), cfg);
  return {std::move(net), std::move(pruner)};
}

std::string retained_table(const MaskSet& masks) {
  std::ostringstream out;
  out << "layer            retained / total\n";
  for (const auto& m : masks.layers) {
    out << m.layer << std::string(m.layer.size() < 16 ? 17 - m.layer.size() : 1, ' ') << m.retained() << " / "
        << m.keep.size() << (m.is_protected ? "  (protected)" : "") << '\n';
  }
  return out.str();
}

nlohmann::ordered_json retained_json(const MaskSet& masks) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& m : masks.layers) j[m.layer] = {{"retained", m.retained()}, {"total", m.keep.size()}};
  return j;
}

// Masks file, importance dumps, and the run report for one mask set.
void write_prune_outputs(const ScoringFlags& f, const Scored& s, const MaskSet& masks, double requested) {
  const fs::path dir(f.out);
  write_file(dir / "masks.json", masks_to_json(masks) + "\n");
  const auto& st = s.pruner.stages();
  write_file(dir / "importance_raw.json", importance_to_json(st.raw) + "\n");
  write_file(dir / "importance_weighted.json", importance_to_json(st.weighted) + "\n");
  write_file(dir / "importance_reweighted.json", importance_to_json(st.reweighted) + "\n");
  const ImportanceMap all[] = {st.raw, st.weighted, st.reweighted};
  write_file(dir / "importance.csv", importance_to_csv(all));

  const ResourceProfile full = profile(s.net.spec);
  const ResourceProfile pruned = profile(s.net.spec, &masks);
  RunRecord run = make_run_record(f.mode, f.mode, masks.sparsity_achieved, pruned);
  nlohmann::ordered_json report = nlohmann::ordered_json::parse(run_record_to_json(run));
  report["requested_sparsity"] = requested;
  report["retained"] = retained_json(masks);
  report["profile"] = nlohmann::json::parse(profile_json(pruned, &full));
  write_file(dir / "report.json", report.dump(2) + "\n");

  if (f.format == "json") {
    std::cout << report.dump(2) << '\n';
  } else if (f.format == "csv") {
    std::cout << profile_csv(pruned);
  } else {
    std::cout << "mode " << f.mode << ", sparsity " << masks.sparsity_achieved << " (requested " << requested
              << ")\n\n"
              << retained_table(masks) << '\n'
              << profile_table(pruned, &full);
  }
}

int cmd_resources(const std::string& net, const std::string& masks_path, const std::string& format) {
  check_format(format);
  NetSpec spec = load_network(net, "glorot", 0).spec;
  const ResourceProfile full = profile(spec);
  if (masks_path.empty()) {
    std::cout << (format == "json" ? profile_json(full) + "\n" : format == "csv" ? profile_csv(full) : profile_table(full));
    return 0;
  }
  const MaskSet masks = masks_from_json(read_file(masks_path), spec);
  require_feasible(masks);
  const ResourceProfile pruned = profile(spec, &masks);
  std::cout << (format == "json"  ? profile_json(pruned, &full) + "\n"
                : format == "csv" ? profile_csv(pruned)
                                  : profile_table(pruned, &full));
  return 0;
}

int cmd_prune(const ScoringFlags& f, double sparsity, bool automatic, double delta) {
  Scored s = score(f);
  double kappa = sparsity;
  if (automatic) {
    SearchResult found = s.pruner.search({0.0, 1.0, delta});
    std::cerr << "auto-search: kappa* = " << found.kappa << " after " << found.iterations << " iterations\n";
    kappa = found.kappa;
  } else {
    check_kappa(kappa);
  }
  MaskSet masks = s.pruner.masks_at(kappa);
  require_feasible(masks);
  write_prune_outputs(f, s, masks, kappa);
  return 0;
}

int cmd_search(const ScoringFlags& f, double delta) {
  Scored s = score(f);
  SearchResult found = s.pruner.search({0.0, 1.0, delta});
  MaskSet masks = s.pruner.masks_at(found.kappa);
  if (f.format == "json") {
    nlohmann::ordered_json j;
    j["mode"] = f.mode;
    j["kappa"] = found.kappa;
    j["iterations"] = found.iterations;
    j["sparsity_achieved"] = masks.sparsity_achieved;
    j["retained"] = retained_json(masks);
    std::cout << j.dump(2) << '\n';
  } else {
    std::cout << "kappa* " << found.kappa << "\niterations " << found.iterations << "\nsparsity_achieved "
              << masks.sparsity_achieved << "\n\n"
              << retained_table(masks);
  }
  write_file(fs::path(f.out) / "masks.json", masks_to_json(masks) + "\n");
  return 0;
}

int cmd_refine(const std::string& net, const std::string& masks_path, const std::string& init, std::uint64_t seed,
               const std::string& out, const std::vector<int>& input_size) {
  Network n = load_network(net, init, seed);
  if (n.slim) throw UserError("--net must be an architecture config, not a refined network");
  const MaskSet masks = masks_from_json(read_file(masks_path), n.spec);
  SlimBuild slim = refine(n.spec, n.params, masks, DependencyMap::build(n.spec));
  if (!input_size.empty()) {
    if (input_size.size() != 3) throw UserError("--input-size takes three extents D H W");
    slim = rebuild_at(slim, {input_size[0], input_size[1], input_size[2]});
  }
  fs::path stem(out);
  stem.replace_extension();
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  save_slim(slim, stem);
  const ResourceProfile full = profile(n.spec);
  std::cout << "wrote " << stem.string() << ".json and " << stem.string() << ".params\n\n"
            << profile_table(profile(slim.spec), input_size.empty() ? &full : nullptr);
  return 0;
}

struct TrainFlags {
  std::string net;
  std::string masks;
  std::string task;
  std::string init = "glorot";
  std::string optimizer = "adam";
  std::string label;
  int epochs = 40;
  int samples = 48;
  int eval_samples = 0;
  double lr = 5e-3;
  double weight_decay = 1e-4;
  double alpha = 0.25;
  bool amsgrad = false;
  std::size_t batch_size = 4;
  int decay_every = 0;
  std::uint64_t seed = 0;
  std::string metrics_out;
  std::string out;
};

int cmd_train(const TrainFlags& f) {
  Network n = load_network(f.net, f.init, f.seed);
  double sparsity = 0.0;
  if (!f.masks.empty()) {
    if (n.slim) throw UserError("--masks applies to architecture configs, not refined networks");
    const MaskSet masks = masks_from_json(read_file(f.masks), n.spec);
    SlimBuild slim = refine(n.spec, n.params, masks, DependencyMap::build(n.spec));
    n.spec = std::move(slim.spec);
    n.params = std::move(slim.params);
    sparsity = masks.sparsity_achieved;
  }
  const TaskKind kind = task_for(n.spec);
  if (!f.task.empty() && parse_task(f.task) != kind)
    throw UserError(std::string("--task ") + f.task + " does not match the network head (" + task_name(kind) + ")");

  SynthTask task = task_for_network(n.spec, f.samples, f.seed);
  const Dataset train_data = gen_synth(task);
  Dataset eval_data;
  if (f.eval_samples > 0) {
    task.samples = f.eval_samples;
    task.seed = f.seed + 1000;
    eval_data = gen_synth(task);
  }

  TrainConfig cfg;
  cfg.optimizer = parse_optimizer(f.optimizer);
  cfg.lr = f.lr;
  cfg.weight_decay = f.weight_decay;
  cfg.amsgrad = f.amsgrad;
  cfg.epochs = f.epochs;
  cfg.batch_size = f.batch_size;
  cfg.decay_every = f.decay_every;
  cfg.seed = f.seed;
  cfg.loss = {kind == TaskKind::segmentation ? LossKind::ce_plus_dice : LossKind::cross_entropy, f.alpha};
  TrainResult result = train(n.spec, n.params, train_data, cfg, eval_data.empty() ? nullptr : &eval_data);

  const std::string csv = history_csv(result.history);
  if (!f.metrics_out.empty()) write_file(f.metrics_out, csv);
  std::cout << csv;

  if (!f.out.empty()) {
    std::string label = f.label;
    if (label.empty()) label = f.masks.empty() && !n.slim ? "full" : "pruned";
    RunRecord run = make_run_record(fs::path(f.out).stem().string(), label, sparsity, profile(n.spec));
    run.metric_name = kind == TaskKind::segmentation ? "miou" : "top1";
    if (!result.history.empty()) run.metric = result.history.back().metric;
    write_file(f.out, run_record_to_json(run) + "\n");
  }
  return 0;
}

int cmd_report(const std::vector<std::string>& runs, const std::string& format, const std::string& out) {
  check_format(format);
  std::vector<RunRecord> records;
  for (const auto& path : runs) {
    RunRecord r = run_record_from_json(read_file(path));
    if (r.name.empty()) r.name = fs::path(path).stem().string();
    records.push_back(std::move(r));
  }
  const auto rows = compare_runs(records);
  const std::string text = format == "json" ? report_json(rows) + "\n" : format == "csv" ? report_csv(rows) : report_table(rows);
  if (!out.empty()) write_file(out, text);
  std::cout << text;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Resource-aware neuron pruning at initialization for 3D CNNs"};
  app.require_subcommand(1);

  std::string net, masks_path, format = "text", init = "glorot", out;
  std::uint64_t seed = 0;

  auto* resources = app.add_subcommand("resources", "per-layer FLOPs, memory, and parameter counts");
  resources->add_option("--net", net, "network config JSON or refined network")->required();
  resources->add_option("--masks", masks_path, "mask file; reports reductions against the full network");
  resources->add_option("--format", format, "text | csv | json")->capture_default_str();

  ScoringFlags prune_flags;
  double sparsity = 0.0, delta = 1e-4;
  bool automatic = false;
  auto* prune = app.add_subcommand("prune", "score neurons and write masks, importance dumps, and a report");
  add_scoring_flags(prune, prune_flags);
  auto* sparsity_opt = prune->add_option("--sparsity", sparsity, "fraction of neurons to prune, in [0, 1)");
  auto* auto_opt = prune->add_flag("--auto", automatic, "use the largest feasible sparsity found by bisection");
  sparsity_opt->excludes(auto_opt);
  prune->add_option("--delta", delta, "bisection tolerance for --auto")->capture_default_str();

  ScoringFlags search_flags;
  double search_delta = 1e-4;
  auto* search = app.add_subcommand("search", "bisection for the maximum feasible sparsity");
  add_scoring_flags(search, search_flags);
  search->add_option("--delta", search_delta, "bisection tolerance")->capture_default_str();

  std::vector<int> input_size;
  auto* refine_cmd = app.add_subcommand("refine", "materialise masks into a smaller network");
  refine_cmd->add_option("--net", net, "network config JSON")->required();
  refine_cmd->add_option("--masks", masks_path, "mask file")->required();
  refine_cmd->add_option("--init", init, "glorot | orthogonal")->capture_default_str();
  refine_cmd->add_option("--seed", seed, "initialisation seed")->capture_default_str();
  refine_cmd->add_option("--out", out, "output stem; writes <stem>.json and <stem>.params")->required();
  refine_cmd->add_option("--input-size", input_size, "rebuild for a new spatial input size D H W")->expected(3);

  TrainFlags tf;
  auto* train_cmd = app.add_subcommand("train", "train a full or pruned network on synthetic data");
  train_cmd->add_option("--net", tf.net, "network config JSON or refined network <stem>.json")->required();
  train_cmd->add_option("--masks", tf.masks, "prune the config with this mask file before training");
  train_cmd->add_option("--task", tf.task, "synth-seg | synth-cls (must match the network head)");
  train_cmd->add_option("--epochs", tf.epochs, "training epochs")->capture_default_str();
  train_cmd->add_option("--samples", tf.samples, "synthetic training samples")->capture_default_str();
  train_cmd->add_option("--eval-samples", tf.eval_samples, "held-out samples for the metric (0: training set)")
      ->capture_default_str();
  train_cmd->add_option("--optimizer", tf.optimizer, "adam | sgd-nesterov")->capture_default_str();
  train_cmd->add_option("--lr", tf.lr, "learning rate")->capture_default_str();
  train_cmd->add_option("--weight-decay", tf.weight_decay, "L2 weight decay")->capture_default_str();
  train_cmd->add_flag("--amsgrad", tf.amsgrad, "AMSGrad variant of Adam");
  train_cmd->add_option("--batch-size", tf.batch_size, "mini-batch size")->capture_default_str();
  train_cmd->add_option("--decay-every", tf.decay_every, "step decay period in epochs (0: off)")
      ->capture_default_str();
  train_cmd->add_option("--alpha", tf.alpha, "dice weight for segmentation")->capture_default_str();
  train_cmd->add_option("--init", tf.init, "glorot | orthogonal")->capture_default_str();
  train_cmd->add_option("--seed", tf.seed, "seeds initialisation, data, and shuffling")->capture_default_str();
  train_cmd->add_option("--metrics-out", tf.metrics_out, "per-epoch history CSV");
  train_cmd->add_option("--out", tf.out, "run record JSON for `ranp report`");
  train_cmd->add_option("--label", tf.label, "mode column in the run record (default full / pruned)");

  std::vector<std::string> runs;
  auto* report = app.add_subcommand("report", "compare run records against the full network");
  report->add_option("runs", runs, "run record JSON files")->required();
  report->add_option("--format", format, "text | csv | json")->capture_default_str();
  report->add_option("--out", out, "also write the table to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*resources) return cmd_resources(net, masks_path, format);
    if (*prune) {
      if (!*sparsity_opt && !automatic) throw UserError("prune needs --sparsity or --auto");
      return cmd_prune(prune_flags, sparsity, automatic, delta);
    }
    if (*search) return cmd_search(search_flags, search_delta);
    if (*refine_cmd) return cmd_refine(net, masks_path, init, seed, out, input_size);
    if (*train_cmd) return cmd_train(tf);
    if (*report) return cmd_report(runs, format, out);
  } catch (const InfeasibleError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const UserError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

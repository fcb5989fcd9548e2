#include "ranp/harness.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "ranp/errors.hpp"

namespace ranp {

TaskKind parse_task(std::string_view name) {
  if (name == "synth-seg" || name == "segmentation" || name == "seg") return TaskKind::segmentation;
  if (name == "synth-cls" || name == "classification" || name == "cls") return TaskKind::classification;
  throw ContractError("unknown task '" + std::string(name) + "' (expected synth-seg or synth-cls)");
}

const char* task_name(TaskKind kind) {
  return kind == TaskKind::segmentation ? "synth-seg" : "synth-cls";
}

TaskKind task_for(const NetSpec& spec) {
  const auto& out = spec.layers.back().out_shape;
  return out[1] * out[2] * out[3] == 1 ? TaskKind::classification : TaskKind::segmentation;
}

namespace {

struct Blob {
  bool sphere;
  double cz, cy, cx;
  double rz, ry, rx;

  bool contains(double z, double y, double x) const {
    const double dz = (z - cz) / rz, dy = (y - cy) / ry, dx = (x - cx) / rx;
    if (sphere) return dz * dz + dy * dy + dx * dx <= 1.0;
    return std::abs(dz) <= 1.0 && std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
  }
};

Blob random_blob(std::mt19937_64& rng, const std::array<int, 4>& shape, bool sphere, double min_frac,
                 double max_frac) {
  Blob b{sphere, 0, 0, 0, 0, 0, 0};
  double* centers[3] = {&b.cz, &b.cy, &b.cx};
  double* radii[3] = {&b.rz, &b.ry, &b.rx};
  for (int axis = 0; axis < 3; ++axis) {
    const double extent = shape[axis + 1];
    const double r_lo = std::max(0.75, extent * min_frac);
    const double r_hi = std::max(r_lo, extent * max_frac);
    const double r = std::uniform_real_distribution<double>(r_lo, r_hi)(rng);
    const double c_lo = std::min(r, (extent - 1) / 2.0);
    const double c_hi = std::max(c_lo, extent - 1 - r);
    *radii[axis] = r;
    *centers[axis] = std::uniform_real_distribution<double>(c_lo, c_hi)(rng);
  }
  return b;
}

}  // namespace

Dataset gen_synth(const SynthTask& task) {
  if (task.classes < 2) throw ContractError("gen_synth: need at least two classes");
  if (task.samples < 1) throw ContractError("gen_synth: need at least one sample");
  for (int e : task.volume_shape)
    if (e < 1) throw ContractError("gen_synth: volume extents must be positive");

  std::mt19937_64 rng(task.seed);
  std::normal_distribution<double> noise(0.0, task.noise);
  const auto& vs = task.volume_shape;
  const std::size_t channels = static_cast<std::size_t>(vs[0]);
  const std::size_t voxels = static_cast<std::size_t>(vs[1]) * vs[2] * vs[3];

  Dataset data;
  data.reserve(static_cast<std::size_t>(task.samples));
  for (int i = 0; i < task.samples; ++i) {
    std::vector<double> level(voxels, 0.0);
    std::vector<int> labels(voxels, 0);
    auto paint = [&](const Blob& blob, int cls, double intensity) {
      std::size_t at = 0;
      for (int z = 0; z < vs[1]; ++z)
        for (int y = 0; y < vs[2]; ++y)
          for (int x = 0; x < vs[3]; ++x, ++at)
            if (blob.contains(z, y, x)) {
              labels[at] = cls;
              level[at] = intensity;
            }
    };

    Sample sample;
    if (task.kind == TaskKind::segmentation) {
      const int extra = std::uniform_int_distribution<int>(0, 2)(rng);
      std::vector<int> classes;
      for (int e = 0; e < extra; ++e) classes.push_back(std::uniform_int_distribution<int>(1, task.classes - 1)(rng));
      // The guaranteed class goes last so nothing paints over it.
      classes.push_back(1 + i % (task.classes - 1));
      for (int cls : classes) {
        const bool sphere = std::bernoulli_distribution(0.5)(rng);
        paint(random_blob(rng, vs, sphere, 0.2, 0.4), cls, static_cast<double>(cls));
      }
      sample.target = labels;
    } else {
      const int cls = i % task.classes;
      for (int b = 0; b <= cls; ++b) paint(random_blob(rng, vs, true, 0.12, 0.2), 1, static_cast<double>(cls + 1));
      sample.target = {cls};
    }

    Tensor volume({channels, static_cast<std::size_t>(vs[1]), static_cast<std::size_t>(vs[2]),
                   static_cast<std::size_t>(vs[3])},
                  0.0);
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t v = 0; v < voxels; ++v) volume[c * voxels + v] = level[v] + noise(rng);
    sample.volume = std::move(volume);
    data.push_back(std::move(sample));
  }
  return data;
}

Batch make_batch(const Dataset& data, std::span<const std::size_t> order) {
  if (order.empty()) throw ContractError("make_batch: empty batch");
  const Shape& vs = data.at(order[0]).volume.shape();
  Shape shape{order.size()};
  shape.insert(shape.end(), vs.begin(), vs.end());
  std::vector<double> values;
  values.reserve(numel(shape));
  Batch batch;
  for (std::size_t idx : order) {
    const Sample& s = data.at(idx);
    if (s.volume.shape() != vs) throw ShapeError("make_batch: samples have different shapes");
    values.insert(values.end(), s.volume.data().begin(), s.volume.data().end());
    batch.targets.insert(batch.targets.end(), s.target.begin(), s.target.end());
  }
  batch.inputs = Tensor(std::move(shape), std::move(values));
  return batch;
}

std::vector<Batch> make_batches(const Dataset& data, std::size_t batch_size, std::size_t max_batches) {
  if (batch_size == 0) throw ContractError("make_batches: batch size must be positive");
  if (data.empty()) throw ContractError("make_batches: empty dataset");
  const std::size_t size = std::min(batch_size, data.size());
  std::size_t count = data.size() / size;
  if (max_batches > 0) count = std::min(count, max_batches);
  std::vector<Batch> batches;
  std::vector<std::size_t> order(size);
  for (std::size_t b = 0; b < count; ++b) {
    std::iota(order.begin(), order.end(), b * size);
    batches.push_back(make_batch(data, order));
  }
  return batches;
}

std::vector<int> argmax_labels(const Tensor& scores) {
  if (scores.rank() < 2) throw ShapeError("argmax_labels: scores need [N, C, ...]");
  const std::size_t batch = scores.dim(0);
  const std::size_t classes = scores.dim(1);
  const std::size_t inner = scores.size() / (batch * classes);
  std::vector<int> labels(batch * inner);
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = n * classes * inner + i;
      std::size_t best = 0;
      for (std::size_t c = 1; c < classes; ++c)
        if (scores[base + c * inner] > scores[base + best * inner]) best = c;
      labels[n * inner + i] = static_cast<int>(best);
    }
  return labels;
}

namespace {

struct Overlap {
  std::vector<std::size_t> pred, truth, both;
};

Overlap count_overlap(std::span<const int> pred, std::span<const int> target, int classes) {
  if (pred.size() != target.size()) throw ShapeError("prediction and target sizes differ");
  Overlap o{std::vector<std::size_t>(classes, 0), std::vector<std::size_t>(classes, 0),
            std::vector<std::size_t>(classes, 0)};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int p = pred[i], t = target[i];
    if (t < 0 || t >= classes || p < 0 || p >= classes)
      throw ContractError("class index outside [0, " + std::to_string(classes) + ")");
    ++o.pred[p];
    ++o.truth[t];
    if (p == t) ++o.both[p];
  }
  return o;
}

}  // namespace

double dice_overlap(std::span<const int> pred, std::span<const int> target, int classes) {
  const Overlap o = count_overlap(pred, target, classes);
  double total = 0.0;
  int present = 0;
  for (int c = 0; c < classes; ++c) {
    const std::size_t denom = o.pred[c] + o.truth[c];
    if (denom == 0) continue;
    total += 2.0 * static_cast<double>(o.both[c]) / static_cast<double>(denom);
    ++present;
  }
  return present == 0 ? 1.0 : total / present;
}

LossValue compute_loss(const ad::Var& logits, std::span<const int> targets, const LossConfig& config) {
  if (config.alpha < 0.0) throw ContractError("loss: alpha must be non-negative");
  LossValue value;
  value.total = ad::cross_entropy(logits, targets);
  value.cross_entropy = value.total.value().item();
  const int classes = static_cast<int>(logits.shape()[1]);
  value.dice = dice_overlap(argmax_labels(logits.value()), targets, classes);
  if (config.kind == LossKind::ce_plus_dice && config.alpha > 0.0)
    value.total = ad::add(value.total, ad::Var::constant(Tensor::scalar(config.alpha * (1.0 - value.dice))));
  return value;
}

SegmentationScores segmentation_metrics(std::span<const int> pred, std::span<const int> target, int classes) {
  const Overlap o = count_overlap(pred, target, classes);
  SegmentationScores s{std::vector<double>(classes, 0.0), std::vector<bool>(classes, false), 0.0};
  int present = 0;
  for (int c = 0; c < classes; ++c) {
    const std::size_t uni = o.pred[c] + o.truth[c] - o.both[c];
    if (uni == 0) continue;
    s.present[c] = true;
    s.iou[c] = static_cast<double>(o.both[c]) / static_cast<double>(uni);
    s.miou += s.iou[c];
    ++present;
  }
  s.miou = present == 0 ? 1.0 : s.miou / present;
  return s;
}

ClassificationScores classification_metrics(const Tensor& scores, std::span<const int> targets) {
  const std::size_t batch = scores.dim(0);
  const std::size_t classes = scores.dim(1);
  if (scores.size() != batch * classes) throw ShapeError("classification_metrics: scores must be [N, C, 1, 1, 1]");
  if (targets.size() != batch) throw ShapeError("classification_metrics: one target per sample");
  ClassificationScores out;
  for (std::size_t n = 0; n < batch; ++n) {
    const int t = targets[n];
    if (t < 0 || static_cast<std::size_t>(t) >= classes) throw ContractError("classification target out of range");
    const double mine = scores[n * classes + static_cast<std::size_t>(t)];
    std::size_t rank = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      const double other = scores[n * classes + c];
      if (other > mine || (other == mine && c < static_cast<std::size_t>(t))) ++rank;
    }
    if (rank < 1) out.top1 += 1.0;
    if (rank < 5) out.top5 += 1.0;
  }
  out.top1 /= static_cast<double>(batch);
  out.top5 /= static_cast<double>(batch);
  return out;
}

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "sgd" || name == "sgd-nesterov") return OptimizerKind::sgd_nesterov;
  if (name == "adam") return OptimizerKind::adam;
  throw ContractError("unknown optimizer '" + std::string(name) + "' (expected sgd-nesterov or adam)");
}

namespace {

class Optimizer {
 public:
  Optimizer(std::vector<ad::Var> params, const TrainConfig& config) : params_(std::move(params)), config_(config) {
    for (const auto& p : params_) {
      first_.emplace_back(p.value().size(), 0.0);
      second_.emplace_back(config.optimizer == OptimizerKind::adam ? p.value().size() : 0, 0.0);
      peak_.emplace_back(config.amsgrad ? p.value().size() : 0, 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step(double lr) {
    ++steps_;
    const double c1 = 1.0 - std::pow(config_.beta1, steps_);
    const double c2 = 1.0 - std::pow(config_.beta2, steps_);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor& w = params_[k].value();
      const Tensor& g = params_[k].grad();
      auto& m = first_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double grad = g[i] + config_.weight_decay * w[i];
        if (config_.optimizer == OptimizerKind::sgd_nesterov) {
          m[i] = config_.momentum * m[i] + grad;
          w[i] -= lr * (grad + config_.momentum * m[i]);
        } else {
          auto& v = second_[k];
          m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * grad;
          v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * grad * grad;
          double denom = v[i];
          if (config_.amsgrad) {
            peak_[k][i] = std::max(peak_[k][i], v[i]);
            denom = peak_[k][i];
          }
          w[i] -= lr * (m[i] / c1) / (std::sqrt(denom / c2) + config_.eps);
        }
      }
    }
  }

 private:
  std::vector<ad::Var> params_;
  const TrainConfig& config_;
  std::vector<std::vector<double>> first_, second_, peak_;
  int steps_ = 0;
};

}  // namespace

TrainResult train(const NetSpec& spec, const ParamSet& params, const Dataset& data, const TrainConfig& config,
                  const Dataset* eval) {
  if (data.empty()) throw ContractError("train: empty dataset");
  if (config.batch_size == 0) throw ContractError("train: batch size must be positive");
  ParamVars vars = ParamVars::from(params, /*trainable=*/true);
  Optimizer optimizer(vars.all(), config);
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double lr = config.lr;
    if (config.decay_every > 0) lr *= std::pow(config.decay_gamma, epoch / config.decay_every);
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t size = std::min(config.batch_size, order.size() - start);
      Batch batch = make_batch(data, std::span<const std::size_t>(order).subspan(start, size));
      ForwardResult out = forward(spec, vars, ad::Var::constant(batch.inputs));
      LossValue loss = compute_loss(out.output, batch.targets, config.loss);
      const double value = loss.total.value().item();
      if (!std::isfinite(value))
        throw std::runtime_error("training diverged: non-finite loss at epoch " + std::to_string(epoch + 1) +
                                 " (lr " + std::to_string(lr) + ")");
      optimizer.zero_grad();
      ad::backward(loss.total);
      optimizer.step(lr);
      total += value;
      ++batches;
    }
    EpochRecord record{epoch + 1, total / static_cast<double>(batches), 0.0};
    record.metric = evaluate(spec, vars.to_params(), eval ? *eval : data, config.batch_size);
    result.history.push_back(record);
  }
  result.params = vars.to_params();
  return result;
}

double evaluate(const NetSpec& spec, const ParamSet& params, const Dataset& data, std::size_t batch_size) {
  if (data.empty()) throw ContractError("evaluate: empty dataset");
  ParamVars vars = ParamVars::from(params, /*trainable=*/false);
  const TaskKind kind = task_for(spec);
  std::vector<int> pred, truth;
  double correct = 0.0;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t size = std::min(batch_size, order.size() - start);
    Batch batch = make_batch(data, std::span<const std::size_t>(order).subspan(start, size));
    ForwardResult out = forward(spec, vars, ad::Var::constant(batch.inputs));
    if (kind == TaskKind::segmentation) {
      auto labels = argmax_labels(out.output.value());
      pred.insert(pred.end(), labels.begin(), labels.end());
      truth.insert(truth.end(), batch.targets.begin(), batch.targets.end());
    } else {
      correct += classification_metrics(out.output.value(), batch.targets).top1 * static_cast<double>(size);
    }
  }
  if (kind == TaskKind::segmentation) return segmentation_metrics(pred, truth, spec.class_count).miou;
  return correct / static_cast<double>(data.size());
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream out;
  out.precision(10);
  out << "epoch,loss,metric\n";
  for (const auto& r : history) out << r.epoch << ',' << r.loss << ',' << r.metric << '\n';
  return out.str();
}

}  // namespace ranp

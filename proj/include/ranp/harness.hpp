#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ranp/autodiff.hpp"
#include "ranp/netgraph.hpp"
#include "ranp/tensor.hpp"

namespace ranp {

// One mini-batch: inputs [N, C, D, H, W] and N * prod(output spatial) labels.
struct Batch {
  Tensor inputs;
  std::vector<int> targets;
};

enum class TaskKind { segmentation, classification };
TaskKind parse_task(std::string_view name);  // "synth-seg" | "synth-cls" | "segmentation" | "classification"
const char* task_name(TaskKind kind);
// Segmentation when the network keeps a spatial output, classification otherwise.
TaskKind task_for(const NetSpec& spec);

struct SynthTask {
  TaskKind kind = TaskKind::segmentation;
  std::array<int, 4> volume_shape{1, 16, 16, 16};  // (C, D, H, W)
  int classes = 3;
  int samples = 24;
  std::uint64_t seed = 0;
  double noise = 0.1;
};

struct Sample {
  Tensor volume;            // [C, D, H, W]
  std::vector<int> target;  // D*H*W labels (segmentation) or one label
};

using Dataset = std::vector<Sample>;

// Segmentation: blobs (spheres and boxes) whose intensity level encodes their
// class over a zero background. Sample i always carries a blob of class
// 1 + i mod (classes - 1). Classification: class k shows k + 1 spheres at
// intensity level k + 1. Seed-deterministic.
Dataset gen_synth(const SynthTask& task);

// Stacks samples[order[first..first+count)] into a batch.
Batch make_batch(const Dataset& data, std::span<const std::size_t> order);
std::vector<Batch> make_batches(const Dataset& data, std::size_t batch_size, std::size_t max_batches = 0);

enum class LossKind { cross_entropy, ce_plus_dice };

struct LossConfig {
  LossKind kind = LossKind::cross_entropy;
  double alpha = 0.25;
};

struct LossValue {
  ad::Var total;
  double cross_entropy = 0.0;
  double dice = 0.0;  // mean-over-classes dice overlap of the hard prediction
};

// CE + alpha * (1 - dice). The dice term uses argmax predictions, so it adds
// no gradient.
LossValue compute_loss(const ad::Var& logits, std::span<const int> targets, const LossConfig& config);

// Argmax over axis 1 of [N, C, ...] scores, ties to the lowest class.
std::vector<int> argmax_labels(const Tensor& scores);

// (1/|present|) * sum over classes present in P or G of 2|P_i ∩ G_i| / (|P_i| + |G_i|).
double dice_overlap(std::span<const int> pred, std::span<const int> target, int classes);

struct SegmentationScores {
  std::vector<double> iou;      // per class; meaningful only where present
  std::vector<bool> present;    // class occurs in P or G
  double miou = 0.0;
};
SegmentationScores segmentation_metrics(std::span<const int> pred, std::span<const int> target, int classes);

struct ClassificationScores {
  double top1 = 0.0;
  double top5 = 0.0;
};
// scores [N, C, 1, 1, 1] (or [N, C]); one target per sample.
ClassificationScores classification_metrics(const Tensor& scores, std::span<const int> targets);

enum class OptimizerKind { sgd_nesterov, adam };
OptimizerKind parse_optimizer(std::string_view name);

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::adam;
  double lr = 5e-3;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool amsgrad = false;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int epochs = 10;
  std::size_t batch_size = 4;
  int decay_every = 0;  // step decay period in epochs; 0 disables
  double decay_gamma = 0.1;
  std::uint64_t seed = 0;
  LossConfig loss{};
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double metric = 0.0;  // mIoU or top-1 on the evaluation set
};

struct TrainResult {
  ParamSet params;
  std::vector<EpochRecord> history;
};

// Minibatch training; shuffles with config.seed. Throws std::runtime_error
// when the loss becomes non-finite. `eval` defaults to the training data.
TrainResult train(const NetSpec& spec, const ParamSet& params, const Dataset& data, const TrainConfig& config,
                  const Dataset* eval = nullptr);

// mIoU for segmentation networks, top-1 for classifiers.
double evaluate(const NetSpec& spec, const ParamSet& params, const Dataset& data, std::size_t batch_size = 4);

std::string history_csv(const std::vector<EpochRecord>& history);

}  // namespace ranp

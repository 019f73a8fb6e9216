#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gemlab/model.hpp"

namespace gemlab {

enum class OptimizerKind { SgdMomentum, AdamW };
enum class Schedule { Constant, Cosine };

OptimizerKind parse_optimizer(const std::string& s);
std::string optimizer_name(OptimizerKind k);
Schedule parse_schedule(const std::string& s);
std::string schedule_name(Schedule s);

struct TrainConfig {
  std::size_t epochs = 40;
  double learning_rate = 1e-3;
  double weight_decay = 1e-2;
  /// Clouds per optimizer step, processed one after another with gradient
  /// accumulation.
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::AdamW;
  Schedule schedule = Schedule::Cosine;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Evaluate every this many epochs (the last epoch is always evaluated);
  /// 0 disables per-epoch evaluation.
  std::size_t eval_every = 1;
  /// Fraction of the training clouds used, drawn with subset_seed.
  double subset_fraction = 1.0;
  std::uint64_t subset_seed = 0;
  /// A frozen parameter holding a gradient at step time is a hard error.
  bool strict = true;

  void validate() const;
  KeyValues to_kv() const;
  static TrainConfig from_kv(const KeyValues& kv);
};

/// Mean over points of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

/// Learning rate at a 0-based step out of total_steps.
double scheduled_lr(const TrainConfig& cfg, std::size_t step, std::size_t total_steps);

class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& cfg) : cfg_(cfg) {}

  /// Updates every trainable entry from its gradient at the given learning
  /// rate, then zeroes gradients. Frozen entries are never written.
  void step(ParamStore& store, double lr);
  std::size_t steps() const { return t_; }

 private:
  TrainConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, std::vector<double>> first_, second_;
};

struct Metrics {
  double miou = 0.0;
  double macc = 0.0;
  double allacc = 0.0;
};

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {}

  void add(int truth, int predicted);
  void merge(const ConfusionMatrix& other);
  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts_[truth * classes_ + predicted]; }
  std::size_t classes() const { return classes_; }
  std::uint64_t trace() const;
  std::uint64_t total() const;

  /// mIoU skips classes with TP + FP + FN = 0; mAcc averages recall over
  /// classes present in the ground truth.
  Metrics metrics() const;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

/// Row-wise argmax of an n×C logit matrix.
std::vector<int> predict(const Tensor& logits);

ConfusionMatrix confusion(const Model& model, const std::vector<PointCloud>& clouds);
Metrics evaluate(const Model& model, const std::vector<PointCloud>& clouds);

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  std::optional<Metrics> metrics;
};

struct RunRecord {
  std::string phase;  // pretrain or finetune
  std::string method;
  std::string config_hash;
  std::size_t trainable = 0;
  std::size_t total = 0;
  std::size_t train_clouds = 0;
  double subset_fraction = 1.0;
  std::uint64_t subset_seed = 0;
  double wall_seconds = 0.0;
  std::vector<EpochRecord> epochs;

  /// Metrics of the last evaluated epoch.
  std::optional<Metrics> final_metrics() const;
  /// key=value lines.
  std::string to_text() const;
  /// `epoch,loss,miou,macc,allacc`; metrics are empty on epochs without evaluation.
  std::string metrics_csv() const;
};

/// Indices of the training subset for a fraction and seed (sorted, at least one).
std::vector<std::size_t> subset_indices(std::size_t count, double fraction, std::uint64_t seed);

/// Trains every parameter of an unattached model.
RunRecord pretrain(Model& model, const std::vector<PointCloud>& train, const TrainConfig& cfg,
                   const std::vector<PointCloud>* eval = nullptr);

/// Trains the attachment of an attached model, then checks that only the
/// method's trainable names changed (FreezeViolation otherwise).
RunRecord finetune(Model& model, const std::vector<PointCloud>& train, const TrainConfig& cfg,
                   const std::vector<PointCloud>* eval = nullptr);

/// Names whose values differ byte-for-byte between two stores.
std::vector<std::string> changed_names(const ParamStore& before, const ParamStore& after,
                                       std::string_view prefix = {});

/// Throws FreezeViolation if any changed name is not trainable under method.
void verify_freeze(const ParamStore& before, const ParamStore& after, Method method);

}  // namespace gemlab

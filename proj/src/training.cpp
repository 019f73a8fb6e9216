#include "gemlab/training.hpp"

#include <algorithm>
#include <chrono>
#include <cstring>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "gemlab/errors.hpp"

namespace gemlab {

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adamw") return OptimizerKind::AdamW;
  if (s == "sgd_momentum") return OptimizerKind::SgdMomentum;
  throw ConfigError("unknown optimizer '" + s + "' (expected adamw, sgd_momentum)");
}

std::string optimizer_name(OptimizerKind k) { return k == OptimizerKind::AdamW ? "adamw" : "sgd_momentum"; }

Schedule parse_schedule(const std::string& s) {
  if (s == "cosine") return Schedule::Cosine;
  if (s == "constant") return Schedule::Constant;
  throw ConfigError("unknown lr schedule '" + s + "' (expected cosine, constant)");
}

std::string schedule_name(Schedule s) { return s == Schedule::Cosine ? "cosine" : "constant"; }

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be non-negative");
  if (!(subset_fraction > 0.0 && subset_fraction <= 1.0)) throw ConfigError("subset fraction must lie in (0, 1]");
}

KeyValues TrainConfig::to_kv() const {
  KeyValues kv;
  kv.set("train.epochs", epochs);
  kv.set("train.lr", learning_rate);
  kv.set("train.weight_decay", weight_decay);
  kv.set("train.batch_size", batch_size);
  kv.set("train.seed", std::to_string(seed));
  kv.set("train.optimizer", optimizer_name(optimizer));
  kv.set("train.schedule", schedule_name(schedule));
  kv.set("train.momentum", momentum);
  kv.set("train.subset_fraction", subset_fraction);
  kv.set("train.subset_seed", std::to_string(subset_seed));
  return kv;
}

TrainConfig TrainConfig::from_kv(const KeyValues& kv) {
  TrainConfig c;
  c.epochs = static_cast<std::size_t>(kv.get_int("train.epochs"));
  c.learning_rate = kv.get_double("train.lr");
  c.weight_decay = kv.get_double("train.weight_decay");
  c.batch_size = static_cast<std::size_t>(kv.get_int("train.batch_size"));
  c.seed = static_cast<std::uint64_t>(kv.get_int("train.seed"));
  c.optimizer = parse_optimizer(kv.get("train.optimizer"));
  c.schedule = parse_schedule(kv.get("train.schedule"));
  c.momentum = kv.get_double("train.momentum");
  c.subset_fraction = kv.get_double("train.subset_fraction");
  c.subset_seed = static_cast<std::uint64_t>(kv.get_int("train.subset_seed"));
  c.validate();
  return c;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  const std::size_t n = logits.rows(), c = logits.cols();
  if (labels.size() != n)
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                         " rows");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= c)
      throw DataError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
  auto z = logits.data();
  auto probs = std::make_shared<std::vector<double>>(n * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = z.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += ((*probs)[i * c + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] /= s;
    loss += -(row[labels[i]] - mx - std::log(s));
  }
  loss /= static_cast<double>(n);
  return Tensor::make_result({1}, {loss}, {logits},
                             [logits, probs, labels, n, c](std::span<const double> g) {
                               auto gl = logits.grad_buffer();
                               const double w = g[0] / static_cast<double>(n);
                               for (std::size_t i = 0; i < n; ++i)
                                 for (std::size_t j = 0; j < c; ++j)
                                   gl[i * c + j] +=
                                       w * ((*probs)[i * c + j] - (static_cast<int>(j) == labels[i] ? 1.0 : 0.0));
                             });
}

double scheduled_lr(const TrainConfig& cfg, std::size_t step, std::size_t total_steps) {
  if (cfg.schedule == Schedule::Constant || total_steps == 0) return cfg.learning_rate;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

void Optimizer::step(ParamStore& store, double lr) {
  ++t_;
  for (const auto& [name, entry] : store.entries()) {
    Tensor& w = store.get(name);
    if (entry.frozen) {
      if (cfg_.strict && w.has_grad())
        throw FreezeViolation("frozen parameter '" + name + "' holds a gradient at step " + std::to_string(t_));
      continue;
    }
    if (!w.has_grad()) continue;
    auto g = w.grad();
    auto x = w.mutable_data();
    auto& m = first_[name];
    if (m.empty()) m.assign(x.size(), 0.0);
    if (cfg_.optimizer == OptimizerKind::SgdMomentum) {
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double gi = g[i] + cfg_.weight_decay * x[i];
        m[i] = cfg_.momentum * m[i] + gi;
        x[i] -= lr * m[i];
      }
    } else {
      auto& v = second_[name];
      if (v.empty()) v.assign(x.size(), 0.0);
      const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
      const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
      for (std::size_t i = 0; i < x.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = m[i] / c1, vhat = v[i] / c2;
        x[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * x[i]);
      }
    }
  }
  store.zero_grad();
}

void ConfusionMatrix::add(int truth, int predicted) {
  if (truth < 0 || predicted < 0 || static_cast<std::size_t>(truth) >= classes_ ||
      static_cast<std::size_t>(predicted) >= classes_)
    throw DataError("confusion matrix: class pair (" + std::to_string(truth) + ", " + std::to_string(predicted) +
                    ") outside [0, " + std::to_string(classes_) + ")");
  ++counts_[static_cast<std::size_t>(truth) * classes_ + static_cast<std::size_t>(predicted)];
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) throw DimensionError("confusion matrices differ in class count");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionMatrix::trace() const {
  std::uint64_t s = 0;
  for (std::size_t c = 0; c < classes_; ++c) s += at(c, c);
  return s;
}

std::uint64_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}); }

Metrics ConfusionMatrix::metrics() const {
  Metrics m;
  const std::uint64_t all = total();
  if (all == 0) return m;
  double iou_sum = 0.0, acc_sum = 0.0;
  std::size_t iou_n = 0, acc_n = 0;
  for (std::size_t c = 0; c < classes_; ++c) {
    std::uint64_t tp = at(c, c), gt = 0, pred = 0;
    for (std::size_t k = 0; k < classes_; ++k) {
      gt += at(c, k);
      pred += at(k, c);
    }
    const std::uint64_t denom = gt + pred - tp;
    if (denom > 0) {
      iou_sum += static_cast<double>(tp) / static_cast<double>(denom);
      ++iou_n;
    }
    if (gt > 0) {
      acc_sum += static_cast<double>(tp) / static_cast<double>(gt);
      ++acc_n;
    }
  }
  m.miou = iou_n ? iou_sum / static_cast<double>(iou_n) : 0.0;
  m.macc = acc_n ? acc_sum / static_cast<double>(acc_n) : 0.0;
  m.allacc = static_cast<double>(trace()) / static_cast<double>(all);
  return m;
}

std::vector<int> predict(const Tensor& logits) {
  const std::size_t n = logits.rows(), c = logits.cols();
  auto z = logits.data();
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = z.data() + i * c;
    out[i] = static_cast<int>(std::max_element(row, row + c) - row);
  }
  return out;
}

ConfusionMatrix confusion(const Model& model, const std::vector<PointCloud>& clouds) {
  ConfusionMatrix cm(model.config().classes);
  for (const auto& cloud : clouds) {
    if (cloud.labels.empty()) throw DataError("evaluate: cloud has no labels");
    auto pred = predict(model.forward(model.prepare(cloud)).logits);
    for (std::size_t i = 0; i < pred.size(); ++i) cm.add(cloud.labels[i], pred[i]);
  }
  return cm;
}

Metrics evaluate(const Model& model, const std::vector<PointCloud>& clouds) { return confusion(model, clouds).metrics(); }

std::optional<Metrics> RunRecord::final_metrics() const {
  for (auto it = epochs.rbegin(); it != epochs.rend(); ++it)
    if (it->metrics) return it->metrics;
  return std::nullopt;
}

std::string RunRecord::to_text() const {
  KeyValues kv;
  kv.set("phase", phase);
  kv.set("method", method);
  kv.set("config_hash", config_hash);
  kv.set("params.trainable", trainable);
  kv.set("params.total", total);
  kv.set("data.train_clouds", train_clouds);
  kv.set("data.subset_fraction", subset_fraction);
  kv.set("data.subset_seed", std::to_string(subset_seed));
  kv.set("wall_seconds", wall_seconds);
  if (auto m = final_metrics()) {
    kv.set("final.miou", m->miou);
    kv.set("final.macc", m->macc);
    kv.set("final.allacc", m->allacc);
  }
  std::string out = kv.canonical();
  for (const auto& e : epochs) {
    out += "epoch." + std::to_string(e.epoch) + "=" + format_double(e.loss);
    if (e.metrics)
      out += "," + format_double(e.metrics->miou) + "," + format_double(e.metrics->macc) + "," +
             format_double(e.metrics->allacc);
    out += "\n";
  }
  return out;
}

std::string RunRecord::metrics_csv() const {
  std::string out = "epoch,loss,miou,macc,allacc\n";
  for (const auto& e : epochs) {
    out += std::to_string(e.epoch) + "," + format_double(e.loss) + ",";
    if (e.metrics)
      out += format_double(e.metrics->miou) + "," + format_double(e.metrics->macc) + "," +
             format_double(e.metrics->allacc);
    else
      out += ",,";
    out += "\n";
  }
  return out;
}

std::vector<std::size_t> subset_indices(std::size_t count, double fraction, std::uint64_t seed) {
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), 0);
  if (fraction >= 1.0 || count == 0) return idx;
  auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(count)));
  k = std::clamp<std::size_t>(k, 1, count);
  auto rng = make_stream(seed, "subset");
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(k);
  std::ranges::sort(idx);
  return idx;
}

namespace {

RunRecord train_loop(Model& model, const std::vector<PointCloud>& train, const TrainConfig& cfg,
                     const std::vector<PointCloud>* eval, const std::string& phase) {
  cfg.validate();
  if (train.empty()) throw DataError(phase + ": empty training set");
  const auto start = std::chrono::steady_clock::now();

  RunRecord rec;
  rec.phase = phase;
  rec.method = model.method() ? method_name(*model.method()) : "full";
  KeyValues kv = model.config_kv();
  const KeyValues train_kv = cfg.to_kv();
  for (const auto& [k, v] : train_kv.values()) kv.set(k, v);
  kv.set("phase", phase);
  rec.config_hash = kv.hash();
  rec.trainable = model.params().trainable_count();
  rec.total = model.params().total_count();
  rec.subset_fraction = cfg.subset_fraction;
  rec.subset_seed = cfg.subset_seed;

  auto idx = subset_indices(train.size(), cfg.subset_fraction, cfg.subset_seed);
  rec.train_clouds = idx.size();
  std::vector<PreparedCloud> prepared;
  prepared.reserve(idx.size());
  for (auto i : idx) {
    if (train[i].labels.empty()) throw DataError(phase + ": training cloud " + std::to_string(i) + " has no labels");
    prepared.push_back(model.prepare(train[i]));
  }

  const std::size_t k = prepared.size();
  const std::size_t steps_per_epoch = (k + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;
  auto rng = make_stream(cfg.seed, "shuffle");
  Optimizer opt(cfg);
  model.params().zero_grad();
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < k; b += cfg.batch_size) {
      const std::size_t end = std::min(k, b + cfg.batch_size);
      const double weight = 1.0 / static_cast<double>(end - b);
      for (std::size_t j = b; j < end; ++j) {
        const PreparedCloud& pc = prepared[order[j]];
        Tensor loss = cross_entropy(model.forward(pc).logits, pc.labels);
        const double value = loss.item();
        if (!std::isfinite(value))
          throw NumericError(phase + ": non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(step));
        backward(scale(loss, weight));
        loss_sum += value;
      }
      opt.step(model.params(), scheduled_lr(cfg, step, total_steps));
      ++step;
    }
    EpochRecord er{epoch, loss_sum / static_cast<double>(k), std::nullopt};
    const bool last = epoch + 1 == cfg.epochs;
    if (eval && !eval->empty() && (last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0)))
      er.metrics = evaluate(model, *eval);
    rec.epochs.push_back(er);
  }
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rec;
}

}  // namespace

RunRecord pretrain(Model& model, const std::vector<PointCloud>& train, const TrainConfig& cfg,
                   const std::vector<PointCloud>* eval) {
  if (model.peft()) throw ContractError("pretrain: model already carries a PEFT attachment");
  for (const auto& name : model.params().names()) model.params().set_frozen(name, false);
  return train_loop(model, train, cfg, eval, "pretrain");
}

RunRecord finetune(Model& model, const std::vector<PointCloud>& train, const TrainConfig& cfg,
                   const std::vector<PointCloud>* eval) {
  if (!model.peft()) throw ContractError("finetune: model has no PEFT attachment");
  const ParamStore before = model.params().clone();
  RunRecord rec = train_loop(model, train, cfg, eval, "finetune");
  verify_freeze(before, model.params(), *model.method());
  return rec;
}

std::vector<std::string> changed_names(const ParamStore& before, const ParamStore& after, std::string_view prefix) {
  std::vector<std::string> out;
  for (const auto& [name, e] : before.entries()) {
    if (!starts_with(name, prefix)) continue;
    if (!after.contains(name)) {
      out.push_back(name);
      continue;
    }
    auto a = e.value.data(), b = after.get(name).data();
    if (a.size() != b.size() || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) != 0)
      out.push_back(name);
  }
  return out;
}

void verify_freeze(const ParamStore& before, const ParamStore& after, Method method) {
  for (const auto& name : changed_names(before, after))
    if (!trainable_under(method, name))
      throw FreezeViolation("parameter '" + name + "' changed under method " + method_name(method));
}

}  // namespace gemlab

#pragma once

#include <chrono>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "robustdistill/distill.hpp"
#include "robustdistill/eval.hpp"

namespace robustdistill::train {

using attacks::AttackConfig;
using attacks::Method;
using distill::DefenseConfig;
using nn::Checkpoint;
using nn::EpochRecord;

struct OptimizerState {
  std::map<std::string, Tensor<float>> momentum;
  double lr = 0.1;
  double momentum_coef = 0.9;
  double weight_decay = 2e-4;
};

struct Schedule {
  int total_epochs = 60;
  std::vector<int> decay_epochs = {43, 52, 57};
  double decay_factor = 0.1;
  double initial_lr = 0.1;

  void validate() const {
    if (total_epochs < 1) throw ParamError(cat("total_epochs must be >= 1, got ", total_epochs));
    int prev = 0;
    for (int e : decay_epochs) {
      if (e <= prev)
        throw ParamError(cat("decay epochs must be strictly increasing, got ", e, " after ", prev));
      if (e > total_epochs)
        throw ParamError(cat("decay epoch ", e, " exceeds total_epochs ", total_epochs));
      prev = e;
    }
  }
};

// Epochs are 1-indexed; "divided at the Nth epoch" applies from epoch N on.
inline double lr_at(const Schedule& s, int epoch) {
  if (epoch < 1 || epoch > s.total_epochs)
    throw ParamError(cat("epoch ", epoch, " outside [1,", s.total_epochs, "]"));
  double lr = s.initial_lr;
  for (int e : s.decay_epochs)
    if (epoch >= e) lr *= s.decay_factor;
  return lr;
}

// Coupled weight decay: g <- grad + wd*p; buf <- m*buf + g; p <- p - lr*buf.
inline void sgd_step(nn::ParameterSet<float>& params,
                     const std::map<std::string, Tensor<float>>& grads, OptimizerState& state) {
  for (auto& [name, p] : params.params) {
    auto git = grads.find(name);
    if (git == grads.end()) throw ContractError(cat("missing gradient for ", name));
    const Tensor<float>& g = git->second;
    if (g.shape != p.shape)
      throw ContractError(cat("gradient shape ", shape_str(g.shape), " != parameter shape ",
                              shape_str(p.shape), " for ", name));
    auto bit = state.momentum.find(name);
    if (bit == state.momentum.end())
      bit = state.momentum.emplace(name, Tensor<float>::zeros(p.shape)).first;
    Tensor<float>& buf = bit->second;
    float lr = static_cast<float>(state.lr);
    float mom = static_cast<float>(state.momentum_coef);
    float wd = static_cast<float>(state.weight_decay);
    for (size_t i = 0; i < p.v.size(); ++i) {
      float upd = g.v[i] + wd * p.v[i];
      buf.v[i] = mom * buf.v[i] + upd;
      p.v[i] -= lr * buf.v[i];
    }
  }
}

struct TrainRunConfig {
  DefenseConfig defense;
  std::optional<Method> inner_method;  // ablations mix one method's inner with another's outer
  AttackConfig attack_train;
  AttackConfig selection_attack;  // per-epoch validation attack (PGD-TRADES flavored default)
  Schedule schedule;
  data::AugmentConfig augment;
  int batch_size = 128;
  uint64_t seed = 1;
  double momentum = 0.9;
  double weight_decay = 2e-4;
  double val_fraction = 0.1;
  bool deterministic = false;  // zero wall-clock fields in emitted records
};

struct EpochMetrics {
  double mean_loss = 0.0;
  double train_acc = 0.0;
  double wall_ms = 0.0;
};

namespace detail {

inline uint64_t shuffle_seed(uint64_t seed, int epoch) {
  return mix_seed(mix_seed(seed, 0x53485546ull), static_cast<uint64_t>(epoch));
}
inline uint64_t attack_seed(uint64_t seed, int epoch, int step) {
  return mix_seed(mix_seed(seed, 0x41545431ull),
                  (static_cast<uint64_t>(epoch) << 24) | static_cast<uint64_t>(step));
}
inline uint64_t augment_seed(uint64_t seed, int epoch) {
  return mix_seed(mix_seed(seed, 0x41554731ull), static_cast<uint64_t>(epoch));
}
inline uint64_t selection_seed(uint64_t seed, int epoch) {
  return mix_seed(mix_seed(seed, 0x53454C31ull), static_cast<uint64_t>(epoch));
}

}  // namespace detail

// One pass over `dataset` at the given epoch's learning rate. Aborts with a
// diagnostic on a non-finite loss.
inline EpochMetrics train_epoch(const TrainRunConfig& cfg, nn::ParameterSet<float>& student,
                                const nn::ParameterSet<float>* teacher, int epoch,
                                const data::Dataset& dataset, OptimizerState& opt) {
  auto t0 = std::chrono::steady_clock::now();
  int n = dataset.size();
  std::vector<int> order = data::shuffled_order(n, detail::shuffle_seed(cfg.seed, epoch));
  Rng aug_rng(detail::augment_seed(cfg.seed, epoch));
  Method inner = cfg.inner_method.value_or(cfg.defense.method);

  double loss_sum = 0.0;
  long correct = 0;
  int step = 0;
  for (int lo = 0; lo < n; lo += cfg.batch_size, ++step) {
    int hi = std::min(n, lo + cfg.batch_size);
    auto [x_raw, y] = dataset.batch(order, lo, hi);
    Tensor<float> x =
        (cfg.augment.pad > 0 || cfg.augment.horizontal_flip_prob > 0.0)
            ? data::augment(x_raw, cfg.augment, aug_rng)
            : std::move(x_raw);

    // Distillation targets from smoothed labels when no teacher is in play.
    Tensor<float> ssl_rows;
    const Tensor<float>* override_ptr = nullptr;
    if (cfg.defense.soft_label == distill::SoftLabelKind::SSL &&
        attacks::method_needs_teacher(cfg.defense.method)) {
      ssl_rows = distill::make_soft_labels<float>(distill::SoftLabelKind::SSL, nullptr, x, x, y,
                                                  cfg.defense.smoothing,
                                                  distill::RslSource::natural,
                                                  dataset.num_classes)
                     .rows;
      override_ptr = &ssl_rows;
    }

    Tensor<float> x_adv =
        cfg.defense.method == Method::NAT
            ? x
            : attacks::inner_max(inner, student, teacher, x, y, cfg.attack_train,
                                 detail::attack_seed(cfg.seed, epoch, step), override_ptr);

    // Clean train accuracy from the pre-update parameters.
    {
      Tensor<float> logits = nn::forward(student, x);
      for (int i = 0; i < hi - lo; ++i) {
        int best = 0;
        for (int j = 1; j < logits.dim(1); ++j)
          if (logits(i, j) > logits(i, best)) best = j;
        if (best == y[static_cast<size_t>(i)]) ++correct;
      }
    }

    Tape<float> tape;
    nn::BoundParams<float> bound = nn::bind_params(tape, student, true);
    double loss_val;
    Var<float> loss;
    try {
      loss = distill::outer_loss_graph(tape, student, bound, teacher, cfg.defense, x, x_adv, y,
                                       override_ptr);
      loss_val = static_cast<double>(loss.val().item());
    } catch (const DomainError& e) {
      // A domain failure inside the loss graph means non-finite activations.
      throw NumericError(cat("numeric divergence at epoch ", epoch, " step ", step, " (",
                             attacks::method_name(cfg.defense.method), "): ", e.what()));
    } catch (const ContractError& e) {
      throw NumericError(cat("numeric divergence at epoch ", epoch, " step ", step, " (",
                             attacks::method_name(cfg.defense.method), "): ", e.what()));
    }
    if (!std::isfinite(loss_val))
      throw NumericError(cat("non-finite loss ", loss_val, " at epoch ", epoch, " step ", step,
                             " (", attacks::method_name(cfg.defense.method), ")"));
    tape.backward(loss);
    std::map<std::string, Tensor<float>> grads;
    for (const auto& [name, var] : bound.vars) grads.emplace(name, tape.grad(var));
    opt.lr = lr_at(cfg.schedule, epoch);
    sgd_step(student, grads, opt);
    loss_sum += loss_val * (hi - lo);
  }

  EpochMetrics m;
  m.mean_loss = n ? loss_sum / n : 0.0;
  m.train_acc = n ? static_cast<double>(correct) / n : 0.0;
  m.wall_ms = cfg.deterministic
                  ? 0.0
                  : std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                        .count();
  return m;
}

struct TrainResult {
  Checkpoint best;
  Checkpoint last;
  std::vector<EpochRecord> history;
};

// Full outer-minimization run: trains schedule.total_epochs epochs, scoring
// each epoch on a held-out validation slice (robust accuracy under the
// selection attack; clean accuracy for NAT). Best = first epoch achieving the
// maximum. The teacher is never written to; its digest is checked.
inline TrainResult run_training(const TrainRunConfig& cfg, const nn::ModelSpec& student_spec,
                                const nn::ParameterSet<float>* teacher,
                                const data::Dataset& train_set,
                                const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.defense.validate();
  cfg.attack_train.validate();
  cfg.schedule.validate();
  if (cfg.batch_size < 1) throw ParamError(cat("batch_size must be >= 1, got ", cfg.batch_size));
  bool needs_teacher = attacks::method_needs_teacher(cfg.defense.method) &&
                       cfg.defense.soft_label != distill::SoftLabelKind::SSL;
  if (needs_teacher && !teacher)
    throw ConfigError(cat(attacks::method_name(cfg.defense.method),
                          " needs a teacher checkpoint"));
  uint64_t teacher_digest = teacher ? teacher->digest() : 0;

  // Fixed seeded validation slice.
  int n = train_set.size();
  int n_val = std::max(1, static_cast<int>(n * cfg.val_fraction));
  if (n_val >= n) throw ParamError(cat("validation slice ", n_val, " swallows the dataset ", n));
  std::vector<int> perm(static_cast<size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  Rng split_rng(mix_seed(cfg.seed, 0x56414C31ull));
  split_rng.shuffle(perm);
  data::Dataset val_set = train_set.subset({perm.begin(), perm.begin() + n_val});
  data::Dataset fit_set = train_set.subset({perm.begin() + n_val, perm.end()});
  val_set.split = "val";
  fit_set.split = "train";

  nn::ParameterSet<float> student =
      nn::build_model<float>(student_spec, mix_seed(cfg.seed, 0x494E4954ull));
  OptimizerState opt;
  opt.lr = cfg.schedule.initial_lr;
  opt.momentum_coef = cfg.momentum;
  opt.weight_decay = cfg.weight_decay;

  TrainResult result;
  double best_metric = -1.0;
  for (int epoch = 1; epoch <= cfg.schedule.total_epochs; ++epoch) {
    EpochMetrics m = train_epoch(cfg, student, teacher, epoch, fit_set, opt);

    double val_metric;
    if (cfg.defense.method == Method::NAT) {
      val_metric = eval::accuracy(student, val_set);
    } else {
      val_metric = eval::robust_accuracy(student, val_set, cfg.selection_attack,
                                         eval::AttackKind::PGD_TRADES,
                                         detail::selection_seed(cfg.seed, epoch));
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr_at(cfg.schedule, epoch);
    rec.train_loss = m.mean_loss;
    rec.train_acc = m.train_acc;
    rec.val_metric = val_metric;
    rec.wall_ms = m.wall_ms;
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (val_metric > best_metric) {
      best_metric = val_metric;
      result.best.params = student;
      result.best.epoch = epoch;
      result.best.momentum = opt.momentum;
      result.best.selection_tag = "best";
    }
  }

  result.last.params = student;
  result.last.epoch = cfg.schedule.total_epochs;
  result.last.momentum = opt.momentum;
  result.last.selection_tag = "last";
  result.last.history = result.history;
  result.best.history.assign(result.history.begin(),
                             result.history.begin() + result.best.epoch);

  if (teacher && teacher->digest() != teacher_digest)
    throw IntegrityError("teacher parameters changed during training");
  return result;
}

}  // namespace robustdistill::train

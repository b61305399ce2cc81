#pragma once

#include <atomic>
#include <cmath>
#include <string>
#include <vector>

#include "robustdistill/attacks.hpp"
#include "robustdistill/nn.hpp"

namespace robustdistill::distill {

using attacks::Method;

enum class RslSource { natural, adversarial };
enum class SoftLabelKind { SSL, NSL, RSL };

inline std::string soft_label_name(SoftLabelKind k) {
  switch (k) {
    case SoftLabelKind::SSL: return "SSL";
    case SoftLabelKind::NSL: return "NSL";
    case SoftLabelKind::RSL: return "RSL";
  }
  return "?";
}

struct DefenseConfig {
  Method method = Method::NAT;
  double lambda = 6.0;       // TRADES / MART balance
  double alpha = 5.0 / 6.0;  // ARD / RSLAD balance; RSLAD default k = alpha/(1-alpha) = 5
  double tau = 1.0;          // ARD / IAD distillation temperature
  double beta = 1.0;         // IAD sharpening exponent
  RslSource rsl_source = RslSource::natural;
  SoftLabelKind soft_label = SoftLabelKind::RSL;
  double smoothing = 0.1;  // SSL only

  // Out-of-range values are rejected even for parameters the chosen method
  // ignores.
  void validate() const {
    if (lambda < 0.0) throw ParamError(cat("lambda must be >= 0, got ", lambda));
    if (alpha < 0.0 || alpha > 1.0) throw ParamError(cat("alpha must be in [0,1], got ", alpha));
    if (!(tau > 0.0)) throw ParamError(cat("tau must be > 0, got ", tau));
    if (!(beta > 0.0)) throw ParamError(cat("beta must be > 0, got ", beta));
    if (smoothing < 0.0 || smoothing >= 1.0)
      throw ParamError(cat("smoothing must be in [0,1), got ", smoothing));
  }
};

constexpr double kProbFloor = 1e-12;

// Counts probability entries that hit the 1e-12 clip floor inside any loss.
inline std::atomic<uint64_t>& clip_counter() {
  static std::atomic<uint64_t> count{0};
  return count;
}
inline uint64_t clip_count() { return clip_counter().load(); }
inline void clip_reset() { clip_counter().store(0); }

namespace detail {

template <typename T>
void count_clips(const Tensor<T>& t) {
  uint64_t c = 0;
  for (T x : t.v)
    if (x < static_cast<T>(kProbFloor)) ++c;
  if (c) clip_counter().fetch_add(c);
}

template <typename T>
void check_rows_stochastic(const Tensor<T>& probs, const char* what) {
  if (probs.rank() != 2)
    throw ShapeError(cat(what, " expects (B,C) probabilities, got ", shape_str(probs.shape)));
  for (int i = 0; i < probs.dim(0); ++i) {
    T s = 0;
    for (int j = 0; j < probs.dim(1); ++j) s += probs(i, j);
    // negated form so NaN rows fail too
    if (!(std::abs(static_cast<double>(s) - 1.0) <= 1e-4))
      throw ContractError(cat(what, ": row ", i, " sums to ", s, ", not 1"));
  }
}

}  // namespace detail

// Mean over the batch of -log p_y. Zero probabilities clip at 1e-12 and bump
// the clip counter.
template <typename T>
Var<T> ce_loss(Var<T> probs, const std::vector<int>& y) {
  detail::check_rows_stochastic(probs.val(), "ce_loss");
  Var<T> py = gather_rows(probs, y);
  detail::count_clips(py.val());
  Var<T> lp = log(clamp_min(py, static_cast<T>(kProbFloor)));
  return mul_scalar(mean_all(lp), T(-1));
}

// kl_loss(a, b) computes D_KL(b || a), mean over the batch: the second
// written argument is the reference distribution. Gradients flow through
// whichever arguments are recorded on the tape; pass the reference as a
// constant to freeze it.
template <typename T>
Var<T> kl_per_example(Var<T> p_model, Var<T> p_ref) {
  detail::count_clips(p_model.val());
  detail::count_clips(p_ref.val());
  Var<T> log_ref = log(clamp_min(p_ref, static_cast<T>(kProbFloor)));
  Var<T> log_model = log(clamp_min(p_model, static_cast<T>(kProbFloor)));
  return sum_axis(mul(p_ref, sub(log_ref, log_model)), 1);
}

template <typename T>
Var<T> kl_loss(Var<T> p_model, Var<T> p_ref) {
  detail::check_rows_stochastic(p_model.val(), "kl_loss");
  detail::check_rows_stochastic(p_ref.val(), "kl_loss");
  return mean_all(kl_per_example(p_model, p_ref));
}

// Boosted cross entropy: mean of -log p_y - log(1 - max_{k != y} p_k).
template <typename T>
Var<T> bce_mart(Var<T> probs, const std::vector<int>& y) {
  detail::check_rows_stochastic(probs.val(), "bce_mart");
  Tape<T>& tape = *probs.tape;
  const Tensor<T>& p = probs.val();
  int rows = p.dim(0), cols = p.dim(1);
  Tensor<T> mask = Tensor<T>::zeros({rows, cols});
  for (int i = 0; i < rows; ++i) mask(i, y[static_cast<size_t>(i)]) = T(1e9);
  Var<T> top_other = max_axis(sub(probs, tape.constant(std::move(mask))), 1);
  Var<T> one_minus = sub(tape.constant(Tensor<T>::ones({rows})), top_other);
  detail::count_clips(one_minus.val());
  Var<T> py = gather_rows(probs, y);
  detail::count_clips(py.val());
  Var<T> term1 = log(clamp_min(py, static_cast<T>(kProbFloor)));
  Var<T> term2 = log(clamp_min(one_minus, static_cast<T>(kProbFloor)));
  return mul_scalar(mean_all(add(term1, term2)), T(-1));
}

// ---------------------------------------------------------------------------
// Soft-label generators.
// ---------------------------------------------------------------------------

template <typename T>
struct SoftLabelBatch {
  Tensor<T> rows;  // (B, C), each row sums to 1
  SoftLabelKind kind = SoftLabelKind::RSL;
};

template <typename T>
SoftLabelBatch<T> make_soft_labels(SoftLabelKind kind, const nn::ParameterSet<T>* teacher,
                                   const Tensor<T>& x, const Tensor<T>& x_adv,
                                   const std::vector<int>& y, double smoothing,
                                   RslSource rsl_source, int num_classes) {
  SoftLabelBatch<T> out;
  out.kind = kind;
  switch (kind) {
    case SoftLabelKind::SSL: {
      if (smoothing < 0.0 || smoothing >= 1.0)
        throw ParamError(cat("SSL smoothing must be in [0,1), got ", smoothing));
      int n = static_cast<int>(y.size());
      out.rows = Tensor<T>::full({n, num_classes}, static_cast<T>(smoothing / num_classes));
      for (int i = 0; i < n; ++i)
        out.rows(i, y[static_cast<size_t>(i)]) += static_cast<T>(1.0 - smoothing);
      break;
    }
    case SoftLabelKind::NSL: {
      if (!teacher) throw ConfigError("NSL needs a naturally trained teacher");
      out.rows = nn::predict_probs(*teacher, x, T(1));
      break;
    }
    case SoftLabelKind::RSL: {
      if (!teacher) throw ConfigError("RSL needs an adversarially trained teacher");
      out.rows = nn::predict_probs(*teacher, rsl_source == RslSource::adversarial ? x_adv : x,
                                   T(1));
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Outer minimization losses, one graph per defense. Student branches are on
// the tape; teacher outputs enter as constants, so teacher parameters never
// receive gradient.
// ---------------------------------------------------------------------------

// Distillation targets standing in for the teacher's natural prediction.
// SSL/NSL runs pass explicit rows; otherwise they come from the teacher.
template <typename T>
Tensor<T> resolve_targets(const DefenseConfig& cfg, const nn::ParameterSet<T>* teacher,
                          const Tensor<T>& x, const Tensor<T>& x_adv,
                          const Tensor<T>* override_rows) {
  if (override_rows) return *override_rows;
  if (!teacher) throw ConfigError(cat(attacks::method_name(cfg.method), " needs a teacher model"));
  return nn::predict_probs(*teacher, cfg.rsl_source == RslSource::adversarial ? x_adv : x, T(1));
}

template <typename T>
Var<T> outer_loss_graph(Tape<T>& tape, const nn::ParameterSet<T>& student,
                        const nn::BoundParams<T>& bound, const nn::ParameterSet<T>* teacher,
                        const DefenseConfig& cfg, const Tensor<T>& x, const Tensor<T>& x_adv,
                        const std::vector<int>& y, const Tensor<T>* soft_override = nullptr) {
  cfg.validate();
  if (attacks::method_needs_teacher(cfg.method) && !teacher && !soft_override)
    throw ConfigError(cat(attacks::method_name(cfg.method), " needs a teacher model"));
  if (teacher && teacher->role != nn::Role::teacher)
    throw ConfigError("teacher ParameterSet must carry the teacher role");

  auto student_probs = [&](const Tensor<T>& batch, double tau_) {
    Var<T> in = tape.constant(batch);
    Var<T> logits = nn::forward(tape, student, bound, in);
    return softmax_t(logits, static_cast<T>(tau_));
  };

  switch (cfg.method) {
    case Method::NAT:
      return ce_loss(student_probs(x, 1.0), y);

    case Method::SAT:
      return ce_loss(student_probs(x_adv, 1.0), y);

    case Method::TRADES: {
      Var<T> p_nat = student_probs(x, 1.0);
      Var<T> p_adv = student_probs(x_adv, 1.0);
      // Both branches stay on the tape: self-distillation reference.
      return add(ce_loss(p_nat, y),
                 mul_scalar(kl_loss(p_adv, p_nat), static_cast<T>(cfg.lambda)));
    }

    case Method::MART: {
      Var<T> p_nat = student_probs(x, 1.0);
      Var<T> p_adv = student_probs(x_adv, 1.0);
      Var<T> w = sub(tape.constant(Tensor<T>::ones({static_cast<int>(y.size())})),
                     gather_rows(p_nat, y));
      Var<T> weighted = mean_all(mul(w, kl_per_example(p_adv, p_nat)));
      return add(bce_mart(p_adv, y), mul_scalar(weighted, static_cast<T>(cfg.lambda)));
    }

    case Method::ARD: {
      // Targets are the teacher's temperature-scaled natural prediction.
      Tensor<T> targets =
          soft_override
              ? *soft_override
              : nn::predict_probs(*teacher,
                                  cfg.rsl_source == RslSource::adversarial ? x_adv : x,
                                  static_cast<T>(cfg.tau));
      Var<T> ce_term = ce_loss(student_probs(x, cfg.tau), y);
      Var<T> kl_term = kl_loss(student_probs(x_adv, cfg.tau), tape.constant(targets));
      // tau^2 multiplies only the distillation term.
      return add(mul_scalar(ce_term, static_cast<T>(1.0 - cfg.alpha)),
                 mul_scalar(kl_term, static_cast<T>(cfg.alpha * cfg.tau * cfg.tau)));
    }

    case Method::IAD: {
      if (!teacher && !soft_override) throw ConfigError("IAD needs a teacher model");
      // Per-example weight: teacher's true-class probability on x', sharpened
      // by beta; a constant, like every teacher output.
      Tensor<T> t_adv = teacher ? nn::predict_probs(*teacher, x_adv, T(1))
                                : *soft_override;
      int n = static_cast<int>(y.size());
      Tensor<T> w({n});
      for (int i = 0; i < n; ++i)
        w(i) = static_cast<T>(
            std::pow(static_cast<double>(t_adv(i, y[static_cast<size_t>(i)])), cfg.beta));
      Tensor<T> one_minus_w({n});
      for (int i = 0; i < n; ++i) one_minus_w(i) = T(1) - w(i);

      Tensor<T> targets = teacher
                              ? nn::predict_probs(*teacher, x, static_cast<T>(cfg.tau))
                              : *soft_override;
      Var<T> p_adv = student_probs(x_adv, cfg.tau);
      Var<T> p_nat = student_probs(x, cfg.tau);  // self term: stays on tape
      Var<T> teacher_term =
          mean_all(mul(tape.constant(std::move(w)), kl_per_example(p_adv, tape.constant(targets))));
      Var<T> self_term =
          mean_all(mul(tape.constant(std::move(one_minus_w)), kl_per_example(p_adv, p_nat)));
      return add(teacher_term, self_term);
    }

    case Method::RSLAD: {
      Tensor<T> targets = resolve_targets(cfg, teacher, x, x_adv, soft_override);
      Var<T> target_var = tape.constant(std::move(targets));
      Var<T> nat_term = kl_loss(student_probs(x, 1.0), target_var);
      Var<T> adv_term = kl_loss(student_probs(x_adv, 1.0), target_var);
      return add(mul_scalar(nat_term, static_cast<T>(1.0 - cfg.alpha)),
                 mul_scalar(adv_term, static_cast<T>(cfg.alpha)));
    }
  }
  throw ContractError("outer_loss: unhandled method");
}

// Value-only surface: builds a throwaway graph.
template <typename T>
T outer_loss(const DefenseConfig& cfg, const nn::ParameterSet<T>& student,
             const nn::ParameterSet<T>* teacher, const Tensor<T>& x, const Tensor<T>& x_adv,
             const std::vector<int>& y, const Tensor<T>* soft_override = nullptr) {
  Tape<T> tape;
  nn::BoundParams<T> bound = nn::bind_params(tape, student, false);
  return outer_loss_graph(tape, student, bound, teacher, cfg, x, x_adv, y, soft_override)
      .val()
      .item();
}

}  // namespace robustdistill::distill

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "robustdistill/nn.hpp"
#include "robustdistill/rng.hpp"
#include "robustdistill/thread_pool.hpp"

namespace robustdistill::attacks {

enum class RandomStart { none, uniform, gaussian };
enum class InnerLoss { ce, kl, cw_margin };

struct AttackConfig {
  double epsilon = 8.0 / 255.0;  // L-inf radius, pixel units
  int steps = 10;
  double step_size = 2.0 / 255.0;
  RandomStart random_start = RandomStart::none;
  double random_start_param = 0.0;  // uniform: half-width; gaussian: std
  InnerLoss inner_loss = InnerLoss::ce;
  // Training dispatch may substitute each method's own start convention;
  // set when the start came from explicit configuration.
  bool random_start_explicit = false;
  // clamp range is fixed to [0,1]

  void validate() const {
    if (epsilon < 0.0 || epsilon > 1.0)
      throw ParamError(cat("attack epsilon ", epsilon, " outside [0,1]"));
    if (steps < 0) throw ParamError(cat("attack steps must be >= 0, got ", steps));
    if (steps > 0 && !(step_size > 0.0))
      throw ParamError(cat("attack step size must be > 0 when steps > 0, got ", step_size));
    if (random_start != RandomStart::none && random_start_param < 0.0)
      throw ParamError(cat("random start parameter must be >= 0, got ", random_start_param));
  }
};

// Reference the inner loss is measured against: hard labels for CE and the
// CW margin, a constant probability row per example for KL. The reference
// never receives gradients.
template <typename T>
struct AttackReference {
  const std::vector<int>* labels = nullptr;
  const Tensor<T>* probs = nullptr;
};

namespace detail {

constexpr double kProbFloor = 1e-12;
constexpr int kChunk = 32;  // fixed: results must not depend on worker count

template <typename T>
Var<T> attack_loss(Tape<T>& tape, Var<T> logits, InnerLoss kind, const std::vector<int>* labels,
                   const Tensor<T>* ref_probs) {
  switch (kind) {
    case InnerLoss::ce: {
      Var<T> probs = softmax_t(logits, T(1));
      Var<T> py = clamp_min(gather_rows(probs, *labels), static_cast<T>(kProbFloor));
      // Sum (not mean) keeps per-example gradients identical across chunkings.
      return mul_scalar(sum_all(log(py)), T(-1));
    }
    case InnerLoss::kl: {
      Var<T> pm = softmax_t(logits, T(1));
      Var<T> ref = tape.constant(*ref_probs);
      Var<T> log_ref = log(clamp_min(ref, static_cast<T>(kProbFloor)));
      Var<T> log_pm = log(clamp_min(pm, static_cast<T>(kProbFloor)));
      return sum_all(mul(ref, sub(log_ref, log_pm)));
    }
    case InnerLoss::cw_margin: {
      // max_{i != y} z_i - z_y, kappa = 0, untargeted.
      const Tensor<T>& z = logits.val();
      int rows = z.dim(0), cols = z.dim(1);
      Tensor<T> mask = Tensor<T>::zeros({rows, cols});
      for (int i = 0; i < rows; ++i) mask(i, (*labels)[static_cast<size_t>(i)]) = T(1e9);
      Var<T> masked = sub(logits, tape.constant(std::move(mask)));
      Var<T> top_other = max_axis(masked, 1);
      Var<T> zy = gather_rows(logits, *labels);
      return sum_all(sub(top_other, zy));
    }
  }
  throw ContractError("unknown inner loss");
}

template <typename T>
void sign_step_project(const Tensor<T>& grad, const Tensor<T>& x0, double step, double eps,
                       Tensor<T>& xadv) {
  for (size_t i = 0; i < xadv.v.size(); ++i) {
    T g = grad.v[i];
    T s = g > T(0) ? T(1) : (g < T(0) ? T(-1) : T(0));
    T v = xadv.v[i] + static_cast<T>(step) * s;
    v = std::min(T(1), std::max(T(0), v));
    T lo = x0.v[i] - static_cast<T>(eps);
    T hi = x0.v[i] + static_cast<T>(eps);
    xadv.v[i] = std::min(hi, std::max(lo, v));
  }
}

template <typename T>
void project_only(const Tensor<T>& x0, double eps, Tensor<T>& xadv) {
  for (size_t i = 0; i < xadv.v.size(); ++i) {
    T v = std::min(T(1), std::max(T(0), xadv.v[i]));
    T lo = x0.v[i] - static_cast<T>(eps);
    T hi = x0.v[i] + static_cast<T>(eps);
    xadv.v[i] = std::min(hi, std::max(lo, v));
  }
}

}  // namespace detail

// Projected gradient ascent on the configured inner loss. The reference is a
// constant; gradients flow only through the iterate. Per-example randomness
// uses stream id = example row index, so parallel and serial runs agree
// bit-for-bit.
template <typename T>
Tensor<T> pgd(const nn::ParameterSet<T>& params, const Tensor<T>& x,
              const AttackReference<T>& ref, const AttackConfig& cfg, uint64_t seed,
              uint64_t stream_base = 0) {
  cfg.validate();
  nn::check_batch(params.spec, x);
  int n = x.dim(0);
  if (cfg.inner_loss == InnerLoss::kl) {
    if (!ref.probs) throw ContractError("KL inner loss needs a probability reference, got labels");
    if (ref.probs->dim(0) != n)
      throw ShapeError(cat("reference rows ", ref.probs->dim(0), " != batch ", n));
  } else {
    if (!ref.labels) throw ContractError("CE/CW inner loss needs labels");
    if (static_cast<int>(ref.labels->size()) != n)
      throw ShapeError(cat("label count ", ref.labels->size(), " != batch ", n));
  }

  Tensor<T> out = x;
  size_t stride = x.numel() / static_cast<size_t>(n);

  auto run_chunk = [&](size_t lo, size_t hi) {
    int rows = static_cast<int>(hi - lo);
    Shape cshape = x.shape;
    cshape[0] = rows;
    Tensor<T> x0(cshape);
    std::copy_n(x.v.begin() + lo * stride, static_cast<size_t>(rows) * stride, x0.v.begin());
    std::vector<int> labels;
    Tensor<T> probs;
    if (ref.labels)
      labels.assign(ref.labels->begin() + static_cast<long>(lo),
                    ref.labels->begin() + static_cast<long>(hi));
    if (ref.probs) {
      probs = Tensor<T>({rows, ref.probs->dim(1)});
      std::copy_n(ref.probs->v.begin() + lo * static_cast<size_t>(ref.probs->dim(1)),
                  probs.v.size(), probs.v.begin());
    }

    Tensor<T> xadv = x0;
    if (cfg.random_start != RandomStart::none && cfg.random_start_param > 0.0) {
      for (int r = 0; r < rows; ++r) {
        Rng rng(seed, stream_base + lo + static_cast<size_t>(r));
        T* row = xadv.v.data() + static_cast<size_t>(r) * stride;
        if (cfg.random_start == RandomStart::uniform) {
          for (size_t i = 0; i < stride; ++i)
            row[i] += static_cast<T>(rng.uniform(-cfg.random_start_param, cfg.random_start_param));
        } else {
          for (size_t i = 0; i < stride; ++i)
            row[i] += static_cast<T>(rng.gaussian(0.0, cfg.random_start_param));
        }
      }
      detail::project_only(x0, cfg.epsilon, xadv);
    }

    for (int step = 0; step < cfg.steps; ++step) {
      Tape<T> tape;
      nn::BoundParams<T> bound = nn::bind_params(tape, params, false);
      Var<T> xv = tape.leaf(xadv, true);
      Var<T> logits = nn::forward(tape, params, bound, xv);
      Var<T> loss = detail::attack_loss(tape, logits, cfg.inner_loss,
                                        labels.empty() ? nullptr : &labels,
                                        probs.v.empty() ? nullptr : &probs);
      tape.backward(loss);
      Tensor<T> g = tape.grad(xv);
      detail::sign_step_project(g, x0, cfg.step_size, cfg.epsilon, xadv);
    }

    std::copy_n(xadv.v.begin(), static_cast<size_t>(rows) * stride, out.v.begin() + lo * stride);
  };

  bool trivial = cfg.steps == 0 && (cfg.random_start == RandomStart::none ||
                                    cfg.random_start_param <= 0.0);
  if (!trivial)
    ThreadPool::instance().parallel_ranges(static_cast<size_t>(n), detail::kChunk, run_chunk);
  return out;
}

// FGSM is exactly single-step PGD on the CE loss with no random start.
template <typename T>
Tensor<T> fgsm(const nn::ParameterSet<T>& params, const Tensor<T>& x, const std::vector<int>& y,
               double epsilon) {
  AttackConfig cfg;
  cfg.epsilon = epsilon;
  cfg.steps = epsilon > 0.0 ? 1 : 0;
  cfg.step_size = epsilon > 0.0 ? epsilon : 1.0;
  cfg.random_start = RandomStart::none;
  cfg.inner_loss = InnerLoss::ce;
  AttackReference<T> ref;
  ref.labels = &y;
  return pgd(params, x, ref, cfg, 0);
}

// PGD on the CW margin loss.
template <typename T>
Tensor<T> cw_inf(const nn::ParameterSet<T>& params, const Tensor<T>& x, const std::vector<int>& y,
                 const AttackConfig& cfg_in, uint64_t seed) {
  AttackConfig cfg = cfg_in;
  cfg.inner_loss = InnerLoss::cw_margin;
  AttackReference<T> ref;
  ref.labels = &y;
  return pgd(params, x, ref, cfg, seed);
}

// ---------------------------------------------------------------------------
// Per-defense inner maximization dispatch.
// ---------------------------------------------------------------------------

enum class Method { NAT, SAT, TRADES, MART, ARD, IAD, RSLAD };

inline std::string method_name(Method m) {
  switch (m) {
    case Method::NAT: return "NAT";
    case Method::SAT: return "SAT";
    case Method::TRADES: return "TRADES";
    case Method::MART: return "MART";
    case Method::ARD: return "ARD";
    case Method::IAD: return "IAD";
    case Method::RSLAD: return "RSLAD";
  }
  return "?";
}

inline Method method_from_name(const std::string& s) {
  for (Method m : {Method::NAT, Method::SAT, Method::TRADES, Method::MART, Method::ARD,
                   Method::IAD, Method::RSLAD})
    if (method_name(m) == s) return m;
  throw ConfigError(cat("unknown method '", s, "' (valid: NAT, SAT, TRADES, MART, ARD, IAD, "
                        "RSLAD)"));
}

inline bool method_needs_teacher(Method m) {
  return m == Method::ARD || m == Method::IAD || m == Method::RSLAD;
}

// Generates x' for the given defense. The soft-label override stands in for
// the teacher's natural prediction when distillation targets come from
// another source (SSL/NSL runs).
template <typename T>
Tensor<T> inner_max(Method method, const nn::ParameterSet<T>& student,
                    const nn::ParameterSet<T>* teacher, const Tensor<T>& x,
                    const std::vector<int>& y, const AttackConfig& cfg_in, uint64_t seed,
                    const Tensor<T>* reference_override = nullptr) {
  if (method == Method::NAT) return x;
  if (method_needs_teacher(method) && !teacher && !reference_override)
    throw ConfigError(cat(method_name(method), " needs a teacher model"));
  AttackConfig cfg = cfg_in;
  // Each lineage keeps its own inner-start convention unless the caller
  // configured one explicitly: the CE-based methods start uniformly in the
  // epsilon ball, the KL-based ones from a 0.001 Gaussian nudge.
  if (!cfg.random_start_explicit && cfg.steps > 0) {
    switch (method) {
      case Method::SAT:
      case Method::MART:
      case Method::ARD:
      case Method::IAD:
        cfg.random_start = RandomStart::uniform;
        cfg.random_start_param = cfg.epsilon;
        break;
      case Method::TRADES:
      case Method::RSLAD:
        cfg.random_start = RandomStart::gaussian;
        cfg.random_start_param = 0.001;
        break;
      default:
        break;
    }
  }
  AttackReference<T> ref;
  Tensor<T> ref_rows;
  switch (method) {
    case Method::SAT:
    case Method::MART:
    case Method::ARD:
    case Method::IAD:
      cfg.inner_loss = InnerLoss::ce;
      ref.labels = &y;
      break;
    case Method::TRADES:
      cfg.inner_loss = InnerLoss::kl;
      ref_rows = nn::predict_probs(student, x, T(1));  // fixed per attack
      ref.probs = &ref_rows;
      break;
    case Method::RSLAD:
      cfg.inner_loss = InnerLoss::kl;
      if (reference_override) {
        ref.probs = reference_override;
      } else {
        ref_rows = nn::predict_probs(*teacher, x, T(1));
        ref.probs = &ref_rows;
      }
      break;
    default:
      throw ContractError("inner_max: unhandled method");
  }
  return pgd(student, x, ref, cfg, seed);
}

}  // namespace robustdistill::attacks

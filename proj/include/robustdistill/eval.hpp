#pragma once

#include <charconv>
#include <map>
#include <string>
#include <vector>

#include "robustdistill/attacks.hpp"
#include "robustdistill/data.hpp"
#include "robustdistill/nn.hpp"

namespace robustdistill::eval {

// Shortest round-trip decimal form; keeps emitted JSON/CSV byte-stable.
inline std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string json_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') {
      out += '\\';
      out += c;
    } else if (c == '\n') {
      out += "\\n";
    } else {
      out += c;
    }
  }
  return out;
}

enum class AttackKind { FGSM, PGD_SAT, PGD_TRADES, CW };

inline std::string attack_kind_name(AttackKind k) {
  switch (k) {
    case AttackKind::FGSM: return "FGSM";
    case AttackKind::PGD_SAT: return "PGD_SAT";
    case AttackKind::PGD_TRADES: return "PGD_TRADES";
    case AttackKind::CW: return "CW";
  }
  return "?";
}

// Evaluation attack set. Step sizes follow the source methods' conventions at
// eps = 8/255 and scale proportionally for other radii; all are
// config-overridable.
struct EvalAttackSet {
  attacks::AttackConfig fgsm;
  attacks::AttackConfig pgd_sat;
  attacks::AttackConfig pgd_trades;
  attacks::AttackConfig cw;

  static EvalAttackSet defaults(double eps) {
    double scale = eps / (8.0 / 255.0);
    EvalAttackSet s;
    s.fgsm = {eps, eps > 0.0 ? 1 : 0, eps > 0.0 ? eps : 1.0, attacks::RandomStart::none, 0.0,
              attacks::InnerLoss::ce};
    s.pgd_sat = {eps, 20, eps / 4.0, attacks::RandomStart::uniform, eps, attacks::InnerLoss::ce};
    s.pgd_trades = {eps,   20,  0.003 * scale, attacks::RandomStart::gaussian,
                    0.001, attacks::InnerLoss::ce};
    s.cw = {eps, 20, eps / 4.0, attacks::RandomStart::uniform, eps,
            attacks::InnerLoss::cw_margin};
    if (eps <= 0.0) {
      s.pgd_sat.step_size = s.pgd_trades.step_size = s.cw.step_size = 1.0;
      s.pgd_sat.steps = s.pgd_trades.steps = s.cw.steps = 0;
      s.pgd_sat.random_start = s.cw.random_start = attacks::RandomStart::none;
      s.pgd_trades.random_start = attacks::RandomStart::none;
    }
    return s;
  }

  const attacks::AttackConfig& get(AttackKind k) const {
    switch (k) {
      case AttackKind::FGSM: return fgsm;
      case AttackKind::PGD_SAT: return pgd_sat;
      case AttackKind::PGD_TRADES: return pgd_trades;
      case AttackKind::CW: return cw;
    }
    throw ContractError("unknown attack kind");
  }
};

inline std::string attack_config_str(const attacks::AttackConfig& c) {
  std::string rs = c.random_start == attacks::RandomStart::none
                       ? "none"
                       : (c.random_start == attacks::RandomStart::uniform ? "uniform" : "gaussian");
  std::string loss = c.inner_loss == attacks::InnerLoss::ce
                         ? "ce"
                         : (c.inner_loss == attacks::InnerLoss::kl ? "kl" : "cw_margin");
  return cat("eps=", fmt_double(c.epsilon), ";steps=", c.steps, ";step_size=",
             fmt_double(c.step_size), ";random_start=", rs, "(", fmt_double(c.random_start_param),
             ");loss=", loss);
}

constexpr int kEvalBatch = 256;

template <typename T>
double accuracy(const nn::ParameterSet<T>& params, const data::Dataset& dataset) {
  if (dataset.size() == 0) throw ParamError("accuracy over an empty dataset");
  int n = dataset.size();
  int correct = 0;
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (int lo = 0; lo < n; lo += kEvalBatch) {
    int hi = std::min(n, lo + kEvalBatch);
    auto [batch, y] = dataset.batch(order, lo, hi);
    Tensor<T> logits = nn::forward(params, batch.template cast<T>());
    int cols = logits.dim(1);
    for (int i = 0; i < hi - lo; ++i) {
      int best = 0;  // ties break to the lowest class index
      for (int j = 1; j < cols; ++j)
        if (logits(i, j) > logits(i, best)) best = j;
      if (best == y[static_cast<size_t>(i)]) ++correct;
    }
  }
  return static_cast<double>(correct) / n;
}

namespace detail {

template <typename T>
Tensor<T> run_attack(const nn::ParameterSet<T>& params, const Tensor<T>& x,
                     const std::vector<int>& y, const attacks::AttackConfig& cfg, AttackKind kind,
                     uint64_t seed, uint64_t stream_base) {
  attacks::AttackConfig c = cfg;
  attacks::AttackReference<T> ref;
  ref.labels = &y;
  if (kind == AttackKind::CW)
    c.inner_loss = attacks::InnerLoss::cw_margin;
  else
    c.inner_loss = attacks::InnerLoss::ce;
  return attacks::pgd(params, x, ref, c, seed, stream_base);
}

}  // namespace detail

// Accuracy under per-example adversarial perturbation. Random-start streams
// are indexed by the global example position, so the result does not depend
// on the evaluation batch size.
template <typename T>
double robust_accuracy(const nn::ParameterSet<T>& params, const data::Dataset& dataset,
                       const attacks::AttackConfig& cfg, AttackKind kind, uint64_t seed) {
  if (dataset.size() == 0) throw ParamError("robust_accuracy over an empty dataset");
  int n = dataset.size();
  int correct = 0;
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (int lo = 0; lo < n; lo += kEvalBatch) {
    int hi = std::min(n, lo + kEvalBatch);
    auto [batch, y] = dataset.batch(order, lo, hi);
    Tensor<T> x = batch.template cast<T>();
    Tensor<T> x_adv = detail::run_attack(params, x, y, cfg, kind, seed,
                                         static_cast<uint64_t>(lo));
    Tensor<T> logits = nn::forward(params, x_adv);
    int cols = logits.dim(1);
    for (int i = 0; i < hi - lo; ++i) {
      int best = 0;
      for (int j = 1; j < cols; ++j)
        if (logits(i, j) > logits(i, best)) best = j;
      if (best == y[static_cast<size_t>(i)]) ++correct;
    }
  }
  return static_cast<double>(correct) / n;
}

struct EvalReport {
  std::string model_id;
  std::string tag = "last";  // best | last
  double clean = 0.0;
  std::vector<std::pair<std::string, double>> rows;  // attack name -> accuracy
  std::vector<std::pair<std::string, std::string>> attack_configs;
  std::string config_digest;
  uint64_t seed = 0;

  std::string to_json() const {
    std::string s = "{";
    s += cat("\"model_id\":\"", json_escape(model_id), "\",");
    s += cat("\"checkpoint\":\"", tag, "\",");
    s += cat("\"clean\":", fmt_double(clean), ",");
    s += "\"attacks\":{";
    for (size_t i = 0; i < rows.size(); ++i) {
      if (i) s += ",";
      s += cat("\"", rows[i].first, "\":", fmt_double(rows[i].second));
    }
    s += ",\"AA\":\"n/a (out of scope)\"},";
    s += "\"attack_configs\":{";
    for (size_t i = 0; i < attack_configs.size(); ++i) {
      if (i) s += ",";
      s += cat("\"", attack_configs[i].first, "\":\"", json_escape(attack_configs[i].second),
               "\"");
    }
    s += "},";
    s += cat("\"config_digest\":\"", config_digest, "\",");
    s += cat("\"seed\":", seed, "}");
    return s;
  }

  static std::string csv_header() { return "model_id,checkpoint,clean,FGSM,PGD_SAT,PGD_TRADES,CW,seed"; }

  std::string csv_row() const {
    std::string s = cat(model_id, ",", tag, ",", fmt_double(clean));
    for (const char* name : {"FGSM", "PGD_SAT", "PGD_TRADES", "CW"}) {
      double v = -1.0;
      for (const auto& [k, acc] : rows)
        if (k == name) v = acc;
      s += cat(",", fmt_double(v));
    }
    s += cat(",", seed);
    return s;
  }
};

template <typename T>
EvalReport white_box_suite(const nn::ParameterSet<T>& params, const data::Dataset& dataset,
                           const EvalAttackSet& set, uint64_t seed,
                           const std::string& model_id = "model",
                           const std::string& tag = "last") {
  uint64_t before = params.digest();
  EvalReport r;
  r.model_id = model_id;
  r.tag = tag;
  r.seed = seed;
  r.clean = accuracy(params, dataset);
  for (AttackKind k : {AttackKind::FGSM, AttackKind::PGD_SAT, AttackKind::PGD_TRADES,
                       AttackKind::CW}) {
    const attacks::AttackConfig& cfg = set.get(k);
    r.rows.emplace_back(attack_kind_name(k), robust_accuracy(params, dataset, cfg, k, seed));
    r.attack_configs.emplace_back(attack_kind_name(k), attack_config_str(cfg));
  }
  if (params.digest() != before)
    throw IntegrityError("evaluation mutated model parameters");
  return r;
}

// Black-box transfer: craft on the surrogate, measure on the target.
template <typename T>
double transfer_attack_eval(const nn::ParameterSet<T>& target,
                            const nn::ParameterSet<T>& surrogate, const data::Dataset& dataset,
                            const attacks::AttackConfig& cfg, AttackKind kind, uint64_t seed) {
  if (target.spec.num_classes != surrogate.spec.num_classes)
    throw ConfigError(cat("transfer: class counts differ (target ", target.spec.num_classes,
                          ", surrogate ", surrogate.spec.num_classes, ")"));
  if (target.spec.input_shape != surrogate.spec.input_shape)
    throw ConfigError(cat("transfer: input shapes differ (target ",
                          shape_str(target.spec.input_shape), ", surrogate ",
                          shape_str(surrogate.spec.input_shape), ")"));
  if (dataset.size() == 0) throw ParamError("transfer eval over an empty dataset");
  int n = dataset.size();
  int correct = 0;
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (int lo = 0; lo < n; lo += kEvalBatch) {
    int hi = std::min(n, lo + kEvalBatch);
    auto [batch, y] = dataset.batch(order, lo, hi);
    Tensor<T> x = batch.template cast<T>();
    Tensor<T> x_adv = detail::run_attack(surrogate, x, y, cfg, kind, seed,
                                         static_cast<uint64_t>(lo));
    Tensor<T> logits = nn::forward(target, x_adv);
    int cols = logits.dim(1);
    for (int i = 0; i < hi - lo; ++i) {
      int best = 0;
      for (int j = 1; j < cols; ++j)
        if (logits(i, j) > logits(i, best)) best = j;
      if (best == y[static_cast<size_t>(i)]) ++correct;
    }
  }
  return static_cast<double>(correct) / n;
}

}  // namespace robustdistill::eval

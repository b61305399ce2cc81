#pragma once

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "robustdistill/data.hpp"
#include "robustdistill/distill.hpp"
#include "robustdistill/eval.hpp"
#include "robustdistill/train.hpp"

namespace robustdistill::config {

using attacks::Method;

// Fully resolved run configuration. Every field has a documented default;
// parse_config() fills the gaps and rejects unknown keys outright.
struct RunConfig {
  uint64_t seed = 1;
  std::string output_dir = "runs/out";
  bool deterministic = false;

  // [dataset]
  std::string dataset_id = "synthetic";  // synthetic | mnist | cifar10
  std::string dataset_path;
  data::SyntheticConfig synth;  // synth.seed == 0 -> derived from run seed
  int n_test = 1000;

  // [student]
  std::string student_spec = "cnn_student";

  // [teacher]
  std::string teacher_checkpoint;
  std::string teacher_natural_checkpoint;
  std::string teacher_spec = "res_medium";
  std::string teacher_role = "teacher";
  std::vector<std::string> teacher_list;

  // [defense]
  distill::DefenseConfig defense;
  bool alpha_given = false;

  // [attack_train]
  attacks::AttackConfig attack_train;
  bool train_step_given = false;

  // [attack_eval] + per-attack overrides
  double eval_epsilon = -1.0;  // -1 -> attack_train.epsilon
  eval::EvalAttackSet attack_eval;

  // [schedule]
  train::Schedule schedule;

  // [optimizer]
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 2e-4;
  int batch_size = 128;

  // [augment]
  data::AugmentConfig augment;

  double val_fraction = 0.1;

  std::string emit_resolved() const;
  uint64_t digest() const;
};

namespace detail {

struct RawConfig {
  // section -> ordered (key, value); "" is the top-level section
  std::map<std::string, std::vector<std::pair<std::string, std::string>>> entries;
  std::set<std::pair<std::string, std::string>> consumed;

  const std::string* find(const std::string& section, const std::string& key) const {
    auto it = entries.find(section);
    if (it == entries.end()) return nullptr;
    for (const auto& [k, v] : it->second)
      if (k == key) return &v;
    return nullptr;
  }

  bool has(const std::string& section, const std::string& key) {
    if (const std::string* v = find(section, key)) {
      (void)v;
      consumed.insert({section, key});
      return true;
    }
    return false;
  }

  std::string get(const std::string& section, const std::string& key, const std::string& dflt) {
    if (const std::string* v = find(section, key)) {
      consumed.insert({section, key});
      return *v;
    }
    return dflt;
  }

  void reject_unconsumed() const {
    for (const auto& [section, kvs] : entries)
      for (const auto& [k, v] : kvs) {
        (void)v;
        if (!consumed.count({section, k}))
          throw ConfigError(cat("unknown key '", k, "' in section [",
                                section.empty() ? "(top level)" : section, "]"));
      }
  }
};

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline RawConfig parse_raw(const std::string& text) {
  RawConfig raw;
  std::istringstream is(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError(cat("line ", lineno, ": malformed section header '", line, "'"));
      section = trim(line.substr(1, line.size() - 2));
      raw.entries[section];
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(cat("line ", lineno, ": expected key = value, got '", line, "'"));
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(cat("line ", lineno, ": empty key"));
    for (const auto& [k, v] : raw.entries[section]) {
      (void)v;
      if (k == key)
        throw ConfigError(cat("line ", lineno, ": duplicate key '", key, "' in section [",
                              section, "]"));
    }
    raw.entries[section].emplace_back(key, value);
  }
  return raw;
}

inline double to_double(const std::string& v, const std::string& where) {
  try {
    size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(cat("bad number '", v, "' for ", where));
  }
}

inline int to_int(const std::string& v, const std::string& where) {
  try {
    size_t pos = 0;
    long d = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return static_cast<int>(d);
  } catch (const std::exception&) {
    throw ConfigError(cat("bad integer '", v, "' for ", where));
  }
}

inline uint64_t to_u64(const std::string& v, const std::string& where) {
  try {
    size_t pos = 0;
    unsigned long long d = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(cat("bad integer '", v, "' for ", where));
  }
}

inline bool to_bool(const std::string& v, const std::string& where) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(cat("bad boolean '", v, "' for ", where, " (use true/false)"));
}

inline double get_double(RawConfig& raw, const std::string& sec, const std::string& key,
                         double dflt, double lo, double hi) {
  const std::string* v = raw.find(sec, key);
  if (!v) return dflt;
  raw.consumed.insert({sec, key});
  double d = to_double(*v, cat("[", sec, "] ", key));
  if (d < lo || d > hi)
    throw ConfigError(cat("[", sec, "] ", key, " = ", d, " outside permitted range [", lo, ",",
                          hi, "]"));
  return d;
}

inline int get_int(RawConfig& raw, const std::string& sec, const std::string& key, int dflt,
                   int lo, int hi) {
  const std::string* v = raw.find(sec, key);
  if (!v) return dflt;
  raw.consumed.insert({sec, key});
  int d = to_int(*v, cat("[", sec, "] ", key));
  if (d < lo || d > hi)
    throw ConfigError(cat("[", sec, "] ", key, " = ", d, " outside permitted range [", lo, ",",
                          hi, "]"));
  return d;
}

inline attacks::RandomStart parse_random_start(const std::string& v, const std::string& where) {
  if (v == "none") return attacks::RandomStart::none;
  if (v == "uniform") return attacks::RandomStart::uniform;
  if (v == "gaussian") return attacks::RandomStart::gaussian;
  throw ConfigError(cat("bad random_start '", v, "' for ", where,
                        " (valid: none, uniform, gaussian)"));
}

inline std::string random_start_name(attacks::RandomStart rs) {
  switch (rs) {
    case attacks::RandomStart::none: return "none";
    case attacks::RandomStart::uniform: return "uniform";
    case attacks::RandomStart::gaussian: return "gaussian";
  }
  return "?";
}

inline void read_attack_overrides(RawConfig& raw, const std::string& sec,
                                  attacks::AttackConfig& cfg) {
  cfg.epsilon = get_double(raw, sec, "epsilon", cfg.epsilon, 0.0, 1.0);
  cfg.steps = get_int(raw, sec, "steps", cfg.steps, 0, 100000);
  cfg.step_size = get_double(raw, sec, "step_size", cfg.step_size, 0.0, 1.0);
  if (const std::string* v = raw.find(sec, "random_start")) {
    raw.consumed.insert({sec, "random_start"});
    cfg.random_start = parse_random_start(*v, cat("[", sec, "]"));
  }
  cfg.random_start_param =
      get_double(raw, sec, "random_start_param", cfg.random_start_param, 0.0, 1.0);
}

}  // namespace detail

inline RunConfig parse_config_text(const std::string& text) {
  detail::RawConfig raw = detail::parse_raw(text);
  RunConfig c;

  if (const std::string* v = raw.find("", "seed")) {
    raw.consumed.insert({"", "seed"});
    c.seed = detail::to_u64(*v, "seed");
  }
  c.output_dir = raw.get("", "output_dir", c.output_dir);
  if (const std::string* v = raw.find("", "deterministic")) {
    raw.consumed.insert({"", "deterministic"});
    c.deterministic = detail::to_bool(*v, "deterministic");
  }
  c.val_fraction = detail::get_double(raw, "", "val_fraction", c.val_fraction, 0.01, 0.5);

  // [dataset]
  c.dataset_id = raw.get("dataset", "id", c.dataset_id);
  if (c.dataset_id != "synthetic" && c.dataset_id != "mnist" && c.dataset_id != "cifar10")
    throw ConfigError(cat("[dataset] id = '", c.dataset_id,
                          "' (valid: synthetic, mnist, cifar10)"));
  c.dataset_path = raw.get("dataset", "path", c.dataset_path);
  std::string kind = raw.get("dataset", "kind", "gaussians");
  if (kind == "gaussians") c.synth.kind = data::SyntheticKind::gaussians;
  else if (kind == "rings") c.synth.kind = data::SyntheticKind::rings;
  else throw ConfigError(cat("[dataset] kind = '", kind, "' (valid: gaussians, rings)"));
  c.synth.n = detail::get_int(raw, "dataset", "n_train", c.synth.n, 1, 10000000);
  c.n_test = detail::get_int(raw, "dataset", "n_test", c.n_test, 1, 10000000);
  c.synth.num_classes = detail::get_int(raw, "dataset", "classes", c.synth.num_classes, 2, 1000);
  c.synth.image_size = detail::get_int(raw, "dataset", "image_size", c.synth.image_size, 2, 256);
  c.synth.margin = detail::get_double(raw, "dataset", "margin", c.synth.margin, 0.0, 1.0);
  c.synth.noise = detail::get_double(raw, "dataset", "noise", c.synth.noise, 0.0, 1.0);
  c.synth.shortcut = detail::get_double(raw, "dataset", "shortcut", c.synth.shortcut, 0.0, 1.0);
  c.synth.structured_noise =
      detail::get_double(raw, "dataset", "structured_noise", c.synth.structured_noise, 0.0, 1.0);
  // applies to the train split; the test split is always generated clean
  c.synth.label_noise = detail::get_double(raw, "dataset", "label_noise", 0.1, 0.0, 0.9);
  if (const std::string* v = raw.find("dataset", "seed")) {
    raw.consumed.insert({"dataset", "seed"});
    c.synth.seed = detail::to_u64(*v, "[dataset] seed");
  }

  // [student] / [teacher]
  c.student_spec = raw.get("student", "spec", c.student_spec);
  c.teacher_checkpoint = raw.get("teacher", "checkpoint", c.teacher_checkpoint);
  c.teacher_natural_checkpoint =
      raw.get("teacher", "natural_checkpoint", c.teacher_natural_checkpoint);
  c.teacher_spec = raw.get("teacher", "spec", c.teacher_spec);
  c.teacher_role = raw.get("teacher", "role", c.teacher_role);
  if (c.teacher_role != "teacher" && c.teacher_role != "student")
    throw ConfigError(cat("[teacher] role = '", c.teacher_role, "' (valid: teacher, student)"));
  std::string list = raw.get("teacher", "list", "");
  if (!list.empty())
    for (const std::string& p : nn::detail::split(list, ';'))
      if (!p.empty()) c.teacher_list.push_back(p);

  // [defense]
  std::string method = raw.get("defense", "method", "NAT");
  c.defense.method = attacks::method_from_name(method);
  c.defense.lambda = detail::get_double(raw, "defense", "lambda", 6.0, 0.0, 1e6);
  double alpha_default = c.defense.method == Method::ARD ? 1.0 : 5.0 / 6.0;
  c.alpha_given = raw.find("defense", "alpha") != nullptr;
  c.defense.alpha = detail::get_double(raw, "defense", "alpha", alpha_default, 0.0, 1.0);
  c.defense.tau = detail::get_double(raw, "defense", "tau", 1.0, 1e-6, 1e6);
  c.defense.beta = detail::get_double(raw, "defense", "beta", 1.0, 1e-6, 1e6);
  std::string rsl_source = raw.get("defense", "rsl_source", "natural");
  if (rsl_source == "natural") c.defense.rsl_source = distill::RslSource::natural;
  else if (rsl_source == "adversarial") c.defense.rsl_source = distill::RslSource::adversarial;
  else throw ConfigError(cat("[defense] rsl_source = '", rsl_source,
                             "' (valid: natural, adversarial)"));
  std::string sl = raw.get("defense", "soft_label", "RSL");
  if (sl == "SSL") c.defense.soft_label = distill::SoftLabelKind::SSL;
  else if (sl == "NSL") c.defense.soft_label = distill::SoftLabelKind::NSL;
  else if (sl == "RSL") c.defense.soft_label = distill::SoftLabelKind::RSL;
  else throw ConfigError(cat("[defense] soft_label = '", sl, "' (valid: SSL, NSL, RSL)"));
  c.defense.smoothing = detail::get_double(raw, "defense", "smoothing", 0.1, 0.0, 0.999999);
  if (c.defense.smoothing >= 1.0)
    throw ConfigError("[defense] smoothing must be < 1");

  // [attack_train]; step_size and random start follow the training PGD
  // convention: eps/4 step (2/255 at eps=8/255), gaussian 0.001 start.
  c.attack_train.epsilon = detail::get_double(raw, "attack_train", "epsilon", 8.0 / 255.0, 0.0,
                                              1.0);
  c.attack_train.steps = detail::get_int(raw, "attack_train", "steps", 10, 0, 100000);
  c.train_step_given = raw.find("attack_train", "step_size") != nullptr;
  c.attack_train.step_size = detail::get_double(raw, "attack_train", "step_size",
                                                c.attack_train.epsilon / 4.0, 0.0, 1.0);
  if (!c.train_step_given) c.attack_train.step_size = c.attack_train.epsilon / 4.0;
  // "auto" (the default) picks each method's own start convention at
  // dispatch time; any explicit value pins it for every method.
  c.attack_train.random_start = attacks::RandomStart::gaussian;
  if (const std::string* v = raw.find("attack_train", "random_start")) {
    raw.consumed.insert({"attack_train", "random_start"});
    if (*v != "auto") {
      c.attack_train.random_start = detail::parse_random_start(*v, "[attack_train]");
      c.attack_train.random_start_explicit = true;
    }
  }
  if (raw.find("attack_train", "random_start_param")) c.attack_train.random_start_explicit = true;
  c.attack_train.random_start_param =
      detail::get_double(raw, "attack_train", "random_start_param", 0.001, 0.0, 1.0);
  if (c.attack_train.epsilon == 0.0) {
    c.attack_train.steps = detail::get_int(raw, "attack_train", "steps", 0, 0, 100000);
    c.attack_train.step_size = std::max(c.attack_train.step_size, 1e-9);
  }

  // [attack_eval] and per-attack overrides
  c.eval_epsilon = detail::get_double(raw, "attack_eval", "epsilon", c.attack_train.epsilon, 0.0,
                                      1.0);
  c.attack_eval = eval::EvalAttackSet::defaults(c.eval_epsilon);
  detail::read_attack_overrides(raw, "attack_eval.fgsm", c.attack_eval.fgsm);
  detail::read_attack_overrides(raw, "attack_eval.pgd_sat", c.attack_eval.pgd_sat);
  detail::read_attack_overrides(raw, "attack_eval.pgd_trades", c.attack_eval.pgd_trades);
  detail::read_attack_overrides(raw, "attack_eval.cw", c.attack_eval.cw);

  // [schedule]
  c.schedule.total_epochs = detail::get_int(raw, "schedule", "epochs", 60, 1, 100000);
  if (const std::string* v = raw.find("schedule", "decays")) {
    raw.consumed.insert({"schedule", "decays"});
    c.schedule.decay_epochs.clear();
    for (const std::string& e : nn::detail::split(*v, ','))
      if (!e.empty()) c.schedule.decay_epochs.push_back(detail::to_int(e, "[schedule] decays"));
  } else if (c.schedule.total_epochs != 60) {
    // No decays given for a non-default budget: scale the default 43/52/57
    // pattern (the 300-epoch 215/260/285 shape) proportionally.
    c.schedule.decay_epochs = {
        static_cast<int>(c.schedule.total_epochs * 215.0 / 300.0 + 0.5),
        static_cast<int>(c.schedule.total_epochs * 260.0 / 300.0 + 0.5),
        static_cast<int>(c.schedule.total_epochs * 285.0 / 300.0 + 0.5)};
    std::vector<int>& d = c.schedule.decay_epochs;
    d.erase(std::unique(d.begin(), d.end()), d.end());
    while (!d.empty() && d.front() < 2) d.erase(d.begin());
  }
  c.schedule.decay_factor = detail::get_double(raw, "schedule", "factor", 0.1, 0.0, 1.0);

  // [optimizer]
  c.lr = detail::get_double(raw, "optimizer", "lr", 0.1, 0.0, 100.0);
  c.momentum = detail::get_double(raw, "optimizer", "momentum", 0.9, 0.0, 1.0);
  c.weight_decay = detail::get_double(raw, "optimizer", "weight_decay", 2e-4, 0.0, 1.0);
  c.batch_size = detail::get_int(raw, "optimizer", "batch_size", 128, 1, 100000);
  c.schedule.initial_lr = c.lr;

  // [augment]
  c.augment.pad = detail::get_int(raw, "augment", "pad", 0, 0, 64);
  c.augment.horizontal_flip_prob =
      detail::get_double(raw, "augment", "flip_prob", 0.0, 0.0, 1.0);

  raw.reject_unconsumed();
  c.defense.validate();
  c.attack_train.validate();
  c.schedule.validate();
  return c;
}

inline RunConfig parse_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError(cat("cannot open config file ", path));
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str());
}

inline std::string RunConfig::emit_resolved() const {
  using eval::fmt_double;
  std::string s;
  s += cat("seed = ", seed, "\n");
  s += cat("output_dir = ", output_dir, "\n");
  s += cat("deterministic = ", deterministic ? "true" : "false", "\n");
  s += cat("val_fraction = ", fmt_double(val_fraction), "\n");
  s += "\n[dataset]\n";
  s += cat("id = ", dataset_id, "\n");
  if (!dataset_path.empty()) s += cat("path = ", dataset_path, "\n");
  s += cat("kind = ", synth.kind == data::SyntheticKind::gaussians ? "gaussians" : "rings", "\n");
  s += cat("n_train = ", synth.n, "\n");
  s += cat("n_test = ", n_test, "\n");
  s += cat("classes = ", synth.num_classes, "\n");
  s += cat("image_size = ", synth.image_size, "\n");
  s += cat("margin = ", fmt_double(synth.margin), "\n");
  s += cat("noise = ", fmt_double(synth.noise), "\n");
  s += cat("shortcut = ", fmt_double(synth.shortcut), "\n");
  s += cat("structured_noise = ", fmt_double(synth.structured_noise), "\n");
  s += cat("label_noise = ", fmt_double(synth.label_noise), "\n");
  s += cat("seed = ", synth.seed, "\n");
  s += "\n[student]\n";
  s += cat("spec = ", student_spec, "\n");
  s += "\n[teacher]\n";
  if (!teacher_checkpoint.empty()) s += cat("checkpoint = ", teacher_checkpoint, "\n");
  if (!teacher_natural_checkpoint.empty())
    s += cat("natural_checkpoint = ", teacher_natural_checkpoint, "\n");
  s += cat("spec = ", teacher_spec, "\n");
  s += cat("role = ", teacher_role, "\n");
  if (!teacher_list.empty()) {
    s += "list = ";
    for (size_t i = 0; i < teacher_list.size(); ++i) {
      if (i) s += ";";
      s += teacher_list[i];
    }
    s += "\n";
  }
  s += "\n[defense]\n";
  s += cat("method = ", attacks::method_name(defense.method), "\n");
  s += cat("lambda = ", fmt_double(defense.lambda), "\n");
  s += cat("alpha = ", fmt_double(defense.alpha), "\n");
  s += cat("tau = ", fmt_double(defense.tau), "\n");
  s += cat("beta = ", fmt_double(defense.beta), "\n");
  s += cat("rsl_source = ",
           defense.rsl_source == distill::RslSource::natural ? "natural" : "adversarial", "\n");
  s += cat("soft_label = ", distill::soft_label_name(defense.soft_label), "\n");
  s += cat("smoothing = ", fmt_double(defense.smoothing), "\n");
  s += "\n[attack_train]\n";
  s += cat("epsilon = ", fmt_double(attack_train.epsilon), "\n");
  s += cat("steps = ", attack_train.steps, "\n");
  s += cat("step_size = ", fmt_double(attack_train.step_size), "\n");
  if (attack_train.random_start_explicit) {
    s += cat("random_start = ", detail::random_start_name(attack_train.random_start), "\n");
    s += cat("random_start_param = ", fmt_double(attack_train.random_start_param), "\n");
  } else {
    s += "random_start = auto\n";
  }
  s += "\n[attack_eval]\n";
  s += cat("epsilon = ", fmt_double(eval_epsilon), "\n");
  auto emit_attack = [&](const char* name, const attacks::AttackConfig& a) {
    s += cat("\n[attack_eval.", name, "]\n");
    s += cat("epsilon = ", fmt_double(a.epsilon), "\n");
    s += cat("steps = ", a.steps, "\n");
    s += cat("step_size = ", fmt_double(a.step_size), "\n");
    s += cat("random_start = ", detail::random_start_name(a.random_start), "\n");
    s += cat("random_start_param = ", fmt_double(a.random_start_param), "\n");
  };
  emit_attack("fgsm", attack_eval.fgsm);
  emit_attack("pgd_sat", attack_eval.pgd_sat);
  emit_attack("pgd_trades", attack_eval.pgd_trades);
  emit_attack("cw", attack_eval.cw);
  s += "\n[schedule]\n";
  s += cat("epochs = ", schedule.total_epochs, "\n");
  s += "decays = ";
  for (size_t i = 0; i < schedule.decay_epochs.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(schedule.decay_epochs[i]);
  }
  s += "\n";
  s += cat("factor = ", fmt_double(schedule.decay_factor), "\n");
  s += "\n[optimizer]\n";
  s += cat("lr = ", fmt_double(lr), "\n");
  s += cat("momentum = ", fmt_double(momentum), "\n");
  s += cat("weight_decay = ", fmt_double(weight_decay), "\n");
  s += cat("batch_size = ", batch_size, "\n");
  s += "\n[augment]\n";
  s += cat("pad = ", augment.pad, "\n");
  s += cat("flip_prob = ", fmt_double(augment.horizontal_flip_prob), "\n");
  return s;
}

// Digest over the resolved config with output_dir excluded, so runs of the
// same experiment written to different places compare equal.
inline uint64_t RunConfig::digest() const {
  std::string s = emit_resolved();
  std::string filtered;
  std::istringstream is(s);
  std::string line;
  while (std::getline(is, line)) {
    if (line.rfind("output_dir = ", 0) == 0) continue;
    filtered += line;
    filtered += '\n';
  }
  return fnv1a64(filtered);
}

}  // namespace robustdistill::config

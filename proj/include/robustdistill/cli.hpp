#pragma once

#include <cctype>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "robustdistill/config.hpp"

namespace robustdistill::cli {

namespace fs = std::filesystem;
using attacks::Method;
using config::RunConfig;

struct LoadedData {
  data::Dataset train;
  data::Dataset test;
};

inline LoadedData load_dataset(const RunConfig& cfg) {
  LoadedData d;
  if (cfg.dataset_id == "synthetic") {
    data::SyntheticConfig sc = cfg.synth;
    if (sc.seed == 0) sc.seed = mix_seed(cfg.seed, 0x4441544153ull);
    d.train = data::gen_synthetic(sc);
    d.train.split = "train";
    // same templates (same seed), disjoint noise streams, clean labels
    data::SyntheticConfig tc = sc;
    tc.n = cfg.n_test;
    tc.example_offset = sc.example_offset + (1ull << 32);
    tc.label_noise = 0.0;
    d.test = data::gen_synthetic(tc);
    d.test.split = "test";
  } else if (cfg.dataset_id == "mnist") {
    if (cfg.dataset_path.empty()) throw ConfigError("[dataset] path required for mnist");
    d.train = data::load_idx(cfg.dataset_path + "/train-images-idx3-ubyte",
                             cfg.dataset_path + "/train-labels-idx1-ubyte");
    d.test = data::load_idx(cfg.dataset_path + "/t10k-images-idx3-ubyte",
                            cfg.dataset_path + "/t10k-labels-idx1-ubyte");
    d.train.split = "train";
    d.test.split = "test";
  } else if (cfg.dataset_id == "cifar10") {
    if (cfg.dataset_path.empty()) throw ConfigError("[dataset] path required for cifar10");
    std::vector<std::string> batches;
    for (int i = 1; i <= 5; ++i)
      batches.push_back(cfg.dataset_path + "/data_batch_" + std::to_string(i) + ".bin");
    d.train = data::load_cifar_binary(batches);
    d.test = data::load_cifar_binary({cfg.dataset_path + "/test_batch.bin"});
    d.train.split = "train";
    d.test.split = "test";
  } else {
    throw ConfigError(cat("unknown dataset id ", cfg.dataset_id));
  }
  return d;
}

inline nn::ParameterSet<float> load_teacher(const std::string& path) {
  nn::Checkpoint ckpt = nn::load_checkpoint(path);
  nn::ParameterSet<float> ps = std::move(ckpt.params);
  ps.role = nn::Role::teacher;
  return ps;
}

inline train::TrainRunConfig to_train_config(const RunConfig& c) {
  train::TrainRunConfig t;
  t.defense = c.defense;
  t.attack_train = c.attack_train;
  t.selection_attack = c.attack_eval.pgd_trades;
  t.schedule = c.schedule;
  t.augment = c.augment;
  t.batch_size = c.batch_size;
  t.seed = c.seed;
  t.momentum = c.momentum;
  t.weight_decay = c.weight_decay;
  t.val_fraction = c.val_fraction;
  t.deterministic = c.deterministic;
  return t;
}

inline std::string metrics_line(const nn::EpochRecord& r) {
  using eval::fmt_double;
  return cat("{\"epoch\":", r.epoch, ",\"lr\":", fmt_double(r.lr), ",\"train_loss\":",
             fmt_double(r.train_loss), ",\"train_acc\":", fmt_double(r.train_acc),
             ",\"val_robust_acc\":", fmt_double(r.val_metric), ",\"wall_ms\":",
             fmt_double(r.wall_ms), "}");
}

// Defense hyperparameters echoed into every report.
inline std::string defense_json(const distill::DefenseConfig& d) {
  using eval::fmt_double;
  return cat("{\"method\":\"", attacks::method_name(d.method), "\",\"lambda\":",
             fmt_double(d.lambda), ",\"alpha\":", fmt_double(d.alpha), ",\"tau\":",
             fmt_double(d.tau), ",\"beta\":", fmt_double(d.beta), ",\"rsl_source\":\"",
             d.rsl_source == distill::RslSource::natural ? "natural" : "adversarial",
             "\",\"soft_label\":\"", distill::soft_label_name(d.soft_label),
             "\",\"smoothing\":", fmt_double(d.smoothing), "}");
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError(cat("cannot open ", path.string(), " for writing"));
  os << text;
  if (!os) throw FormatError(cat("write failed for ", path.string()));
}

// Trains one run into `dir`, writing metrics.jsonl, checkpoints and reports.
// Returns the white-box report of the requested checkpoint.
struct RunArtifacts {
  eval::EvalReport best_report;
  eval::EvalReport last_report;
  train::TrainResult result;
};

inline RunArtifacts run_and_report(const RunConfig& cfg, const train::TrainRunConfig& tcfg,
                                   const nn::ModelSpec& student_spec,
                                   const nn::ParameterSet<float>* teacher,
                                   const LoadedData& dataset, const fs::path& dir,
                                   const std::string& model_id) {
  fs::create_directories(dir);
  write_text(dir / "config.resolved", cfg.emit_resolved());
  std::ofstream metrics(dir / "metrics.jsonl", std::ios::binary);
  if (!metrics) throw FormatError(cat("cannot open ", (dir / "metrics.jsonl").string()));
  train::TrainResult result =
      train::run_training(tcfg, student_spec, teacher, dataset.train,
                          [&](const nn::EpochRecord& r) { metrics << metrics_line(r) << "\n"; });
  metrics.close();

  nn::save_checkpoint(result.best, (dir / "best.ckpt").string());
  nn::save_checkpoint(result.last, (dir / "last.ckpt").string());

  std::string digest = hex64(cfg.digest());
  RunArtifacts art;
  art.best_report = eval::white_box_suite(result.best.params, dataset.test, cfg.attack_eval,
                                          cfg.seed, model_id, "best");
  art.last_report = eval::white_box_suite(result.last.params, dataset.test, cfg.attack_eval,
                                          cfg.seed, model_id, "last");
  art.best_report.config_digest = digest;
  art.last_report.config_digest = digest;

  std::string json = cat("{\"defense\":", defense_json(tcfg.defense), ",\"reports\":[",
                         art.best_report.to_json(), ",", art.last_report.to_json(), "]}\n");
  write_text(dir / "report.json", json);
  std::string csv = eval::EvalReport::csv_header() + "\n" + art.best_report.csv_row() + "\n" +
                    art.last_report.csv_row() + "\n";
  write_text(dir / "report.csv", csv);
  art.result = std::move(result);
  return art;
}

inline int cmd_train(const RunConfig& cfg) {
  fs::create_directories(cfg.output_dir);
  write_text(fs::path(cfg.output_dir) / "config.resolved", cfg.emit_resolved());
  LoadedData dataset = load_dataset(cfg);
  Shape input = dataset.train.example_shape();
  nn::ModelSpec student_spec =
      nn::parse_model_spec(cfg.student_spec, input, dataset.train.num_classes);

  std::optional<nn::ParameterSet<float>> teacher;
  bool needs_teacher = attacks::method_needs_teacher(cfg.defense.method) &&
                       cfg.defense.soft_label != distill::SoftLabelKind::SSL;
  if (needs_teacher) {
    if (cfg.teacher_checkpoint.empty())
      throw ConfigError(cat(attacks::method_name(cfg.defense.method),
                            " needs [teacher] checkpoint"));
    teacher = load_teacher(cfg.teacher_checkpoint);
  }

  run_and_report(cfg, to_train_config(cfg), student_spec, teacher ? &*teacher : nullptr, dataset,
                 cfg.output_dir, attacks::method_name(cfg.defense.method));
  return 0;
}

inline int cmd_eval(const RunConfig& cfg, const std::string& checkpoint_path,
                    const std::string& surrogate_path) {
  fs::create_directories(cfg.output_dir);
  write_text(fs::path(cfg.output_dir) / "config.resolved", cfg.emit_resolved());
  LoadedData dataset = load_dataset(cfg);
  nn::Checkpoint ckpt = nn::load_checkpoint(checkpoint_path);
  eval::EvalReport report =
      eval::white_box_suite(ckpt.params, dataset.test, cfg.attack_eval, cfg.seed,
                            fs::path(checkpoint_path).stem().string(), ckpt.selection_tag);
  report.config_digest = hex64(cfg.digest());
  if (!surrogate_path.empty()) {
    nn::ParameterSet<float> surrogate = load_teacher(surrogate_path);
    double t_pgd = eval::transfer_attack_eval(ckpt.params, surrogate, dataset.test,
                                              cfg.attack_eval.pgd_sat, eval::AttackKind::PGD_SAT,
                                              cfg.seed);
    double t_cw = eval::transfer_attack_eval(ckpt.params, surrogate, dataset.test,
                                             cfg.attack_eval.cw, eval::AttackKind::CW, cfg.seed);
    report.rows.emplace_back("transfer_PGD20", t_pgd);
    report.rows.emplace_back("transfer_CW", t_cw);
    report.attack_configs.emplace_back("transfer_PGD20",
                                       eval::attack_config_str(cfg.attack_eval.pgd_sat));
    report.attack_configs.emplace_back("transfer_CW",
                                       eval::attack_config_str(cfg.attack_eval.cw));
  }
  write_text(fs::path(cfg.output_dir) / "report.json", report.to_json() + "\n");
  write_text(fs::path(cfg.output_dir) / "report.csv",
             eval::EvalReport::csv_header() + "\n" + report.csv_row() + "\n");
  return 0;
}

inline int cmd_attack(const RunConfig& cfg, const std::string& checkpoint_path,
                      const std::string& attack_name) {
  fs::create_directories(cfg.output_dir);
  write_text(fs::path(cfg.output_dir) / "config.resolved", cfg.emit_resolved());
  LoadedData dataset = load_dataset(cfg);
  nn::Checkpoint ckpt = nn::load_checkpoint(checkpoint_path);
  eval::AttackKind kind;
  if (attack_name == "fgsm") kind = eval::AttackKind::FGSM;
  else if (attack_name == "pgd_sat") kind = eval::AttackKind::PGD_SAT;
  else if (attack_name == "pgd_trades") kind = eval::AttackKind::PGD_TRADES;
  else if (attack_name == "cw") kind = eval::AttackKind::CW;
  else throw ConfigError(cat("unknown attack '", attack_name,
                             "' (valid: fgsm, pgd_sat, pgd_trades, cw)"));
  const attacks::AttackConfig& acfg = cfg.attack_eval.get(kind);

  const data::Dataset& test = dataset.test;
  int n = test.size();
  Tensor<float> adv(test.images.shape);
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  size_t stride = test.images.numel() / static_cast<size_t>(n);
  for (int lo = 0; lo < n; lo += eval::kEvalBatch) {
    int hi = std::min(n, lo + eval::kEvalBatch);
    auto [x, y] = test.batch(order, lo, hi);
    Tensor<float> x_adv = eval::detail::run_attack(ckpt.params, x, y, acfg, kind, cfg.seed,
                                                   static_cast<uint64_t>(lo));
    std::copy_n(x_adv.v.begin(), x_adv.v.size(),
                adv.v.begin() + static_cast<size_t>(lo) * stride);
  }
  if (adv.dim(1) != 1)
    throw ConfigError("attack export writes idx files and needs single-channel images");
  data::write_idx(adv, test.labels, (fs::path(cfg.output_dir) / "adv-images-idx3-ubyte").string(),
                  (fs::path(cfg.output_dir) / "adv-labels-idx1-ubyte").string());
  return 0;
}

// ---------------------------------------------------------------------------
// Multi-run commands. All runs inside one invocation share the seed, so the
// comparisons are paired.
// ---------------------------------------------------------------------------

struct TableRow {
  std::string name;
  eval::EvalReport report;
  size_t teacher_params = 0;
};

inline void write_table(const fs::path& dir, const std::string& table_name,
                        const std::vector<TableRow>& rows, const std::string& extra_json = "") {
  std::string json = cat("{\"table\":\"", table_name, "\",\"rows\":[");
  for (size_t i = 0; i < rows.size(); ++i) {
    if (i) json += ",";
    json += cat("{\"name\":\"", eval::json_escape(rows[i].name), "\",");
    if (rows[i].teacher_params) json += cat("\"teacher_params\":", rows[i].teacher_params, ",");
    json += cat("\"report\":", rows[i].report.to_json(), "}");
  }
  json += "]";
  if (!extra_json.empty()) json += cat(",", extra_json);
  json += "}\n";
  write_text(dir / "report.json", json);

  std::string csv = "name,teacher_params," + eval::EvalReport::csv_header() + "\n";
  for (const TableRow& r : rows)
    csv += cat(r.name, ",", r.teacher_params, ",", r.report.csv_row(), "\n");
  write_text(dir / "report.csv", csv);
}

inline double report_metric(const eval::EvalReport& r, const std::string& key) {
  for (const auto& [k, v] : r.rows)
    if (k == key) return v;
  throw ContractError(cat("report has no row ", key));
}

inline std::string sanitize(const std::string& name) {
  std::string out;
  for (char c : name) out += (std::isalnum(static_cast<unsigned char>(c)) ? c : '_');
  return out;
}

// Table-5 style ablation: {ARD, RSLAD} outer x {ARD, RSLAD} inner.
inline int cmd_ablate(const RunConfig& cfg) {
  fs::create_directories(cfg.output_dir);
  write_text(fs::path(cfg.output_dir) / "config.resolved", cfg.emit_resolved());
  if (cfg.teacher_checkpoint.empty()) throw ConfigError("ablate needs [teacher] checkpoint");
  LoadedData dataset = load_dataset(cfg);
  Shape input = dataset.train.example_shape();
  nn::ModelSpec student_spec =
      nn::parse_model_spec(cfg.student_spec, input, dataset.train.num_classes);
  nn::ParameterSet<float> teacher = load_teacher(cfg.teacher_checkpoint);

  struct Combo {
    const char* name;
    Method outer;
    Method inner;
  };
  const Combo combos[] = {{"ARD", Method::ARD, Method::ARD},
                          {"ARD_min+RSLAD_max", Method::ARD, Method::RSLAD},
                          {"RSLAD_min+ARD_max", Method::RSLAD, Method::ARD},
                          {"RSLAD", Method::RSLAD, Method::RSLAD}};
  std::vector<TableRow> rows;
  for (const Combo& combo : combos) {
    RunConfig rc = cfg;
    rc.defense.method = combo.outer;
    if (!cfg.alpha_given) rc.defense.alpha = combo.outer == Method::ARD ? 1.0 : 5.0 / 6.0;
    train::TrainRunConfig tcfg = to_train_config(rc);
    tcfg.inner_method = combo.inner;
    RunArtifacts art = run_and_report(rc, tcfg, student_spec, &teacher, dataset,
                                      fs::path(cfg.output_dir) / sanitize(combo.name),
                                      combo.name);
    rows.push_back(TableRow{combo.name, art.best_report, 0});
  }

  // Soft ordering check: full RSLAD should not trail a mixed row by more
  // than one point of PGD_TRADES robustness.
  double rslad = report_metric(rows[3].report, "PGD_TRADES");
  bool warn = false;
  for (size_t i = 1; i <= 2; ++i)
    if (rslad < report_metric(rows[i].report, "PGD_TRADES") - 0.01) warn = true;
  std::string extra = cat("\"rslad_vs_mixed\":\"", warn ? "warn" : "pass", "\"");
  write_table(cfg.output_dir, "ablation", rows, extra);
  std::cout << "[ablate] rslad_vs_mixed: " << (warn ? "warn" : "pass") << "\n";
  return 0;
}

// Trains missing teachers for the soft-label comparison: an adversarial
// (TRADES) teacher and a natural one.
inline std::string ensure_teacher(const RunConfig& cfg, const LoadedData& dataset, bool natural,
                                  const std::string& given_path) {
  if (!given_path.empty() && fs::exists(given_path)) return given_path;
  fs::path dir = fs::path(cfg.output_dir) / "teachers";
  fs::create_directories(dir);
  fs::path out = dir / (natural ? "natural.ckpt" : "adversarial.ckpt");
  if (fs::exists(out)) return out.string();

  RunConfig rc = cfg;
  rc.defense = distill::DefenseConfig{};
  rc.defense.method = natural ? Method::NAT : Method::TRADES;
  Shape input = dataset.train.example_shape();
  nn::ModelSpec spec = nn::parse_model_spec(cfg.teacher_spec, input, dataset.train.num_classes);
  train::TrainRunConfig tcfg = to_train_config(rc);
  if (natural) {
    // Natural training follows its own published recipe: a 100-epoch budget
    // decayed at 75/90, keeping the final model.
    tcfg.schedule.total_epochs = 100;
    tcfg.schedule.decay_epochs = {75, 90};
  }
  train::TrainResult result = train::run_training(tcfg, spec, nullptr, dataset.train, {});
  nn::Checkpoint chosen = natural ? result.last : result.best;
  chosen.params.role = nn::Role::teacher;
  nn::save_checkpoint(chosen, out.string());
  return out.string();
}

inline int cmd_compare_soft_labels(const RunConfig& cfg) {
  fs::create_directories(cfg.output_dir);
  write_text(fs::path(cfg.output_dir) / "config.resolved", cfg.emit_resolved());
  LoadedData dataset = load_dataset(cfg);
  Shape input = dataset.train.example_shape();
  nn::ModelSpec student_spec =
      nn::parse_model_spec(cfg.student_spec, input, dataset.train.num_classes);

  std::string adv_path = ensure_teacher(cfg, dataset, false, cfg.teacher_checkpoint);
  std::string nat_path = ensure_teacher(cfg, dataset, true, cfg.teacher_natural_checkpoint);
  nn::ParameterSet<float> adv_teacher = load_teacher(adv_path);
  nn::ParameterSet<float> nat_teacher = load_teacher(nat_path);

  std::vector<TableRow> rows;
  for (distill::SoftLabelKind kind : {distill::SoftLabelKind::SSL, distill::SoftLabelKind::NSL,
                                      distill::SoftLabelKind::RSL}) {
    RunConfig rc = cfg;
    rc.defense.method = Method::RSLAD;
    // NSL is mechanically an RSLAD run whose targets come from the natural
    // teacher, so its config differs from RSL only in the checkpoint path.
    rc.defense.soft_label = kind == distill::SoftLabelKind::SSL ? distill::SoftLabelKind::SSL
                                                                : distill::SoftLabelKind::RSL;
    rc.teacher_checkpoint = kind == distill::SoftLabelKind::NSL ? nat_path : adv_path;
    const nn::ParameterSet<float>* teacher =
        kind == distill::SoftLabelKind::SSL
            ? nullptr
            : (kind == distill::SoftLabelKind::NSL ? &nat_teacher : &adv_teacher);
    std::string name = distill::soft_label_name(kind);
    RunArtifacts art = run_and_report(rc, to_train_config(rc), student_spec, teacher, dataset,
                                      fs::path(cfg.output_dir) / sanitize(name), name);
    rows.push_back(TableRow{name, art.best_report, 0});
  }
  double rsl = report_metric(rows[2].report, "PGD_TRADES");
  double nsl = report_metric(rows[1].report, "PGD_TRADES");
  std::string extra = cat("\"rsl_minus_nsl_robust\":", eval::fmt_double(rsl - nsl));
  write_table(cfg.output_dir, "soft_labels", rows, extra);
  std::cout << "[compare-soft-labels] RSL - NSL robust accuracy: " << (rsl - nsl) << "\n";
  return 0;
}

inline int cmd_teacher_sweep(const RunConfig& cfg) {
  fs::create_directories(cfg.output_dir);
  write_text(fs::path(cfg.output_dir) / "config.resolved", cfg.emit_resolved());
  if (cfg.teacher_list.size() < 2)
    throw ConfigError(cat("teacher-sweep needs >= 2 teachers in [teacher] list, got ",
                          cfg.teacher_list.size()));
  LoadedData dataset = load_dataset(cfg);
  Shape input = dataset.train.example_shape();
  nn::ModelSpec student_spec =
      nn::parse_model_spec(cfg.student_spec, input, dataset.train.num_classes);

  std::vector<std::pair<size_t, std::string>> teachers;  // (param count, path)
  for (const std::string& path : cfg.teacher_list) {
    nn::ParameterSet<float> t = load_teacher(path);
    teachers.emplace_back(t.parameter_count(), path);
  }
  std::sort(teachers.begin(), teachers.end());

  std::vector<TableRow> rows;
  for (const auto& [count, path] : teachers) {
    nn::ParameterSet<float> teacher = load_teacher(path);
    RunConfig rc = cfg;
    rc.defense.method = Method::RSLAD;
    rc.teacher_checkpoint = path;
    std::string name = fs::path(path).stem().string();
    RunArtifacts art =
        run_and_report(rc, to_train_config(rc), student_spec, &teacher, dataset,
                       fs::path(cfg.output_dir) / sanitize(cat(name, "_", count)), name);
    TableRow row{name, art.best_report, count};
    rows.push_back(row);
  }
  write_table(cfg.output_dir, "teacher_sweep", rows);
  return 0;
}

}  // namespace robustdistill::cli

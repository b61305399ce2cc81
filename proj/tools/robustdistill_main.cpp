// robustdistill command line: adversarial training, distillation and
// robustness evaluation over the library's config files.

#include <CLI11.hpp>

#include <iostream>
#include <string>

#include "robustdistill/cli.hpp"

namespace rd = robustdistill;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::string checkpoint;
  std::string surrogate;
  std::string attack = "pgd_sat";
  long long seed = -1;
  bool deterministic = false;
};

rd::config::RunConfig resolve(const CommonArgs& args) {
  rd::config::RunConfig cfg = rd::config::parse_config(args.config_path);
  if (args.seed >= 0) cfg.seed = static_cast<uint64_t>(args.seed);
  if (!args.out_dir.empty()) cfg.output_dir = args.out_dir;
  if (args.deterministic) cfg.deterministic = true;
  return cfg;
}

void add_common(CLI::App* cmd, CommonArgs& args, bool needs_checkpoint = false) {
  cmd->add_option("--config", args.config_path, "run configuration file")->required();
  cmd->add_option("--seed", args.seed, "override the config seed");
  cmd->add_option("--out", args.out_dir, "override the output directory");
  cmd->add_flag("--deterministic", args.deterministic,
                "zero wall-clock fields for byte-stable outputs");
  if (needs_checkpoint)
    cmd->add_option("--checkpoint", args.checkpoint, "checkpoint to load")->required();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adversarial training and robust distillation toolkit"};
  app.require_subcommand(1);

  CommonArgs args;
  CLI::App* train = app.add_subcommand("train", "train one defense configuration");
  add_common(train, args);
  CLI::App* eval = app.add_subcommand("eval", "white-box (and optional transfer) evaluation");
  add_common(eval, args, true);
  eval->add_option("--surrogate", args.surrogate, "surrogate checkpoint for transfer rows");
  CLI::App* attack = app.add_subcommand("attack", "export adversarial examples as idx files");
  add_common(attack, args, true);
  attack->add_option("--attack", args.attack, "fgsm | pgd_sat | pgd_trades | cw");
  CLI::App* ablate = app.add_subcommand("ablate", "inner/outer loss ablation grid");
  add_common(ablate, args);
  CLI::App* compare = app.add_subcommand("compare-soft-labels",
                                         "SSL vs NSL vs RSL distillation comparison");
  add_common(compare, args);
  CLI::App* sweep = app.add_subcommand("teacher-sweep", "distill from each teacher in a list");
  add_common(sweep, args);

  CLI11_PARSE(app, argc, argv);

  try {
    rd::config::RunConfig cfg = resolve(args);
    if (train->parsed()) return rd::cli::cmd_train(cfg);
    if (eval->parsed()) return rd::cli::cmd_eval(cfg, args.checkpoint, args.surrogate);
    if (attack->parsed()) return rd::cli::cmd_attack(cfg, args.checkpoint, args.attack);
    if (ablate->parsed()) return rd::cli::cmd_ablate(cfg);
    if (compare->parsed()) return rd::cli::cmd_compare_soft_labels(cfg);
    if (sweep->parsed()) return rd::cli::cmd_teacher_sweep(cfg);
  } catch (const rd::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

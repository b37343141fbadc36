// oodadv: generate → train → fit → attack-eval → report.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "oodadv/config.hpp"
#include "oodadv/error.hpp"
#include "oodadv/pipeline.hpp"

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> methods;
  std::optional<std::string> norm;
  std::optional<double> epsilon;
  std::optional<std::size_t> steps;
  std::optional<double> budget;
  bool low_res = false;
  bool no_clamp = false;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "config file (defaults apply without one)");
  cmd->add_option("--seed", f.seed, "global seed");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--method", f.methods, "comma-separated methods: md,rmd,msp,clip,ensemble-md,ensemble-rmd");
  cmd->add_option("--norm", f.norm, "l2 or linf");
  cmd->add_option("--epsilon", f.epsilon, "attack step size");
  cmd->add_option("--steps", f.steps, "attack steps");
  cmd->add_option("--budget", f.budget, "budget for the delta report");
  cmd->add_flag("--low-res", f.low_res, "attack the low-resolution image through the resize");
  cmd->add_flag("--no-clamp", f.no_clamp, "do not clamp attacked pixels to [0,1]");
  cmd->add_option("--set", f.sets, "override any key: section.key=value (repeatable)");
}

oodadv::ExperimentConfig resolve(const Flags& f) {
  using namespace oodadv;
  ExperimentConfig cfg = f.config.empty() ? ExperimentConfig{} : load_config(f.config);
  for (const auto& s : f.sets) apply_override(cfg, s);
  if (f.seed) cfg.seed = *f.seed;
  if (f.out) cfg.out_dir = *f.out;
  if (f.methods) apply_override(cfg, "detect.methods=" + *f.methods);
  if (f.norm) apply_override(cfg, "eval.norm=" + *f.norm);
  if (f.epsilon) cfg.attack.attack.epsilon = *f.epsilon;
  if (f.steps) cfg.attack.attack.steps = *f.steps;
  if (f.budget) cfg.eval.report_budget = *f.budget;
  if (f.low_res) cfg.attack.attack.low_res = true;
  if (f.no_clamp) cfg.attack.attack.clamp_pixels = false;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial robustness of OOD detection scores"};
  app.require_subcommand(1);
  Flags flags;
  std::string stage;

  struct Command {
    const char* name;
    const char* help;
    void (*run)(const oodadv::ExperimentConfig&);
  };
  const Command commands[] = {
      {"generate", "write in/out datasets and a manifest", oodadv::cmd_generate},
      {"train", "train the classifier(s)", oodadv::cmd_train},
      {"fit", "fit Gaussian detectors on training embeddings", oodadv::cmd_fit},
      {"attack-eval", "attack every method and write curves and reports", oodadv::cmd_attack_eval},
      {"report", "print the delta-AUROC table",
       [](const oodadv::ExperimentConfig& c) { std::cout << oodadv::cmd_report(c); }},
      {"run", "all of the above in order", oodadv::cmd_run},
  };
  const Command* chosen = nullptr;
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    add_common(sub, flags);
    sub->callback([&chosen, &c] { chosen = &c; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    stage = "config";
    const auto cfg = resolve(flags);
    stage = chosen->name;
    chosen->run(cfg);
  } catch (const oodadv::Error& e) {
    std::cerr << "oodadv " << stage << ": " << e.what() << '\n';
    return oodadv::exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "oodadv " << stage << ": " << e.what() << '\n';
    return 1;
  }
  return 0;
}

#pragma once

// Subcommand implementations. Every command validates the config, archives
// the resolved config as <out>/config.resolved.ini, and reads or writes:
//
//   <out>/data/in_train.oodi, in_test.oodi, ood_<set>_fit.oodi, ood_<set>_test.oodi, manifest.ini
//   <out>/models/model_<i>.oodm, train_log_<i>.csv
//   <out>/detectors/detector_<i>.oodd
//   <out>/eval/<set>/trajectories_<method>.csv, curve_<method>.csv, curve_<method>.json,
//                    curves.svg, reports.json
//   <out>/report.md
//
// <set> is near or far for synthetic data and "ood" for file inputs.

#include <filesystem>
#include <string>
#include <vector>

#include "oodadv/config.hpp"
#include "oodadv/detectors.hpp"
#include "oodadv/error.hpp"

namespace oodadv {

struct MethodSpec {
  std::string name;  // as written in the config
  ScoreMethod base = ScoreMethod::kMd;
  bool ensemble = false;
  std::size_t member = 0;  // for single-model methods
};

// md, rmd, msp, clip, ensemble-md, ensemble-rmd; "ensemble" means
// ensemble-md; a suffix @i selects model i for single-model methods.
MethodSpec parse_method(const std::string& name);

std::vector<std::string> ood_set_names(const ExperimentConfig& cfg);

void cmd_generate(const ExperimentConfig& cfg);
void cmd_train(const ExperimentConfig& cfg);
void cmd_fit(const ExperimentConfig& cfg);
void cmd_attack_eval(const ExperimentConfig& cfg);
// Returns the markdown table it writes to report.md.
std::string cmd_report(const ExperimentConfig& cfg);

// generate → train → fit → attack-eval → report.
void cmd_run(const ExperimentConfig& cfg);

// 0 success, 1 file problems, 2 configuration, 3 numerical failure.
int exit_code_for(ErrorCode code);

}  // namespace oodadv

#include "oodadv/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <memory>
#include <sstream>

#include "binary_io.hpp"
#include "oodadv/error.hpp"
#include "rng.hpp"

namespace oodadv {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kModelSeedStream = 1000;

fs::path data_dir(const ExperimentConfig& cfg) { return cfg.out() / "data"; }
fs::path model_path(const ExperimentConfig& cfg, std::size_t i) {
  return cfg.out() / "models" / ("model_" + std::to_string(i) + ".oodm");
}
fs::path detector_path(const ExperimentConfig& cfg, std::size_t i) {
  return cfg.out() / "detectors" / ("detector_" + std::to_string(i) + ".oodd");
}
fs::path eval_dir(const ExperimentConfig& cfg, const std::string& set) { return cfg.out() / "eval" / set; }

void archive_config(const ExperimentConfig& cfg) {
  cfg.validate();
  binary::write_file(cfg.out() / "config.resolved.ini", emit_config(cfg));
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Fixed-precision text for human-facing tables.
std::string fixed(double v, int digits) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string short_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string file_digest(const fs::path& path) {
  const auto bytes = binary::read_file(path);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(
                    fnv1a(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()))));
  return buf;
}

LabeledDataset at_model_resolution(const ExperimentConfig& cfg, LabeledDataset data) {
  const ImageShape m = cfg.model_shape();
  if (data.empty() || data.images.front().shape() == m) return data;
  return resize_dataset(data, m.height, m.width);
}

std::vector<std::shared_ptr<const EmbeddingModel>> load_models(const ExperimentConfig& cfg) {
  std::vector<std::shared_ptr<const EmbeddingModel>> models;
  for (std::size_t i = 0; i < cfg.model.members; ++i) {
    models.push_back(std::make_shared<const EmbeddingModel>(load_model(model_path(cfg, i))));
  }
  return models;
}

void require_images(const ExperimentConfig& cfg, const char* command) {
  if (cfg.data.source == DataSource::kEmbeddings) {
    throw Error(ErrorCode::kConfigError, std::string(command) + " needs image data; the embeddings source only "
                                                                "supports fit and attack-eval");
  }
}

// --- embeddings source: detectors evaluated on precomputed features --------

void evaluate_embeddings(const ExperimentConfig& cfg) {
  const EmbeddingDataset train = load_embeddings(cfg.data.in_train_path);
  const EmbeddingDataset in = load_embeddings(cfg.data.in_test_path);
  const EmbeddingDataset out = load_embeddings(cfg.data.ood_test_path);
  const GaussianDetector det = fs::exists(detector_path(cfg, 0)) ? load_detector(detector_path(cfg, 0))
                                                                  : fit_gaussians(train);
  std::vector<DeltaReport> reports;
  const fs::path dir = eval_dir(cfg, "ood");
  for (const auto& name : cfg.methods) {
    const MethodSpec m = parse_method(name);
    if (m.ensemble || (m.base != ScoreMethod::kMd && m.base != ScoreMethod::kRmd)) {
      throw Error(ErrorCode::kConfigError, "embeddings source supports only md and rmd, not " + name);
    }
    auto score = [&](const Vector& z) { return m.base == ScoreMethod::kMd ? md_score(det, z).value
                                                                          : rmd_score(det, z).value; };
    std::vector<double> s_in, s_out;
    for (const auto& z : in.embeddings) s_in.push_back(score(z));
    for (const auto& z : out.embeddings) s_out.push_back(score(z));
    RobustnessCurve curve;
    curve.norm = cfg.eval.norm;
    curve.budgets = {0.0};
    curve.baseline = auroc(s_in, s_out);
    curve.auroc = {curve.baseline};
    curve.n_in = s_in.size();
    curve.n_out = s_out.size();
    write_curve_csv(dir / ("curve_" + name + ".csv"), curve);
    binary::write_file(dir / ("curve_" + name + ".json"), curve_sidecar_json(curve, name, "ood", config_hash(cfg)));
    reports.push_back(delta_report(curve, 0.0, name));
  }
  write_reports_json(dir / "reports.json", reports);
}

// --- attack-eval on images -------------------------------------------------

struct MethodRun {
  std::string name;
  std::vector<AttackTrajectory> trajectories;
  std::vector<double> in_scores;
};

ScorerPtr make_scorer(const MethodSpec& m, const std::vector<std::shared_ptr<const EmbeddingModel>>& models,
                      const std::vector<std::shared_ptr<const GaussianDetector>>& detectors,
                      const std::vector<std::shared_ptr<const WordBank>>& banks) {
  auto single = [&](std::size_t i) -> ScorerPtr {
    switch (m.base) {
      case ScoreMethod::kMd:
      case ScoreMethod::kRmd: return std::make_shared<GaussianScorer>(models[i], detectors[i], m.base);
      case ScoreMethod::kMsp: return std::make_shared<MspScorer>(models[i]);
      case ScoreMethod::kClip: return std::make_shared<ClipScorer>(models[i], banks[i]);
      case ScoreMethod::kEnsemble: break;
    }
    throw Error(ErrorCode::kConfigError, "method " + m.name + " has no single-model scorer");
  };
  if (!m.ensemble) {
    if (m.member >= models.size()) {
      throw Error(ErrorCode::kConfigError, m.name + " refers to a model index beyond model.members");
    }
    return single(m.member);
  }
  std::vector<ScorerPtr> members;
  for (std::size_t i = 0; i < models.size(); ++i) members.push_back(single(i));
  return std::make_shared<DetectorEnsemble>(std::move(members));
}

void evaluate_set(const ExperimentConfig& cfg, const std::string& set,
                  const std::vector<std::shared_ptr<const EmbeddingModel>>& models,
                  const std::vector<std::shared_ptr<const GaussianDetector>>& detectors,
                  const LabeledDataset& in_train, const LabeledDataset& in_test) {
  const LabeledDataset ood_test = load_image_dataset(data_dir(cfg) / ("ood_" + set + "_test.oodi"));
  const fs::path fit_path = data_dir(cfg) / ("ood_" + set + "_fit.oodi");

  std::vector<MethodSpec> specs;
  for (const auto& name : cfg.methods) specs.push_back(parse_method(name));

  std::vector<std::shared_ptr<const WordBank>> banks;
  const bool needs_bank = std::any_of(specs.begin(), specs.end(), [](const MethodSpec& m) {
    return m.base == ScoreMethod::kClip;
  });
  if (needs_bank) {
    if (!fs::exists(fit_path)) throw Error(ErrorCode::kConfigError, "clip needs an OOD fit split for out-words");
    const LabeledDataset ood_fit = at_model_resolution(cfg, load_image_dataset(fit_path));
    if (ood_fit.empty()) throw Error(ErrorCode::kConfigError, "clip needs a non-empty OOD fit split");
    for (const auto& model : models)
      banks.push_back(std::make_shared<const WordBank>(build_word_bank(*model, in_train, ood_fit)));
  }

  const std::size_t n_attack = std::min(cfg.attack.num_images, ood_test.size());
  if (n_attack == 0) throw Error(ErrorCode::kEmptyInput, "OOD test split for " + set + " is empty");
  std::vector<Image> attacked(ood_test.images.begin(), ood_test.images.begin() + n_attack);
  if (!cfg.attack.attack.low_res) {
    const ImageShape ms = cfg.model_shape();
    if (attacked.front().shape() != ms)
      for (auto& img : attacked) img = resize_bilinear(img, ms.height, ms.width);
  }

  std::vector<MethodRun> runs;
  for (const auto& m : specs) {
    const ScorerPtr scorer = make_scorer(m, models, detectors, banks);
    MethodRun run;
    run.name = m.name;
    for (const auto& img : in_test.images) run.in_scores.push_back(scorer->score(img));
    run.trajectories = attack_batch(*scorer, attacked, cfg.attack.attack, cfg.attack.threads);
    runs.push_back(std::move(run));
  }

  // One budget grid for every method so curves are directly comparable.
  double top = cfg.eval.max_budget;
  if (top == 0.0)
    for (const auto& run : runs) top = std::max(top, reachable_budget(run.trajectories, cfg.eval.norm));
  std::vector<double> budgets = budget_grid(top, cfg.eval.grid_points);
  const double report_budget = std::min(cfg.eval.report_budget, budgets.back());
  if (report_budget > 0.0 && std::find(budgets.begin(), budgets.end(), report_budget) == budgets.end()) {
    budgets.insert(std::upper_bound(budgets.begin(), budgets.end(), report_budget), report_budget);
  }

  const fs::path dir = eval_dir(cfg, set);
  const std::string hash = config_hash(cfg);
  std::vector<DeltaReport> reports;
  std::vector<std::pair<std::string, RobustnessCurve>> curves;
  for (const auto& run : runs) {
    write_trajectory_csv(dir / ("trajectories_" + run.name + ".csv"), run.trajectories);
    const RobustnessCurve curve = robustness_curve(run.in_scores, run.trajectories, cfg.eval.norm, budgets);
    write_curve_csv(dir / ("curve_" + run.name + ".csv"), curve);
    binary::write_file(dir / ("curve_" + run.name + ".json"), curve_sidecar_json(curve, run.name, set, hash));
    reports.push_back(delta_report(curve, report_budget, run.name));
    curves.emplace_back(run.name, curve);
  }
  write_reports_json(dir / "reports.json", reports);
  binary::write_file(dir / "curves.svg", render_svg(curves, "AUROC vs perturbation, OOD set " + set));
}

}  // namespace

MethodSpec parse_method(const std::string& name) {
  MethodSpec m;
  m.name = name;
  std::string base = name;
  if (const auto at = name.find('@'); at != std::string::npos) {
    base = name.substr(0, at);
    const std::string idx = name.substr(at + 1);
    if (idx.empty() || idx.find_first_not_of("0123456789") != std::string::npos) {
      throw Error(ErrorCode::kConfigError, "bad model index in method " + name);
    }
    m.member = std::stoul(idx);
  }
  if (base == "ensemble" || base == "ensemble-md") {
    m.base = ScoreMethod::kMd;
    m.ensemble = true;
  } else if (base == "ensemble-rmd") {
    m.base = ScoreMethod::kRmd;
    m.ensemble = true;
  } else if (base == "md") {
    m.base = ScoreMethod::kMd;
  } else if (base == "rmd") {
    m.base = ScoreMethod::kRmd;
  } else if (base == "msp") {
    m.base = ScoreMethod::kMsp;
  } else if (base == "clip") {
    m.base = ScoreMethod::kClip;
  } else {
    throw Error(ErrorCode::kConfigError, "unknown method " + name);
  }
  if (m.ensemble && base.size() != name.size()) throw Error(ErrorCode::kConfigError, "ensembles take no @index");
  return m;
}

std::vector<std::string> ood_set_names(const ExperimentConfig& cfg) {
  if (cfg.data.source != DataSource::kSynthetic) return {"ood"};
  std::vector<std::string> names;
  for (OodMode mode : cfg.data.ood_modes()) names.emplace_back(to_string(mode));
  return names;
}

void cmd_generate(const ExperimentConfig& cfg) {
  archive_config(cfg);
  require_images(cfg, "generate");
  const fs::path dir = data_dir(cfg);
  std::vector<std::string> written;
  auto save = [&](const std::string& name, const LabeledDataset& data) {
    save_image_dataset(dir / name, data);
    written.push_back(name);
  };

  if (cfg.data.source == DataSource::kSynthetic) {
    const std::size_t in_total = cfg.data.train_per_class + cfg.data.test_per_class;
    const std::size_t ood_total = cfg.data.ood_fit_per_class + cfg.data.test_per_class;
    SyntheticSpec spec = cfg.data.synthetic;
    spec.seed = cfg.seed;
    bool in_written = false;
    for (OodMode mode : cfg.data.ood_modes()) {
      spec.ood_mode = mode;
      auto [in, out] = generate_synthetic(spec, std::max(in_total, ood_total));
      if (!in_written) {
        auto [in_used, unused] = split_per_class(in, in_total);
        auto [train, test] = split_per_class(in_used, cfg.data.train_per_class);
        save("in_train.oodi", train);
        save("in_test.oodi", test);
        in_written = true;
      }
      auto [out_used, unused] = split_per_class(out, ood_total);
      auto [fit, test] = split_per_class(out_used, cfg.data.ood_fit_per_class);
      const std::string set(to_string(mode));
      save("ood_" + set + "_fit.oodi", fit);
      save("ood_" + set + "_test.oodi", test);
    }
  } else {
    save("in_train.oodi", load_cifar_binary(cfg.data.in_train_path));
    save("in_test.oodi", load_cifar_binary(cfg.data.in_test_path));
    if (!cfg.data.ood_fit_path.empty()) save("ood_ood_fit.oodi", load_cifar_binary(cfg.data.ood_fit_path));
    save("ood_ood_test.oodi", load_cifar_binary(cfg.data.ood_test_path));
  }

  // The manifest uses the config grammar: the data-defining keys plus one
  // entry per file with its FNV-1a digest.
  const IniDocument full = to_document(cfg);
  IniDocument manifest;
  manifest.set("run", "seed", *full.find("run", "seed"));
  manifest.set("run", "config_hash", config_hash(cfg));
  for (const auto& [section, entries] : full.sections()) {
    if (section != "data") continue;
    for (const auto& [k, v] : entries) manifest.set("data", k, v);
  }
  for (const auto& name : written) manifest.set("files", name, file_digest(dir / name));
  binary::write_file(dir / "manifest.ini", manifest.emit());
}

void cmd_train(const ExperimentConfig& cfg) {
  archive_config(cfg);
  require_images(cfg, "train");
  const LabeledDataset train_set = at_model_resolution(cfg, load_image_dataset(data_dir(cfg) / "in_train.oodi"));
  const LabeledDataset test_set = at_model_resolution(cfg, load_image_dataset(data_dir(cfg) / "in_test.oodi"));
  for (std::size_t i = 0; i < cfg.model.members; ++i) {
    TrainConfig tc = cfg.model.train;
    tc.seed = derive_seed(cfg.seed, kModelSeedStream + i);
    const TrainResult res = train(train_set, tc);
    save_model(model_path(cfg, i), res.model);
    std::ostringstream log;
    log << "epoch,loss,accuracy\n";
    for (const auto& e : res.log) log << e.epoch << ',' << fmt(e.loss) << ',' << fmt(e.accuracy) << '\n';
    binary::write_file(cfg.out() / "models" / ("train_log_" + std::to_string(i) + ".csv"), log.str());
    std::cerr << "model " << i << ": train accuracy " << fixed(res.final_accuracy, 4) << ", test accuracy "
              << fixed(accuracy(res.model, test_set), 4) << '\n';
  }
}

void cmd_fit(const ExperimentConfig& cfg) {
  archive_config(cfg);
  if (cfg.data.source == DataSource::kEmbeddings) {
    save_detector(detector_path(cfg, 0), fit_gaussians(load_embeddings(cfg.data.in_train_path)));
    return;
  }
  const LabeledDataset train_set = at_model_resolution(cfg, load_image_dataset(data_dir(cfg) / "in_train.oodi"));
  for (std::size_t i = 0; i < cfg.model.members; ++i) {
    save_detector(detector_path(cfg, i), fit_detector(load_model(model_path(cfg, i)), train_set));
  }
}

void cmd_attack_eval(const ExperimentConfig& cfg) {
  archive_config(cfg);
  if (cfg.data.source == DataSource::kEmbeddings) {
    evaluate_embeddings(cfg);
    return;
  }
  const auto models = load_models(cfg);
  const LabeledDataset in_train = at_model_resolution(cfg, load_image_dataset(data_dir(cfg) / "in_train.oodi"));
  const LabeledDataset in_test = at_model_resolution(cfg, load_image_dataset(data_dir(cfg) / "in_test.oodi"));

  std::vector<std::shared_ptr<const GaussianDetector>> detectors;
  for (std::size_t i = 0; i < models.size(); ++i) {
    const fs::path p = detector_path(cfg, i);
    detectors.push_back(std::make_shared<const GaussianDetector>(fs::exists(p) ? load_detector(p)
                                                                               : fit_detector(*models[i], in_train)));
  }
  for (const auto& set : ood_set_names(cfg)) evaluate_set(cfg, set, models, detectors, in_train, in_test);
}

std::string cmd_report(const ExperimentConfig& cfg) {
  archive_config(cfg);
  std::ostringstream md;
  md << "| OOD set | method | AUROC before | AUROC at budget | delta | norm | budget |\n";
  md << "|---|---|---|---|---|---|---|\n";
  for (const auto& set : ood_set_names(cfg)) {
    for (const auto& r : read_reports_json(eval_dir(cfg, set) / "reports.json")) {
      md << "| " << set << " | " << r.method << " | " << fixed(r.auroc_before, 4) << " | "
         << fixed(r.auroc_at_budget, 4) << " | " << fixed(r.delta, 4) << " | " << to_string(r.norm) << " | "
         << short_number(r.budget) << " |\n";
    }
  }
  binary::write_file(cfg.out() / "report.md", md.str());
  return md.str();
}

void cmd_run(const ExperimentConfig& cfg) {
  if (cfg.data.source == DataSource::kEmbeddings) {
    cmd_fit(cfg);
  } else {
    cmd_generate(cfg);
    cmd_train(cfg);
    cmd_fit(cfg);
  }
  cmd_attack_eval(cfg);
  cmd_report(cfg);
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kConfigError:
    case ErrorCode::kInvalidArgument: return 2;
    case ErrorCode::kMalformedFile:
    case ErrorCode::kIoError:
    case ErrorCode::kBadMagic:
    case ErrorCode::kTruncatedFile: return 1;
    default: return 3;
  }
}

}  // namespace oodadv

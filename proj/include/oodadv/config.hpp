#pragma once

// Experiment configuration file.
//
//   # comment
//   [section]
//   key = value
//
// Keys are unique within a section; unknown sections or keys are errors.
// emit() writes every key in a fixed order, so parse(emit(c)) == c and the
// emitted text is the canonical form that gets hashed and archived.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "oodadv/attacks.hpp"
#include "oodadv/data.hpp"
#include "oodadv/evaluation.hpp"
#include "oodadv/model.hpp"

namespace oodadv {

// Ordered sections of ordered key/value pairs.
class IniDocument {
 public:
  static IniDocument parse(std::string_view text);
  std::string emit() const;

  void set(const std::string& section, const std::string& key, std::string value);
  const std::string* find(const std::string& section, const std::string& key) const;

  using Section = std::vector<std::pair<std::string, std::string>>;
  const std::vector<std::pair<std::string, Section>>& sections() const noexcept { return sections_; }

 private:
  std::vector<std::pair<std::string, Section>> sections_;
};

enum class DataSource { kSynthetic, kCifar, kEmbeddings };

std::string_view to_string(DataSource source);
DataSource parse_data_source(std::string_view text);

struct DataConfig {
  DataSource source = DataSource::kSynthetic;
  SyntheticSpec synthetic;
  // near, far or both
  std::string ood = "near";
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 26;
  // OOD images per class used for the CLIP word bank; the rest are attacked.
  std::size_t ood_fit_per_class = 10;
  // File inputs for the cifar and embeddings sources.
  std::string in_train_path;
  std::string in_test_path;
  std::string ood_fit_path;
  std::string ood_test_path;

  std::vector<OodMode> ood_modes() const;
};

struct ModelConfig {
  TrainConfig train;
  // Independently trained models; ensembles use all of them.
  std::size_t members = 2;
  // Model input resolution. Zero means the data resolution. When it differs,
  // training images are resized to it.
  std::size_t input_height = 0;
  std::size_t input_width = 0;
};

struct AttackSection {
  AttackConfig attack;
  std::size_t num_images = 128;
  std::size_t threads = 1;
};

struct EvalConfig {
  NormKind norm = NormKind::kLinf;
  std::size_t grid_points = 11;
  // Largest budget on the curve; zero means the largest norm reached.
  double max_budget = 0.0;
  // Budget for the ΔAUROC report.
  double report_budget = 1.0 / 255.0;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";
  DataConfig data;
  ModelConfig model;
  std::vector<std::string> methods{"md", "rmd", "msp", "clip", "ensemble-md", "ensemble-rmd"};
  AttackSection attack;
  EvalConfig eval;

  // Throws ConfigError on any inconsistency; checks input paths exist.
  void validate() const;

  std::filesystem::path out() const { return out_dir; }
  // Resolution of the stored images (32×32×3 for CIFAR).
  ImageShape data_shape() const;
  ImageShape model_shape() const;
};

IniDocument to_document(const ExperimentConfig& cfg);
ExperimentConfig from_document(const IniDocument& doc);

ExperimentConfig parse_config(std::string_view text);
std::string emit_config(const ExperimentConfig& cfg);
ExperimentConfig load_config(const std::filesystem::path& path);

// Applies "section.key=value"; the key must exist.
void apply_override(ExperimentConfig& cfg, std::string_view assignment);

// FNV-1a 64 over the canonical text without the output directory, as 16 hex
// digits. Two runs that differ only in where they write share a hash.
std::string config_hash(const ExperimentConfig& cfg);

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b);

}  // namespace oodadv

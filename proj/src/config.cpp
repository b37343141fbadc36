#include "oodadv/config.hpp"

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>
#include <sstream>

#include "binary_io.hpp"
#include "oodadv/error.hpp"

namespace oodadv {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

[[noreturn]] void config_error(const std::string& what) { throw Error(ErrorCode::kConfigError, what); }

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& key, const std::string& text) {
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (text.empty() || end != text.c_str() + text.size() || errno == ERANGE || !std::isfinite(v)) {
    config_error(key + ": expected a number, got '" + text + "'");
  }
  return v;
}

std::uint64_t parse_uint(const std::string& key, const std::string& text) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || ec != std::errc() || ptr != text.data() + text.size()) {
    config_error(key + ": expected a non-negative integer, got '" + text + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true") return true;
  if (text == "false") return false;
  config_error(key + ": expected true or false, got '" + text + "'");
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string_view rest = text;
  while (!rest.empty()) {
    const auto comma = rest.find(',');
    const auto item = trim(rest.substr(0, comma));
    if (!item.empty()) out.emplace_back(item);
    if (comma == std::string_view::npos) break;
    rest.remove_prefix(comma + 1);
  }
  return out;
}

template <typename T>
std::string join(const std::vector<T>& items) {
  std::ostringstream out;
  for (std::size_t i = 0; i < items.size(); ++i) out << (i ? "," : "") << items[i];
  return out.str();
}

// Enum parsers throw their own codes; configuration problems are always
// reported as ConfigError with the offending key.
template <typename F>
auto parse_enum(const std::string& key, const std::string& text, F parse) {
  try {
    return parse(text);
  } catch (const Error&) {
    config_error(key + ": unknown value '" + text + "'");
  }
}

struct Field {
  const char* section;
  const char* key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

#define OODADV_UINT(SEC, KEY, MEMBER)                                                     \
  Field {                                                                                 \
    SEC, KEY, [](const ExperimentConfig& c) { return std::to_string(c.MEMBER); },         \
        [](ExperimentConfig& c, const std::string& v) {                                   \
          c.MEMBER = static_cast<decltype(c.MEMBER)>(parse_uint(SEC "." KEY, v));         \
        }                                                                                 \
  }
#define OODADV_DOUBLE(SEC, KEY, MEMBER)                                                                  \
  Field {                                                                                                \
    SEC, KEY, [](const ExperimentConfig& c) { return format_double(c.MEMBER); },                         \
        [](ExperimentConfig& c, const std::string& v) { c.MEMBER = parse_double(SEC "." KEY, v); }       \
  }
#define OODADV_STRING(SEC, KEY, MEMBER)                                                         \
  Field {                                                                                       \
    SEC, KEY, [](const ExperimentConfig& c) { return c.MEMBER; },                               \
        [](ExperimentConfig& c, const std::string& v) { c.MEMBER = v; }                         \
  }
#define OODADV_BOOL(SEC, KEY, MEMBER)                                                                        \
  Field {                                                                                                    \
    SEC, KEY, [](const ExperimentConfig& c) { return std::string(c.MEMBER ? "true" : "false"); },            \
        [](ExperimentConfig& c, const std::string& v) { c.MEMBER = parse_bool(SEC "." KEY, v); }             \
  }
#define OODADV_ENUM(SEC, KEY, MEMBER, PARSE)                                                             \
  Field {                                                                                                \
    SEC, KEY, [](const ExperimentConfig& c) { return std::string(to_string(c.MEMBER)); },                \
        [](ExperimentConfig& c, const std::string& v) {                                                  \
          c.MEMBER = parse_enum(SEC "." KEY, v, [](const std::string& t) { return PARSE(t); });          \
        }                                                                                                \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      OODADV_UINT("run", "seed", seed),
      OODADV_STRING("run", "out", out_dir),

      OODADV_ENUM("data", "source", data.source, parse_data_source),
      OODADV_STRING("data", "ood", data.ood),
      OODADV_UINT("data", "num_classes", data.synthetic.num_classes),
      OODADV_UINT("data", "height", data.synthetic.shape.height),
      OODADV_UINT("data", "width", data.synthetic.shape.width),
      OODADV_UINT("data", "channels", data.synthetic.shape.channels),
      OODADV_UINT("data", "latent_dim", data.synthetic.latent_dim),
      OODADV_DOUBLE("data", "separation", data.synthetic.separation),
      OODADV_DOUBLE("data", "contrast", data.synthetic.contrast),
      OODADV_DOUBLE("data", "pixel_noise", data.synthetic.pixel_noise),
      OODADV_UINT("data", "nuisance_dim", data.synthetic.nuisance_dim),
      OODADV_DOUBLE("data", "nuisance_gain", data.synthetic.nuisance_gain),
      OODADV_UINT("data", "train_per_class", data.train_per_class),
      OODADV_UINT("data", "test_per_class", data.test_per_class),
      OODADV_UINT("data", "ood_fit_per_class", data.ood_fit_per_class),
      OODADV_STRING("data", "in_train_path", data.in_train_path),
      OODADV_STRING("data", "in_test_path", data.in_test_path),
      OODADV_STRING("data", "ood_fit_path", data.ood_fit_path),
      OODADV_STRING("data", "ood_test_path", data.ood_test_path),

      OODADV_UINT("model", "members", model.members),
      Field{"model", "hidden_widths", [](const ExperimentConfig& c) { return join(c.model.train.hidden_widths); },
            [](ExperimentConfig& c, const std::string& v) {
              c.model.train.hidden_widths.clear();
              for (const auto& item : split_list(v))
                c.model.train.hidden_widths.push_back(parse_uint("model.hidden_widths", item));
            }},
      OODADV_UINT("model", "input_height", model.input_height),
      OODADV_UINT("model", "input_width", model.input_width),
      OODADV_UINT("model", "epochs", model.train.epochs),
      OODADV_UINT("model", "batch_size", model.train.batch_size),
      OODADV_DOUBLE("model", "learning_rate", model.train.learning_rate),
      OODADV_DOUBLE("model", "weight_decay", model.train.weight_decay),

      Field{"detect", "methods", [](const ExperimentConfig& c) { return join(c.methods); },
            [](ExperimentConfig& c, const std::string& v) { c.methods = split_list(v); }},

      OODADV_ENUM("attack", "method", attack.attack.method, parse_attack_method),
      OODADV_ENUM("attack", "direction", attack.attack.direction, parse_direction),
      OODADV_DOUBLE("attack", "epsilon", attack.attack.epsilon),
      OODADV_UINT("attack", "steps", attack.attack.steps),
      OODADV_BOOL("attack", "clamp", attack.attack.clamp_pixels),
      OODADV_BOOL("attack", "low_res", attack.attack.low_res),
      OODADV_UINT("attack", "num_images", attack.num_images),
      OODADV_UINT("attack", "threads", attack.threads),

      OODADV_ENUM("eval", "norm", eval.norm, parse_norm_kind),
      OODADV_UINT("eval", "grid_points", eval.grid_points),
      OODADV_DOUBLE("eval", "max_budget", eval.max_budget),
      OODADV_DOUBLE("eval", "report_budget", eval.report_budget),
  };
  return table;
}

#undef OODADV_UINT
#undef OODADV_DOUBLE
#undef OODADV_STRING
#undef OODADV_BOOL
#undef OODADV_ENUM

const Field* find_field(std::string_view section, std::string_view key) {
  for (const auto& f : fields())
    if (section == f.section && key == f.key) return &f;
  return nullptr;
}

const std::set<std::string> kMethods{"md", "rmd", "msp", "clip", "ensemble", "ensemble-md", "ensemble-rmd"};

}  // namespace

// ---------------------------------------------------------------------------

IniDocument IniDocument::parse(std::string_view text) {
  IniDocument doc;
  std::string section;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text.remove_prefix(nl == std::string_view::npos ? text.size() : nl + 1);
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(line_no);
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) config_error(where + ": malformed section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) config_error(where + ": expected key = value");
    if (section.empty()) config_error(where + ": key outside any section");
    const std::string key(trim(line.substr(0, eq)));
    if (key.empty()) config_error(where + ": empty key");
    if (doc.find(section, key)) config_error(where + ": duplicate key " + section + "." + key);
    doc.set(section, key, std::string(trim(line.substr(eq + 1))));
  }
  return doc;
}

std::string IniDocument::emit() const {
  std::ostringstream out;
  for (std::size_t s = 0; s < sections_.size(); ++s) {
    if (s) out << '\n';
    out << '[' << sections_[s].first << "]\n";
    for (const auto& [k, v] : sections_[s].second) out << k << " = " << v << '\n';
  }
  return out.str();
}

void IniDocument::set(const std::string& section, const std::string& key, std::string value) {
  auto sec = std::find_if(sections_.begin(), sections_.end(), [&](const auto& s) { return s.first == section; });
  if (sec == sections_.end()) {
    sections_.emplace_back(section, Section{});
    sec = std::prev(sections_.end());
  }
  for (auto& [k, v] : sec->second) {
    if (k == key) {
      v = std::move(value);
      return;
    }
  }
  sec->second.emplace_back(key, std::move(value));
}

const std::string* IniDocument::find(const std::string& section, const std::string& key) const {
  for (const auto& [name, entries] : sections_) {
    if (name != section) continue;
    for (const auto& [k, v] : entries)
      if (k == key) return &v;
  }
  return nullptr;
}

// ---------------------------------------------------------------------------

std::string_view to_string(DataSource source) {
  switch (source) {
    case DataSource::kSynthetic: return "synthetic";
    case DataSource::kCifar: return "cifar";
    case DataSource::kEmbeddings: return "embeddings";
  }
  return "?";
}

DataSource parse_data_source(std::string_view text) {
  if (text == "synthetic") return DataSource::kSynthetic;
  if (text == "cifar") return DataSource::kCifar;
  if (text == "embeddings") return DataSource::kEmbeddings;
  throw Error(ErrorCode::kConfigError, "unknown data source '" + std::string(text) + "'");
}

std::vector<OodMode> DataConfig::ood_modes() const {
  if (ood == "both") return {OodMode::kNear, OodMode::kFar};
  return {parse_ood_mode(ood)};
}

ImageShape ExperimentConfig::data_shape() const {
  return data.source == DataSource::kCifar ? ImageShape{32, 32, 3} : data.synthetic.shape;
}

ImageShape ExperimentConfig::model_shape() const {
  ImageShape s = data_shape();
  if (model.input_height) s.height = model.input_height;
  if (model.input_width) s.width = model.input_width;
  return s;
}

void ExperimentConfig::validate() const {
  if (methods.empty()) config_error("detect.methods is empty");
  for (const auto& m : methods) {
    // name or name@i, the latter picking one model
    const auto at = m.find('@');
    const std::string base = m.substr(0, at);
    if (!kMethods.count(base)) config_error("detect.methods: unknown method '" + m + "'");
    if (at == std::string::npos) continue;
    const std::string index = m.substr(at + 1);
    if (base.rfind("ensemble", 0) == 0 || index.empty() ||
        index.find_first_not_of("0123456789") != std::string::npos) {
      config_error("detect.methods: bad model index in '" + m + "'");
    }
    if (std::stoull(index) >= model.members) config_error("detect.methods: '" + m + "' exceeds model.members");
  }
  if (data.ood != "near" && data.ood != "far" && data.ood != "both") {
    config_error("data.ood must be near, far or both");
  }
  if (out_dir.empty()) config_error("run.out is empty");
  if (model.members < 1) config_error("model.members must be >= 1");
  if (model.train.hidden_widths.empty()) config_error("model.hidden_widths is empty");
  for (auto w : model.train.hidden_widths)
    if (w == 0) config_error("model.hidden_widths entries must be positive");
  if (model.train.batch_size == 0 || !(model.train.learning_rate > 0.0) || model.train.weight_decay < 0.0) {
    config_error("model.batch_size and model.learning_rate must be positive");
  }
  const bool uses_ensemble = std::any_of(methods.begin(), methods.end(),
                                         [](const std::string& m) { return m.rfind("ensemble", 0) == 0; });
  if (uses_ensemble && model.members < 2) config_error("ensemble methods need model.members >= 2");
  attack.attack.validate();
  if (attack.num_images < 1) config_error("attack.num_images must be >= 1");
  if (eval.grid_points < 2) config_error("eval.grid_points must be >= 2");
  if (eval.max_budget < 0.0 || !(eval.report_budget >= 0.0)) config_error("eval budgets must be >= 0");

  if (data.source == DataSource::kSynthetic) {
    const auto& s = data.synthetic;
    if (s.num_classes < 2) config_error("data.num_classes must be >= 2");
    if (s.shape.size() == 0 || s.latent_dim == 0) config_error("data shape and latent_dim must be positive");
    if (!(s.separation > 0.0) || !(s.contrast > 0.0) || s.pixel_noise < 0.0 || s.nuisance_gain < 0.0) {
      config_error("data.separation and data.contrast must be positive, noise terms non-negative");
    }
    if (data.train_per_class < 2 || data.test_per_class < 1) {
      config_error("data.train_per_class must be >= 2 and data.test_per_class >= 1");
    }
  } else {
    for (const auto& [key, path] : {std::pair{"in_train_path", &data.in_train_path},
                                    {"in_test_path", &data.in_test_path},
                                    {"ood_test_path", &data.ood_test_path}}) {
      if (path->empty()) config_error(std::string("data.") + key + " is required for file sources");
      if (!std::filesystem::exists(*path)) config_error(std::string("data.") + key + " does not exist: " + *path);
    }
    if (!data.ood_fit_path.empty() && !std::filesystem::exists(data.ood_fit_path)) {
      config_error("data.ood_fit_path does not exist: " + data.ood_fit_path);
    }
  }
  if (attack.attack.low_res && model_shape() == data_shape()) {
    config_error("attack.low_res needs model.input_height/width different from the data resolution");
  }
}

IniDocument to_document(const ExperimentConfig& cfg) {
  IniDocument doc;
  for (const auto& f : fields()) doc.set(f.section, f.key, f.get(cfg));
  return doc;
}

ExperimentConfig from_document(const IniDocument& doc) {
  ExperimentConfig cfg;
  for (const auto& [section, entries] : doc.sections()) {
    for (const auto& [key, value] : entries) {
      const Field* f = find_field(section, key);
      if (!f) config_error("unknown key " + section + "." + key);
      f->set(cfg, value);
    }
  }
  return cfg;
}

ExperimentConfig parse_config(std::string_view text) { return from_document(IniDocument::parse(text)); }

std::string emit_config(const ExperimentConfig& cfg) { return to_document(cfg).emit(); }

ExperimentConfig load_config(const std::filesystem::path& path) {
  const auto bytes = binary::read_file(path);
  return parse_config(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

void apply_override(ExperimentConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string_view::npos || dot == std::string_view::npos || dot > eq) {
    config_error("override must look like section.key=value, got '" + std::string(assignment) + "'");
  }
  const auto section = trim(assignment.substr(0, dot));
  const auto key = trim(assignment.substr(dot + 1, eq - dot - 1));
  const Field* f = find_field(section, key);
  if (!f) config_error("unknown key " + std::string(section) + "." + std::string(key));
  f->set(cfg, std::string(trim(assignment.substr(eq + 1))));
}

std::string config_hash(const ExperimentConfig& cfg) {
  ExperimentConfig copy = cfg;
  copy.out_dir.clear();
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : emit_config(copy)) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) { return emit_config(a) == emit_config(b); }

}  // namespace oodadv

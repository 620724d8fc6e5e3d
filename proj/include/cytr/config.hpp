#pragma once

// Run configuration: a flat key/value table with fixed known keys.
// Precedence, lowest to highest: built-in defaults, the data-root environment
// override, a preset, a `key = value` config file, then --key value flags.
// Unknown keys are rejected everywhere. The effective table is echoed next to
// every run's outputs so any run can be replayed from that file alone.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cytr/losses.hpp"
#include "cytr/pipeline.hpp"
#include "cytr/trainer.hpp"

namespace cytr {

inline constexpr const char* kDataRootEnvVar = "CYTRANS_DATA_ROOT";

class RunConfig {
 public:
  RunConfig() {
    // common
    set("seed", "42");
    set("data_root", "data");
    set("out_dir", "out");
    // synthetic dataset
    set("identities", "32");
    set("train_per_identity", "25");
    set("query_per_identity", "3");
    set("gallery_per_identity", "3");
    set("map_h", "6");
    set("map_w", "3");
    set("raw_dim", "16");
    set("identity_scale", "0.5");
    set("offset_scale", "2.25");
    set("position_scale", "0.5");
    set("noise_scale", "0.25");
    // model
    set("feature_dim", "32");
    set("num_queries", "7");
    set("num_prototypes", "1024");
    set("scale_dim", "0");
    set("variant", "full");
    // training
    set("epochs", "140");
    set("schedule_epochs", "140");
    set("milestones", "40,70");
    set("lr", "3.5e-4");
    set("lr_decay", "0.1");
    set("batch_identities", "8");
    set("batch_visible", "4");
    set("batch_infrared", "4");
    set("margin", "0.5");
    set("lambda_sep", "0.2");
    set("lambda_mmd", "1.0");
    set("lambda_rec", "0.1");
    set("lambda_aln", "0.1");
    set("checkpoint_every", "0");
    set("grad_clip", "0");
    // evaluation / export
    set("checkpoint", "");
    set("protocol", "multi-shot");
    set("draws", "10");
    set("metric", "cosine");
    set("split", "query");

    if (const char* root = std::getenv(kDataRootEnvVar)) assign("data_root", root);
  }

  /// Named hyperparameter bundles. "desk" is the fast synthetic setup; the
  /// two lambda presets carry the published weighting sets.
  void apply_preset(const std::string& name) {
    if (name.empty()) return;
    if (name == "sysu-lambdas") {
      assign("lambda_sep", "0.2");
      assign("lambda_mmd", "1.0");
      assign("lambda_rec", "0.1");
      assign("lambda_aln", "0.1");
    } else if (name == "regdb-lambdas") {
      assign("lambda_sep", "0.2");
      assign("lambda_mmd", "0.8");
      assign("lambda_rec", "0.1");
      assign("lambda_aln", "0.1");
    } else if (name == "desk") {
      assign("lambda_sep", "0.2");
      assign("lambda_mmd", "1.0");
      assign("lambda_rec", "0.1");
      assign("lambda_aln", "0.1");
      assign("epochs", "30");
      assign("num_prototypes", "64");
    } else {
      throw ConfigError("unknown preset: " + name);
    }
  }

  /// `key = value` lines; '#' starts a comment; blank lines ignored.
  void load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config file: " + path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::size_t hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const std::size_t eq = trimmed.find('=');
      if (eq == std::string::npos)
        throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
      assign(trim(trimmed.substr(0, eq)), trim(trimmed.substr(eq + 1)));
    }
  }

  void assign(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown configuration key: " + key);
    it->second = value;
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown configuration key: " + key);
    return it->second;
  }

  double num(const std::string& key) const {
    try {
      std::size_t used = 0;
      const double v = std::stod(str(key), &used);
      if (used != str(key).size()) throw std::invalid_argument(key);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "' expects a number, got '" + str(key) + "'");
    }
  }

  std::size_t integer(const std::string& key) const {
    const double v = num(key);
    if (v < 0 || v != static_cast<double>(static_cast<std::size_t>(v)))
      throw ConfigError("key '" + key + "' expects a nonnegative integer, got '" + str(key) + "'");
    return static_cast<std::size_t>(v);
  }

  std::uint64_t seed() const { return static_cast<std::uint64_t>(integer("seed")); }

  std::vector<std::size_t> integer_list(const std::string& key) const {
    std::vector<std::size_t> out;
    std::stringstream ss(str(key));
    std::string field;
    while (std::getline(ss, field, ',')) {
      const std::string t = trim(field);
      if (t.empty()) continue;
      try {
        out.push_back(std::stoull(t));
      } catch (const std::exception&) {
        throw ConfigError("key '" + key + "' expects a comma-separated integer list");
      }
    }
    return out;
  }

  /// Writes every effective key, sorted, as a reloadable config file.
  void echo(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write effective config: " + path);
    for (const auto& [key, value] : values_) out << key << " = " << value << "\n";
    if (!out) throw IoError("config echo failed: " + path);
  }

  // ---- typed views over the table ----

  SyntheticSpec synthetic_spec() const {
    SyntheticSpec spec;
    spec.num_identities = static_cast<int>(integer("identities"));
    spec.train_per_identity = static_cast<int>(integer("train_per_identity"));
    spec.query_per_identity = static_cast<int>(integer("query_per_identity"));
    spec.gallery_per_identity = static_cast<int>(integer("gallery_per_identity"));
    spec.map_h = integer("map_h");
    spec.map_w = integer("map_w");
    spec.raw_dim = integer("raw_dim");
    spec.identity_scale = num("identity_scale");
    spec.modality_offset_scale = num("offset_scale");
    spec.position_scale = num("position_scale");
    spec.noise_scale = num("noise_scale");
    spec.seed = seed();
    return spec;
  }

  ModelDims model_dims(std::size_t num_classes) const {
    ModelDims dims;
    dims.raw_dim = integer("raw_dim");
    dims.feature_dim = integer("feature_dim");
    dims.num_queries = integer("num_queries");
    dims.num_prototypes = integer("num_prototypes");
    dims.scale_dim = integer("scale_dim");
    dims.num_classes = num_classes;
    return dims;
  }

  template <typename S>
  TrainOptions<S> train_options() const {
    TrainOptions<S> opts;
    opts.epochs = integer("epochs");
    opts.batch_identities = integer("batch_identities");
    opts.batch_visible = integer("batch_visible");
    opts.batch_infrared = integer("batch_infrared");
    opts.base_lr = num("lr");
    opts.schedule.milestones = integer_list("milestones");
    opts.schedule.decay = num("lr_decay");
    opts.schedule.total_epochs = integer("schedule_epochs");
    opts.weights.lambda_sep = static_cast<S>(num("lambda_sep"));
    opts.weights.lambda_mmd = static_cast<S>(num("lambda_mmd"));
    opts.weights.lambda_rec = static_cast<S>(num("lambda_rec"));
    opts.weights.lambda_aln = static_cast<S>(num("lambda_aln"));
    opts.weights.margin = static_cast<S>(num("margin"));
    opts.checkpoint_every = integer("checkpoint_every");
    opts.seed = seed();
    opts.grad_clip = num("grad_clip");
    return opts;
  }

 private:
  static std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  std::map<std::string, std::string> values_;
};

}  // namespace cytr

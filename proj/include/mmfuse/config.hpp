#pragma once

// Experiment configuration: one JSON file merged over a scale preset, with
// unknown keys rejected before any work starts.

#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmfuse/data.hpp"
#include "mmfuse/fusion.hpp"
#include "mmfuse/training.hpp"

namespace mmfuse {

struct DatasetSection {
  std::string path;  // corpus directory; empty selects the synthetic generator
  std::size_t synth_n = 512;
  std::uint64_t synth_seed = 7;
  SynthConfig synth;
  std::array<double, 3> fractions{0.7, 0.15, 0.15};
  std::uint64_t split_seed = 7;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DatasetSection, path, synth_n, synth_seed, synth, fractions, split_seed)

struct EvalSection {
  std::size_t warmup = 50;
  std::size_t iters = 200;
  double jitter_ms = 2.0;  // allowed |mean - expected| for constant-time probes
  std::size_t parity_batches = 16;
  double parity_tol = 1e-5;
  std::vector<std::size_t> ablation_blocks{2, 4, 6, 8};
  int f1_positive = 1;  // NonNegative
  std::string hardware;  // empty: probed from /proc/cpuinfo
  std::string bench_runner;  // external runner binary for `bench --target exchange`
  std::uint64_t bench_seed = 1234;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalSection, warmup, iters, jitter_ms, parity_batches, parity_tol,
                                                ablation_blocks, f1_positive, hardware, bench_runner, bench_seed)

struct ExperimentConfig {
  Scale scale = Scale::toy;
  std::uint64_t seed = 0;
  std::string output_dir = "runs";
  DatasetSection dataset;
  TextEncoderConfig text;
  std::string vision_kind = "cnn";
  CnnBackboneConfig cnn;
  VitBackboneConfig vit;
  FusionSpec fusion;
  std::map<std::string, TrainRecipe> training;  // keyed by stage name
  EvalSection eval;

  ModelConfig model(Strategy s) const {
    ModelConfig m;
    m.text = text;
    m.vision_kind = vision_kind;
    m.cnn = cnn;
    m.vit = vit;
    m.fusion = fusion;
    m.fusion.strategy = s;
    m.seed = seed;
    return m;
  }

  TrainRecipe recipe(Stage s) const {
    auto r = training.at(to_string(s));
    r.seed = seed;
    return r;
  }

  std::size_t resolution() const { return vision_kind == "cnn" ? cnn.input_resolution : vit.input_resolution; }

  /// Generator settings aligned with the model's tokenizer and image size.
  SynthConfig synth_config() const {
    auto s = dataset.synth;
    s.max_seq_len = text.max_seq_len;
    s.vocab_size = text.vocab_size;
    s.resolution = resolution();
    return s;
  }

  PreprocessConfig preprocess_config() const {
    PreprocessConfig p;
    p.resolution = resolution();
    p.max_seq_len = text.max_seq_len;
    p.normalize = dataset.synth.normalize;
    return p;
  }

  void validate() const {
    model(Strategy::late).validate();
    for (auto s : {Stage::cnn_base, Stage::text_base, Stage::late, Stage::intermediate, Stage::early}) {
      if (!training.count(to_string(s))) throw ConfigError("training: missing recipe for stage " + to_string(s));
      training.at(to_string(s)).validate();
    }
    if (dataset.path.empty() && dataset.synth_n == 0) throw ConfigError("dataset: synth_n must be >= 1");
    if (eval.iters < 30) throw ConfigError("eval: iters must be >= 30");
    if (eval.warmup < 10) throw ConfigError("eval: warmup must be >= 10");
    if (eval.parity_batches == 0) throw ConfigError("eval: parity_batches must be >= 1");
    if (eval.ablation_blocks.empty()) throw ConfigError("eval: ablation_blocks must be nonempty");
    if (eval.f1_positive != 0 && eval.f1_positive != 1) throw ConfigError("eval: f1_positive must be 0 or 1");
    if (!(eval.jitter_ms >= 0.0)) throw ConfigError("eval: jitter_ms must be >= 0");
  }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentConfig, scale, seed, output_dir, dataset, text, vision_kind, cnn, vit,
                                                fusion, training, eval)

/// Defaults for a scale: backbone sizes and per-stage recipes.
inline ExperimentConfig preset(Scale scale) {
  ExperimentConfig c;
  c.scale = scale;
  if (scale == Scale::full) {
    c.text = TextEncoderConfig::full();
    c.cnn = CnnBackboneConfig::full();
    c.vit = VitBackboneConfig::full();
    c.fusion.fusion_dim = 256;
    c.dataset.path = "data/CMU-MOSI";
  }
  for (auto s : {Stage::cnn_base, Stage::text_base, Stage::late, Stage::intermediate, Stage::early})
    c.training[to_string(s)] = recipe_for(s, scale);
  return c;
}

namespace detail {
inline void check_keys(const nlohmann::json& user, const nlohmann::json& known, const std::string& where) {
  if (!user.is_object()) return;
  if (!known.is_object()) throw ConfigError(where + ": expected a value, found an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const auto path = where.empty() ? it.key() : where + "." + it.key();
    if (!known.contains(it.key())) {
      std::string valid;
      for (auto k = known.begin(); k != known.end(); ++k) valid += (valid.empty() ? "" : ", ") + k.key();
      throw ConfigError("unknown config key '" + path + "' (valid keys here: " + valid + ")");
    }
    check_keys(it.value(), known[it.key()], path);
  }
}
}  // namespace detail

/// Merges `user` over the preset of its scale ("toy" unless given).
inline ExperimentConfig resolve_config(const nlohmann::json& user) {
  if (!user.is_object()) throw ConfigError("config: top level must be an object");
  Scale scale = Scale::toy;
  if (user.contains("scale")) {
    const auto s = user["scale"];
    if (s != "toy" && s != "full") throw ConfigError("config: scale must be 'toy' or 'full'");
    scale = s.get<Scale>();
  }
  nlohmann::json j = preset(scale);
  detail::check_keys(user, j, "");
  j.merge_patch(user);
  ExperimentConfig c;
  try {
    c = j.get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline nlohmann::json read_json_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw ValidationError("cannot read " + p.string());
  try {
    return nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

/// Applies `a.b.c=value` overrides; the value is parsed as JSON, falling back
/// to a plain string.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' must look like key.path=value");
  const auto text = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    value = text;
  }
  nlohmann::json* node = &j;
  std::stringstream keys(assignment.substr(0, eq));
  std::vector<std::string> path;
  for (std::string k; std::getline(keys, k, '.');) path.push_back(k);
  for (std::size_t i = 0; i + 1 < path.size(); ++i) {
    if (!node->contains(path[i])) (*node)[path[i]] = nlohmann::json::object();
    node = &(*node)[path[i]];
  }
  (*node)[path.back()] = value;
}

/// Hash of the resolved config without output_dir, so a workspace can move.
inline std::string experiment_hash(const ExperimentConfig& c) {
  nlohmann::json j = c;
  j.erase("output_dir");
  return config_hash(j);
}

}  // namespace mmfuse

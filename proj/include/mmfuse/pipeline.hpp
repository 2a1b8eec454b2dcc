#pragma once

// The experiment workspace behind the CLI: every artifact lives under
// <output_dir>/<config hash>/ next to resolved_config.json.
//
//   data/      samples.bin, splits/{train,val,test}.txt, prep.json
//   ckpt/      <name>.ckpt, <name>.best.ckpt, <name>.history.csv
//   metrics/   <name>.json (MetricsRecord)
//   export/    <name>.onnx, <name>.meta.json, <name>.parity.json
//   latency/   <name>.<runtime>.json (LatencyReport)
//   ablation/  ablation.csv, ablation.md
//   report/    tradeoff.csv, tradeoff.svg, tables.md

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mmfuse/ablation.hpp"
#include "mmfuse/config.hpp"
#include "mmfuse/export.hpp"
#include "mmfuse/latency.hpp"
#include "mmfuse/report.hpp"
#include "mmfuse/training.hpp"

namespace mmfuse {

namespace fs = std::filesystem;

struct PrepResult {
  std::size_t samples = 0;
  std::size_t train = 0, val = 0, test = 0;
  std::vector<std::string> errors;  // per-clip problems in a corpus directory
  bool skipped = false;             // outputs already present with matching hash
};

struct StageResult {
  std::string name;
  fs::path checkpoint;
  bool skipped = false;
  TrainResult train;
};

using Progress = std::function<void(const std::string&)>;

class Workspace {
 public:
  explicit Workspace(ExperimentConfig cfg) : cfg_(std::move(cfg)), hash_(experiment_hash(cfg_)) {
    root_ = fs::path(cfg_.output_dir) / hash_;
    fs::create_directories(root_);
    const auto resolved = root_ / "resolved_config.json";
    std::ofstream(resolved) << nlohmann::json(cfg_).dump(2) << '\n';
  }

  const ExperimentConfig& config() const { return cfg_; }
  const fs::path& root() const { return root_; }
  const std::string& hash() const { return hash_; }
  fs::path dir(const std::string& sub) const { return root_ / sub; }

  void set_progress(Progress p) { progress_ = std::move(p); }

  // ------------------------------------------------------------------ prep

  std::string dataset_hash() const {
    nlohmann::json j = cfg_.dataset;
    j["preprocess"] = {{"resolution", cfg_.resolution()}, {"max_seq_len", cfg_.text.max_seq_len},
                       {"vocab_size", cfg_.text.vocab_size}};
    return config_hash(j);
  }

  /// Builds samples and split manifests. A no-op when prep.json records the
  /// same dataset hash and the outputs exist.
  PrepResult prep(bool force = false) {
    const auto d = dir("data");
    const auto stamp = d / "prep.json";
    if (!force && fs::exists(stamp) && fs::exists(d / "samples.bin") && fs::exists(d / "splits" / "test.txt")) {
      const auto j = read_json_file(stamp);
      if (j.value("dataset_hash", "") == dataset_hash()) {
        PrepResult r;
        r.skipped = true;
        r.samples = j.value("samples", std::size_t{0});
        r.train = j.value("train", std::size_t{0});
        r.val = j.value("val", std::size_t{0});
        r.test = j.value("test", std::size_t{0});
        r.errors = j.value("errors", std::vector<std::string>{});
        return r;
      }
    }
    PrepResult r;
    std::vector<Sample> samples;
    const auto& ds = cfg_.dataset;
    if (ds.path.empty()) {
      samples = synth_dataset(ds.synth_n, ds.synth_seed, cfg_.synth_config());
    } else {
      auto corpus = scan_corpus(ds.path);
      r.errors = corpus.errors;
      Tokenizer tok(cfg_.text.vocab_size, cfg_.text.max_seq_len);
      const auto pc = cfg_.preprocess_config();
      for (const auto& clip : corpus.clips) {
        try {
          samples.push_back(ingest_clip(clip, tok, pc));
        } catch (const std::exception& e) {
          r.errors.push_back(clip.clip_id + ": " + e.what());
        }
      }
      if (samples.empty()) throw ValidationError("corpus " + ds.path + " yielded no usable clips");
    }
    std::vector<std::string> ids;
    for (const auto& s : samples) ids.push_back(s.clip_id);
    const auto m = make_splits(ids, ds.fractions, ds.split_seed);
    fs::create_directories(d);
    save_samples(d / "samples.bin", samples);
    save_manifest(m, d / "splits");
    r.samples = samples.size();
    r.train = m.train.size();
    r.val = m.val.size();
    r.test = m.test.size();
    std::ofstream(stamp) << nlohmann::json{{"dataset_hash", dataset_hash()}, {"samples", r.samples}, {"train", r.train},
                                           {"val", r.val}, {"test", r.test}, {"errors", r.errors}}
                                .dump(2)
                         << '\n';
    return r;
  }

  /// Samples of one split ("train", "val" or "test").
  std::vector<Sample> split(const std::string& name) {
    const auto d = dir("data");
    if (!fs::exists(d / "samples.bin")) throw ValidationError("no prepared data in " + d.string() + " (run `mmfuse prep` first)");
    if (all_.empty()) all_ = load_samples(d / "samples.bin");
    if (name != "train" && name != "val" && name != "test") throw ValidationError("unknown split '" + name + "'");
    return select_samples(all_, read_lines(d / "splits" / (name + ".txt")));
  }

  // ----------------------------------------------------------------- train

  static std::string stage_name(Stage s, std::optional<std::size_t> blocks) {
    if (blocks) {
      if (s != Stage::early) throw ConfigError("--blocks applies to the early stage only");
      return "early_b" + std::to_string(*blocks);
    }
    return to_string(s);
  }

  fs::path checkpoint(const std::string& name) const { return dir("ckpt") / (name + ".ckpt"); }

  ModelConfig stage_model(Stage s, std::optional<std::size_t> blocks = std::nullopt) const {
    auto m = cfg_.model(strategy_for(s));
    if (blocks) m.fusion.num_attention_blocks = *blocks;
    return m;
  }

  /// Trains one stage. Late fusion starts from the base stages' best
  /// checkpoints. An existing checkpoint is kept unless `force`.
  StageResult train_stage(Stage s, std::optional<std::size_t> blocks = std::nullopt, bool force = false) {
    StageResult r;
    r.name = stage_name(s, blocks);
    r.checkpoint = checkpoint(r.name);
    if (!force && fs::exists(r.checkpoint)) {
      r.skipped = true;
      return r;
    }
    auto model = build_model<float>(stage_model(s, blocks));
    if (s == Stage::late) {
      for (auto base : {Stage::text_base, Stage::cnn_base}) {
        const auto p = dir("ckpt") / (to_string(base) + ".best.ckpt");
        if (!fs::exists(p))
          throw ValidationError("late fusion needs " + p.string() + " (run `mmfuse train --stage " + to_string(base) + "` first)");
        load_state(*model, read_checkpoint<float>(p), {base == Stage::text_base ? "text" : "vision"});
      }
    }
    const auto train_set = split("train"), val_set = split("val");
    TrainOptions o;
    o.out_dir = dir("ckpt");
    o.name = r.name;
    o.meta = {{"stage", to_string(s)}, {"experiment_hash", hash_}};
    o.on_epoch = [&](const EpochStats& e) {
      if (progress_)
        progress_(r.name + " epoch " + std::to_string(e.epoch) + " loss " + fmt(e.train_loss, 4) + " train " +
                  fmt(e.train_acc, 3) + " val " + fmt(e.val_acc, 3));
    };
    r.train = train(*model, train_set, val_set, cfg_.recipe(s), o);
    if (r.train.diverged) throw std::runtime_error(r.name + " diverged: " + r.train.divergence_report);
    return r;
  }

  // ------------------------------------------------------------------ eval

  LoadedModel<float> load(const std::string& name) const {
    const auto p = checkpoint(name);
    if (!fs::exists(p)) throw ValidationError("checkpoint not found: " + p.string() + " (run `mmfuse train` first)");
    return load_checkpoint<float>(p);
  }

  MetricsRecord evaluate(const std::string& name, const std::string& split_name = "test") {
    auto lm = load(name);
    auto& model = *lm.model;
    const auto p = predict(model, split(split_name));
    MetricsRecord m;
    m.model_name = name;
    m.strategy = to_string(model.strategy());
    m.vision = model.config().vision_tag();
    m.modality = modality_tag(model.strategy());
    m.binary_accuracy = binary_accuracy(p.preds, p.labels);
    m.f1 = f1_score(p.preds, p.labels, cfg_.eval.f1_positive);
    m.samples = p.preds.size();
    fs::create_directories(dir("metrics"));
    const auto file = split_name == "test" ? name + ".json" : name + "." + split_name + ".json";
    std::ofstream(dir("metrics") / file) << nlohmann::json(m).dump(2) << '\n';
    return m;
  }

  // ---------------------------------------------------------------- export

  struct ExportResult {
    ExportArtifact artifact;
    ParityReport parity;
  };

  ExportResult export_model(const std::string& name) {
    auto lm = load(name);
    lm.model->set_training(false);
    ExportResult r;
    const auto path = dir("export") / (name + ".onnx");
    r.artifact = export_graph(*lm.model, path);
    r.parity = verify_parity(*lm.model, path, cfg_.eval.parity_batches, cfg_.eval.parity_tol);
    std::ofstream(dir("export") / (name + ".parity.json"))
        << nlohmann::json{{"batches", r.parity.batches}, {"max_abs_diff", r.parity.max_abs_diff},
                          {"argmax_agreement", r.parity.argmax_agreement}, {"tolerance", r.parity.tolerance},
                          {"pass", r.parity.pass}}
               .dump(2)
        << '\n';
    return r;
  }

  // ----------------------------------------------------------------- bench

  fs::path latency_path(const std::string& name, const std::string& runtime) const {
    return dir("latency") / (name + "." + runtime + ".json");
  }

  LatencyReport base_report(const std::string& name, const std::string& strategy, const std::string& runtime) const {
    LatencyReport b;
    b.model_name = name;
    b.strategy = strategy;
    b.runtime = runtime;
    b.hardware = cfg_.eval.hardware;
    return b;
  }

  /// In-process timing of the live model, batch 1, fixed probe input.
  LatencyReport bench_live(const std::string& name) {
    auto lm = load(name);
    auto& model = *lm.model;
    model.set_training(false);
    const auto in = probe_inputs<float>(model.config(), 1, cfg_.eval.bench_seed);
    auto rep = measure_latency(
        [&] {
          NoGradGuard ng;
          auto y = model.forward(in);
          (void)y;
        },
        cfg_.eval.warmup, cfg_.eval.iters, base_report(name, to_string(model.strategy()), "in_process"));
    write_report(rep);
    return rep;
  }

  /// Timing of the exported graph. With `runner` (or eval.bench_runner) set,
  /// invokes `<runner> bench --graph G --warmup W --iters I --seed S --out R`
  /// and ingests its report; otherwise the toolkit's own graph interpreter
  /// executes the exported file.
  LatencyReport bench_exchange(const std::string& name, std::string runner = {}) {
    if (runner.empty()) runner = cfg_.eval.bench_runner;
    const auto graph = dir("export") / (name + ".onnx");
    if (!fs::exists(graph)) throw ValidationError("no exported graph " + graph.string() + " (run `mmfuse export " + name + "` first)");
    const auto out = latency_path(name, "exchange_runtime");
    fs::create_directories(out.parent_path());
    if (!runner.empty()) {
      const std::string cmd = "\"" + runner + "\" bench --graph \"" + graph.string() + "\" --warmup " +
                              std::to_string(cfg_.eval.warmup) + " --iters " + std::to_string(cfg_.eval.iters) + " --seed " +
                              std::to_string(cfg_.eval.bench_seed) + " --out \"" + out.string() + "\"";
      if (std::system(cmd.c_str()) != 0) throw std::runtime_error("bench runner failed: " + cmd);
      return ingest_report(out.string(), name);
    }
    nlohmann::json side;
    auto session = load_exported(graph, &side);
    auto model_cfg = side.at("model_config").get<ModelConfig>();
    const auto feeds = to_feeds(probe_inputs<float>(model_cfg, 1, cfg_.eval.bench_seed));
    auto rep = measure_latency([&] { (void)session.run(feeds); }, cfg_.eval.warmup, cfg_.eval.iters,
                               base_report(name, side.value("strategy", ""), "exchange_runtime"));
    write_report(rep);
    return rep;
  }

  /// Validates an externally produced report and files it under latency/.
  LatencyReport ingest_report(const std::string& path, const std::string& expected_model = {}) {
    auto rep = load_latency_report(path);
    if (!expected_model.empty() && rep.model_name != expected_model)
      throw ValidationError(path + ": report is for '" + rep.model_name + "', expected '" + expected_model + "'");
    write_report(rep);
    return rep;
  }

  std::vector<LatencyReport> latency_reports(const std::string& runtime = {}) const {
    std::vector<LatencyReport> out;
    if (!fs::exists(dir("latency"))) return out;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir("latency")))
      if (e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      auto r = load_latency_report(f.string());
      if (runtime.empty() || r.runtime == runtime) out.push_back(r);
    }
    return out;
  }

  std::vector<MetricsRecord> metrics_records() const {
    std::vector<MetricsRecord> out;
    if (!fs::exists(dir("metrics"))) return out;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir("metrics"))) {
      const auto stem = e.path().stem().string();
      if (e.path().extension() == ".json" && stem.find('.') == std::string::npos) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) out.push_back(read_json_file(f).get<MetricsRecord>());
    return out;
  }

  // ---------------------------------------------------------------- ablate

  AblationResult ablate(std::vector<std::size_t> blocks = {}) {
    if (blocks.empty()) blocks = cfg_.eval.ablation_blocks;
    AblationOptions o;
    o.out_dir = dir("ablation");
    o.on_epoch = [&](std::size_t k, const EpochStats& e) {
      if (progress_) progress_("blocks " + std::to_string(k) + " epoch " + std::to_string(e.epoch) + " val " + fmt(e.val_acc, 3));
    };
    return run_ablation<float>(cfg_.model(Strategy::early), blocks, split("train"), split("val"), split("test"),
                               cfg_.recipe(Stage::early), o);
  }

  // ---------------------------------------------------------------- report

  /// Joins metrics with latency reports of every runtime. Tables use the
  /// exchange runtime when present, else in-process timings.
  TradeoffOutputs report() {
    const auto metrics = metrics_records();
    if (metrics.empty()) throw ValidationError("no metrics in " + dir("metrics").string() + " (run `mmfuse eval` first)");
    const auto records = join_tradeoff(metrics, latency_reports());
    return emit_tradeoff(records, metrics, dir("report"));
  }

 private:
  void write_report(const LatencyReport& r) {
    validate_runtime_tag(r.runtime);
    fs::create_directories(dir("latency"));
    save_latency_report(latency_path(r.model_name, r.runtime).string(), r);
  }

  ExperimentConfig cfg_;
  std::string hash_;
  fs::path root_;
  std::vector<Sample> all_;
  Progress progress_;
};

}  // namespace mmfuse

// mmfuse: prep, train, eval, ablate, export, bench, compare-runtimes, report.
// Exit codes: 0 success, 2 validation or usage error, 3 runtime failure.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mmfuse/pipeline.hpp"

namespace {

using namespace mmfuse;
namespace fs = std::filesystem;

constexpr int kValidation = 2;
constexpr int kRuntime = 3;

struct Globals {
  std::string config;
  std::vector<std::string> overrides;
  std::string output_dir, scale, vision;
  bool quiet = false;
};

ExperimentConfig load_config(const Globals& g) {
  nlohmann::json user = nlohmann::json::object();
  if (!g.config.empty()) user = read_json_file(g.config);
  if (!g.scale.empty()) user["scale"] = g.scale;
  if (!g.vision.empty()) user["vision_kind"] = g.vision;
  if (!g.output_dir.empty()) user["output_dir"] = g.output_dir;
  for (const auto& o : g.overrides) apply_override(user, o);
  return resolve_config(user);
}

Workspace open_workspace(const Globals& g) {
  Workspace ws(load_config(g));
  if (!g.quiet) {
    std::cerr << "workspace " << ws.root().string() << '\n';
    ws.set_progress([](const std::string& line) { std::cerr << line << '\n'; });
  }
  return ws;
}

/// Reports from a file or every *.json in a directory.
std::vector<LatencyReport> reports_from(const std::string& arg) {
  std::vector<LatencyReport> out;
  if (fs::is_directory(arg)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(arg))
      if (e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) out.push_back(load_latency_report(f.string()));
  } else {
    out.push_back(load_latency_report(arg));
  }
  return out;
}

std::vector<std::string> checkpoint_names(const Workspace& ws) {
  std::vector<std::string> names;
  if (!fs::exists(ws.dir("ckpt"))) return names;
  for (const auto& e : fs::directory_iterator(ws.dir("ckpt"))) {
    const auto f = e.path().filename().string();
    if (f.size() > 5 && f.ends_with(".ckpt") && f.find(".best.") == std::string::npos) names.push_back(f.substr(0, f.size() - 5));
  }
  std::sort(names.begin(), names.end());
  return names;
}

std::vector<std::string> names_or_all(const Workspace& ws, std::vector<std::string> names, bool all) {
  if (all) names = checkpoint_names(ws);
  if (names.empty()) throw ValidationError("no model names given (pass names or --all; run `mmfuse train` first)");
  return names;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mmfuse: multimodal fusion experiments (text + vision sentiment)"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("-c,--config", g.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
  app.add_option("--set", g.overrides, "Override a config value, e.g. --set fusion.fusion_dim=64");
  app.add_option("--output-dir", g.output_dir, "Override output_dir");
  app.add_option("--scale", g.scale, "toy or full")->check(CLI::IsMember({"toy", "full"}));
  app.add_option("--vision", g.vision, "Vision backbone: cnn or vit")->check(CLI::IsMember({"cnn", "vit"}));
  app.add_flag("-q,--quiet", g.quiet, "No progress output");

  auto* prep = app.add_subcommand("prep", "Build samples and split manifests");
  bool prep_force = false;
  prep->add_flag("--force", prep_force, "Rebuild even when outputs match");

  auto* train_cmd = app.add_subcommand("train", "Train one stage");
  std::string stage;
  std::optional<std::size_t> blocks;
  bool train_force = false;
  train_cmd->add_option("--stage", stage, "cnn_base, text_base, late, intermediate or early")->required();
  train_cmd->add_option("--blocks", blocks, "Attention blocks for the early stage (checkpoint early_b<k>)");
  train_cmd->add_flag("--force", train_force, "Retrain even if the checkpoint exists");

  auto* eval_cmd = app.add_subcommand("eval", "Score checkpoints on a split");
  std::vector<std::string> eval_names;
  bool eval_all = false;
  std::string eval_split = "test";
  eval_cmd->add_option("names", eval_names, "Checkpoint names (late, text_base, early_b4, ...)");
  eval_cmd->add_flag("--all", eval_all, "Every trained checkpoint");
  eval_cmd->add_option("--split", eval_split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));

  auto* ablate = app.add_subcommand("ablate", "Early-fusion attention-block ablation");
  std::vector<std::size_t> ablate_blocks;
  ablate->add_option("--blocks", ablate_blocks, "Block counts (default from eval.ablation_blocks)");

  auto* export_cmd = app.add_subcommand("export", "Export checkpoints to ONNX with a parity check");
  std::vector<std::string> export_names;
  bool export_all = false;
  export_cmd->add_option("names", export_names, "Checkpoint names");
  export_cmd->add_flag("--all", export_all, "Every trained checkpoint");

  auto* bench = app.add_subcommand("bench", "Measure latency (batch 1)");
  std::vector<std::string> bench_names, ingest;
  bool bench_all = false;
  std::string target = "live", runner;
  bench->add_option("names", bench_names, "Checkpoint names");
  bench->add_flag("--all", bench_all, "Every trained checkpoint (live) or exported graph (exchange)");
  bench->add_option("--target", target, "live (in-process) or exchange (exported graph)")->check(CLI::IsMember({"live", "exchange"}));
  bench->add_option("--runner", runner, "External runner binary for --target exchange");
  bench->add_option("--ingest", ingest, "Register runner reports (files or directories) instead of measuring");

  auto* compare = app.add_subcommand("compare-runtimes", "Per-model latency deltas between two report sets");
  std::string cmp_a, cmp_b, cmp_out;
  compare->add_option("a", cmp_a, "Report file, directory, or runtime tag in the workspace")->required();
  compare->add_option("b", cmp_b, "Report file, directory, or runtime tag in the workspace")->required();
  compare->add_option("--out", cmp_out, "Also write the comparison as JSON");

  auto* report = app.add_subcommand("report", "Trade-off CSV, scatter plot and tables");
  std::vector<std::string> include_roots;
  report->add_option("--include", include_roots, "Other workspace directories to merge (e.g. the ViT run)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kValidation;
  }

  try {
    if (*prep) {
      auto ws = open_workspace(g);
      const auto r = ws.prep(prep_force);
      std::cout << (r.skipped ? "up to date: " : "prepared: ") << r.samples << " samples (train " << r.train << ", val " << r.val
                << ", test " << r.test << ")\n";
      for (const auto& e : r.errors) std::cout << "clip error: " << e << '\n';
    } else if (*train_cmd) {
      const auto s = parse_stage(stage);
      auto ws = open_workspace(g);
      const auto r = ws.train_stage(s, blocks, train_force);
      if (r.skipped)
        std::cout << "checkpoint exists, skipped (use --force to retrain): " << r.checkpoint.string() << '\n';
      else
        std::cout << "trained " << r.name << ": " << r.train.history.size() << " epochs, best val "
                  << fmt(r.train.best_val_acc, 4) << " at epoch " << r.train.best_epoch << " -> " << r.checkpoint.string() << '\n';
    } else if (*eval_cmd) {
      auto ws = open_workspace(g);
      for (const auto& n : names_or_all(ws, eval_names, eval_all)) {
        const auto m = ws.evaluate(n, eval_split);
        std::cout << n << " [" << m.modality << "] " << eval_split << " accuracy " << fmt(m.binary_accuracy, 4) << " f1 "
                  << fmt(m.f1.value_or(0.0), 4) << " (" << m.samples << " samples)\n";
      }
    } else if (*ablate) {
      auto ws = open_workspace(g);
      const auto r = ws.ablate(ablate_blocks);
      std::cout << ablation_table(r);
      std::cout << "csv: " << (ws.dir("ablation") / "ablation.csv").string() << '\n';
      if (!r.errors.empty()) return kRuntime;
    } else if (*export_cmd) {
      auto ws = open_workspace(g);
      bool ok = true;
      for (const auto& n : names_or_all(ws, export_names, export_all)) {
        const auto r = ws.export_model(n);
        std::cout << r.artifact.graph_path << " parity max|diff| " << r.parity.max_abs_diff << " argmax agreement "
                  << r.parity.argmax_agreement << (r.parity.pass ? " ok" : " FAILED") << '\n';
        ok = ok && r.parity.pass;
      }
      if (!ok) return kRuntime;
    } else if (*bench) {
      auto ws = open_workspace(g);
      if (!ingest.empty()) {
        for (const auto& src : ingest)
          for (const auto& r : reports_from(src)) {
            const auto tmp = ws.dir("latency") / ".ingest.json";
            fs::create_directories(tmp.parent_path());
            save_latency_report(tmp.string(), r);
            ws.ingest_report(tmp.string());
            fs::remove(tmp);
            std::cout << "ingested " << r.model_name << " [" << r.runtime << "] mean " << fmt(r.mean_ms, 3) << " ms\n";
          }
      } else {
        for (const auto& n : names_or_all(ws, bench_names, bench_all)) {
          const auto r = target == "live" ? ws.bench_live(n) : ws.bench_exchange(n, runner);
          std::cout << n << " [" << r.runtime << "] mean " << fmt(r.mean_ms, 3) << " ms, median " << fmt(r.median_ms, 3)
                    << " ms, p95 " << fmt(r.p95_ms, 3) << " ms\n";
        }
      }
    } else if (*compare) {
      auto side = [&](const std::string& arg) {
        if (fs::exists(arg)) return reports_from(arg);
        validate_runtime_tag(arg);
        Workspace ws(load_config(g));
        auto r = ws.latency_reports(arg);
        if (r.empty()) throw ValidationError("no " + arg + " reports in " + ws.dir("latency").string() + " (run `mmfuse bench`)");
        return r;
      };
      const auto c = compare_reports(side(cmp_a), side(cmp_b));
      for (const auto& w : c.warnings) std::cerr << "warning: " << w << '\n';
      std::cout << compare_markdown(c, "a", "b");
      if (!cmp_out.empty()) std::ofstream(cmp_out) << to_json(c).dump(2) << '\n';
    } else if (*report) {
      auto ws = open_workspace(g);
      auto metrics = ws.metrics_records();
      auto latency = ws.latency_reports();
      for (const auto& root : include_roots) {
        auto other_cfg = resolve_config(read_json_file(fs::path(root) / "resolved_config.json"));
        const auto out_dir = fs::path(root).parent_path().string();
        other_cfg.output_dir = out_dir.empty() ? "." : out_dir;
        Workspace other(other_cfg);
        const auto m = other.metrics_records();
        const auto l = other.latency_reports();
        metrics.insert(metrics.end(), m.begin(), m.end());
        latency.insert(latency.end(), l.begin(), l.end());
      }
      if (metrics.empty()) throw ValidationError("no metrics in " + ws.dir("metrics").string() + " (run `mmfuse eval` first)");
      const auto out = emit_tradeoff(join_tradeoff(metrics, latency), metrics, ws.dir("report"));
      for (const auto& w : out.warnings) std::cerr << "warning: " << w << '\n';
      std::cout << "wrote " << out.csv.string() << ", " << out.plot.string() << ", " << out.tables.string() << '\n';
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kValidation;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << '\n';
    return kRuntime;
  }
  return 0;
}

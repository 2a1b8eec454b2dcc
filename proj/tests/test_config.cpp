#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "mmfuse/pipeline.hpp"

using namespace mmfuse;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / ("mmfuse_config_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Small enough that a full prep/train/eval/export/bench/report cycle takes seconds.
nlohmann::json tiny(const fs::path& out) {
  nlohmann::json j = {
      {"output_dir", out.string()},
      {"dataset", {{"synth_n", 40}}},
      {"text", {{"num_layers", 2}, {"hidden_dim", 16}, {"num_heads", 2}, {"ff_dim", 32}, {"max_seq_len", 16}, {"vocab_size", 64}}},
      {"cnn", {{"num_bottlenecks", 3}, {"input_resolution", 16}}},
      {"fusion", {{"taps", {1, 2}}, {"cut_layer", 2}, {"num_attention_blocks", 1}, {"fusion_dim", 8}, {"attention_heads", 2}}},
      {"eval", {{"warmup", 10}, {"iters", 30}, {"parity_batches", 2}, {"ablation_blocks", {1}}}}};
  for (const char* s : {"cnn_base", "text_base", "late", "intermediate", "early"})
    j["training"][s] = {{"epochs", 1}, {"batch_size", 8}};
  return j;
}

#ifdef MMFUSE_CLI
int run_cli(const std::string& args, const fs::path& log) {
  const auto cmd = std::string(MMFUSE_CLI) + " -q " + args + " >" + log.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}
#endif

}  // namespace

TEST(Config, PresetsValidate) {
  EXPECT_NO_THROW(resolve_config(nlohmann::json::object()));
  const auto full = resolve_config({{"scale", "full"}});
  EXPECT_EQ(full.text.hidden_dim, 768u);
  EXPECT_EQ(full.cnn.input_resolution, 224u);
  EXPECT_EQ(full.training.at("text_base").optimizer, OptimizerKind::adam);
  EXPECT_THROW(resolve_config({{"scale", "huge"}}), ConfigError);
}

TEST(Config, UnknownKeysAreRejected) {
  try {
    resolve_config({{"fusion", {{"fusion_dimm", 64}}}});
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("fusion.fusion_dimm"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("fusion_dim"), std::string::npos);
  }
  EXPECT_THROW(resolve_config({{"bogus", 1}}), ConfigError);
  EXPECT_THROW(resolve_config({{"fusion", {{"fusion_dim", "wide"}}}}), ConfigError);
  EXPECT_THROW(resolve_config({{"fusion", {{"fusion_dim", 30}, {"attention_heads", 4}}}}), ConfigError);
  EXPECT_THROW(resolve_config({{"eval", {{"iters", 10}}}}), ConfigError);
}

TEST(Config, UserValuesMergeOverPreset) {
  const auto c = resolve_config({{"fusion", {{"fusion_dim", 64}}}, {"training", {{"late", {{"epochs", 3}}}}}});
  EXPECT_EQ(c.fusion.fusion_dim, 64u);
  EXPECT_EQ(c.fusion.cut_layer, 6u);
  EXPECT_EQ(c.training.at("late").epochs, 3u);
  EXPECT_EQ(c.training.at("late").batch_size, recipe_for(Stage::late, Scale::toy).batch_size);
  EXPECT_EQ(c.recipe(Stage::early).epochs, recipe_for(Stage::early, Scale::toy).epochs);
}

TEST(Config, OverridesParseJsonOrString) {
  nlohmann::json j = nlohmann::json::object();
  apply_override(j, "fusion.fusion_dim=64");
  apply_override(j, "vision_kind=vit");
  apply_override(j, "fusion.taps=[2,5]");
  EXPECT_EQ(j["fusion"]["fusion_dim"], 64);
  EXPECT_EQ(j["vision_kind"], "vit");
  const auto c = resolve_config(j);
  EXPECT_EQ(c.fusion.taps, (std::vector<std::size_t>{2, 5}));
  EXPECT_EQ(c.vision_kind, "vit");
  EXPECT_THROW(apply_override(j, "no_equals_sign"), ConfigError);
  EXPECT_THROW(apply_override(j, "=5"), ConfigError);
}

TEST(Config, HashIsStableAndIgnoresOutputDir) {
  const auto a = resolve_config({{"output_dir", "x"}});
  const auto b = resolve_config({{"output_dir", "y"}});
  EXPECT_EQ(experiment_hash(a), experiment_hash(b));
  EXPECT_EQ(experiment_hash(a), experiment_hash(resolve_config(nlohmann::json(a))));
  EXPECT_NE(experiment_hash(a), experiment_hash(resolve_config({{"seed", 1}})));
  EXPECT_EQ(experiment_hash(a).size(), 16u);
}

TEST(Workspace, PrepIsIdempotent) {
  const auto dir = scratch("prep");
  Workspace ws(resolve_config(tiny(dir)));
  EXPECT_TRUE(fs::exists(ws.root() / "resolved_config.json"));
  const auto first = ws.prep();
  EXPECT_FALSE(first.skipped);
  EXPECT_EQ(first.samples, 40u);
  EXPECT_EQ(first.train + first.val + first.test, 40u);
  const auto samples = slurp(ws.dir("data") / "samples.bin");
  const auto test_ids = slurp(ws.dir("data") / "splits" / "test.txt");
  const auto second = ws.prep();
  EXPECT_TRUE(second.skipped);
  EXPECT_EQ(second.test, first.test);
  const auto forced = ws.prep(true);
  EXPECT_FALSE(forced.skipped);
  EXPECT_EQ(slurp(ws.dir("data") / "samples.bin"), samples);
  EXPECT_EQ(slurp(ws.dir("data") / "splits" / "test.txt"), test_ids);
}

TEST(Workspace, LateNeedsBaseCheckpoints) {
  const auto dir = scratch("late");
  Workspace ws(resolve_config(tiny(dir)));
  ws.prep();
  EXPECT_THROW(ws.train_stage(Stage::late), ValidationError);
  EXPECT_THROW(ws.train_stage(Stage::late, 2), ConfigError);
  EXPECT_THROW(ws.evaluate("early"), ValidationError);
  EXPECT_THROW(ws.report(), ValidationError);
}

TEST(Workspace, SplitsRequirePrep) {
  const auto dir = scratch("noprep");
  Workspace ws(resolve_config(tiny(dir)));
  EXPECT_THROW(ws.split("train"), ValidationError);
  ws.prep();
  EXPECT_THROW(ws.split("holdout"), ValidationError);
}

TEST(Cli, EndToEndAndExitCodes) {
#ifndef MMFUSE_CLI
  GTEST_SKIP() << "built without the command-line tool";
#else
  const auto dir = scratch("cli");
  const auto cfg = dir / "tiny.json";
  std::ofstream(cfg) << tiny(dir / "runs").dump(2);
  const auto log = dir / "log.txt";
  const std::string c = "-c " + cfg.string() + " ";

  EXPECT_EQ(run_cli("--help", log), 0);
  EXPECT_EQ(run_cli("", log), 2);
  EXPECT_EQ(run_cli("train", log), 2) << slurp(log);
  EXPECT_EQ(run_cli(c + "train --stage middle", log), 2) << slurp(log);
  EXPECT_EQ(run_cli(c + "--set fusion.fusion_dimm=3 prep", log), 2) << slurp(log);
  EXPECT_NE(slurp(log).find("fusion.fusion_dimm"), std::string::npos);
  EXPECT_EQ(run_cli(c + "eval early", log), 2) << slurp(log);

  ASSERT_EQ(run_cli(c + "prep", log), 0) << slurp(log);
  EXPECT_EQ(run_cli(c + "train --stage late", log), 2) << slurp(log);
  for (const char* stage : {"text_base", "cnn_base", "late", "early"})
    ASSERT_EQ(run_cli(c + "train --stage " + stage, log), 0) << stage << ": " << slurp(log);
  EXPECT_EQ(run_cli(c + "train --stage early", log), 0);
  EXPECT_NE(slurp(log).find("skipped"), std::string::npos);
  ASSERT_EQ(run_cli(c + "eval --all", log), 0) << slurp(log);
  ASSERT_EQ(run_cli(c + "export late early", log), 0) << slurp(log);
  ASSERT_EQ(run_cli(c + "bench late early", log), 0) << slurp(log);
  ASSERT_EQ(run_cli(c + "bench --target exchange late early", log), 0) << slurp(log);
  ASSERT_EQ(run_cli(c + "compare-runtimes in_process exchange_runtime --out " + (dir / "cmp.json").string(), log), 0)
      << slurp(log);
  EXPECT_NE(slurp(log).find("ordering agreement"), std::string::npos);
  EXPECT_EQ(run_cli(c + "compare-runtimes in_process optimized_runtime", log), 2) << slurp(log);
  EXPECT_EQ(run_cli(c + "compare-runtimes in_process tensorrt", log), 2) << slurp(log);
  ASSERT_EQ(run_cli(c + "ablate", log), 0) << slurp(log);
  ASSERT_EQ(run_cli(c + "report", log), 0) << slurp(log);

  Workspace ws(resolve_config(tiny(dir / "runs")));
  EXPECT_TRUE(fs::exists(ws.dir("export") / "late.meta.json"));
  EXPECT_TRUE(fs::exists(ws.dir("latency") / "early.exchange_runtime.json"));
  EXPECT_TRUE(fs::exists(ws.dir("ablation") / "ablation.csv"));
  const auto tables = slurp(ws.dir("report") / "tables.md");
  EXPECT_NE(tables.find("Latency runtime: exchange_runtime"), std::string::npos);
  EXPECT_NE(tables.find("Late Fusion"), std::string::npos);
  EXPECT_NE(tables.find("BERT"), std::string::npos);
  const auto cmp = nlohmann::json::parse(slurp(dir / "cmp.json"));
  EXPECT_EQ(cmp["rows"].size(), 2u);

  // Runner reports are validated before they enter the workspace.
  auto bad = nlohmann::json::parse(slurp(ws.dir("latency") / "late.in_process.json"));
  bad.erase("p95_ms");
  std::ofstream(dir / "bad.json") << bad.dump();
  EXPECT_EQ(run_cli(c + "bench --ingest " + (dir / "bad.json").string(), log), 3) << slurp(log);
  bad = nlohmann::json::parse(slurp(ws.dir("latency") / "late.in_process.json"));
  bad["runtime"] = "optimized_runtime";
  std::ofstream(dir / "good.json") << bad.dump();
  EXPECT_EQ(run_cli(c + "bench --ingest " + (dir / "good.json").string(), log), 0) << slurp(log);
  EXPECT_TRUE(fs::exists(ws.dir("latency") / "late.optimized_runtime.json"));
#endif
}

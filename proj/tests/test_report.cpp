#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <regex>

#include "mmfuse/ablation.hpp"
#include "mmfuse/report.hpp"

using namespace mmfuse;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / ("mmfuse_report_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::size_t count(const std::string& text, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + 1)) ++n;
  return n;
}

MetricsRecord metric(const std::string& name, const std::string& strategy, double acc, const std::string& vision = "M") {
  MetricsRecord m;
  m.model_name = name;
  m.strategy = strategy;
  m.vision = vision;
  m.modality = modality_tag(parse_strategy(strategy));
  m.binary_accuracy = acc;
  m.samples = 77;
  return m;
}

LatencyReport latency(const std::string& name, const std::string& strategy, double mean, const std::string& runtime = "in_process") {
  LatencyReport r;
  r.model_name = name;
  r.strategy = strategy;
  r.runtime = runtime;
  r.warmup_iters = 50;
  r.timed_iters = 200;
  r.mean_ms = mean;
  r.median_ms = mean * 0.98;
  r.p95_ms = mean * 1.1;
  return r;
}

std::vector<MetricsRecord> three_metrics() {
  return {metric("late", "late", 0.8425), metric("intermediate", "intermediate", 0.8032), metric("early", "early", 0.7654)};
}

std::vector<LatencyReport> three_latencies() {
  return {latency("late", "late", 26.41), latency("intermediate", "intermediate", 21.83), latency("early", "early", 16.06)};
}

}  // namespace

TEST(Tradeoff, JoinPairsMetricsWithEachRuntime) {
  auto lat = three_latencies();
  lat.push_back(latency("late", "late", 9.0, "exchange_runtime"));
  const auto rec = join_tradeoff(three_metrics(), lat);
  EXPECT_EQ(rec.size(), 4u);
  auto lone = join_tradeoff({metric("text_base", "text_only", 0.7)}, lat);
  ASSERT_EQ(lone.size(), 1u);
  EXPECT_FALSE(lone[0].mean_ms.has_value());
  EXPECT_TRUE(lone[0].runtime.empty());
}

TEST(Tradeoff, CsvReingestGivesIdenticalPlot) {
  const auto dir = scratch("reingest");
  const auto metrics = three_metrics();
  const auto out = emit_tradeoff(join_tradeoff(metrics, three_latencies()), metrics, dir);
  const auto csv = slurp(out.csv);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "model,strategy,accuracy,mean_ms,runtime");
  const auto reparsed = parse_tradeoff_csv(csv);
  EXPECT_EQ(tradeoff_csv(reparsed), csv);
  EXPECT_EQ(render_scatter_svg(reparsed), slurp(out.plot));
  EXPECT_TRUE(out.warnings.empty());
}

TEST(Tradeoff, OnePointPerRecordWithLatency) {
  auto rec = join_tradeoff(three_metrics(), three_latencies());
  const auto svg = render_scatter_svg(rec);
  EXPECT_EQ(count(svg, "<circle"), 3u);
  EXPECT_NE(svg.find("Latency (ms)"), std::string::npos);
  EXPECT_NE(svg.find("Accuracy (%)"), std::string::npos);
  rec.push_back({"text_base", "text_only", 0.7, std::nullopt, "", "M"});
  EXPECT_EQ(count(render_scatter_svg(rec), "<circle"), 3u);
  EXPECT_EQ(render_scatter_svg(rec), render_scatter_svg(rec));
}

TEST(Tradeoff, EmptyInputIsAnError) {
  EXPECT_THROW(emit_tradeoff({}, {}, scratch("empty")), ValidationError);
}

TEST(Tradeoff, AccuracyOnlyDropsLatencyColumnsAndWarns) {
  const auto dir = scratch("acc_only");
  const auto metrics = three_metrics();
  const auto out = emit_tradeoff(join_tradeoff(metrics, {}), metrics, dir);
  ASSERT_EQ(out.warnings.size(), 1u);
  EXPECT_NE(out.warnings[0].find("latency"), std::string::npos);
  const auto md = slurp(out.tables);
  EXPECT_EQ(md.find("Latency (ms)"), std::string::npos);
  EXPECT_NE(md.find("| Model | Accuracy (%) |"), std::string::npos);
  EXPECT_EQ(count(slurp(out.plot), "<circle"), 0u);
}

TEST(Tradeoff, MalformedCsvRejected) {
  EXPECT_THROW(parse_tradeoff_csv("name,acc\nlate,0.8\n"), FormatError);
  EXPECT_THROW(parse_tradeoff_csv("model,strategy,accuracy,mean_ms,runtime\nlate,late,0.8\n"), FormatError);
}

TEST(Tables, FusedLatencyTableHeadersAndRows) {
  auto lat = three_latencies();
  auto rec = join_tradeoff(three_metrics(), lat);
  auto vit = join_tradeoff({metric("late", "late", 0.83, "V")}, {latency("late", "late", 40.0)});
  rec.insert(rec.end(), vit.begin(), vit.end());
  const auto t = fused_latency_table(table_view(rec));
  EXPECT_EQ(t.substr(0, t.find('\n')), "| Model | Latency (ms) (M) | Latency (ms) (V) |");
  EXPECT_NE(t.find("| Late Fusion | 26.410 | 40.000 |"), std::string::npos);
  EXPECT_NE(t.find("| Inter. Fusion | 21.830 | - |"), std::string::npos);
  EXPECT_NE(t.find("| Early Fusion | 16.060 | - |"), std::string::npos);
  EXPECT_LT(t.find("Late Fusion"), t.find("Inter. Fusion"));
  EXPECT_LT(t.find("Inter. Fusion"), t.find("Early Fusion"));
}

TEST(Tables, AccuracyTableColumnsAndOrder) {
  auto m = three_metrics();
  m.push_back(metric("text_base", "text_only", 0.7245));
  m.push_back(metric("cnn_base", "vision_only", 0.5541));
  m.push_back(metric("cnn_base", "vision_only", 0.5612, "V"));
  m.push_back(metric("late", "late", 0.83, "V"));
  const auto t = accuracy_table(m);
  EXPECT_EQ(t.substr(0, t.find('\n')), "| Model | Modality | BA (%) (M) | BA (%) (V) |");
  EXPECT_NE(t.find("| MobileNetV2 | V | 55.41 | - |"), std::string::npos);
  EXPECT_NE(t.find("| ViT | V | - | 56.12 |"), std::string::npos);
  EXPECT_NE(t.find("| BERT | T | 72.45 | - |"), std::string::npos);
  EXPECT_NE(t.find("| Late Fusion | T + V | 84.25 | 83.00 |"), std::string::npos);
  EXPECT_LT(t.find("MobileNetV2"), t.find("BERT"));
  EXPECT_LT(t.find("BERT"), t.find("Late Fusion"));
}

TEST(Tables, LatencyTableSortedByDecreasingLatency) {
  const auto t = latency_table(table_view(join_tradeoff(three_metrics(), three_latencies())));
  EXPECT_EQ(t.substr(0, t.find('\n')), "| Model | Accuracy (%) | Latency (ms) (M) |");
  EXPECT_NE(t.find("| Late Fusion | 84.25 | 26.410 |"), std::string::npos);
  EXPECT_LT(t.find("Late Fusion"), t.find("Inter. Fusion"));
  EXPECT_LT(t.find("Inter. Fusion"), t.find("Early Fusion"));
}

TEST(Tables, OneRuntimeForEveryRow) {
  auto lat = three_latencies();
  lat.push_back(latency("late", "late", 9.0, "exchange_runtime"));
  const auto view = table_view(join_tradeoff(three_metrics(), lat));
  ASSERT_EQ(view.size(), 3u);
  EXPECT_EQ(table_runtime(join_tradeoff(three_metrics(), lat)), "exchange_runtime");
  for (const auto& r : view) {
    if (r.model_name == "late") {
      EXPECT_EQ(r.runtime, "exchange_runtime");
      EXPECT_DOUBLE_EQ(*r.mean_ms, 9.0);
    } else {
      EXPECT_FALSE(r.mean_ms.has_value()) << r.model_name;
    }
  }
  const auto t = latency_table(view);
  EXPECT_NE(t.find("| Early Fusion | 76.54 | - |"), std::string::npos);
}

TEST(Tables, AblationCellsGetDistinctRows) {
  auto m = three_metrics();
  m.push_back(metric("early_b2", "early", 0.70));
  const auto t = accuracy_table(m);
  EXPECT_NE(t.find("| Early Fusion | T + V | 76.54 | - |"), std::string::npos);
  EXPECT_NE(t.find("| Early Fusion (early_b2) | T + V | 70.00 | - |"), std::string::npos);
  EXPECT_EQ(row_label("cnn_base", "vision_only", "V"), "ViT");
  EXPECT_EQ(row_label("text_base", "text_only", "M"), "BERT");
}

TEST(Metrics, RecordJsonRoundTripAndRange) {
  auto m = metric("late", "late", 0.8);
  m.f1 = 0.75;
  const auto back = nlohmann::json(m).get<MetricsRecord>();
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(m));
  auto j = nlohmann::json(m);
  j["binary_accuracy"] = 1.5;
  EXPECT_THROW(j.get<MetricsRecord>(), ValidationError);
}

TEST(Compare, IdenticalReportsHaveZeroDeltas) {
  const auto a = three_latencies();
  const auto c = compare_reports(a, a);
  ASSERT_EQ(c.rows.size(), 3u);
  for (const auto& r : c.rows) {
    EXPECT_DOUBLE_EQ(r.mean_delta(), 0.0);
    EXPECT_DOUBLE_EQ(r.median_delta(), 0.0);
  }
  EXPECT_TRUE(c.ordering_agreement);
  EXPECT_TRUE(c.warnings.empty());
  EXPECT_NE(compare_markdown(c, "a", "b").find("ordering agreement: true"), std::string::npos);
  EXPECT_EQ(to_json(c)["ordering_agreement"], true);
}

TEST(Compare, DisjointReportsWarn) {
  const auto c = compare_reports(three_latencies(), {latency("text_base", "text_only", 3.0)});
  EXPECT_TRUE(c.rows.empty());
  ASSERT_EQ(c.warnings.size(), 1u);
  EXPECT_FALSE(c.ordering_agreement);
}

TEST(Compare, DeltasAndOrderingDisagreement) {
  auto b = three_latencies();
  b[0].mean_ms = 10.0;  // late becomes fastest
  const auto c = compare_reports(three_latencies(), b);
  EXPECT_FALSE(c.ordering_agreement);
  for (const auto& r : c.rows)
    if (r.model_name == "late") { EXPECT_NEAR(r.mean_delta(), 10.0 - 26.41, 1e-12); }

  auto partial = three_latencies();
  partial.pop_back();
  const auto p = compare_reports(three_latencies(), partial);
  EXPECT_EQ(p.rows.size(), 2u);
  EXPECT_EQ(p.warnings.size(), 1u);
  EXPECT_TRUE(p.ordering_agreement);
}

TEST(Ablation, SelectionPrefersFewerBlocksOnTies) {
  EXPECT_EQ(select_blocks({{2, 0.7}, {4, 0.8}, {6, 0.8}, {8, 0.6}}), 4u);
  EXPECT_EQ(select_blocks({{8, 0.7}, {2, 0.7}}), 2u);
  EXPECT_FALSE(select_blocks({}).has_value());
  AblationResult r;
  r.rows = {{2, 0.5}, {4, 0.8125}};
  r.selected_blocks = 4;
  EXPECT_EQ(ablation_csv(r), "blocks,accuracy\n2,50.00\n4,81.25\n");
  const auto t = ablation_table(r);
  EXPECT_EQ(t.substr(0, t.find('\n')), "| # of Attn. Blocks | Accuracy (%) |");
  EXPECT_NE(t.find("| 4 | 81.25 |"), std::string::npos);
}

TEST(Ablation, SingletonGridAndFailingCell) {
  ModelConfig cfg;
  cfg.text.num_layers = 2;
  cfg.text.hidden_dim = 16;
  cfg.text.num_heads = 2;
  cfg.text.ff_dim = 32;
  cfg.text.max_seq_len = 16;
  cfg.cnn.num_bottlenecks = 3;
  cfg.cnn.input_resolution = 16;
  cfg.fusion.cut_layer = 2;
  cfg.fusion.fusion_dim = 8;
  cfg.fusion.attention_heads = 2;
  SynthConfig sc;
  sc.max_seq_len = 16;
  sc.resolution = 16;
  const auto data = synth_dataset(24, 3, sc);
  const std::vector<Sample> train(data.begin(), data.begin() + 16), test(data.begin() + 16, data.end());
  auto recipe = recipe_for(Stage::early, Scale::toy);
  recipe.epochs = 1;
  recipe.batch_size = 8;

  const auto dir = scratch("ablation");
  const auto r = run_ablation(cfg, {1}, train, {}, test, recipe, {dir, {}});
  ASSERT_EQ(r.rows.size(), 1u);
  EXPECT_EQ(r.selected_blocks, 1u);
  EXPECT_TRUE(std::regex_match(slurp(dir / "ablation.csv"), std::regex("blocks,accuracy\n1,[0-9]+\\.[0-9]{2}\n")));
  EXPECT_TRUE(fs::exists(dir / "early_b1.ckpt"));

  const auto again = run_ablation(cfg, {1}, train, {}, test, recipe, {dir, {}});
  EXPECT_DOUBLE_EQ(again.rows[0].accuracy, r.rows[0].accuracy);

  const auto mixed = run_ablation(cfg, {0, 1}, train, {}, test, recipe);
  EXPECT_EQ(mixed.rows.size(), 1u);
  ASSERT_EQ(mixed.errors.size(), 1u);
  EXPECT_NE(mixed.errors[0].find("early_b0"), std::string::npos);
  EXPECT_THROW(run_ablation(cfg, {}, train, {}, test, recipe), ValidationError);
}

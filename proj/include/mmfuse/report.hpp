#pragma once

// Metrics and trade-off records, the accuracy-vs-latency outputs (CSV, SVG
// scatter, Markdown tables) and cross-runtime latency comparison.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmfuse/errors.hpp"
#include "mmfuse/fusion.hpp"
#include "mmfuse/latency.hpp"

namespace mmfuse {

struct MetricsRecord {
  std::string model_name;
  std::string strategy;
  std::string vision = "M";  // M (MobileNetV2-style) or V (ViT)
  std::string modality;      // V, T or T+V
  double binary_accuracy = 0.0;
  std::optional<double> f1;
  std::size_t samples = 0;
};

inline void to_json(nlohmann::json& j, const MetricsRecord& r) {
  j = {{"model_name", r.model_name}, {"strategy", r.strategy}, {"vision", r.vision}, {"modality", r.modality},
       {"binary_accuracy", r.binary_accuracy}, {"samples", r.samples}};
  j["f1"] = r.f1 ? nlohmann::json(*r.f1) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, MetricsRecord& r) {
  r.model_name = j.at("model_name").get<std::string>();
  r.strategy = j.at("strategy").get<std::string>();
  r.vision = j.value("vision", "M");
  r.modality = j.value("modality", modality_tag(parse_strategy(r.strategy)));
  r.binary_accuracy = j.at("binary_accuracy").get<double>();
  r.samples = j.value("samples", std::size_t{0});
  if (j.contains("f1") && !j["f1"].is_null()) r.f1 = j["f1"].get<double>();
  if (!(r.binary_accuracy >= 0.0 && r.binary_accuracy <= 1.0)) throw ValidationError(r.model_name + ": accuracy outside [0,1]");
  if (r.f1 && !(*r.f1 >= 0.0 && *r.f1 <= 1.0)) throw ValidationError(r.model_name + ": f1 outside [0,1]");
}

struct TradeoffRecord {
  std::string model_name;
  std::string strategy;
  double binary_accuracy = 0.0;
  std::optional<double> mean_ms;  // absent when no latency report exists
  std::string runtime;            // empty when mean_ms is absent
  std::string vision = "M";
};

/// Row label in the paper's tables ("Late Fusion", "BERT", "MobileNetV2", ...).
inline std::string display_name(const std::string& strategy, const std::string& vision) {
  const auto s = parse_strategy(strategy);
  switch (s) {
    case Strategy::late: return "Late Fusion";
    case Strategy::intermediate: return "Inter. Fusion";
    case Strategy::early: return "Early Fusion";
    case Strategy::text_only: return "BERT";
    case Strategy::vision_only: return vision == "V" ? "ViT" : "MobileNetV2";
  }
  return strategy;
}

/// Joins metrics with latency reports of one runtime by model name.
inline std::vector<TradeoffRecord> join_tradeoff(const std::vector<MetricsRecord>& metrics,
                                                 const std::vector<LatencyReport>& latency) {
  std::vector<TradeoffRecord> out;
  for (const auto& m : metrics) {
    bool any = false;
    for (const auto& l : latency) {
      if (l.model_name != m.model_name) continue;
      out.push_back({m.model_name, m.strategy, m.binary_accuracy, l.mean_ms, l.runtime, m.vision});
      any = true;
    }
    if (!any) out.push_back({m.model_name, m.strategy, m.binary_accuracy, std::nullopt, "", m.vision});
  }
  return out;
}

// ------------------------------------------------------------------- CSV

inline std::string fmt(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

inline std::string tradeoff_csv(const std::vector<TradeoffRecord>& records) {
  std::string s = "model,strategy,accuracy,mean_ms,runtime\n";
  for (const auto& r : records)
    s += r.model_name + "," + r.strategy + "," + fmt(r.binary_accuracy, 6) + "," + (r.mean_ms ? fmt(*r.mean_ms, 6) : "") +
         "," + r.runtime + "\n";
  return s;
}

inline std::vector<TradeoffRecord> parse_tradeoff_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "model,strategy,accuracy,mean_ms,runtime")
    throw FormatError("trade-off CSV: unexpected header '" + line + "'");
  std::vector<TradeoffRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != 5) throw FormatError("trade-off CSV: expected 5 fields in '" + line + "'");
    TradeoffRecord r;
    r.model_name = f[0];
    r.strategy = f[1];
    r.binary_accuracy = std::stod(f[2]);
    if (!f[3].empty()) r.mean_ms = std::stod(f[3]);
    r.runtime = f[4];
    out.push_back(r);
  }
  return out;
}

// ------------------------------------------------------------------- SVG

/// Accuracy (%) on the vertical axis against mean latency (ms) on the
/// horizontal axis; records without latency are not drawn. Pure function of
/// the records, so re-rendering a re-ingested CSV is byte-identical.
inline std::string render_scatter_svg(const std::vector<TradeoffRecord>& records) {
  std::vector<const TradeoffRecord*> pts;
  for (const auto& r : records)
    if (r.mean_ms) pts.push_back(&r);
  const double W = 640, H = 440, L = 70, R = 30, T = 40, B = 60;
  double xmax = 1.0, ymin = 100.0, ymax = 0.0;
  for (auto* p : pts) {
    xmax = std::max(xmax, *p->mean_ms);
    ymin = std::min(ymin, 100.0 * p->binary_accuracy);
    ymax = std::max(ymax, 100.0 * p->binary_accuracy);
  }
  if (pts.empty()) ymin = 0.0, ymax = 100.0;
  xmax *= 1.15;
  ymin = std::max(0.0, std::floor(ymin / 5.0) * 5.0 - 5.0);
  ymax = std::min(100.0, std::ceil(ymax / 5.0) * 5.0 + 5.0);
  if (ymax <= ymin) ymax = ymin + 10.0;
  auto px = [&](double ms) { return L + (W - L - R) * ms / xmax; };
  auto py = [&](double acc) { return H - B - (H - T - B) * (acc - ymin) / (ymax - ymin); };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">Accuracy vs. Inference Latency</text>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 5; ++k) {
    const double ms = xmax * k / 5.0, acc = ymin + (ymax - ymin) * k / 5.0;
    s << "<text x=\"" << fmt(px(ms), 1) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">" << fmt(ms, 2) << "</text>\n";
    s << "<text x=\"" << L - 8 << "\" y=\"" << fmt(py(acc) + 4, 1) << "\" text-anchor=\"end\">" << fmt(acc, 1) << "</text>\n";
  }
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 18 << "\" text-anchor=\"middle\">Latency (ms)</text>\n";
  s << "<text x=\"18\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 " << (T + H - B) / 2
    << ")\">Accuracy (%)</text>\n";
  std::set<std::string> runtimes;
  for (auto* p : pts) runtimes.insert(p->runtime);
  for (auto* p : pts) {
    const double x = px(*p->mean_ms), y = py(100.0 * p->binary_accuracy);
    const auto label = runtimes.size() > 1 ? p->model_name + " (" + p->runtime + ")" : p->model_name;
    s << "<circle cx=\"" << fmt(x, 1) << "\" cy=\"" << fmt(y, 1) << "\" r=\"5\" fill=\"#1f5fa8\"/>\n";
    s << "<text x=\"" << fmt(x + 8, 1) << "\" y=\"" << fmt(y - 8, 1) << "\">" << label << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

// -------------------------------------------------------------- Markdown

namespace detail {
inline int table_rank(const std::string& strategy, const std::string& vision) {
  switch (parse_strategy(strategy)) {
    case Strategy::vision_only: return vision == "V" ? 1 : 0;
    case Strategy::text_only: return 2;
    case Strategy::late: return 3;
    case Strategy::intermediate: return 4;
    case Strategy::early: return 5;
  }
  return 6;
}

inline std::string pct(double fraction) { return fmt(100.0 * fraction, 2); }
}  // namespace detail

/// Table row label: the display name, plus the checkpoint name when it is not
/// the canonical one for its strategy (ablation cells such as early_b2).
inline std::string row_label(const std::string& model_name, const std::string& strategy, const std::string& vision) {
  static const std::map<std::string, std::string> canonical{{"late", "late"},           {"intermediate", "intermediate"},
                                                            {"early", "early"},         {"text_only", "text_base"},
                                                            {"vision_only", "cnn_base"}};
  const auto name = display_name(strategy, vision);
  const auto it = canonical.find(strategy);
  return it != canonical.end() && it->second == model_name ? name : name + " (" + model_name + ")";
}

namespace detail {
struct RowKey {
  int rank;
  std::string label;
  bool operator<(const RowKey& o) const { return rank != o.rank ? rank < o.rank : label < o.label; }
};
}  // namespace detail

/// Model | Modality | BA (%) (M) | BA (%) (V)
inline std::string accuracy_table(const std::vector<MetricsRecord>& metrics) {
  std::map<detail::RowKey, std::map<std::string, double>> rows;  // vision tag -> accuracy
  std::map<std::string, std::string> modality;
  for (const auto& m : metrics) {
    // The vision tag has its own column, so the label ignores it for fused rows.
    const auto label = row_label(m.model_name, m.strategy, m.strategy == "vision_only" ? m.vision : "M");
    rows[{detail::table_rank(m.strategy, m.vision), label}][m.vision] = m.binary_accuracy;
    modality[label] = m.modality == "T+V" ? "T + V" : m.modality;
  }
  std::string s = "| Model | Modality | BA (%) (M) | BA (%) (V) |\n|---|---|---|---|\n";
  for (const auto& [key, acc] : rows) {
    auto cell = [&](const char* v) { return acc.count(v) ? detail::pct(acc.at(v)) : std::string("-"); };
    s += "| " + key.label + " | " + modality[key.label] + " | " + cell("M") + " | " + cell("V") + " |\n";
  }
  return s;
}

/// Model | Accuracy (%) | Latency (ms) (M), MobileNetV2-side models by
/// decreasing latency. Without latency the latency column is dropped.
inline std::string latency_table(const std::vector<TradeoffRecord>& records) {
  std::vector<const TradeoffRecord*> rows;
  bool have_latency = false;
  for (const auto& r : records)
    if (r.vision == "M") {
      rows.push_back(&r);
      have_latency = have_latency || r.mean_ms.has_value();
    }
  std::stable_sort(rows.begin(), rows.end(), [&](auto* a, auto* b) {
    if (have_latency) return a->mean_ms.value_or(-1.0) > b->mean_ms.value_or(-1.0);
    return detail::table_rank(a->strategy, a->vision) < detail::table_rank(b->strategy, b->vision);
  });
  std::string s = have_latency ? "| Model | Accuracy (%) | Latency (ms) (M) |\n|---|---|---|\n" : "| Model | Accuracy (%) |\n|---|---|\n";
  for (auto* r : rows) {
    s += "| " + row_label(r->model_name, r->strategy, r->vision) + " | " + detail::pct(r->binary_accuracy);
    if (have_latency) s += " | " + (r->mean_ms ? fmt(*r->mean_ms, 3) : std::string("-"));
    s += " |\n";
  }
  return s;
}

/// Model | Latency (ms) (M) | Latency (ms) (V) for the fused strategies.
inline std::string fused_latency_table(const std::vector<TradeoffRecord>& records) {
  std::map<detail::RowKey, std::map<std::string, double>> rows;
  for (const auto& r : records) {
    const auto s = parse_strategy(r.strategy);
    if (!is_fused(s) || !r.mean_ms) continue;
    rows[{detail::table_rank(r.strategy, r.vision), row_label(r.model_name, r.strategy, "M")}][r.vision] = *r.mean_ms;
  }
  std::string s = "| Model | Latency (ms) (M) | Latency (ms) (V) |\n|---|---|---|\n";
  for (const auto& [key, lat] : rows) {
    auto cell = [&](const char* v) { return lat.count(v) ? fmt(lat.at(v), 3) : std::string("-"); };
    s += "| " + key.label + " | " + cell("M") + " | " + cell("V") + " |\n";
  }
  return s;
}

/// Runtime the tables report: the first of exchange_runtime, in_process,
/// optimized_runtime with any record; empty when no latency exists.
inline std::string table_runtime(const std::vector<TradeoffRecord>& records) {
  for (const char* rt : {"exchange_runtime", "in_process", "optimized_runtime"})
    for (const auto& r : records)
      if (r.runtime == rt) return rt;
  return "";
}

/// One record per (model, vision) for the tables, all from table_runtime();
/// models without a report in that runtime keep their accuracy and show no latency.
inline std::vector<TradeoffRecord> table_view(const std::vector<TradeoffRecord>& records) {
  const auto runtime = table_runtime(records);
  std::vector<TradeoffRecord> out;
  std::map<std::pair<std::string, std::string>, std::size_t> at;
  for (const auto& r : records) {
    const auto key = std::make_pair(r.model_name, r.vision);
    auto it = at.find(key);
    if (it == at.end()) {
      at[key] = out.size();
      out.push_back(r);
      if (r.runtime != runtime) {
        out.back().mean_ms.reset();
        out.back().runtime.clear();
      }
    } else if (r.runtime == runtime) {
      out[it->second] = r;
    }
  }
  return out;
}

struct TradeoffOutputs {
  std::filesystem::path csv, plot, tables;
  std::vector<std::string> warnings;
};

/// Writes tradeoff.csv, tradeoff.svg and tables.md into `out_dir`.
inline TradeoffOutputs emit_tradeoff(const std::vector<TradeoffRecord>& records, const std::vector<MetricsRecord>& metrics,
                                     const std::filesystem::path& out_dir) {
  if (records.empty()) throw ValidationError("emit_tradeoff: no records (run `mmfuse eval` first)");
  std::filesystem::create_directories(out_dir);
  TradeoffOutputs o;
  o.csv = out_dir / "tradeoff.csv";
  o.plot = out_dir / "tradeoff.svg";
  o.tables = out_dir / "tables.md";
  const auto csv = tradeoff_csv(records);
  std::ofstream(o.csv, std::ios::binary) << csv;
  // Render from the CSV text so the plot depends only on what was written.
  std::ofstream(o.plot, std::ios::binary) << render_scatter_svg(parse_tradeoff_csv(csv));

  const bool any_latency = std::any_of(records.begin(), records.end(), [](const auto& r) { return r.mean_ms.has_value(); });
  if (!any_latency) o.warnings.push_back("no latency reports found; tables omit latency columns (run `mmfuse bench`)");
  const auto view = table_view(records);
  const auto runtime = table_runtime(records);
  std::string md = "## Accuracy\n\n" + accuracy_table(metrics) + "\n## Accuracy and latency\n\n";
  if (any_latency) md += "Latency runtime: " + runtime + "\n\n";
  md += latency_table(view);
  if (any_latency) md += "\n## Fused-model latency\n\n" + fused_latency_table(view);
  std::ofstream(o.tables, std::ios::binary) << md;
  return o;
}

// ------------------------------------------------------------ comparison

struct CompareRow {
  std::string model_name;
  double mean_a = 0, mean_b = 0, median_a = 0, median_b = 0;
  double mean_delta() const { return mean_b - mean_a; }
  double median_delta() const { return median_b - median_a; }
};

struct CompareResult {
  std::vector<CompareRow> rows;
  bool ordering_agreement = false;
  std::vector<std::string> warnings;
};

/// Per-model mean/median deltas (b - a) over the models both sides report,
/// and whether ranking those models by mean latency gives the same order.
inline CompareResult compare_reports(const std::vector<LatencyReport>& a, const std::vector<LatencyReport>& b) {
  std::map<std::string, const LatencyReport*> ia, ib;
  for (const auto& r : a) ia[r.model_name] = &r;
  for (const auto& r : b) ib[r.model_name] = &r;
  CompareResult out;
  for (const auto& [name, ra] : ia) {
    auto it = ib.find(name);
    if (it == ib.end()) continue;
    out.rows.push_back({name, ra->mean_ms, it->second->mean_ms, ra->median_ms, it->second->median_ms});
  }
  if (out.rows.empty()) {
    out.warnings.push_back("reports share no model names; nothing to compare");
    return out;
  }
  if (out.rows.size() < ia.size() || out.rows.size() < ib.size())
    out.warnings.push_back("only " + std::to_string(out.rows.size()) + " model(s) appear in both report sets");
  auto order = [&](bool first) {
    std::vector<std::string> names;
    for (const auto& r : out.rows) names.push_back(r.model_name);
    std::stable_sort(names.begin(), names.end(), [&](const auto& x, const auto& y) {
      const auto& m = first ? ia : ib;
      return m.at(x)->mean_ms < m.at(y)->mean_ms;
    });
    return names;
  };
  out.ordering_agreement = order(true) == order(false);
  return out;
}

inline std::string compare_markdown(const CompareResult& c, const std::string& label_a, const std::string& label_b) {
  std::string s = "| Model | mean (" + label_a + ") | mean (" + label_b + ") | delta mean | median (" + label_a + ") | median (" +
                  label_b + ") | delta median |\n|---|---|---|---|---|---|---|\n";
  for (const auto& r : c.rows)
    s += "| " + r.model_name + " | " + fmt(r.mean_a, 3) + " | " + fmt(r.mean_b, 3) + " | " + fmt(r.mean_delta(), 3) + " | " +
         fmt(r.median_a, 3) + " | " + fmt(r.median_b, 3) + " | " + fmt(r.median_delta(), 3) + " |\n";
  s += std::string("\nordering agreement: ") + (c.ordering_agreement ? "true" : "false") + "\n";
  return s;
}

inline nlohmann::json to_json(const CompareResult& c) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : c.rows)
    rows.push_back({{"model_name", r.model_name}, {"mean_a", r.mean_a}, {"mean_b", r.mean_b}, {"mean_delta", r.mean_delta()},
                    {"median_a", r.median_a}, {"median_b", r.median_b}, {"median_delta", r.median_delta()}});
  return {{"rows", rows}, {"ordering_agreement", c.ordering_agreement}, {"warnings", c.warnings}};
}

}  // namespace mmfuse

// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Usage: mmfuse_acceptance [work_dir]

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <regex>
#include <set>
#include <sstream>

#include "gradcheck.hpp"
#include "mmfuse/flops.hpp"
#include "mmfuse/pipeline.hpp"

using namespace mmfuse;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string num(double v, int digits = 4) {
  std::ostringstream o;
  o.precision(digits);
  o << v;
  return o.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

int failures = 0;

void report(const std::string& name, const std::function<Outcome()>& check) {
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  failures += !o.pass;
  std::cout << (o.pass ? "PASS" : "FAIL") << "  " << name << ": " << o.detail << std::endl;
}

/// Appends a runtime budget verdict to `o`.
Outcome within(Outcome o, double secs, double budget) {
  o.detail += " [" + num(secs, 3) + " s, budget " + num(budget, 4) + " s]";
  o.pass = o.pass && secs < budget;
  return o;
}

std::set<std::size_t> indices(FusedModel<float>& m, const std::string& prefix) {
  std::set<std::size_t> out;
  const std::regex re("^" + prefix + "([0-9]+)\\..*");
  auto reg = m.registry();
  for (const auto& p : reg.params()) {
    std::smatch mt;
    if (std::regex_match(p.name, mt, re)) out.insert(std::stoul(mt[1]));
  }
  return out;
}

bool has_prefix(FusedModel<float>& m, const std::string& prefix) {
  auto reg = m.registry();
  for (const auto& p : reg.params())
    if (p.name.rfind(prefix, 0) == 0) return true;
  return false;
}

std::set<std::size_t> range(std::size_t a, std::size_t b) {
  std::set<std::size_t> s;
  for (std::size_t i = a; i <= b; ++i) s.insert(i);
  return s;
}

ModelConfig toy(Strategy s) {
  ModelConfig cfg;
  cfg.fusion.strategy = s;
  return cfg;
}

// ------------------------------------------------------------------ criteria

Outcome freezing() {
  const auto t0 = Clock::now();
  auto m = build_model<float>(toy(Strategy::late));
  auto reg = m->registry();
  std::map<std::string, std::vector<float>> before;
  for (const auto& p : reg.params()) before[p.name] = p.var.value().vec();
  for (const auto& b : reg.buffers()) before[b.name] = b.tensor->vec();

  auto recipe = recipe_for(Stage::late, Scale::toy);
  recipe.epochs = 5;
  const auto r = train(*m, synth_dataset(64, 7), {}, recipe);

  std::size_t backbone = 0, moved = 0, head_changed = 0;
  for (const auto& p : reg.params()) {
    const bool same = p.var.value().vec() == before[p.name];
    if (ParamRegistry<float>::group_of(p.name) == "head") {
      head_changed += !same;
    } else {
      ++backbone;
      moved += !same;
    }
  }
  for (const auto& b : reg.buffers()) {
    ++backbone;
    moved += b.tensor->vec() != before[b.name];
  }
  Outcome o;
  o.pass = !r.diverged && r.history.size() == 5 && moved == 0 && head_changed > 0;
  o.detail = std::to_string(moved) + "/" + std::to_string(backbone) + " backbone tensors changed, " +
             std::to_string(head_changed) + " head tensors changed after " + std::to_string(r.history.size()) + " epochs";
  return within(o, seconds_since(t0), 120);
}

Outcome architecture() {
  std::vector<std::string> problems;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) problems.push_back(what);
  };
  auto inter = build_model<float>(toy(Strategy::intermediate));
  expect(indices(*inter, "text\\.layer") == range(1, 8), "intermediate text layers != 1..8");
  expect(indices(*inter, "vision\\.bottleneck") == range(1, 8), "intermediate vision layers != 1..8");
  const auto w = inter->tap_wiring();
  expect(w.size() == 3 && w[0].layer == 4 && w[1].layer == 7 && w[2].layer == 8, "taps != {4,7,8}");
  if (w.size() == 3)
    expect(w[0].path == TapPath::linear && w[1].path == TapPath::linear && w[2].path == TapPath::attention,
           "tap paths != linear, linear, attention");
  expect(has_prefix(*inter, "fusion.tap4.join") && has_prefix(*inter, "fusion.tap7.join") &&
             has_prefix(*inter, "fusion.tap8.block"),
         "tap parameters missing");
  expect(!has_prefix(*inter, "fusion.tap4.block") && !has_prefix(*inter, "fusion.tap7.block") &&
             !has_prefix(*inter, "fusion.tap8.join"),
         "tap parameters on the wrong path");

  std::size_t checked = 0;
  for (std::size_t n : {1u, 2u, 4u, 6u, 8u}) {
    auto cfg = toy(Strategy::early);
    cfg.fusion.num_attention_blocks = n;
    auto early = build_model<float>(cfg);
    const auto tag = "early(" + std::to_string(n) + ")";
    expect(indices(*early, "text\\.layer") == range(1, 6), tag + " text layers != 1..6");
    expect(indices(*early, "vision\\.bottleneck") == range(1, 6), tag + " vision layers != 1..6");
    expect(early->blocks().size() == n && indices(*early, "fusion\\.block") == range(1, n), tag + " block count");
    ++checked;
  }
  Outcome o;
  o.pass = problems.empty();
  o.detail = problems.empty() ? "intermediate layers 1-8, taps 4/7 linear, 8 attention; early cut 6 with " +
                                    std::to_string(checked) + " block counts exact"
                              : problems.front() + (problems.size() > 1 ? " (+" + std::to_string(problems.size() - 1) + ")" : "");
  return o;
}

struct PipelineRun {
  std::map<std::string, double> accuracy;  // test accuracy per checkpoint
  double seconds = 0;
};

PipelineRun run_pipeline(Workspace& ws) {
  const auto t0 = Clock::now();
  ws.prep(true);
  PipelineRun r;
  for (auto s : {Stage::text_base, Stage::cnn_base, Stage::late, Stage::intermediate, Stage::early}) {
    ws.train_stage(s, std::nullopt, true);
    r.accuracy[to_string(s)] = ws.evaluate(to_string(s)).binary_accuracy;
  }
  r.seconds = seconds_since(t0);
  return r;
}

Outcome ordering(const PipelineRun& run) {
  const auto t0 = Clock::now();
  const std::vector<Strategy> order = {Strategy::early, Strategy::intermediate, Strategy::late};
  std::map<Strategy, std::unique_ptr<FusedModel<float>>> models;
  for (auto s : {Strategy::early, Strategy::intermediate, Strategy::late, Strategy::vision_only}) {
    models[s] = build_model<float>(toy(s));
    models[s]->set_training(false);
  }

  std::map<Strategy, std::uint64_t> macs;
  for (auto& [s, m] : models) macs[s] = count_flops_params(*m).macs;

  // Interleaved rounds so slow drift in machine load hits every model alike;
  // each model keeps its fastest round mean.
  std::map<Strategy, double> ms;
  for (int round = 0; round < 5; ++round)
    for (auto& [s, m] : models) {
      const auto in = probe_inputs<float>(m->config(), 1, 1234);
      auto* model = m.get();
      const auto rep = measure_latency(
          [&] {
            NoGradGuard ng;
            (void)model->forward(in);
          },
          50, 200);
      ms[s] = round == 0 ? rep.mean_ms : std::min(ms[s], rep.mean_ms);
    }

  auto chain = [&](const auto& v) {
    bool ok = v.at(Strategy::early) < v.at(Strategy::intermediate) && v.at(Strategy::intermediate) < v.at(Strategy::late);
    for (auto s : order) ok = ok && v.at(Strategy::vision_only) < v.at(s);
    return ok;
  };
  const bool flops_ok = chain(macs), latency_ok = chain(ms);
  const double late = run.accuracy.at("late"), inter = run.accuracy.at("intermediate"), early = run.accuracy.at("early");
  const bool acc_ok = late >= inter && late >= early;

  Outcome o;
  o.pass = flops_ok && latency_ok && acc_ok;
  o.detail = std::string("flops ") + (flops_ok ? "ok" : "VIOLATED") + " (MAC early " + std::to_string(macs[Strategy::early]) +
             " < inter " + std::to_string(macs[Strategy::intermediate]) + " < late " + std::to_string(macs[Strategy::late]) +
             ", vision-only " + std::to_string(macs[Strategy::vision_only]) + "); latency " + (latency_ok ? "ok" : "VIOLATED") +
             " (ms early " + num(ms[Strategy::early]) + " < inter " + num(ms[Strategy::intermediate]) + " < late " +
             num(ms[Strategy::late]) + ", vision-only " + num(ms[Strategy::vision_only]) + "); accuracy " +
             (acc_ok ? "ok" : "VIOLATED") + " (late " + num(late) + " >= inter " + num(inter) + ", late >= early " + num(early) + ")";
  return within(o, run.seconds + seconds_since(t0), 900);
}

Outcome gradients() {
  const auto t0 = Clock::now();
  double attn = 0, head = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    attn = std::max(attn, gradcheck::attention_block_error(seed));
    head = std::max(head, gradcheck::classification_head_error(seed));
  }
  Outcome o;
  o.pass = attn < gradcheck::kTol && head < gradcheck::kTol;
  o.detail = "worst relative error over 10 seeds: attention block " + num(attn, 3) + ", classification head " + num(head, 3) +
             " (tolerance 1e-4)";
  return within(o, seconds_since(t0), 60);
}

/// First epoch (1-based) whose eval-mode training accuracy reaches `target`, or 0.
std::pair<std::size_t, double> overfit(Strategy s, Stage stage, double target) {
  auto m = build_model<float>(toy(s));
  const auto data = synth_dataset(32, 7);
  auto recipe = recipe_for(stage, Scale::toy);
  recipe.epochs = 200;
  TrainOptions opts;
  opts.stop = [&](const EpochStats& e) { return e.val_acc >= target; };
  const auto r = train(*m, data, data, recipe, opts);
  double best = 0;
  for (const auto& e : r.history) {
    best = std::max(best, e.val_acc);
    if (e.val_acc >= target) return {e.epoch, e.val_acc};
  }
  return {0, best};
}

Outcome overfit_sanity() {
  const auto t0 = Clock::now();
  const auto [late_epoch, late_acc] = overfit(Strategy::late, Stage::late, 0.95);
  const auto [early_epoch, early_acc] = overfit(Strategy::early, Stage::early, 0.90);
  auto say = [](std::size_t epoch, double acc) {
    return epoch ? "reached " + num(acc) + " at epoch " + std::to_string(epoch) : "best " + num(acc) + " in 200 epochs";
  };
  Outcome o;
  o.pass = late_epoch > 0 && early_epoch > 0;
  o.detail = "late " + say(late_epoch, late_acc) + " (target 0.95); early(4 blocks) " + say(early_epoch, early_acc) +
             " (target 0.90)";
  return within(o, seconds_since(t0), 300);
}

Outcome multimodal(const PipelineRun& run) {
  const double late = run.accuracy.at("late"), text = run.accuracy.at("text_base"), vision = run.accuracy.at("cnn_base");
  const double margin = 100.0 * (late - std::max(text, vision));
  Outcome o;
  o.pass = margin >= 5.0;
  o.detail = "late " + num(late) + " vs text " + num(text) + ", vision " + num(vision) + ": margin " + num(margin, 3) +
             " points (need >= 5)";
  return within(o, run.seconds, 600);
}

Outcome label_frame() {
  struct Case {
    double score;
    Label want;
  };
  const std::vector<Case> labels = {{-0.001, Label::Negative}, {0.0, Label::NonNegative}, {-3.0, Label::Negative},
                                    {3.0, Label::NonNegative}, {-1e-9, Label::Negative}, {0.5, Label::NonNegative}};
  std::size_t ok = 0, total = 0;
  for (const auto& c : labels) ok += reduce_label(c.score) == c.want, ++total;
  for (std::size_t n = 1; n <= 9; ++n) {
    std::vector<std::size_t> frames(n);
    for (std::size_t i = 0; i < n; ++i) frames[i] = i;
    ok += middle_frame(frames) == n / 2, ++total;
  }
  bool rejects = false;
  try {
    middle_frame(std::vector<int>{});
  } catch (const ValidationError&) {
    rejects = true;
  }
  ok += rejects, ++total;
  Outcome o;
  o.pass = ok == total;
  o.detail = std::to_string(ok) + "/" + std::to_string(total) + " label and frame cases exact";
  return o;
}

Outcome ablation(Workspace& ws) {
  const auto t0 = Clock::now();
  const std::vector<std::size_t> grid = {2, 4, 6, 8};
  const auto first = ws.ablate(grid);
  const auto csv = slurp(ws.dir("ablation") / "ablation.csv");
  const auto second = ws.ablate(grid);
  const auto again = slurp(ws.dir("ablation") / "ablation.csv");
  const bool format = std::regex_match(csv, std::regex("blocks,accuracy\n(([2468]),[0-9]+\\.[0-9]{2}\n){4}"));
  Outcome o;
  o.pass = first.errors.empty() && second.errors.empty() && first.rows.size() == 4 && format && csv == again;
  std::string cells;
  for (const auto& r : first.rows) cells += (cells.empty() ? "" : ", ") + std::to_string(r.blocks) + ":" + num(r.accuracy);
  o.detail = "cells {" + cells + "}, selected " + std::to_string(first.selected_blocks.value_or(0)) + " blocks, csv " +
             (format ? "well-formed" : "MALFORMED") + ", second run " + (csv == again ? "identical" : "DIFFERS");
  if (!first.errors.empty()) o.detail += ", error: " + first.errors.front();
  return within(o, seconds_since(t0), 3600);
}

Outcome export_parity(Workspace& ws) {
  bool all = true;
  std::string detail;
  for (const char* name : {"late", "intermediate", "early", "text_base", "cnn_base"}) {
    const auto r = ws.export_model(name);
    all = all && r.parity.pass && r.parity.batches == 16 && r.parity.argmax_agreement == 1.0;
    detail += (detail.empty() ? "" : ", ") + std::string(name) + " " + num(r.parity.max_abs_diff, 3) + "/" +
              num(100 * r.parity.argmax_agreement, 4) + "%";
  }
  return {all, "max |diff| / argmax agreement over 16 batches (tolerance 1e-5): " + detail};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? argv[1] : "acceptance_work";
  fs::remove_all(work);
  auto cfg = resolve_config({{"output_dir", work.string()}});
  cfg.eval.parity_batches = 16;
  cfg.eval.parity_tol = 1e-5;
  Workspace ws(cfg);

  report("freezing invariant", freezing);
  report("architecture fidelity", architecture);
  report("gradient checks", gradients);
  report("overfit sanity", overfit_sanity);
  report("label/frame pipeline", label_frame);

  PipelineRun run;
  std::string pipeline_error;
  try {
    run = run_pipeline(ws);
  } catch (const std::exception& e) {
    pipeline_error = e.what();
  }
  auto needs_pipeline = [&](Outcome (*f)(const PipelineRun&)) {
    return [&, f] { return pipeline_error.empty() ? f(run) : Outcome{false, "pipeline failed: " + pipeline_error}; };
  };
  report("ordering (flops, latency, accuracy)", needs_pipeline(ordering));
  report("multimodal benefit", needs_pipeline(multimodal));
  report("ablation harness", [&] { return ablation(ws); });
  report("export parity", [&] {
    return pipeline_error.empty() ? export_parity(ws) : Outcome{false, "pipeline failed: " + pipeline_error};
  });

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}

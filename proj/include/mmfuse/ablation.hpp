#pragma once

// Attention-block ablation: one early-fusion model per block count, same
// seed and recipe, scored on a held-out set.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "mmfuse/report.hpp"
#include "mmfuse/training.hpp"

namespace mmfuse {

struct AblationRow {
  std::size_t blocks = 0;
  double accuracy = 0.0;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::vector<std::string> errors;  // one entry per failed cell
  std::optional<std::size_t> selected_blocks;
};

/// Highest accuracy; ties go to fewer blocks.
inline std::optional<std::size_t> select_blocks(const std::vector<AblationRow>& rows) {
  const AblationRow* best = nullptr;
  for (const auto& r : rows)
    if (!best || r.accuracy > best->accuracy || (r.accuracy == best->accuracy && r.blocks < best->blocks)) best = &r;
  if (!best) return std::nullopt;
  return best->blocks;
}

/// `blocks,accuracy` with accuracy in percent.
inline std::string ablation_csv(const AblationResult& r) {
  std::string s = "blocks,accuracy\n";
  for (const auto& row : r.rows) s += std::to_string(row.blocks) + "," + fmt(100.0 * row.accuracy, 2) + "\n";
  return s;
}

/// # of Attn. Blocks | Accuracy (%)
inline std::string ablation_table(const AblationResult& r) {
  std::string s = "| # of Attn. Blocks | Accuracy (%) |\n|---|---|\n";
  for (const auto& row : r.rows) s += "| " + std::to_string(row.blocks) + " | " + fmt(100.0 * row.accuracy, 2) + " |\n";
  if (r.selected_blocks) s += "\nselected: " + std::to_string(*r.selected_blocks) + " blocks\n";
  for (const auto& e : r.errors) s += "\nerror: " + e + "\n";
  return s;
}

struct AblationOptions {
  std::filesystem::path out_dir;  // empty: no checkpoints or CSV written
  std::function<void(std::size_t blocks, const EpochStats&)> on_epoch;
};

/// Trains an early-fusion model for each count in `block_counts`. A failing
/// or diverging cell is reported in `errors` and the grid continues.
template <typename T = float>
AblationResult run_ablation(ModelConfig base, const std::vector<std::size_t>& block_counts, const std::vector<Sample>& train_set,
                            const std::vector<Sample>& val_set, const std::vector<Sample>& test_set, const TrainRecipe& recipe,
                            const AblationOptions& opts = {}) {
  if (block_counts.empty()) throw ValidationError("run_ablation: block_counts must be nonempty");
  if (test_set.empty()) throw ValidationError("run_ablation: empty evaluation set");
  base.fusion.strategy = Strategy::early;
  AblationResult out;
  for (const auto k : block_counts) {
    const std::string name = "early_b" + std::to_string(k);
    try {
      auto cfg = base;
      cfg.fusion.num_attention_blocks = k;
      auto model = build_model<T>(cfg);
      TrainOptions to;
      if (!opts.out_dir.empty()) to.out_dir = opts.out_dir;
      to.name = name;
      if (opts.on_epoch) to.on_epoch = [&, k](const EpochStats& e) { opts.on_epoch(k, e); };
      const auto tr = train(*model, train_set, val_set, recipe, to);
      if (tr.diverged) {
        out.errors.push_back(name + ": " + tr.divergence_report);
        continue;
      }
      const auto p = predict(*model, test_set);
      out.rows.push_back({k, binary_accuracy(p.preds, p.labels)});
    } catch (const std::exception& e) {
      out.errors.push_back(name + ": " + e.what());
    }
  }
  out.selected_blocks = select_blocks(out.rows);
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    std::ofstream(opts.out_dir / "ablation.csv", std::ios::binary) << ablation_csv(out);
    std::ofstream(opts.out_dir / "ablation.md", std::ios::binary) << ablation_table(out);
  }
  return out;
}

}  // namespace mmfuse

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mmfuse/errors.hpp"
#include "mmfuse/tensor.hpp"

namespace mmfuse {

/// Argmax over each row of [B, C] logits; ties resolve to the lowest index.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  std::vector<int> out(B, 0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 1; c < C; ++c)
      if (logits[b * C + c] > logits[b * C + static_cast<std::size_t>(out[b])]) out[b] = static_cast<int>(c);
  return out;
}

inline void check_lengths(std::size_t a, std::size_t b) {
  if (a != b) throw ValidationError("length mismatch: " + std::to_string(a) + " predictions vs " + std::to_string(b) + " labels");
  if (a == 0) throw ValidationError("metrics need at least one prediction");
}

inline double binary_accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
  check_lengths(preds.size(), labels.size());
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

/// F1 for `positive`; 0 when precision + recall is 0.
inline double f1_score(const std::vector<int>& preds, const std::vector<int>& labels, int positive = 1) {
  check_lengths(preds.size(), labels.size());
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const bool p = preds[i] == positive, y = labels[i] == positive;
    tp += p && y;
    fp += p && !y;
    fn += !p && y;
  }
  if (tp == 0) return 0.0;
  const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  const double recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  return 2.0 * precision * recall / (precision + recall);
}

}  // namespace mmfuse

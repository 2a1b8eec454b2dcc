#pragma once

// Analytic multiply-accumulate and parameter accounting from a traced
// batch-1 forward pass.

#include <cstdint>
#include <map>
#include <string>

#include "mmfuse/fusion.hpp"

namespace mmfuse {

/// Random model inputs of the right shapes: token ids in the word range,
/// a mask with a random valid prefix (at least [CLS] and [SEP]) and a normal image.
template <typename T>
Inputs<T> probe_inputs(const ModelConfig& cfg, std::size_t batch, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t L = cfg.text.max_seq_len;
  const std::size_t res = cfg.vision_kind == "cnn" ? cfg.cnn.input_resolution : cfg.vit.input_resolution;
  const std::size_t C = cfg.vision_kind == "cnn" ? cfg.cnn.in_channels : cfg.vit.in_channels;
  Inputs<T> in;
  in.batch = batch;
  in.seq_len = L;
  in.tokens.assign(batch * L, 0);
  in.mask.assign(batch * L, T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t len = std::min(L, 2 + rng.below(L - 1));
    for (std::size_t s = 0; s < len; ++s) {
      in.tokens[b * L + s] = s == 0 ? 1 : static_cast<std::int64_t>(4 + rng.below(cfg.text.vocab_size - 4));
      in.mask[b * L + s] = T(1);
    }
  }
  in.image = Tensor<T>({batch, C, res, res});
  for (auto& v : in.image.vec()) v = static_cast<T>(rng.normal());
  return in;
}

/// MACs for one traced layer; kinds without multiply-accumulates count 0.
inline std::uint64_t layer_macs(const LayerRecord& r) {
  const auto& d = r.dims;
  auto need = [&](std::size_t n) {
    if (d.size() != n) throw ConfigError("layer " + r.name + ": malformed trace for kind '" + r.kind + "'");
  };
  if (r.kind == "linear") {  // rows, in, out
    need(3);
    return static_cast<std::uint64_t>(d[0]) * d[1] * d[2];
  }
  if (r.kind == "conv2d") {  // batch, cin, cout, k, hout, wout, groups
    need(7);
    return static_cast<std::uint64_t>(d[0]) * d[4] * d[5] * d[2] * (d[1] / d[6]) * d[3] * d[3];
  }
  if (r.kind == "attention") {  // batch, heads, sq, sk, head_dim: scores plus weighted values
    need(5);
    return 2ULL * d[0] * d[1] * d[2] * d[3] * d[4];
  }
  if (r.kind == "layernorm" || r.kind == "batchnorm" || r.kind == "activation" || r.kind == "embedding" ||
      r.kind == "pool")
    return 0;
  throw ConfigError("unknown layer kind '" + r.kind + "' in layer " + r.name);
}

struct FlopReport {
  std::uint64_t macs = 0;
  std::uint64_t params = 0;
  std::map<std::string, std::uint64_t> macs_by_group;  // text / vision / fusion / head
  std::vector<LayerRecord> layers;

  std::uint64_t flops() const { return 2 * macs; }
};

inline FlopReport summarize_trace(const FlopTrace& trace) {
  FlopReport rep;
  for (const auto& r : trace.records) {
    const auto m = layer_macs(r);
    rep.macs += m;
    rep.macs_by_group[r.name.substr(0, r.name.find('.'))] += m;
  }
  rep.layers = trace.records;
  return rep;
}

/// Forward cost at batch 1 (one multiply-add = one MAC; flops() = 2 x MACs)
/// and parameter count from the registry.
template <typename T>
FlopReport count_flops_params(FusedModel<T>& model) {
  const bool was = model.training();
  model.set_training(false);
  FlopTrace trace;
  {
    NoGradGuard ng;
    TraceScope scope(trace);
    model.forward(probe_inputs<T>(model.config(), 1, 0));
  }
  model.set_training(was);
  auto rep = summarize_trace(trace);
  rep.params = model.parameter_count();
  return rep;
}

/// Cost of running a backbone alone through `upto` layers (with its pooling
/// function when upto is its full depth), batch 1.
template <typename T>
std::uint64_t backbone_macs(Backbone<T>& bb, const ModelConfig& cfg, std::size_t upto) {
  FlopTrace trace;
  {
    NoGradGuard ng;
    TraceScope scope(trace);
    bb.forward(probe_inputs<T>(cfg, 1, 0), upto);
  }
  return summarize_trace(trace).macs;
}

}  // namespace mmfuse

#pragma once

// ONNX export of evaluation-mode models, the <name>.meta.json sidecar and the
// live-vs-exported parity check.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mmfuse/flops.hpp"
#include "mmfuse/metrics.hpp"
#include "mmfuse/onnx_runtime.hpp"

#ifndef MMFUSE_VERSION
#define MMFUSE_VERSION "0.0.0"
#endif

namespace mmfuse {

inline constexpr std::int64_t kOnnxOpset = 13;

struct TensorSignature {
  std::string name;
  std::string dtype;               // float32 | int64
  std::vector<nlohmann::json> shape;  // "batch" or a fixed size
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TensorSignature, name, dtype, shape)

struct ExportArtifact {
  std::string graph_path;
  std::string meta_path;
  std::string strategy;
  std::string modality;
  std::string config_hash;
  std::string toolkit_version = MMFUSE_VERSION;
  std::int64_t opset = kOnnxOpset;
  std::string graph_fnv1a64;
  std::vector<TensorSignature> inputs, outputs;
  nlohmann::json model_config;
};

inline nlohmann::json sidecar_json(const ExportArtifact& a) {
  return {{"format", "onnx"},
          {"graph_file", std::filesystem::path(a.graph_path).filename().string()},
          {"graph_fnv1a64", a.graph_fnv1a64},
          {"opset", a.opset},
          {"strategy", a.strategy},
          {"modality", a.modality},
          {"config_hash", a.config_hash},
          {"toolkit_version", a.toolkit_version},
          {"inputs", a.inputs},
          {"outputs", a.outputs},
          {"model_config", a.model_config}};
}

/// `<dir>/<stem>.meta.json` for `<dir>/<stem>.onnx`.
inline std::filesystem::path sidecar_path(const std::filesystem::path& graph) {
  auto p = graph;
  return p.replace_extension(".meta.json");
}

template <typename T>
std::vector<TensorSignature> input_signature(const FusedModel<T>& model) {
  const auto& c = model.config();
  const bool cnn = c.vision_kind == "cnn";
  const auto res = static_cast<std::int64_t>(cnn ? c.cnn.input_resolution : c.vit.input_resolution);
  const auto ch = static_cast<std::int64_t>(cnn ? c.cnn.in_channels : c.vit.in_channels);
  const auto L = static_cast<std::int64_t>(c.text.max_seq_len);
  return {{"tokens", "int64", {"batch", L}}, {"mask", "int64", {"batch", L}}, {"image", "float32", {"batch", ch, res, res}}};
}

inline std::vector<TensorSignature> output_signature() { return {{"logits", "float32", {"batch", 2}}}; }

inline onnx::ValueInfo to_value_info(const TensorSignature& s) {
  onnx::ValueInfo v;
  v.name = s.name;
  v.dtype = s.dtype == "int64" ? onnx::DType::Int64 : onnx::DType::Float;
  for (const auto& d : s.shape) {
    onnx::Dim dim;
    if (d.is_string())
      dim.param = d.get<std::string>();
    else
      dim.value = d.get<std::int64_t>();
    v.shape.push_back(dim);
  }
  return v;
}

/// Builds the evaluation-mode graph (dropout omitted, BatchNorm on running
/// statistics) with inputs tokens/mask/image and output logits.
template <typename T>
onnx::Model build_onnx(const FusedModel<T>& model) {
  if (model.training()) throw ValidationError("export requires evaluation mode");
  onnx::GraphBuilder g;
  for (const auto& s : input_signature(model)) g.add_input(to_value_info(s));
  g.add_output(to_value_info(output_signature()[0]));
  EmitContext ctx;
  ctx.tokens = "tokens";
  ctx.image = "image";
  if (model.text_backbone()) {
    ctx.mask_f = g.op("Cast", {"mask"}, {onnx::Attribute::make_int("to", static_cast<std::int64_t>(onnx::DType::Float))}, "mask_f");
    ctx.mask_bias = emit::mask_bias(g, ctx.mask_f);
  }
  const auto logits = model.emit(g, ctx);
  if (g.graph().nodes.empty() || g.graph().nodes.back().outputs[0] != logits)
    throw ConfigError("export: logits are not produced by the final node");
  g.rename_last_output("logits");
  onnx::Model m;
  m.opset = kOnnxOpset;
  m.producer_version = MMFUSE_VERSION;
  m.graph = std::move(g.graph());
  m.graph.name = "mmfuse_" + to_string(model.strategy());
  m.metadata = {{"strategy", to_string(model.strategy())}, {"config_hash", model.hash()}};
  return m;
}

/// Writes `path` (ONNX) and its sidecar. Output bytes depend only on the
/// model state and toolkit version.
template <typename T>
ExportArtifact export_graph(const FusedModel<T>& model, const std::filesystem::path& path) {
  const auto bytes = onnx::serialize(build_onnx(model));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  {
    std::ofstream o(path, std::ios::binary);
    if (!o) throw ValidationError("cannot write " + path.string());
    o.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  ExportArtifact a;
  a.graph_path = path.string();
  a.meta_path = sidecar_path(path).string();
  a.strategy = to_string(model.strategy());
  a.modality = modality_tag(model.strategy());
  a.config_hash = model.hash();
  a.graph_fnv1a64 = hex64(fnv1a64(bytes));
  a.inputs = input_signature(model);
  a.outputs = output_signature();
  a.model_config = model.config_json();
  std::ofstream(a.meta_path) << sidecar_json(a).dump(2) << '\n';
  return a;
}

/// Loads a graph after checking it against its sidecar's hash and signature.
inline onnx::Session load_exported(const std::filesystem::path& path, nlohmann::json* sidecar_out = nullptr) {
  const auto meta = sidecar_path(path);
  std::ifstream in(meta);
  if (!in) throw FormatError("missing sidecar " + meta.string() + " (run `mmfuse export`)");
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(meta.string() + ": " + e.what());
  }
  std::string bytes;
  try {
    bytes = onnx::read_file(path.string());
  } catch (const FormatError& e) {
    throw FormatError(std::string("cannot load graph: ") + e.what());
  }
  const auto h = hex64(fnv1a64(bytes));
  if (h != side.value("graph_fnv1a64", ""))
    throw FormatError(path.string() + ": content hash " + h + " does not match sidecar (" +
                      side.value("graph_fnv1a64", "missing") + "); file corrupted or replaced");
  onnx::Model model;
  try {
    model = onnx::parse(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  const auto expected = side.at("inputs").get<std::vector<TensorSignature>>();
  if (expected.size() != model.graph.inputs.size())
    throw FormatError(path.string() + ": sidecar lists " + std::to_string(expected.size()) + " inputs, graph has " +
                      std::to_string(model.graph.inputs.size()));
  for (std::size_t k = 0; k < expected.size(); ++k)
    if (expected[k].name != model.graph.inputs[k].name)
      throw FormatError(path.string() + ": input " + std::to_string(k) + " expected '" + expected[k].name + "', found '" +
                        model.graph.inputs[k].name + "'");
  if (sidecar_out) *sidecar_out = side;
  return onnx::Session(std::move(model));
}

template <typename T>
std::map<std::string, onnx::Value> to_feeds(const Inputs<T>& in) {
  std::map<std::string, onnx::Value> feeds;
  const auto B = static_cast<std::int64_t>(in.batch), L = static_cast<std::int64_t>(in.seq_len);
  feeds["tokens"] = onnx::Value::ints({B, L}, in.tokens);
  std::vector<std::int64_t> mask(in.mask.size());
  for (std::size_t k = 0; k < mask.size(); ++k) mask[k] = in.mask[k] > T(0.5) ? 1 : 0;
  feeds["mask"] = onnx::Value::ints({B, L}, mask);
  std::vector<std::int64_t> ishape;
  for (auto d : in.image.shape()) ishape.push_back(static_cast<std::int64_t>(d));
  std::vector<float> pix(in.image.size());
  for (std::size_t k = 0; k < pix.size(); ++k) pix[k] = static_cast<float>(in.image[k]);
  feeds["image"] = onnx::Value::floats(ishape, std::move(pix));
  return feeds;
}

struct ParityReport {
  std::size_t batches = 0;
  double max_abs_diff = 0.0;
  double argmax_agreement = 1.0;
  double tolerance = 0.0;
  bool pass = false;
};

/// Compares live and exported logits over `n_batches` seeded probe batches.
template <typename T>
ParityReport verify_parity(FusedModel<T>& model, const std::filesystem::path& graph, std::size_t n_batches, double tol,
                           std::size_t batch_size = 4, std::uint64_t seed = 1234) {
  if (n_batches == 0) throw ValidationError("verify_parity: n_batches must be >= 1");
  auto session = load_exported(graph);
  model.set_training(false);
  ParityReport rep;
  rep.tolerance = tol;
  std::size_t agree = 0, total = 0;
  for (std::size_t b = 0; b < n_batches; ++b) {
    auto in = probe_inputs<T>(model.config(), batch_size, seed + b);
    Tensor<T> live;
    {
      NoGradGuard ng;
      live = model.forward(in).value();
    }
    const auto out = session.run(to_feeds(in)).at("logits");
    if (out.count() != live.size()) throw FormatError("exported logits have " + std::to_string(out.count()) + " values, expected " + std::to_string(live.size()));
    Tensor<T> ex({batch_size, 2});
    for (std::size_t k = 0; k < live.size(); ++k) {
      ex[k] = static_cast<T>(out.f[k]);
      rep.max_abs_diff = std::max(rep.max_abs_diff, std::abs(static_cast<double>(live[k]) - static_cast<double>(out.f[k])));
    }
    const auto pl = argmax_rows(live), pe = argmax_rows(ex);
    for (std::size_t k = 0; k < pl.size(); ++k) agree += pl[k] == pe[k];
    total += pl.size();
  }
  rep.batches = n_batches;
  rep.argmax_agreement = static_cast<double>(agree) / static_cast<double>(total);
  rep.pass = rep.max_abs_diff <= tol && agree == total;
  return rep;
}

}  // namespace mmfuse

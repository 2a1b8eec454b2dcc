#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "mmfuse/export.hpp"
#include "schema_check.hpp"

using namespace mmfuse;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / ("mmfuse_export_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

ModelConfig toy(Strategy s, const std::string& vision = "cnn") {
  ModelConfig cfg;
  cfg.fusion.strategy = s;
  cfg.vision_kind = vision;
  return cfg;
}

}  // namespace

TEST(Export, ParityForEveryStrategy) {
  const auto dir = scratch("parity");
  for (auto s : {Strategy::late, Strategy::intermediate, Strategy::early, Strategy::text_only, Strategy::vision_only}) {
    auto m = build_model<float>(toy(s));
    const auto path = dir / (to_string(s) + ".onnx");
    export_graph(*m, path);
    const auto rep = verify_parity(*m, path, 16, 1e-5);
    EXPECT_TRUE(rep.pass) << to_string(s) << " max diff " << rep.max_abs_diff;
    EXPECT_LE(rep.max_abs_diff, 1e-5);
    EXPECT_DOUBLE_EQ(rep.argmax_agreement, 1.0);
    EXPECT_EQ(rep.batches, 16u);
  }
}

TEST(Export, ParityWithVitBackbone) {
  const auto dir = scratch("parity_vit");
  for (auto s : {Strategy::late, Strategy::intermediate, Strategy::early}) {
    auto m = build_model<float>(toy(s, "vit"));
    const auto path = dir / (to_string(s) + ".onnx");
    export_graph(*m, path);
    const auto rep = verify_parity(*m, path, 4, 1e-5);
    EXPECT_TRUE(rep.pass) << to_string(s) << " max diff " << rep.max_abs_diff;
  }
}

TEST(Export, ReExportIsByteIdentical) {
  const auto dir = scratch("bytes");
  auto a = build_model<float>(toy(Strategy::early));
  auto b = build_model<float>(toy(Strategy::early));
  export_graph(*a, dir / "a.onnx");
  export_graph(*a, dir / "a2.onnx");
  export_graph(*b, dir / "b.onnx");
  EXPECT_EQ(slurp(dir / "a.onnx"), slurp(dir / "a2.onnx"));
  EXPECT_EQ(slurp(dir / "a.onnx"), slurp(dir / "b.onnx"));
  auto cfg = toy(Strategy::early);
  cfg.seed = 1;
  auto c = build_model<float>(cfg);
  export_graph(*c, dir / "c.onnx");
  EXPECT_NE(slurp(dir / "a.onnx"), slurp(dir / "c.onnx"));
}

TEST(Export, SidecarSignatureAndSchema) {
  const auto dir = scratch("sidecar");
  auto m = build_model<float>(toy(Strategy::intermediate));
  const auto art = export_graph(*m, dir / "intermediate.onnx");
  EXPECT_EQ(fs::path(art.meta_path), dir / "intermediate.meta.json");
  nlohmann::json side;
  auto session = load_exported(dir / "intermediate.onnx", &side);
  EXPECT_EQ(side["strategy"], "intermediate");
  EXPECT_EQ(side["modality"], "T+V");
  EXPECT_EQ(side["config_hash"], m->hash());
  const auto inputs = side["inputs"];
  ASSERT_EQ(inputs.size(), 3u);
  EXPECT_EQ(inputs[0], (nlohmann::json{{"name", "tokens"}, {"dtype", "int64"}, {"shape", {"batch", 32}}}));
  EXPECT_EQ(inputs[1], (nlohmann::json{{"name", "mask"}, {"dtype", "int64"}, {"shape", {"batch", 32}}}));
  EXPECT_EQ(inputs[2], (nlohmann::json{{"name", "image"}, {"dtype", "float32"}, {"shape", {"batch", 3, 32, 32}}}));
  EXPECT_EQ(side["outputs"][0]["name"], "logits");

  const auto schema = schema_check::load(std::string(MMFUSE_SCHEMA_DIR) + "/model_meta.schema.json");
  const auto errs = schema_check::validate(side, schema);
  EXPECT_TRUE(errs.empty()) << (errs.empty() ? "" : errs.front());
}

TEST(Export, CorruptionIsDetected) {
  const auto dir = scratch("corrupt");
  auto m = build_model<float>(toy(Strategy::late));
  const auto path = dir / "late.onnx";
  export_graph(*m, path);
  const auto bytes = slurp(path);

  auto flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x5A;
  std::ofstream(path, std::ios::binary) << flipped;
  EXPECT_THROW(load_exported(path), FormatError);

  // Truncated graph whose sidecar hash was updated to match: the parser must reject it.
  const auto cut = bytes.substr(0, bytes.size() / 3);
  std::ofstream(path, std::ios::binary) << cut;
  auto side = nlohmann::json::parse(slurp(sidecar_path(path)));
  side["graph_fnv1a64"] = hex64(fnv1a64(cut));
  std::ofstream(sidecar_path(path)) << side.dump();
  EXPECT_THROW(load_exported(path), FormatError);

  std::ofstream(path, std::ios::binary) << bytes;
  fs::remove(sidecar_path(path));
  EXPECT_THROW(load_exported(path), FormatError);

  export_graph(*m, path);
  EXPECT_THROW(verify_parity(*m, path, 0, 1e-5), ValidationError);
  EXPECT_THROW(load_exported(dir / "absent.onnx"), FormatError);
}

TEST(Export, ParityDetectsDrift) {
  const auto dir = scratch("drift");
  auto m = build_model<float>(toy(Strategy::late));
  const auto path = dir / "late.onnx";
  export_graph(*m, path);
  auto reg = m->registry();
  Var<float> w = reg.find("head.fc2.bias")->var;
  w.mutable_value()[0] += 1e-2f;
  const auto rep = verify_parity(*m, path, 4, 1e-5);
  EXPECT_FALSE(rep.pass);
  EXPECT_GT(rep.max_abs_diff, 1e-3);
}

TEST(Export, OnnxRuntimeCrossCheck) {
  if (std::system("python3 -c 'import onnx, onnxruntime, numpy' >/dev/null 2>&1") != 0)
    GTEST_SKIP() << "python3 onnx/onnxruntime not available";
  const auto dir = scratch("ort");
  const auto script = dir / "check.py";
  std::ofstream(script) << R"(import json, sys
import numpy as np, onnx, onnxruntime as ort
graph, case = sys.argv[1], json.load(open(sys.argv[2]))
onnx.checker.check_model(onnx.load(graph))
sess = ort.InferenceSession(graph, providers=["CPUExecutionProvider"])
feeds = {"tokens": np.array(case["tokens"], dtype=np.int64).reshape(case["batch"], -1),
         "mask": np.array(case["mask"], dtype=np.int64).reshape(case["batch"], -1),
         "image": np.array(case["image"], dtype=np.float32).reshape(case["image_shape"])}
out = sess.run(["logits"], feeds)[0].reshape(-1)
diff = float(np.max(np.abs(out - np.array(case["logits"], dtype=np.float32))))
print("max diff", diff)
sys.exit(0 if diff <= 1e-4 else 1)
)";
  for (auto s : {Strategy::late, Strategy::intermediate, Strategy::early}) {
    auto m = build_model<float>(toy(s));
    const auto graph = dir / (to_string(s) + ".onnx");
    export_graph(*m, graph);
    const auto in = probe_inputs<float>(m->config(), 3, 77);
    Tensor<float> logits;
    {
      NoGradGuard ng;
      logits = m->forward(in).value();
    }
    nlohmann::json c;
    c["batch"] = in.batch;
    c["tokens"] = in.tokens;
    std::vector<int> mask;
    for (auto v : in.mask) mask.push_back(v > 0.5f);
    c["mask"] = mask;
    c["image"] = in.image.vec();
    c["image_shape"] = in.image.shape();
    c["logits"] = logits.vec();
    const auto case_path = dir / (to_string(s) + ".json");
    std::ofstream(case_path) << c.dump();
    const auto cmd = "python3 " + script.string() + " " + graph.string() + " " + case_path.string();
    EXPECT_EQ(std::system(cmd.c_str()), 0) << to_string(s);
  }
}

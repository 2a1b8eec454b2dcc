#include <gtest/gtest.h>

#include <regex>
#include <set>

#include "mmfuse/flops.hpp"

using namespace mmfuse;

namespace {

ModelConfig toy(Strategy s) {
  ModelConfig cfg;
  cfg.fusion.strategy = s;
  return cfg;
}

/// Distinct `<group>.<block><k>` indices present in a registry, e.g. text.layer7 -> 7.
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

std::uint64_t macs_of_kind(const FlopReport& r, const std::string& kind, const std::string& prefix) {
  std::uint64_t total = 0;
  for (const auto& l : r.layers)
    if (l.kind == kind && l.name.rfind(prefix, 0) == 0) total += layer_macs(l);
  return total;
}

}  // namespace

TEST(Architecture, IntermediateKeepsLayersOneToEightWithThreeTaps) {
  auto m = build_model<float>(toy(Strategy::intermediate));
  EXPECT_EQ(indices(*m, "text\\.layer"), range(1, 8));
  EXPECT_EQ(indices(*m, "vision\\.bottleneck"), range(1, 8));
  EXPECT_FALSE(has_prefix(*m, "text.pooler"));

  const auto wiring = m->tap_wiring();
  ASSERT_EQ(wiring.size(), 3u);
  EXPECT_EQ(wiring[0].layer, 4u);
  EXPECT_EQ(wiring[1].layer, 7u);
  EXPECT_EQ(wiring[2].layer, 8u);
  EXPECT_EQ(wiring[0].path, TapPath::linear);
  EXPECT_EQ(wiring[1].path, TapPath::linear);
  EXPECT_EQ(wiring[2].path, TapPath::attention);

  for (const auto* t : {"fusion.tap4.", "fusion.tap7."}) {
    EXPECT_TRUE(has_prefix(*m, std::string(t) + "join"));
    EXPECT_FALSE(has_prefix(*m, std::string(t) + "block"));
  }
  EXPECT_TRUE(has_prefix(*m, "fusion.tap8.block"));
  EXPECT_FALSE(has_prefix(*m, "fusion.tap8.join"));
  EXPECT_EQ(m->head_input_width(), 3u * 2u * 32u);
}

TEST(Architecture, EarlyCutsAtSixWithConfiguredBlocks) {
  for (std::size_t n : {1u, 4u, 7u}) {
    auto cfg = toy(Strategy::early);
    cfg.fusion.num_attention_blocks = n;
    auto m = build_model<float>(cfg);
    EXPECT_EQ(m->text_backbone()->depth(), 6u);
    EXPECT_EQ(m->vision_backbone()->depth(), 6u);
    EXPECT_EQ(indices(*m, "text\\.layer"), range(1, 6));
    EXPECT_EQ(indices(*m, "vision\\.bottleneck"), range(1, 6));
    EXPECT_EQ(m->blocks().size(), n);
    EXPECT_EQ(indices(*m, "fusion\\.block"), range(1, n));
    EXPECT_TRUE(m->tap_wiring().empty());
  }
}

TEST(Architecture, LateKeepsFullBackbonesFrozen) {
  auto m = build_model<float>(toy(Strategy::late));
  EXPECT_EQ(indices(*m, "text\\.layer"), range(1, 12));
  EXPECT_EQ(indices(*m, "vision\\.bottleneck"), range(1, 16));
  EXPECT_TRUE(has_prefix(*m, "text.pooler"));
  EXPECT_FALSE(has_prefix(*m, "fusion."));
  EXPECT_TRUE(m->backbones_frozen());
  EXPECT_EQ(m->frozen_groups(), (std::set<std::string>{"text", "vision"}));
  EXPECT_EQ(m->head_input_width(), 64u + 40u);
  auto reg = m->registry();
  for (const auto& p : reg.params())
    EXPECT_EQ(p.var.requires_grad(), ParamRegistry<float>::group_of(p.name) == "head") << p.name;
}

TEST(Architecture, UnimodalBaselinesDropTheOtherBackbone) {
  auto t = build_model<float>(toy(Strategy::text_only));
  EXPECT_EQ(t->vision_backbone(), nullptr);
  EXPECT_FALSE(has_prefix(*t, "vision."));
  auto v = build_model<float>(toy(Strategy::vision_only));
  EXPECT_EQ(v->text_backbone(), nullptr);
  EXPECT_FALSE(has_prefix(*v, "text."));
}

TEST(Architecture, SameSeedSharesBackboneWeightsAcrossStrategies) {
  auto late = build_model<float>(toy(Strategy::late));
  auto early = build_model<float>(toy(Strategy::early));
  auto a = late->registry(), b = early->registry();
  std::size_t matched = 0;
  for (const auto& p : b.params()) {
    if (p.name.rfind("fusion.", 0) == 0 || p.name.rfind("head.", 0) == 0) continue;
    const auto* q = a.find(p.name);
    ASSERT_NE(q, nullptr) << p.name;
    EXPECT_EQ(q->var.value().vec(), p.var.value().vec()) << p.name;
    ++matched;
  }
  EXPECT_GT(matched, 0u);
}

TEST(Architecture, ConfigErrorsAreRejected) {
  auto bad_tap = toy(Strategy::intermediate);
  bad_tap.fusion.taps = {4, 7, 20};
  EXPECT_THROW(build_model<float>(bad_tap), ConfigError);
  auto unordered = toy(Strategy::intermediate);
  unordered.fusion.taps = {7, 4, 8};
  EXPECT_THROW(build_model<float>(unordered), ConfigError);
  auto deep_cut = toy(Strategy::early);
  deep_cut.fusion.cut_layer = 17;
  EXPECT_THROW(build_model<float>(deep_cut), ConfigError);
  auto heads = toy(Strategy::early);
  heads.fusion.fusion_dim = 30;
  EXPECT_THROW(build_model<float>(heads), ConfigError);
  auto kind = toy(Strategy::late);
  kind.vision_kind = "resnet";
  EXPECT_THROW(build_model<float>(kind), ConfigError);
  auto m = build_model<float>(toy(Strategy::late));
  EXPECT_THROW(m->freeze({"audio"}), ConfigError);
}

TEST(Architecture, VitVariantBuildsEveryStrategy) {
  for (auto s : {Strategy::late, Strategy::intermediate, Strategy::early, Strategy::vision_only}) {
    auto cfg = toy(s);
    cfg.vision_kind = "vit";
    auto m = build_model<float>(cfg);
    NoGradGuard ng;
    EXPECT_EQ(m->forward(probe_inputs<float>(cfg, 2, 1)).shape(), (Shape{2, 2})) << to_string(s);
  }
}

TEST(Forward, EvalModeIsDeterministicAndBatchMismatchThrows) {
  for (auto s : {Strategy::late, Strategy::intermediate, Strategy::early}) {
    auto m = build_model<float>(toy(s));
    const auto in = probe_inputs<float>(m->config(), 3, 5);
    NoGradGuard ng;
    const auto a = m->forward(in).value().vec();
    const auto b = m->forward(in).value().vec();
    EXPECT_EQ(a, b);
    auto bad = in;
    bad.image = Tensor<float>({2, 3, 32, 32});
    EXPECT_THROW(m->forward(bad), ShapeError);
  }
}

TEST(Forward, HeadDropoutOnlyInTraining) {
  auto cfg = toy(Strategy::late);
  cfg.fusion.head.dropout = 0.5;
  auto m = build_model<float>(cfg);
  const auto in = probe_inputs<float>(cfg, 4, 5);
  NoGradGuard ng;
  const auto eval = m->forward(in).value().vec();
  m->set_training(true);
  const auto train = m->forward(in).value().vec();
  EXPECT_NE(eval, train);
}

TEST(Forward, HashTracksConfig) {
  auto a = build_model<float>(toy(Strategy::early));
  auto b = build_model<float>(toy(Strategy::early));
  EXPECT_EQ(a->hash(), b->hash());
  auto cfg = toy(Strategy::early);
  cfg.fusion.num_attention_blocks = 2;
  EXPECT_NE(build_model<float>(cfg)->hash(), a->hash());
}

TEST(Flops, TextEncoderClosedForm) {
  auto cfg = toy(Strategy::text_only);
  Rng rng(1);
  TextEncoder<float> enc(cfg.text, rng);
  const std::uint64_t L = cfg.text.max_seq_len, D = cfg.text.hidden_dim, F = cfg.text.ff_dim;
  const std::uint64_t per_layer = 4 * L * D * D + 2 * L * D * F + 2 * L * L * D;
  EXPECT_EQ(backbone_macs<float>(enc, cfg, 12), 12 * per_layer + D * D);
  EXPECT_EQ(backbone_macs<float>(enc, cfg, 5), 5 * per_layer);
}

TEST(Flops, HeadClosedForm) {
  auto m = build_model<float>(toy(Strategy::late));
  const auto rep = count_flops_params(*m);
  EXPECT_EQ(rep.macs_by_group.at("head"), 104u * 64u + 64u * 2u);
  EXPECT_EQ(rep.params, m->parameter_count());
}

TEST(Flops, OrderingOnToyConfigs) {
  std::map<Strategy, std::uint64_t> macs;
  for (auto s : {Strategy::late, Strategy::intermediate, Strategy::early, Strategy::text_only, Strategy::vision_only}) {
    auto m = build_model<float>(toy(s));
    macs[s] = count_flops_params(*m).macs;
  }
  EXPECT_LT(macs[Strategy::early], macs[Strategy::intermediate]);
  EXPECT_LT(macs[Strategy::intermediate], macs[Strategy::late]);
  for (auto s : {Strategy::late, Strategy::intermediate, Strategy::early}) EXPECT_LT(macs[Strategy::vision_only], macs[s]);
}

TEST(Flops, GroupsAddUpToBackbonesPlusFusion) {
  for (auto s : {Strategy::late, Strategy::intermediate, Strategy::early}) {
    auto cfg = toy(s);
    auto m = build_model<float>(cfg);
    const auto rep = count_flops_params(*m);
    std::uint64_t sum = 0;
    for (const auto& [g, v] : rep.macs_by_group) sum += v;
    EXPECT_EQ(sum, rep.macs);

    Rng rng(0);
    TextEncoder<float> text(cfg.text, rng);
    CnnBackbone<float> cnn(cfg.cnn, rng);
    const std::size_t upto_t = s == Strategy::late ? 12 : s == Strategy::intermediate ? 8 : 6;
    const std::size_t upto_v = s == Strategy::late ? 16 : upto_t;
    EXPECT_EQ(rep.macs_by_group.at("text"), backbone_macs<float>(text, cfg, upto_t)) << to_string(s);
    EXPECT_EQ(rep.macs_by_group.at("vision"), backbone_macs<float>(cnn, cfg, upto_v)) << to_string(s);
    EXPECT_EQ(rep.macs_by_group.count("fusion"), s == Strategy::late ? 0u : 1u);
  }
}

TEST(Flops, SequenceLengthScaling) {
  auto a = toy(Strategy::text_only);
  auto b = a;
  b.text.max_seq_len = 2 * a.text.max_seq_len;
  auto ma = build_model<float>(a), mb = build_model<float>(b);
  const auto ra = count_flops_params(*ma), rb = count_flops_params(*mb);
  const auto lin_a = macs_of_kind(ra, "linear", "text.layer"), lin_b = macs_of_kind(rb, "linear", "text.layer");
  const auto att_a = macs_of_kind(ra, "attention", "text."), att_b = macs_of_kind(rb, "attention", "text.");
  EXPECT_EQ(lin_b, 2 * lin_a);
  EXPECT_EQ(att_b, 4 * att_a);
  EXPECT_GT(att_a, 0u);
}

TEST(Flops, ConvAndUnknownKinds) {
  // 3x3 conv, 4 -> 8 channels, 5x5 output: 8*4*9*25 MACs; depthwise: 4*9*25.
  EXPECT_EQ(layer_macs({"conv2d", "c", {1, 4, 8, 3, 5, 5, 1}}), 8u * 4u * 9u * 25u);
  EXPECT_EQ(layer_macs({"conv2d", "d", {1, 4, 4, 3, 5, 5, 4}}), 4u * 9u * 25u);
  EXPECT_EQ(layer_macs({"layernorm", "n", {100}}), 0u);
  EXPECT_THROW(layer_macs({"lstm", "x", {1}}), ConfigError);
  EXPECT_THROW(layer_macs({"linear", "x", {1, 2}}), ConfigError);
}

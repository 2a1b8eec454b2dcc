#include <gtest/gtest.h>

#include <cmath>
#include <tuple>

#include "mmfuse/flops.hpp"

using namespace mmfuse;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.text.num_layers = 3;
  cfg.text.hidden_dim = 16;
  cfg.text.num_heads = 2;
  cfg.text.ff_dim = 32;
  cfg.text.vocab_size = 50;
  cfg.text.max_seq_len = 10;
  cfg.cnn.num_bottlenecks = 5;
  cfg.cnn.input_resolution = 16;
  cfg.vit.num_layers = 2;
  cfg.vit.hidden_dim = 16;
  cfg.vit.num_heads = 2;
  cfg.vit.ff_dim = 32;
  cfg.vit.input_resolution = 16;
  cfg.vit.patch_size = 4;
  return cfg;
}

// Standard MobileNetV2 rows (t, c, n, s), expanded one row per bottleneck.
std::vector<std::tuple<std::size_t, std::size_t, std::size_t>> mobilenet_rows() {
  const std::size_t table[7][4] = {{1, 16, 1, 1}, {6, 24, 2, 2}, {6, 32, 3, 2}, {6, 64, 4, 2},
                                   {6, 96, 3, 1}, {6, 160, 3, 2}, {6, 320, 1, 1}};
  std::vector<std::tuple<std::size_t, std::size_t, std::size_t>> rows;
  for (const auto& r : table)
    for (std::size_t i = 0; i < r[2]; ++i) rows.emplace_back(r[0], r[1], i == 0 ? r[3] : 1);
  return rows;
}

template <typename T>
Inputs<T> slice(const Inputs<T>& in, std::size_t b) {
  Inputs<T> one;
  one.batch = 1;
  one.seq_len = in.seq_len;
  one.tokens.assign(in.tokens.begin() + b * in.seq_len, in.tokens.begin() + (b + 1) * in.seq_len);
  one.mask.assign(in.mask.begin() + b * in.seq_len, in.mask.begin() + (b + 1) * in.seq_len);
  const std::size_t plane = in.image.size() / in.batch;
  one.image = Tensor<T>({1, in.image.dim(1), in.image.dim(2), in.image.dim(3)});
  std::copy(in.image.data() + b * plane, in.image.data() + (b + 1) * plane, one.image.data());
  return one;
}

}  // namespace

TEST(TextEncoder, ParameterCountMatchesClosedForm) {
  for (const auto& c : {TextEncoderConfig::toy(), small_config().text}) {
    Rng rng(1);
    TextEncoder<float> enc(c, rng);
    const std::size_t V = c.vocab_size, L = c.max_seq_len, D = c.hidden_dim, F = c.ff_dim;
    const std::size_t per_layer = 4 * (D * D + D) + (D * F + F) + (F * D + D) + 4 * D;
    const std::size_t expected = V * D + L * D + 2 * D + c.num_layers * per_layer + (D * D + D);
    EXPECT_EQ(enc.parameter_count(), expected);
  }
}

TEST(TextEncoder, PerLayerShapesAndPooler) {
  const auto cfg = small_config();
  Rng rng(2);
  TextEncoder<float> enc(cfg.text, rng);
  const auto in = probe_inputs<float>(cfg, 3, 4);
  NoGradGuard ng;
  auto out = enc.forward(in);
  ASSERT_EQ(out.per_layer.size(), cfg.text.num_layers);
  for (const auto& x : out.per_layer) EXPECT_EQ(x.shape(), (Shape{3, 10, 16}));
  ASSERT_TRUE(out.final_pooled.defined());
  EXPECT_EQ(out.final_pooled.shape(), (Shape{3, 16}));
  for (std::size_t i = 0; i < out.final_pooled.size(); ++i) EXPECT_LE(std::abs(out.final_pooled.value()[i]), 1.0f);

  auto partial = enc.forward(in, 2);
  EXPECT_EQ(partial.per_layer.size(), 2u);
  EXPECT_FALSE(partial.final_pooled.defined());

  enc.truncate(2);
  EXPECT_EQ(enc.depth(), 2u);
  EXPECT_FALSE(enc.has_pooler());
  EXPECT_FALSE(enc.forward(in).final_pooled.defined());
}

TEST(TextEncoder, RejectsBadInputs) {
  const auto cfg = small_config();
  Rng rng(2);
  TextEncoder<float> enc(cfg.text, rng);
  auto in = probe_inputs<float>(cfg, 2, 1);
  in.seq_len = 9;
  EXPECT_THROW(enc.forward(in), ShapeError);
  EXPECT_THROW(enc.forward(probe_inputs<float>(cfg, 2, 1), 4), ConfigError);
  EXPECT_THROW(enc.truncate(0), ConfigError);
  auto bad = cfg.text;
  bad.num_heads = 3;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Attention, ProbabilityRowsSumToOneAndIgnorePadding) {
  const auto cfg = small_config();
  Rng rng(3);
  TextEncoder<double> enc(cfg.text, rng);
  const auto in = probe_inputs<double>(cfg, 4, 11);
  enc.layer(1).attention_layer().record_probs(true);
  NoGradGuard ng;
  enc.forward(in, 1);
  const auto& p = enc.layer(1).attention_layer().last_probs();
  ASSERT_EQ(p.shape(), (Shape{4, 2, 10, 10}));
  for (std::size_t b = 0; b < 4; ++b)
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t i = 0; i < 10; ++i) {
        double sum = 0;
        for (std::size_t j = 0; j < 10; ++j) {
          const double v = p[((b * 2 + h) * 10 + i) * 10 + j];
          EXPECT_GE(v, 0.0);
          if (in.mask[b * 10 + j] == 0.0) { EXPECT_LT(v, 1e-12); }
          sum += v;
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
      }
}

TEST(CnnBackbone, StridesAndWidthsMatchMobileNetTable) {
  const auto rows = mobilenet_rows();
  ASSERT_EQ(rows.size(), 17u);
  for (double width : {1.0, 0.25}) {
    CnnBackboneConfig c;
    c.num_bottlenecks = 16;
    c.width_multiplier = width;
    c.input_resolution = 64;
    Rng rng(4);
    CnnBackbone<float> cnn(c, rng);
    std::size_t spatial = 32;  // stem halves 64
    for (std::size_t k = 1; k <= 16; ++k) {
      if (std::get<2>(rows[k - 1]) == 2) spatial = (spatial + 1) / 2;
      EXPECT_EQ(cnn.spatial_size(k), spatial) << "bottleneck " << k;
      EXPECT_EQ(cnn.token_count(k), spatial * spatial);
      if (width == 1.0) { EXPECT_EQ(cnn.layer_width(k), std::get<1>(rows[k - 1])); }
    }
    EXPECT_EQ(spatial, 2u);
  }
}

TEST(CnnBackbone, QuarterWidthChannelsRoundToMultiplesOfEight) {
  CnnBackboneConfig c;
  Rng rng(4);
  CnnBackbone<float> cnn(c, rng);
  const std::size_t expected[16] = {8, 8, 8, 8, 8, 8, 16, 16, 16, 16, 24, 24, 24, 40, 40, 40};
  for (std::size_t k = 1; k <= 16; ++k) EXPECT_EQ(cnn.layer_width(k), expected[k - 1]);
  EXPECT_EQ(cnn.pooled_width(), 40u);
}

TEST(CnnBackbone, ForwardShapesFollowSpatialSizes) {
  const auto cfg = small_config();
  Rng rng(5);
  CnnBackbone<float> cnn(cfg.cnn, rng);
  NoGradGuard ng;
  auto out = cnn.forward(probe_inputs<float>(cfg, 2, 3));
  ASSERT_EQ(out.per_layer.size(), 5u);
  for (std::size_t k = 1; k <= 5; ++k) {
    const auto& x = out.per_layer[k - 1];
    EXPECT_EQ(x.shape(), (Shape{2, cnn.layer_width(k), cnn.spatial_size(k), cnn.spatial_size(k)}));
    EXPECT_EQ(cnn.tap_tokens(x).shape(), (Shape{2, cnn.token_count(k), cnn.layer_width(k)}));
    EXPECT_EQ(cnn.tap_vector(x).shape(), (Shape{2, cnn.layer_width(k)}));
  }
  EXPECT_EQ(out.final_pooled.shape(), (Shape{2, cnn.pooled_width()}));

  auto in = probe_inputs<float>(cfg, 2, 3);
  in.image = Tensor<float>({2, 3, 15, 15});
  EXPECT_THROW(cnn.forward(in), ShapeError);
}

TEST(VitBackbone, TokenCountIsPatchesPlusClass) {
  const auto cfg = small_config();
  Rng rng(6);
  VitBackbone<float> vit(cfg.vit, rng);
  EXPECT_EQ(vit.token_count(1), 17u);
  NoGradGuard ng;
  auto out = vit.forward(probe_inputs<float>(cfg, 2, 3));
  for (const auto& x : out.per_layer) EXPECT_EQ(x.shape(), (Shape{2, 17, 16}));
  EXPECT_EQ(out.final_pooled.shape(), (Shape{2, 16}));

  auto bad = cfg.vit;
  bad.patch_size = 5;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Backbones, BatchEquivariance) {
  auto cfg = small_config();
  const auto in = probe_inputs<double>(cfg, 3, 21);
  for (const std::string kind : {"text", "cnn", "vit"}) {
    Rng rng(7);
    std::unique_ptr<Backbone<double>> bb;
    if (kind == "text") bb = build_text_encoder<double>(cfg.text, rng);
    if (kind == "cnn") bb = build_cnn_backbone<double>(cfg.cnn, rng);
    if (kind == "vit") bb = build_vit_backbone<double>(cfg.vit, rng);
    NoGradGuard ng;
    const auto whole = bb->forward(in).final_pooled;
    const std::size_t w = whole.dim(1);
    for (std::size_t b = 0; b < 3; ++b) {
      const auto one = bb->forward(slice(in, b)).final_pooled;
      for (std::size_t j = 0; j < w; ++j) EXPECT_NEAR(one.value()[j], whole.value()[b * w + j], 1e-10) << kind;
    }
  }
}

TEST(Backbones, SameSeedSameWeights) {
  const auto cfg = small_config();
  Rng a(9), b(9);
  TextEncoder<float> x(cfg.text, a), y(cfg.text, b);
  ParamRegistry<float> rx, ry;
  x.collect(rx);
  y.collect(ry);
  ASSERT_EQ(rx.params().size(), ry.params().size());
  for (std::size_t i = 0; i < rx.params().size(); ++i) EXPECT_EQ(rx.params()[i].var.value().vec(), ry.params()[i].var.value().vec());
}

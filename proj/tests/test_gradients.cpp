#include <gtest/gtest.h>

#include <numeric>

#include "gradcheck.hpp"

using namespace mmfuse;
using namespace gradcheck;

TEST(Gradients, AttentionBlockTenSeeds) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) EXPECT_LT(attention_block_error(seed), kTol) << "seed " << seed;
}

TEST(Gradients, ClassificationHeadTenSeeds) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) EXPECT_LT(classification_head_error(seed), kTol) << "seed " << seed;
}

TEST(Gradients, PrimitiveOps) {
  Rng rng(3);
  auto x = random_var({2, 3, 6, 6}, rng);
  auto w = random_var({4, 3, 3, 3}, rng), b = random_var({4}, rng);
  auto dw = random_var({3, 1, 3, 3}, rng), db = random_var({3}, rng);
  auto g = random_var({3}, rng), beta = random_var({3}, rng);
  Tensor<double> rm({3}), rv({3}, 1.0);
  EXPECT_LT(worst_error({x, w, b}, projected([&] { return conv2d(x, w, b, 1, 1); }, rng), rng), kTol);
  EXPECT_LT(worst_error({x, w, b}, projected([&] { return conv2d(x, w, b, 2, 1); }, rng), rng), kTol);
  EXPECT_LT(worst_error({x, dw, db}, projected([&] { return depthwise_conv2d(x, dw, db, 1, 1); }, rng), rng), kTol);
  EXPECT_LT(worst_error({x, dw, db}, projected([&] { return depthwise_conv2d(x, dw, db, 2, 1); }, rng), rng), kTol);
  EXPECT_LT(worst_error({x, g, beta}, projected([&] { return batch_norm2d(x, g, beta, rm, rv, true, 0.1, 1e-5); }, rng), rng),
            kTol);
  EXPECT_LT(worst_error({x}, projected([&] { return global_avg_pool(x); }, rng), rng), kTol);

  auto s = random_var({3, 4, 8}, rng);
  auto lg = random_var({8}, rng), lb = random_var({8}, rng);
  EXPECT_LT(worst_error({s, lg, lb}, projected([&] { return layer_norm(s, lg, lb, 1e-5); }, rng), rng), kTol);
  EXPECT_LT(worst_error({s}, projected([&] { return gelu(s); }, rng), rng), kTol);
  EXPECT_LT(worst_error({s}, projected([&] { return tanh(s); }, rng), rng), kTol);
  const std::vector<double> m = {1, 1, 0, 1, 1, 1, 1, 0, 1, 0, 0, 0};
  EXPECT_LT(worst_error({s}, projected([&] { return masked_mean_seq(s, m); }, rng), rng), kTol);

  auto q = random_var({2, 4, 8}, rng), k = random_var({2, 5, 8}, rng), v = random_var({2, 5, 8}, rng);
  const std::vector<double> km = {1, 1, 1, 0, 0, 1, 1, 1, 1, 1};
  EXPECT_LT(worst_error({q, k, v}, projected([&] { return attention(q, k, v, km, 2); }, rng), rng), kTol);

  auto table = random_var({10, 4}, rng);
  const std::vector<std::int64_t> ids = {1, 3, 3, 9, 0, 1};
  EXPECT_LT(worst_error({table}, projected([&] { return embedding(ids, 2, 3, table); }, rng), rng), kTol);
}

TEST(Gradients, WholeModelsIncludingBackbones) {
  ModelConfig base;
  base.text.num_layers = 3;
  base.text.hidden_dim = 16;
  base.text.num_heads = 2;
  base.text.ff_dim = 32;
  base.text.vocab_size = 100;
  base.text.max_seq_len = 12;
  base.cnn.num_bottlenecks = 5;
  base.cnn.input_resolution = 16;
  base.fusion.taps = {1, 2, 3};
  base.fusion.cut_layer = 2;
  base.fusion.num_attention_blocks = 2;
  base.fusion.fusion_dim = 8;
  base.fusion.attention_heads = 2;
  base.fusion.head = {8, 0.0, 2};
  SynthConfig sc;
  sc.max_seq_len = 12;
  sc.vocab_size = 100;
  sc.resolution = 16;
  auto samples = synth_dataset(6, 3, sc);
  std::vector<std::size_t> idx(samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto batch = make_batch<double>(samples, idx);
  for (auto s : {Strategy::late, Strategy::intermediate, Strategy::early}) {
    auto cfg = base;
    cfg.fusion.strategy = s;
    auto m = build_model<double>(cfg);
    m->unfreeze({"text", "vision"});
    m->set_training(true);
    auto reg = m->registry();
    auto vars = vars_of(reg);
    Rng rng(11);
    jitter(vars, rng, 0.05);
    const auto loss = [&] { return cross_entropy(m->forward(batch.inputs), batch.labels); };
    EXPECT_LT(worst_error(vars, loss, rng, 3, kKinkStep), kTol) << to_string(s);
  }
}

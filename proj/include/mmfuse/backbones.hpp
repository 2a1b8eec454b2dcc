#pragma once

// Unimodal backbones: a BERT-style text encoder, a MobileNetV2-style
// inverted-residual CNN and a ViT-style image encoder. Each exposes its
// per-layer outputs so fusion models can tap intermediate depths.

#include <json.hpp>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mmfuse/nn.hpp"

namespace mmfuse {

enum class Modality { Text, Vision };

// ----------------------------------------------------------------- configs

struct TextEncoderConfig {
  std::size_t vocab_size = 1000;
  std::size_t max_seq_len = 32;
  std::size_t num_layers = 12;
  std::size_t hidden_dim = 64;
  std::size_t num_heads = 4;
  std::size_t ff_dim = 256;
  double layer_norm_eps = 1e-12;
  std::string checkpoint;  // optional pretrained weights, see load_pretrained()
  double hidden_dropout = 0.0;  // 0.1 at full scale

  void validate() const {
    if (!(hidden_dropout >= 0.0 && hidden_dropout < 1.0)) throw ConfigError("text: hidden_dropout must be in [0,1)");
    if (vocab_size < 8) throw ConfigError("text: vocab_size must be >= 8 (special tokens)");
    if (max_seq_len == 0) throw ConfigError("text: max_seq_len must be positive");
    if (num_layers == 0) throw ConfigError("text: num_layers must be positive");
    if (hidden_dim == 0 || ff_dim == 0) throw ConfigError("text: hidden_dim and ff_dim must be positive");
    if (num_heads == 0 || hidden_dim % num_heads != 0)
      throw ConfigError("text: hidden_dim mod num_heads must be 0 (hidden_dim=" + std::to_string(hidden_dim) +
                        ", num_heads=" + std::to_string(num_heads) + ")");
  }

  static TextEncoderConfig toy() { return {}; }
  /// bert-base-uncased dimensions.
  static TextEncoderConfig full() { return {30522, 128, 12, 768, 12, 3072, 1e-12, "bert-base-uncased", 0.1}; }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TextEncoderConfig, vocab_size, max_seq_len, num_layers, hidden_dim,
                                                num_heads, ff_dim, layer_norm_eps, checkpoint, hidden_dropout)

/// One row of the inverted-residual table: expansion t, base channels c, stride s.
struct BottleneckSpec {
  std::size_t expansion, channels, stride;
};

inline const std::vector<BottleneckSpec>& mobilenet_v2_table() {
  static const std::vector<BottleneckSpec> table = [] {
    std::vector<BottleneckSpec> t;
    const std::size_t rows[7][4] = {{1, 16, 1, 1}, {6, 24, 2, 2}, {6, 32, 3, 2}, {6, 64, 4, 2},
                                    {6, 96, 3, 1}, {6, 160, 3, 2}, {6, 320, 1, 1}};
    for (const auto& r : rows)
      for (std::size_t i = 0; i < r[2]; ++i) t.push_back({r[0], r[1], i == 0 ? r[3] : 1});
    return t;
  }();
  return table;
}

/// Channel rounding used by MobileNetV2 width multipliers.
inline std::size_t make_divisible(double v, std::size_t divisor = 8) {
  auto out = std::max<std::size_t>(divisor, static_cast<std::size_t>(v + divisor / 2.0) / divisor * divisor);
  if (static_cast<double>(out) < 0.9 * v) out += divisor;
  return out;
}

struct CnnBackboneConfig {
  std::size_t num_bottlenecks = 16;
  double width_multiplier = 0.25;
  std::size_t input_resolution = 32;
  std::vector<std::size_t> stage_strides;  // empty = MobileNetV2 defaults
  std::size_t stem_stride = 2;
  std::size_t in_channels = 3;
  std::string checkpoint;

  std::vector<std::size_t> strides() const {
    if (!stage_strides.empty()) return stage_strides;
    std::vector<std::size_t> s;
    for (std::size_t i = 0; i < num_bottlenecks && i < mobilenet_v2_table().size(); ++i)
      s.push_back(mobilenet_v2_table()[i].stride);
    return s;
  }

  void validate() const {
    if (num_bottlenecks == 0 || num_bottlenecks > mobilenet_v2_table().size())
      throw ConfigError("cnn: num_bottlenecks must be in [1, " + std::to_string(mobilenet_v2_table().size()) + "]");
    if (!(width_multiplier > 0.0)) throw ConfigError("cnn: width_multiplier must be > 0");
    if (input_resolution == 0) throw ConfigError("cnn: input_resolution must be positive");
    if (stem_stride != 1 && stem_stride != 2) throw ConfigError("cnn: stem_stride must be 1 or 2");
    if (!stage_strides.empty() && stage_strides.size() != num_bottlenecks)
      throw ConfigError("cnn: stage_strides must list one stride per bottleneck");
    for (auto s : stage_strides)
      if (s != 1 && s != 2) throw ConfigError("cnn: stage strides must be 1 or 2");
  }

  static CnnBackboneConfig toy() { return {}; }
  static CnnBackboneConfig full() { return {16, 1.4, 224, {}, 2, 3, "google/mobilenet_v2_1.4_224"}; }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CnnBackboneConfig, num_bottlenecks, width_multiplier, input_resolution,
                                                stage_strides, stem_stride, in_channels, checkpoint)

struct VitBackboneConfig {
  std::size_t patch_size = 8;
  std::size_t input_resolution = 32;
  std::size_t num_layers = 12;
  std::size_t hidden_dim = 64;
  std::size_t num_heads = 4;
  std::size_t ff_dim = 256;
  std::size_t in_channels = 3;
  double layer_norm_eps = 1e-6;
  std::string checkpoint;

  std::size_t num_patches() const { return (input_resolution / patch_size) * (input_resolution / patch_size); }

  void validate() const {
    if (patch_size == 0 || input_resolution == 0) throw ConfigError("vit: patch_size and input_resolution must be positive");
    if (input_resolution % patch_size != 0)
      throw ConfigError("vit: input_resolution " + std::to_string(input_resolution) + " is not divisible by patch_size " +
                        std::to_string(patch_size));
    if (num_layers == 0) throw ConfigError("vit: num_layers must be positive");
    if (num_heads == 0 || hidden_dim % num_heads != 0) throw ConfigError("vit: hidden_dim mod num_heads must be 0");
  }

  static VitBackboneConfig toy() { return {}; }
  static VitBackboneConfig full() { return {16, 224, 12, 768, 12, 3072, 3, 1e-12, "google/vit-base-patch16-224"}; }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(VitBackboneConfig, patch_size, input_resolution, num_layers, hidden_dim,
                                                num_heads, ff_dim, in_channels, layer_norm_eps, checkpoint)

// ------------------------------------------------------------------ inputs

/// A model-ready batch. Tokens and mask are [B, L]; image is [B, C, H, W].
template <typename T>
struct Inputs {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<std::int64_t> tokens;
  std::vector<T> mask;
  Tensor<T> image;
};

template <typename T>
struct LayerOutputs {
  std::vector<Var<T>> per_layer;  // index 0 holds layer 1
  Var<T> final_pooled;            // undefined when the pooling head was not reached
};

/// Graph-value names available to backbones during export.
struct EmitContext {
  std::string tokens, mask_f, mask_bias, image;
};

struct EmittedLayers {
  std::vector<std::string> per_layer;
  std::string pooled;
};

template <typename T>
class Backbone {
 public:
  virtual ~Backbone() = default;

  virtual Modality modality() const = 0;
  virtual std::string kind() const = 0;
  /// Current depth (after any truncation).
  virtual std::size_t depth() const = 0;
  virtual bool has_pooler() const = 0;

  /// Runs layers 1..upto. final_pooled is set only when upto == depth() and
  /// the pooling function is still attached.
  virtual LayerOutputs<T> forward(const Inputs<T>& in, std::size_t upto) = 0;
  LayerOutputs<T> forward(const Inputs<T>& in) { return forward(in, depth()); }

  virtual std::size_t pooled_width() const = 0;
  /// Feature width of layer k's output (channels or hidden size).
  virtual std::size_t layer_width(std::size_t layer) const = 0;
  /// Number of tokens tap_tokens() yields for layer k.
  virtual std::size_t token_count(std::size_t layer) const = 0;

  /// Layer output reduced to one vector per sample: [B, width].
  virtual Var<T> tap_vector(const Var<T>& layer_out) const = 0;
  /// Layer output as a token sequence: [B, N, width].
  virtual Var<T> tap_tokens(const Var<T>& layer_out) const = 0;
  /// Validity mask for tap_tokens() ([B, N]); empty means every token is valid.
  virtual std::vector<T> token_mask(const Inputs<T>& in) const = 0;

  /// Drops every layer beyond `depth` and the pooling function.
  virtual void truncate(std::size_t depth) = 0;
  virtual void collect(ParamRegistry<T>& r) = 0;
  virtual void set_training(bool) {}
  virtual nlohmann::json config_json() const = 0;

  virtual EmittedLayers emit(onnx::GraphBuilder& g, const EmitContext& ctx, std::size_t upto) const = 0;
  virtual std::string emit_tap_vector(onnx::GraphBuilder& g, const std::string& layer_out) const = 0;
  virtual std::string emit_tap_tokens(onnx::GraphBuilder& g, const std::string& layer_out) const = 0;

  std::size_t parameter_count() {
    ParamRegistry<T> r;
    collect(r);
    return r.scalar_count();
  }
};

// ------------------------------------------------------------ text encoder

template <typename T>
class TextEncoder final : public Backbone<T> {
 public:
  using Backbone<T>::forward;
  TextEncoder(const TextEncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    const std::size_t D = cfg.hidden_dim;
    token_table_ = make_param<T>({cfg.vocab_size, D}, rng, 1.0);
    position_table_ = make_param<T>({cfg.max_seq_len, D}, rng, 0.1);
    emb_norm_ = LayerNorm<T>("text.embeddings.norm", D, cfg.layer_norm_eps);
    for (std::size_t i = 1; i <= cfg.num_layers; ++i)
      layers_.emplace_back("text.layer" + std::to_string(i), D, cfg.num_heads, cfg.ff_dim,
                           TransformerLayer<T>::Norm::Post, cfg.layer_norm_eps, rng);
    pooler_.emplace("text.pooler", D, D, rng);
    dropout_rng_ = rng.fork(0xD0);
  }

  Modality modality() const override { return Modality::Text; }
  std::string kind() const override { return "text"; }
  std::size_t depth() const override { return layers_.size(); }
  bool has_pooler() const override { return pooler_.has_value(); }
  std::size_t pooled_width() const override { return cfg_.hidden_dim; }
  std::size_t layer_width(std::size_t) const override { return cfg_.hidden_dim; }
  std::size_t token_count(std::size_t) const override { return cfg_.max_seq_len; }
  const TextEncoderConfig& config() const { return cfg_; }

  LayerOutputs<T> forward(const Inputs<T>& in, std::size_t upto) override {
    if (upto > depth()) throw ConfigError("text: requested layer " + std::to_string(upto) + " beyond depth " + std::to_string(depth()));
    if (in.seq_len != cfg_.max_seq_len)
      throw ShapeError("text: sequence length " + std::to_string(in.seq_len) + " != max_seq_len " + std::to_string(cfg_.max_seq_len));
    if (in.tokens.size() != in.batch * in.seq_len || in.mask.size() != in.tokens.size())
      throw ShapeError("text: tokens/mask size does not match batch x seq_len");
    trace_layer("embedding", "text.embeddings", {in.tokens.size(), cfg_.hidden_dim});
    auto x = embedding(in.tokens, in.batch, in.seq_len, token_table_);
    const DropoutSpec drop{cfg_.hidden_dropout, training_, &dropout_rng_};
    x = drop(emb_norm_(add_trailing(x, position_table_)));
    LayerOutputs<T> out;
    for (std::size_t i = 0; i < upto; ++i) {
      x = layers_[i](x, in.mask, drop);
      out.per_layer.push_back(x);
    }
    if (upto == depth() && pooler_) out.final_pooled = tanh((*pooler_)(select(x, 1, 0)));
    return out;
  }

  Var<T> tap_vector(const Var<T>& layer_out) const override { return select(layer_out, 1, 0); }
  Var<T> tap_tokens(const Var<T>& layer_out) const override { return layer_out; }
  std::vector<T> token_mask(const Inputs<T>& in) const override { return in.mask; }

  void truncate(std::size_t d) override {
    if (d == 0 || d > layers_.size()) throw ConfigError("text: cannot truncate to depth " + std::to_string(d));
    layers_.resize(d);
    pooler_.reset();
  }

  void collect(ParamRegistry<T>& r) override {
    r.add("text.embeddings.token", token_table_);
    r.add("text.embeddings.position", position_table_);
    emb_norm_.collect(r);
    for (const auto& l : layers_) l.collect(r);
    if (pooler_) pooler_->collect(r);
  }

  void set_training(bool on) override { training_ = on; }
  nlohmann::json config_json() const override { return cfg_; }

  EmittedLayers emit(onnx::GraphBuilder& g, const EmitContext& ctx, std::size_t upto) const override {
    using onnx::Attribute;
    auto x = g.op("Gather", {g.weight("text.embeddings.token", token_table_.value()), ctx.tokens},
                  {Attribute::make_int("axis", 0)});
    x = g.op("Add", {x, g.weight("text.embeddings.position", position_table_.value())});
    x = emb_norm_.emit(g, x);
    EmittedLayers out;
    for (std::size_t i = 0; i < upto; ++i) {
      x = layers_[i].emit(g, x, ctx.mask_bias);
      out.per_layer.push_back(x);
    }
    if (upto == depth() && pooler_) out.pooled = g.op("Tanh", {pooler_->emit(g, emit::select_token(g, x, 0))});
    return out;
  }
  std::string emit_tap_vector(onnx::GraphBuilder& g, const std::string& x) const override {
    return emit::select_token(g, x, 0);
  }
  std::string emit_tap_tokens(onnx::GraphBuilder&, const std::string& x) const override { return x; }

  const TransformerLayer<T>& layer(std::size_t k) const { return layers_.at(k - 1); }

 private:
  TextEncoderConfig cfg_;
  Var<T> token_table_, position_table_;
  LayerNorm<T> emb_norm_;
  std::vector<TransformerLayer<T>> layers_;
  std::optional<Linear<T>> pooler_;
  Rng dropout_rng_;
  bool training_ = false;
};

// ---------------------------------------------------------- inverted residual

template <typename T>
class ConvBnAct {
 public:
  ConvBnAct() = default;
  ConvBnAct(const std::string& name, std::size_t cin, std::size_t cout, std::size_t kernel, std::size_t stride, Rng& rng,
            bool activation, bool depthwise = false)
      : name_(name), conv_(name + ".conv", cin, cout, kernel, stride, kernel / 2, rng, false, depthwise),
        bn_(name + ".bn", cout), activation_(activation) {}

  Var<T> operator()(const Var<T>& x, bool training) {
    auto y = bn_(conv_(x), training);
    if (!activation_) return y;
    trace_layer("activation", name_ + ".relu6", {y.size()});
    return relu6(y);
  }
  void collect(ParamRegistry<T>& r) {
    conv_.collect(r);
    bn_.collect(r);
  }
  std::string emit(onnx::GraphBuilder& g, const std::string& x) const {
    auto y = bn_.emit(g, conv_.emit(g, x));
    return activation_ ? emit::relu6(g, y) : y;
  }

 private:
  std::string name_;
  Conv2d<T> conv_;
  BatchNorm2d<T> bn_;
  bool activation_ = true;
};

template <typename T>
class InvertedResidual {
 public:
  InvertedResidual(const std::string& name, std::size_t cin, std::size_t cout, std::size_t expansion, std::size_t stride,
                   Rng& rng)
      : residual_(stride == 1 && cin == cout), cout_(cout), stride_(stride) {
    const std::size_t hidden = cin * expansion;
    if (expansion != 1) expand_.emplace(name + ".expand", cin, hidden, 1, 1, rng, true);
    depthwise_ = ConvBnAct<T>(name + ".depthwise", hidden, hidden, 3, stride, rng, true, true);
    project_ = ConvBnAct<T>(name + ".project", hidden, cout, 1, 1, rng, false);
  }

  Var<T> operator()(const Var<T>& x, bool training) {
    auto h = expand_ ? (*expand_)(x, training) : x;
    auto y = project_(depthwise_(h, training), training);
    return residual_ ? add(x, y) : y;
  }
  void collect(ParamRegistry<T>& r) {
    if (expand_) expand_->collect(r);
    depthwise_.collect(r);
    project_.collect(r);
  }
  std::string emit(onnx::GraphBuilder& g, const std::string& x) const {
    auto h = expand_ ? expand_->emit(g, x) : x;
    auto y = project_.emit(g, depthwise_.emit(g, h));
    return residual_ ? g.op("Add", {x, y}) : y;
  }
  std::size_t out_channels() const { return cout_; }
  std::size_t stride() const { return stride_; }

 private:
  std::optional<ConvBnAct<T>> expand_;
  ConvBnAct<T> depthwise_, project_;
  bool residual_;
  std::size_t cout_, stride_;
};

template <typename T>
class CnnBackbone final : public Backbone<T> {
 public:
  using Backbone<T>::forward;
  CnnBackbone(const CnnBackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    const auto strides = cfg.strides();
    std::size_t cin = make_divisible(32 * cfg.width_multiplier);
    stem_ = ConvBnAct<T>("vision.stem", cfg.in_channels, cin, 3, cfg.stem_stride, rng, true);
    std::size_t spatial = cfg.input_resolution;
    spatial = (spatial + 2 - 3) / cfg.stem_stride + 1;
    for (std::size_t i = 0; i < cfg.num_bottlenecks; ++i) {
      const auto& row = mobilenet_v2_table()[i];
      const std::size_t cout = make_divisible(static_cast<double>(row.channels) * cfg.width_multiplier);
      blocks_.emplace_back("vision.bottleneck" + std::to_string(i + 1), cin, cout, row.expansion, strides[i], rng);
      spatial = (spatial + 2 - 3) / strides[i] + 1;
      spatial_.push_back(spatial);
      cin = cout;
    }
  }

  Modality modality() const override { return Modality::Vision; }
  std::string kind() const override { return "cnn"; }
  std::size_t depth() const override { return blocks_.size(); }
  bool has_pooler() const override { return pooled_; }
  std::size_t pooled_width() const override { return blocks_.back().out_channels(); }
  std::size_t layer_width(std::size_t k) const override { return blocks_.at(k - 1).out_channels(); }
  std::size_t token_count(std::size_t k) const override { return spatial_.at(k - 1) * spatial_.at(k - 1); }
  std::size_t spatial_size(std::size_t k) const { return spatial_.at(k - 1); }
  const CnnBackboneConfig& config() const { return cfg_; }

  LayerOutputs<T> forward(const Inputs<T>& in, std::size_t upto) override {
    if (upto > depth()) throw ConfigError("cnn: requested bottleneck " + std::to_string(upto) + " beyond depth " + std::to_string(depth()));
    check_image(in.image);
    LayerOutputs<T> out;
    auto x = stem_(Var<T>(in.image), training_);
    for (std::size_t i = 0; i < upto; ++i) {
      x = blocks_[i](x, training_);
      out.per_layer.push_back(x);
    }
    if (upto == depth() && pooled_) {
      trace_layer("pool", "vision.pool", {x.size()});
      out.final_pooled = global_avg_pool(x);
    }
    return out;
  }

  Var<T> tap_vector(const Var<T>& x) const override { return global_avg_pool(x); }
  Var<T> tap_tokens(const Var<T>& x) const override {
    const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    return permute(reshape(x, {B, C, HW}), {0, 2, 1});
  }
  std::vector<T> token_mask(const Inputs<T>&) const override { return {}; }

  void truncate(std::size_t d) override {
    if (d == 0 || d > blocks_.size()) throw ConfigError("cnn: cannot truncate to depth " + std::to_string(d));
    blocks_.erase(blocks_.begin() + static_cast<std::ptrdiff_t>(d), blocks_.end());
    spatial_.resize(d);
    pooled_ = false;
  }

  void collect(ParamRegistry<T>& r) override {
    stem_.collect(r);
    for (auto& b : blocks_) b.collect(r);
  }
  void set_training(bool on) override { training_ = on; }
  nlohmann::json config_json() const override { return cfg_; }

  EmittedLayers emit(onnx::GraphBuilder& g, const EmitContext& ctx, std::size_t upto) const override {
    EmittedLayers out;
    auto x = stem_.emit(g, ctx.image);
    for (std::size_t i = 0; i < upto; ++i) {
      x = blocks_[i].emit(g, x);
      out.per_layer.push_back(x);
    }
    if (upto == depth() && pooled_) out.pooled = emit_tap_vector(g, x);
    return out;
  }
  std::string emit_tap_vector(onnx::GraphBuilder& g, const std::string& x) const override {
    auto pooled = g.op("GlobalAveragePool", {x});
    return g.op("Flatten", {pooled}, {onnx::Attribute::make_int("axis", 1)});
  }
  std::string emit_tap_tokens(onnx::GraphBuilder& g, const std::string& x) const override {
    auto flat = g.op("Reshape", {x, g.int_const("flatten_hw", {0, 0, -1})});
    return g.op("Transpose", {flat}, {onnx::Attribute::make_ints("perm", {0, 2, 1})});
  }

 private:
  void check_image(const Tensor<T>& img) const {
    const std::size_t r = cfg_.input_resolution;
    if (img.rank() != 4 || img.dim(1) != cfg_.in_channels || img.dim(2) != r || img.dim(3) != r)
      throw ShapeError("cnn: expected image [B," + std::to_string(cfg_.in_channels) + "," + std::to_string(r) + "," +
                       std::to_string(r) + "], got " + shape_str(img.shape()));
  }

  CnnBackboneConfig cfg_;
  ConvBnAct<T> stem_;
  std::vector<InvertedResidual<T>> blocks_;
  std::vector<std::size_t> spatial_;
  bool pooled_ = true;
  bool training_ = false;
};

// --------------------------------------------------------------------- ViT

template <typename T>
class VitBackbone final : public Backbone<T> {
 public:
  using Backbone<T>::forward;
  VitBackbone(const VitBackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    const std::size_t D = cfg.hidden_dim;
    patch_embed_ = Conv2d<T>("vision.patch_embed", cfg.in_channels, D, cfg.patch_size, cfg.patch_size, 0, rng, true);
    cls_token_ = make_param<T>({1, 1, D}, rng, 0.1);
    position_table_ = make_param<T>({cfg.num_patches() + 1, D}, rng, 0.1);
    for (std::size_t i = 1; i <= cfg.num_layers; ++i)
      layers_.emplace_back("vision.layer" + std::to_string(i), D, cfg.num_heads, cfg.ff_dim,
                           TransformerLayer<T>::Norm::Pre, cfg.layer_norm_eps, rng);
    final_norm_.emplace("vision.norm", D, cfg.layer_norm_eps);
  }

  Modality modality() const override { return Modality::Vision; }
  std::string kind() const override { return "vit"; }
  std::size_t depth() const override { return layers_.size(); }
  bool has_pooler() const override { return final_norm_.has_value(); }
  std::size_t pooled_width() const override { return cfg_.hidden_dim; }
  std::size_t layer_width(std::size_t) const override { return cfg_.hidden_dim; }
  std::size_t token_count(std::size_t) const override { return cfg_.num_patches() + 1; }
  const VitBackboneConfig& config() const { return cfg_; }

  LayerOutputs<T> forward(const Inputs<T>& in, std::size_t upto) override {
    if (upto > depth()) throw ConfigError("vit: requested layer " + std::to_string(upto) + " beyond depth " + std::to_string(depth()));
    const std::size_t r = cfg_.input_resolution;
    const auto& img = in.image;
    if (img.rank() != 4 || img.dim(1) != cfg_.in_channels || img.dim(2) != r || img.dim(3) != r)
      throw ShapeError("vit: expected image [B," + std::to_string(cfg_.in_channels) + "," + std::to_string(r) + "," +
                       std::to_string(r) + "], got " + shape_str(img.shape()));
    const std::size_t B = img.dim(0), D = cfg_.hidden_dim, N = cfg_.num_patches();
    auto patches = patch_embed_(Var<T>(img));
    auto tokens = permute(reshape(patches, {B, D, N}), {0, 2, 1});
    auto x = add_trailing(concat<T>({expand_batch(cls_token_, B), tokens}, 1), position_table_);
    LayerOutputs<T> out;
    for (std::size_t i = 0; i < upto; ++i) {
      x = layers_[i](x, {});
      out.per_layer.push_back(x);
    }
    if (upto == depth() && final_norm_) out.final_pooled = select((*final_norm_)(x), 1, 0);
    return out;
  }

  Var<T> tap_vector(const Var<T>& x) const override { return select(x, 1, 0); }
  Var<T> tap_tokens(const Var<T>& x) const override { return x; }
  std::vector<T> token_mask(const Inputs<T>&) const override { return {}; }

  void truncate(std::size_t d) override {
    if (d == 0 || d > layers_.size()) throw ConfigError("vit: cannot truncate to depth " + std::to_string(d));
    layers_.resize(d);
    final_norm_.reset();
  }

  void collect(ParamRegistry<T>& r) override {
    patch_embed_.collect(r);
    r.add("vision.cls_token", cls_token_);
    r.add("vision.position", position_table_);
    for (const auto& l : layers_) l.collect(r);
    if (final_norm_) final_norm_->collect(r);
  }
  nlohmann::json config_json() const override { return cfg_; }

  EmittedLayers emit(onnx::GraphBuilder& g, const EmitContext& ctx, std::size_t upto) const override {
    using onnx::Attribute;
    const auto D = static_cast<std::int64_t>(cfg_.hidden_dim);
    auto patches = patch_embed_.emit(g, ctx.image);
    auto flat = g.op("Reshape", {patches, g.int_const("flatten_hw", {0, D, -1})});
    auto tokens = g.op("Transpose", {flat}, {Attribute::make_ints("perm", {0, 2, 1})});
    auto cls = g.op("Expand", {g.weight("vision.cls_token", cls_token_.value()), emit::batch_shape(g, ctx.image, {1, D})});
    auto x = g.op("Concat", {cls, tokens}, {Attribute::make_int("axis", 1)});
    x = g.op("Add", {x, g.weight("vision.position", position_table_.value())});
    EmittedLayers out;
    for (std::size_t i = 0; i < upto; ++i) {
      x = layers_[i].emit(g, x, "");
      out.per_layer.push_back(x);
    }
    if (upto == depth() && final_norm_) out.pooled = emit::select_token(g, final_norm_->emit(g, x), 0);
    return out;
  }
  std::string emit_tap_vector(onnx::GraphBuilder& g, const std::string& x) const override {
    return emit::select_token(g, x, 0);
  }
  std::string emit_tap_tokens(onnx::GraphBuilder&, const std::string& x) const override { return x; }

  const TransformerLayer<T>& layer(std::size_t k) const { return layers_.at(k - 1); }

 private:
  VitBackboneConfig cfg_;
  Conv2d<T> patch_embed_;
  Var<T> cls_token_, position_table_;
  std::vector<TransformerLayer<T>> layers_;
  std::optional<LayerNorm<T>> final_norm_;
};

// ----------------------------------------------------------------- builders

template <typename T>
std::unique_ptr<TextEncoder<T>> build_text_encoder(const TextEncoderConfig& cfg, Rng& rng) {
  return std::make_unique<TextEncoder<T>>(cfg, rng);
}

template <typename T>
std::unique_ptr<CnnBackbone<T>> build_cnn_backbone(const CnnBackboneConfig& cfg, Rng& rng) {
  return std::make_unique<CnnBackbone<T>>(cfg, rng);
}

template <typename T>
std::unique_ptr<VitBackbone<T>> build_vit_backbone(const VitBackboneConfig& cfg, Rng& rng) {
  return std::make_unique<VitBackbone<T>>(cfg, rng);
}

}  // namespace mmfuse

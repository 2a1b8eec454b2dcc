#pragma once

// Late, intermediate and early fusion of a text backbone with a vision
// backbone, plus the unimodal baselines that share the same head.

#include <algorithm>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "mmfuse/backbones.hpp"

namespace mmfuse {

/// text_only and vision_only are the unimodal baselines (one backbone's
/// pooled output into the shared head).
enum class Strategy { late, intermediate, early, text_only, vision_only };

NLOHMANN_JSON_SERIALIZE_ENUM(Strategy, {{Strategy::late, "late"},
                                        {Strategy::intermediate, "intermediate"},
                                        {Strategy::early, "early"},
                                        {Strategy::text_only, "text_only"},
                                        {Strategy::vision_only, "vision_only"}})

inline std::string to_string(Strategy s) { return nlohmann::json(s).get<std::string>(); }

inline Strategy parse_strategy(const std::string& name) {
  for (auto s : {Strategy::late, Strategy::intermediate, Strategy::early, Strategy::text_only, Strategy::vision_only})
    if (to_string(s) == name) return s;
  throw ConfigError("unknown strategy '" + name + "' (expected late, intermediate, early, text_only or vision_only)");
}

inline bool is_fused(Strategy s) { return s == Strategy::late || s == Strategy::intermediate || s == Strategy::early; }

/// Table 2 modality tag.
inline std::string modality_tag(Strategy s) {
  if (s == Strategy::text_only) return "T";
  if (s == Strategy::vision_only) return "V";
  return "T+V";
}

struct HeadConfig {
  std::size_t hidden_dim = 64;
  double dropout = 0.1;
  std::size_t num_classes = 2;

  void validate() const {
    if (hidden_dim == 0) throw ConfigError("head: hidden_dim must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("head: dropout must be in [0,1)");
    if (num_classes != 2) throw ConfigError("head: num_classes is fixed at 2");
  }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(HeadConfig, hidden_dim, dropout, num_classes)

struct AttentionBlockConfig {
  std::size_t num_heads = 4;
  std::size_t model_dim = 32;
  std::size_t ff_expansion = 2;

  void validate() const {
    if (num_heads == 0 || model_dim == 0 || ff_expansion == 0)
      throw ConfigError("attention block: num_heads, model_dim and ff_expansion must be positive");
    if (model_dim % num_heads != 0)
      throw ConfigError("attention block: model_dim " + std::to_string(model_dim) + " is not divisible by num_heads " +
                        std::to_string(num_heads));
  }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AttentionBlockConfig, num_heads, model_dim, ff_expansion)

struct FusionSpec {
  Strategy strategy = Strategy::late;
  std::vector<std::size_t> taps{4, 7, 8};
  std::size_t cut_layer = 6;
  std::size_t num_attention_blocks = 4;
  std::size_t fusion_dim = 32;
  std::size_t attention_heads = 4;
  std::size_t ff_expansion = 2;
  HeadConfig head;

  AttentionBlockConfig block_config() const { return {attention_heads, fusion_dim, ff_expansion}; }

  /// Every field is checked regardless of strategy.
  void validate() const {
    if (taps.empty()) throw ConfigError("fusion: taps must not be empty");
    for (std::size_t i = 0; i < taps.size(); ++i) {
      if (taps[i] == 0) throw ConfigError("fusion: taps are 1-based layer indices");
      if (i > 0 && taps[i] <= taps[i - 1]) throw ConfigError("fusion: taps must be strictly ascending");
    }
    if (cut_layer == 0) throw ConfigError("fusion: cut_layer must be >= 1");
    if (num_attention_blocks == 0) throw ConfigError("fusion: num_attention_blocks must be >= 1");
    if (fusion_dim == 0) throw ConfigError("fusion: fusion_dim must be positive");
    if (attention_heads == 0 || fusion_dim % attention_heads != 0)
      throw ConfigError("fusion: fusion_dim " + std::to_string(fusion_dim) + " is not divisible by attention_heads " +
                        std::to_string(attention_heads));
    block_config().validate();
    head.validate();
  }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FusionSpec, strategy, taps, cut_layer, num_attention_blocks, fusion_dim,
                                                attention_heads, ff_expansion, head)

// ---------------------------------------------------------------- head

template <typename T>
class ClassificationHead {
 public:
  ClassificationHead() = default;
  ClassificationHead(std::size_t input_dim, const HeadConfig& cfg, Rng& rng)
      : cfg_(cfg), input_dim_(input_dim), fc1_("head.fc1", input_dim, cfg.hidden_dim, rng),
        fc2_("head.fc2", cfg.hidden_dim, cfg.num_classes, rng) {
    cfg.validate();
  }

  Var<T> operator()(const Var<T>& z, bool training, Rng& rng) const {
    if (z.shape().size() != 2 || z.dim(1) != input_dim_)
      throw ShapeError("head: expected [B," + std::to_string(input_dim_) + "], got " + shape_str(z.shape()));
    auto h = fc1_(z);
    trace_layer("activation", "head.relu", {h.size()});
    return fc2_(dropout(relu(h), cfg_.dropout, training, rng));
  }

  void collect(ParamRegistry<T>& r) const {
    fc1_.collect(r);
    fc2_.collect(r);
  }

  std::string emit(onnx::GraphBuilder& g, const std::string& z) const {
    return fc2_.emit(g, g.op("Relu", {fc1_.emit(g, z)}));
  }

  std::size_t input_dim() const { return input_dim_; }

 private:
  HeadConfig cfg_;
  std::size_t input_dim_ = 0;
  Linear<T> fc1_, fc2_;
};

/// Residual self-attention, post-norm, then a residual feed-forward
/// sublayer of width model_dim * ff_expansion.
template <typename T>
class AttentionBlock {
 public:
  AttentionBlock() = default;
  AttentionBlock(const std::string& name, const AttentionBlockConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    layer_ = TransformerLayer<T>(name, cfg.model_dim, cfg.num_heads, cfg.model_dim * cfg.ff_expansion,
                                 TransformerLayer<T>::Norm::Post, 1e-5, rng);
  }

  Var<T> operator()(const Var<T>& x, const std::vector<T>& key_mask) const { return layer_(x, key_mask); }
  void collect(ParamRegistry<T>& r) const { layer_.collect(r); }
  std::string emit(onnx::GraphBuilder& g, const std::string& x, const std::string& bias) const {
    return layer_.emit(g, x, bias);
  }
  const SelfAttention<T>& attention_layer() const { return layer_.attention_layer(); }
  const AttentionBlockConfig& config() const { return cfg_; }

 private:
  AttentionBlockConfig cfg_;
  TransformerLayer<T> layer_;
};

/// Free-function forms of the shared components.
template <typename T>
Var<T> attention_block(const AttentionBlock<T>& block, const Var<T>& x, const std::vector<T>& key_mask = {}) {
  return block(x, key_mask);
}

template <typename T>
Var<T> classification_head(const ClassificationHead<T>& head, const Var<T>& z) {
  Rng unused(0);
  return head(z, false, unused);
}

// --------------------------------------------------------------- model

/// Every model the toolkit trains: a fusion strategy or a unimodal baseline.
struct ModelConfig {
  TextEncoderConfig text;
  std::string vision_kind = "cnn";  // cnn | vit
  CnnBackboneConfig cnn;
  VitBackboneConfig vit;
  FusionSpec fusion;
  std::uint64_t seed = 0;

  void validate() const {
    text.validate();
    if (vision_kind == "cnn")
      cnn.validate();
    else if (vision_kind == "vit")
      vit.validate();
    else
      throw ConfigError("model: vision kind must be 'cnn' or 'vit', got '" + vision_kind + "'");
    fusion.validate();
  }

  std::string vision_tag() const { return vision_kind == "cnn" ? "M" : "V"; }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, text, vision_kind, cnn, vit, fusion, seed)

/// Canonical FNV-1a-64 of a JSON value (keys are sorted by nlohmann::json).
inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

inline std::string config_hash(const nlohmann::json& j) { return hex64(fnv1a64(j.dump())); }

enum class TapPath { linear, attention };

struct TapWiring {
  std::size_t layer;
  TapPath path;
};

template <typename T>
class FusedModel {
 public:
  FusedModel(const ModelConfig& cfg, std::unique_ptr<Backbone<T>> text, std::unique_ptr<Backbone<T>> vision, Rng& rng)
      : cfg_(cfg), strategy_(cfg.fusion.strategy), text_(std::move(text)), vision_(std::move(vision)),
        dropout_rng_(rng.fork(0xD00D)) {
    const auto& spec = cfg.fusion;
    spec.validate();
    const std::size_t f = spec.fusion_dim;
    std::size_t head_in = 0;
    switch (strategy_) {
      case Strategy::late:
        need_both();
        head_in = text_->pooled_width() + vision_->pooled_width();
        break;
      case Strategy::text_only:
        if (!text_) throw ConfigError("text_only model needs a text backbone");
        vision_.reset();
        head_in = text_->pooled_width();
        break;
      case Strategy::vision_only:
        if (!vision_) throw ConfigError("vision_only model needs a vision backbone");
        text_.reset();
        head_in = vision_->pooled_width();
        break;
      case Strategy::intermediate: {
        need_both();
        const std::size_t upto = spec.taps.back();
        check_depth(upto, "tap");
        text_->truncate(upto);
        vision_->truncate(upto);
        for (std::size_t j = 0; j < spec.taps.size(); ++j) {
          const std::size_t t = spec.taps[j];
          const std::string base = "fusion.tap" + std::to_string(t);
          Tap tap;
          tap.layer = t;
          tap.text_proj = Linear<T>(base + ".text_proj", text_->layer_width(t), f, rng);
          tap.vision_proj = Linear<T>(base + ".vision_proj", vision_->layer_width(t), f, rng);
          if (j + 1 < spec.taps.size())
            tap.join = Linear<T>(base + ".join", 2 * f, 2 * f, rng);
          else
            tap.block = AttentionBlock<T>(base + ".block", spec.block_config(), rng);
          taps_.push_back(std::move(tap));
        }
        head_in = spec.taps.size() * 2 * f;
        break;
      }
      case Strategy::early: {
        need_both();
        check_depth(spec.cut_layer, "cut_layer");
        text_->truncate(spec.cut_layer);
        vision_->truncate(spec.cut_layer);
        early_text_proj_ = Linear<T>("fusion.text_proj", text_->layer_width(spec.cut_layer), f, rng);
        early_vision_proj_ = Linear<T>("fusion.vision_proj", vision_->layer_width(spec.cut_layer), f, rng);
        for (std::size_t i = 1; i <= spec.num_attention_blocks; ++i)
          blocks_.emplace_back("fusion.block" + std::to_string(i), spec.block_config(), rng);
        head_in = f;
        break;
      }
    }
    head_ = ClassificationHead<T>(head_in, spec.head, rng);
    if (strategy_ == Strategy::late) freeze({"text", "vision"});
  }

  Strategy strategy() const { return strategy_; }
  const ModelConfig& config() const { return cfg_; }
  nlohmann::json config_json() const { return cfg_; }
  std::string hash() const { return config_hash(config_json()); }
  Backbone<T>* text_backbone() const { return text_.get(); }
  Backbone<T>* vision_backbone() const { return vision_.get(); }
  const ClassificationHead<T>& head() const { return head_; }
  const std::vector<AttentionBlock<T>>& blocks() const { return blocks_; }
  std::size_t head_input_width() const { return head_.input_dim(); }

  std::vector<TapWiring> tap_wiring() const {
    std::vector<TapWiring> out;
    for (const auto& t : taps_) out.push_back({t.layer, t.block ? TapPath::attention : TapPath::linear});
    return out;
  }

  /// Logits [B, 2].
  Var<T> forward(const Inputs<T>& in) {
    if (in.batch == 0) throw ShapeError("empty batch");
    if (text_ && vision_ && in.image.dim(0) != in.batch)
      throw ShapeError("batch size mismatch: text " + std::to_string(in.batch) + " vs image " +
                       std::to_string(in.image.dim(0)));
    return classify(features(in));
  }

  /// Head only, for precomputed features.
  Var<T> classify(const Var<T>& z) { return head_(z, training_, dropout_rng_); }

  /// True when both backbones are frozen, so features() is a fixed function
  /// of the input and can be cached across epochs.
  bool backbones_frozen() const {
    return (!text_ || frozen_.contains("text")) && (!vision_ || frozen_.contains("vision"));
  }

  /// The head's input for a batch.
  Var<T> features(const Inputs<T>& in) {
    switch (strategy_) {
      case Strategy::late: {
        auto t = text_->forward(in), v = vision_->forward(in);
        return concat<T>({t.final_pooled, v.final_pooled}, 1);
      }
      case Strategy::text_only:
        return text_->forward(in).final_pooled;
      case Strategy::vision_only:
        return vision_->forward(in).final_pooled;
      case Strategy::intermediate:
        return intermediate_features(in);
      case Strategy::early:
        return early_features(in);
    }
    throw ConfigError("unreachable strategy");
  }

  void collect(ParamRegistry<T>& r) {
    if (text_) text_->collect(r);
    if (vision_) vision_->collect(r);
    for (const auto& t : taps_) {
      t.text_proj.collect(r);
      t.vision_proj.collect(r);
      if (t.join) t.join->collect(r);
      if (t.block) t.block->collect(r);
    }
    if (strategy_ == Strategy::early) {
      early_text_proj_.collect(r);
      early_vision_proj_.collect(r);
      for (const auto& b : blocks_) b.collect(r);
    }
    head_.collect(r);
  }

  ParamRegistry<T> registry() {
    ParamRegistry<T> r;
    collect(r);
    return r;
  }

  std::size_t parameter_count() { return registry().scalar_count(); }

  /// Frozen groups get no gradients and no optimizer state; their BatchNorm
  /// statistics stay fixed as well.
  void freeze(const std::set<std::string>& groups) { set_frozen(groups, true); }
  void unfreeze(const std::set<std::string>& groups) { set_frozen(groups, false); }
  const std::set<std::string>& frozen_groups() const { return frozen_; }

  std::vector<std::string> group_ids() { return registry().groups(); }

  void set_training(bool on) {
    training_ = on;
    if (text_) text_->set_training(on && !frozen_.contains("text"));
    if (vision_) vision_->set_training(on && !frozen_.contains("vision"));
  }
  bool training() const { return training_; }

  /// Emits the evaluation-mode graph; returns the logits value name.
  std::string emit(onnx::GraphBuilder& g, const EmitContext& ctx) const {
    std::string z;
    switch (strategy_) {
      case Strategy::late: {
        auto t = text_->emit(g, ctx, text_->depth()).pooled;
        auto v = vision_->emit(g, ctx, vision_->depth()).pooled;
        z = g.op("Concat", {t, v}, {onnx::Attribute::make_int("axis", 1)});
        break;
      }
      case Strategy::text_only:
        z = text_->emit(g, ctx, text_->depth()).pooled;
        break;
      case Strategy::vision_only:
        z = vision_->emit(g, ctx, vision_->depth()).pooled;
        break;
      case Strategy::intermediate:
        z = emit_intermediate(g, ctx);
        break;
      case Strategy::early:
        z = emit_early(g, ctx);
        break;
    }
    return head_.emit(g, z);
  }

 private:
  struct Tap {
    std::size_t layer = 0;
    Linear<T> text_proj, vision_proj;
    std::optional<Linear<T>> join;
    std::optional<AttentionBlock<T>> block;
  };

  void need_both() const {
    if (!text_ || !vision_) throw ConfigError(to_string(strategy_) + " fusion needs both a text and a vision backbone");
  }

  void check_depth(std::size_t layer, const char* what) const {
    if (layer > text_->depth() || layer > vision_->depth())
      throw ConfigError(std::string("fusion: ") + what + " " + std::to_string(layer) +
                        " exceeds backbone depth (text " + std::to_string(text_->depth()) + ", vision " +
                        std::to_string(vision_->depth()) + ")");
  }

  void set_frozen(const std::set<std::string>& groups, bool frozen) {
    auto reg = registry();
    const auto valid = reg.groups();
    for (const auto& g : groups)
      if (std::find(valid.begin(), valid.end(), g) == valid.end()) {
        std::string list;
        for (const auto& v : valid) list += (list.empty() ? "" : ", ") + v;
        throw ConfigError("unknown parameter group '" + g + "' (valid: " + list + ")");
      }
    for (const auto& p : reg.params())
      if (groups.contains(ParamRegistry<T>::group_of(p.name))) {
        Var<T> v = p.var;
        v.set_requires_grad(!frozen);
      }
    for (const auto& g : groups) {
      if (frozen)
        frozen_.insert(g);
      else
        frozen_.erase(g);
    }
    set_training(training_);
  }

  /// Text validity followed by all-ones for the vision tokens.
  std::vector<T> joint_mask(const Inputs<T>& in, std::size_t vision_tokens) const {
    const std::size_t B = in.batch, L = in.seq_len;
    std::vector<T> m(B * (L + vision_tokens), T(1));
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t s = 0; s < L; ++s) m[b * (L + vision_tokens) + s] = in.mask[b * L + s];
    return m;
  }

  Var<T> intermediate_features(const Inputs<T>& in) {
    const std::size_t upto = taps_.back().layer;
    auto t = text_->forward(in, upto), v = vision_->forward(in, upto);
    std::vector<Var<T>> parts;
    for (const auto& tap : taps_) {
      const auto& tl = t.per_layer[tap.layer - 1];
      const auto& vl = v.per_layer[tap.layer - 1];
      if (tap.join) {
        auto joined = concat<T>({tap.text_proj(text_->tap_vector(tl)), tap.vision_proj(vision_->tap_vector(vl))}, 1);
        parts.push_back((*tap.join)(joined));
        continue;
      }
      auto tt = tap.text_proj(text_->tap_tokens(tl));
      auto vt = tap.vision_proj(vision_->tap_tokens(vl));
      const std::size_t L = tt.dim(1), N = vt.dim(1);
      auto x = (*tap.block)(concat<T>({tt, vt}, 1), joint_mask(in, N));
      parts.push_back(concat<T>({masked_mean_seq(narrow(x, 1, 0, L), in.mask), masked_mean_seq(narrow(x, 1, L, N), {})}, 1));
    }
    return concat<T>(parts, 1);
  }

  Var<T> early_features(const Inputs<T>& in) {
    const std::size_t cut = cfg_.fusion.cut_layer;
    auto t = text_->forward(in, cut), v = vision_->forward(in, cut);
    auto tt = early_text_proj_(text_->tap_tokens(t.per_layer[cut - 1]));
    auto vt = early_vision_proj_(vision_->tap_tokens(v.per_layer[cut - 1]));
    const auto mask = joint_mask(in, vt.dim(1));
    auto x = concat<T>({tt, vt}, 1);
    for (const auto& b : blocks_) x = b(x, mask);
    return masked_mean_seq(x, mask);
  }

  /// [B, L + N] float mask: text mask (or zeros) followed by N ones (or zeros).
  static std::string emit_joint(onnx::GraphBuilder& g, const EmitContext& ctx, std::int64_t n, bool text_on, bool vision_on) {
    auto ones = emit::batch_ones(g, ctx.image, n);
    auto tpart = text_on ? ctx.mask_f : g.op("Mul", {ctx.mask_f, g.scalar("zero", 0.0f)});
    auto vpart = vision_on ? ones : g.op("Mul", {ones, g.scalar("zero", 0.0f)});
    return g.op("Concat", {tpart, vpart}, {onnx::Attribute::make_int("axis", 1)});
  }

  std::string emit_intermediate(onnx::GraphBuilder& g, const EmitContext& ctx) const {
    const std::size_t upto = taps_.back().layer;
    auto t = text_->emit(g, ctx, upto), v = vision_->emit(g, ctx, upto);
    std::vector<std::string> parts;
    const auto axis1 = onnx::Attribute::make_int("axis", 1);
    for (const auto& tap : taps_) {
      const auto& tl = t.per_layer[tap.layer - 1];
      const auto& vl = v.per_layer[tap.layer - 1];
      if (tap.join) {
        auto joined = g.op("Concat", {tap.text_proj.emit(g, text_->emit_tap_vector(g, tl)),
                                      tap.vision_proj.emit(g, vision_->emit_tap_vector(g, vl))}, {axis1});
        parts.push_back(tap.join->emit(g, joined));
        continue;
      }
      auto tt = tap.text_proj.emit(g, text_->emit_tap_tokens(g, tl));
      auto vt = tap.vision_proj.emit(g, vision_->emit_tap_tokens(g, vl));
      const auto n = static_cast<std::int64_t>(vision_->token_count(tap.layer));
      auto x = tap.block->emit(g, g.op("Concat", {tt, vt}, {axis1}), emit::mask_bias(g, emit_joint(g, ctx, n, true, true)));
      auto pt = emit::masked_mean(g, x, emit_joint(g, ctx, n, true, false));
      auto pv = emit::masked_mean(g, x, emit_joint(g, ctx, n, false, true));
      parts.push_back(g.op("Concat", {pt, pv}, {axis1}));
    }
    return g.op("Concat", parts, {axis1});
  }

  std::string emit_early(onnx::GraphBuilder& g, const EmitContext& ctx) const {
    const std::size_t cut = cfg_.fusion.cut_layer;
    auto t = text_->emit(g, ctx, cut), v = vision_->emit(g, ctx, cut);
    auto tt = early_text_proj_.emit(g, text_->emit_tap_tokens(g, t.per_layer[cut - 1]));
    auto vt = early_vision_proj_.emit(g, vision_->emit_tap_tokens(g, v.per_layer[cut - 1]));
    const auto n = static_cast<std::int64_t>(vision_->token_count(cut));
    auto mask = emit_joint(g, ctx, n, true, true);
    auto bias = emit::mask_bias(g, mask);
    auto x = g.op("Concat", {tt, vt}, {onnx::Attribute::make_int("axis", 1)});
    for (const auto& b : blocks_) x = b.emit(g, x, bias);
    return emit::masked_mean(g, x, mask);
  }

  ModelConfig cfg_;
  Strategy strategy_;
  std::unique_ptr<Backbone<T>> text_, vision_;
  std::vector<Tap> taps_;
  Linear<T> early_text_proj_, early_vision_proj_;
  std::vector<AttentionBlock<T>> blocks_;
  ClassificationHead<T> head_;
  std::set<std::string> frozen_;
  Rng dropout_rng_;
  bool training_ = false;
};

/// Builds backbones and the model from one seed. Backbones are always built at
/// full configured depth first, so the same seed yields the same backbone
/// weights across strategies before truncation.
template <typename T>
std::unique_ptr<FusedModel<T>> build_model(const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  Rng text_rng = rng.fork(1), vision_rng = rng.fork(2), fusion_rng = rng.fork(3);
  std::unique_ptr<Backbone<T>> text, vision;
  if (cfg.fusion.strategy != Strategy::vision_only) text = build_text_encoder<T>(cfg.text, text_rng);
  if (cfg.fusion.strategy != Strategy::text_only) {
    if (cfg.vision_kind == "cnn")
      vision = build_cnn_backbone<T>(cfg.cnn, vision_rng);
    else
      vision = build_vit_backbone<T>(cfg.vit, vision_rng);
  }
  return std::make_unique<FusedModel<T>>(cfg, std::move(text), std::move(vision), fusion_rng);
}

template <typename T>
std::unique_ptr<FusedModel<T>> build_late_fusion(ModelConfig cfg) {
  cfg.fusion.strategy = Strategy::late;
  return build_model<T>(cfg);
}

template <typename T>
std::unique_ptr<FusedModel<T>> build_intermediate_fusion(ModelConfig cfg) {
  cfg.fusion.strategy = Strategy::intermediate;
  return build_model<T>(cfg);
}

template <typename T>
std::unique_ptr<FusedModel<T>> build_early_fusion(ModelConfig cfg) {
  cfg.fusion.strategy = Strategy::early;
  return build_model<T>(cfg);
}

}  // namespace mmfuse

#pragma once

// Parameterised layers. Each layer owns named parameters, runs its forward
// pass through the differentiable ops, reports itself to an active FLOP trace
// and can describe its evaluation-mode computation as ONNX nodes.

#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "mmfuse/onnx.hpp"
#include "mmfuse/ops.hpp"

namespace mmfuse {

// -------------------------------------------------------------- registry

template <typename T>
class ParamRegistry {
 public:
  struct Param {
    std::string name;
    Var<T> var;
  };
  struct Buffer {
    std::string name;
    Tensor<T>* tensor;
  };

  void add(const std::string& name, const Var<T>& v) {
    if (index_.contains(name)) throw ConfigError("duplicate parameter name " + name);
    index_[name] = params_.size();
    params_.push_back({name, v});
  }
  void add_buffer(const std::string& name, Tensor<T>& t) { buffers_.push_back({name, &t}); }

  const std::vector<Param>& params() const { return params_; }
  const std::vector<Buffer>& buffers() const { return buffers_; }

  const Param* find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.var.size();
    return n;
  }

  /// Top-level name components ("text", "vision", "fusion", "head") in first-seen order.
  std::vector<std::string> groups() const {
    std::vector<std::string> out;
    for (const auto& p : params_) {
      auto g = group_of(p.name);
      if (std::find(out.begin(), out.end(), g) == out.end()) out.push_back(g);
    }
    return out;
  }

  static std::string group_of(const std::string& name) { return name.substr(0, name.find('.')); }

 private:
  std::vector<Param> params_;
  std::vector<Buffer> buffers_;
  std::map<std::string, std::size_t> index_;
};

// ----------------------------------------------------------- FLOP trace

/// One executed layer as seen by the analytic counter. `dims` meaning
/// depends on `kind` (see flops.hpp).
struct LayerRecord {
  std::string kind;
  std::string name;
  std::vector<std::size_t> dims;
};

struct FlopTrace {
  std::vector<LayerRecord> records;
};

namespace detail {
inline FlopTrace*& active_trace() {
  thread_local FlopTrace* t = nullptr;
  return t;
}
}  // namespace detail

class TraceScope {
 public:
  explicit TraceScope(FlopTrace& t) : prev_(detail::active_trace()) { detail::active_trace() = &t; }
  ~TraceScope() { detail::active_trace() = prev_; }
  TraceScope(const TraceScope&) = delete;
  TraceScope& operator=(const TraceScope&) = delete;

 private:
  FlopTrace* prev_;
};

inline void trace_layer(std::string kind, const std::string& name, std::vector<std::size_t> dims) {
  if (auto* t = detail::active_trace()) t->records.push_back({std::move(kind), name, std::move(dims)});
}

// ---------------------------------------------------------- init helpers

template <typename T>
Var<T> make_param(Shape shape, Rng& rng, double stddev) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.vec()) v = static_cast<T>(rng.normal() * stddev);
  return Var<T>(std::move(t), true);
}

template <typename T>
Var<T> make_const_param(Shape shape, T value) {
  return Var<T>(Tensor<T>(std::move(shape), value), true);
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.vec()) v = std::max(v, T(0));
  return make_op(std::move(out), {x}, [](Node<T>& self) {
    const auto& xv = detail::value_of(self, 0);
    auto& g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > T(0)) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------- ONNX helpers

namespace emit {

using onnx::Attribute;
using onnx::GraphBuilder;

inline std::string gelu(GraphBuilder& g, const std::string& x) {
  auto scaled = g.op("Div", {x, g.scalar("sqrt2", std::sqrt(2.0f))});
  auto e = g.op("Erf", {scaled});
  auto onep = g.op("Add", {e, g.scalar("one", 1.0f)});
  auto half = g.op("Mul", {x, g.scalar("half", 0.5f)});
  return g.op("Mul", {half, onep}, {}, "gelu");
}

inline std::string relu6(GraphBuilder& g, const std::string& x) {
  return g.op("Clip", {x, g.scalar("zero", 0.0f), g.scalar("six", 6.0f)}, {}, "relu6");
}

/// Shape tensor [batch, trailing...] computed from `ref`'s leading dimension.
inline std::string batch_shape(GraphBuilder& g, const std::string& ref, const std::vector<std::int64_t>& trailing) {
  auto shp = g.op("Shape", {ref});
  auto b = g.op("Gather", {shp, g.int_const("idx0", {0})}, {Attribute::make_int("axis", 0)});
  return g.op("Concat", {b, g.int_const("trailing", trailing)}, {Attribute::make_int("axis", 0)});
}

/// Float tensor of ones shaped [batch, n] (batch taken from `ref`).
inline std::string batch_ones(GraphBuilder& g, const std::string& ref, std::int64_t n) {
  auto one = g.float_const("ones", std::vector<float>(static_cast<std::size_t>(n), 1.0f), {1, n});
  return g.op("Expand", {one, batch_shape(g, ref, {n})});
}

/// Masked mean over axis 1 of [B,S,D] given float mask [B,S].
inline std::string masked_mean(GraphBuilder& g, const std::string& x, const std::string& mask_f) {
  auto total = g.op("ReduceSum", {mask_f, g.int_const("ax1", {1})}, {Attribute::make_int("keepdims", 1)});
  auto w = g.op("Div", {mask_f, total});
  auto w3 = g.op("Unsqueeze", {w, g.int_const("ax2", {2})});
  auto prod = g.op("Mul", {x, w3});
  return g.op("ReduceSum", {prod, g.int_const("ax1", {1})}, {Attribute::make_int("keepdims", 0)}, "mean");
}

/// Additive attention bias [B,1,1,S] from float mask [B,S].
inline std::string mask_bias(GraphBuilder& g, const std::string& mask_f) {
  auto m1 = g.op("Sub", {mask_f, g.scalar("one", 1.0f)});
  auto big = g.op("Mul", {m1, g.scalar("maskbias", static_cast<float>(kMaskBias))});
  return g.op("Unsqueeze", {big, g.int_const("ax12", {1, 2})}, {}, "mask_bias");
}

/// x[:, index, :] for a [B,S,D] tensor.
inline std::string select_token(GraphBuilder& g, const std::string& x, std::int64_t index) {
  auto i = g.int_const("tok", {index});
  auto picked = g.op("Gather", {x, i}, {Attribute::make_int("axis", 1)});  // [B,1,D]
  return g.op("Squeeze", {picked, g.int_const("ax1", {1})}, {}, "token");
}

}  // namespace emit

// ---------------------------------------------------------------- layers

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(std::string name, std::size_t in, std::size_t out, Rng& rng, bool bias = true)
      : name_(std::move(name)), in_(in), out_(out) {
    weight_ = make_param<T>({out, in}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
    if (bias) bias_ = make_const_param<T>({out}, T(0));
  }

  Var<T> operator()(const Var<T>& x) const {
    trace_layer("linear", name_, {x.size() / in_, in_, out_});
    return linear(x, weight_, bias_);
  }

  void collect(ParamRegistry<T>& r) const {
    r.add(name_ + ".weight", weight_);
    if (bias_.defined()) r.add(name_ + ".bias", bias_);
  }

  std::string emit(onnx::GraphBuilder& g, const std::string& x) const {
    const auto& w = weight_.value();
    Tensor<T> wt({in_, out_});
    for (std::size_t o = 0; o < out_; ++o)
      for (std::size_t i = 0; i < in_; ++i) wt[i * out_ + o] = w[o * in_ + i];
    auto y = g.op("MatMul", {x, g.weight(name_ + ".weight_t", wt)});
    if (bias_.defined()) y = g.op("Add", {y, g.weight(name_ + ".bias", bias_.value())});
    return y;
  }

  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }
  const Var<T>& weight() const { return weight_; }
  const Var<T>& bias() const { return bias_; }
  const std::string& name() const { return name_; }

 private:
  std::string name_;
  std::size_t in_ = 0, out_ = 0;
  Var<T> weight_, bias_;
};

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(std::string name, std::size_t dim, double eps)
      : name_(std::move(name)), eps_(static_cast<T>(eps)),
        gamma_(make_const_param<T>({dim}, T(1))), beta_(make_const_param<T>({dim}, T(0))) {}

  Var<T> operator()(const Var<T>& x) const {
    trace_layer("layernorm", name_, {x.size()});
    return layer_norm(x, gamma_, beta_, eps_);
  }

  void collect(ParamRegistry<T>& r) const {
    r.add(name_ + ".gamma", gamma_);
    r.add(name_ + ".beta", beta_);
  }

  std::string emit(onnx::GraphBuilder& g, const std::string& x) const {
    using onnx::Attribute;
    auto axes = Attribute::make_ints("axes", {-1});
    auto mean = g.op("ReduceMean", {x}, {axes, Attribute::make_int("keepdims", 1)});
    auto d = g.op("Sub", {x, mean});
    auto var = g.op("ReduceMean", {g.op("Mul", {d, d})}, {axes, Attribute::make_int("keepdims", 1)});
    auto denom = g.op("Sqrt", {g.op("Add", {var, g.scalar("eps", static_cast<float>(eps_))})});
    auto norm = g.op("Div", {d, denom});
    auto scaled = g.op("Mul", {norm, g.weight(name_ + ".gamma", gamma_.value())});
    return g.op("Add", {scaled, g.weight(name_ + ".beta", beta_.value())}, {}, "ln");
  }

 private:
  std::string name_;
  T eps_{};
  Var<T> gamma_, beta_;
};

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  /// Depthwise when `depthwise` is set (cin == cout, one filter per channel).
  Conv2d(std::string name, std::size_t cin, std::size_t cout, std::size_t kernel, std::size_t stride,
         std::size_t pad, Rng& rng, bool bias, bool depthwise = false)
      : name_(std::move(name)), cin_(cin), cout_(cout), kernel_(kernel), stride_(stride), pad_(pad),
        depthwise_(depthwise) {
    if (depthwise && cin != cout) throw ConfigError(name_ + ": depthwise conv needs cin == cout");
    const std::size_t fan_in = (depthwise ? 1 : cin) * kernel * kernel;
    weight_ = make_param<T>({cout, depthwise ? 1 : cin, kernel, kernel}, rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
    if (bias) bias_ = make_const_param<T>({cout}, T(0));
  }

  Var<T> operator()(const Var<T>& x) const {
    auto y = depthwise_ ? depthwise_conv2d(x, weight_, bias_, stride_, pad_) : conv2d(x, weight_, bias_, stride_, pad_);
    trace_layer("conv2d", name_, {x.dim(0), cin_, cout_, kernel_, y.dim(2), y.dim(3), depthwise_ ? cin_ : 1});
    return y;
  }

  void collect(ParamRegistry<T>& r) const {
    r.add(name_ + ".weight", weight_);
    if (bias_.defined()) r.add(name_ + ".bias", bias_);
  }

  std::string emit(onnx::GraphBuilder& g, const std::string& x) const {
    using onnx::Attribute;
    std::vector<std::string> ins{x, g.weight(name_ + ".weight", weight_.value())};
    if (bias_.defined()) ins.push_back(g.weight(name_ + ".bias", bias_.value()));
    const auto k = static_cast<std::int64_t>(kernel_), s = static_cast<std::int64_t>(stride_),
               p = static_cast<std::int64_t>(pad_);
    return g.op("Conv", ins,
                {Attribute::make_int("group", depthwise_ ? static_cast<std::int64_t>(cin_) : 1),
                 Attribute::make_ints("kernel_shape", {k, k}), Attribute::make_ints("pads", {p, p, p, p}),
                 Attribute::make_ints("strides", {s, s})});
  }

  std::size_t out_channels() const { return cout_; }
  std::size_t stride() const { return stride_; }

 private:
  std::string name_;
  std::size_t cin_ = 0, cout_ = 0, kernel_ = 1, stride_ = 1, pad_ = 0;
  bool depthwise_ = false;
  Var<T> weight_, bias_;
};

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(std::string name, std::size_t channels)
      : name_(std::move(name)), gamma_(make_const_param<T>({channels}, T(1))),
        beta_(make_const_param<T>({channels}, T(0))), running_mean_({channels}, T(0)),
        running_var_({channels}, T(1)) {}

  Var<T> operator()(const Var<T>& x, bool training) {
    trace_layer("batchnorm", name_, {x.size()});
    return batch_norm2d(x, gamma_, beta_, running_mean_, running_var_, training, T(0.1), T(1e-5));
  }

  void collect(ParamRegistry<T>& r) {
    r.add(name_ + ".gamma", gamma_);
    r.add(name_ + ".beta", beta_);
    r.add_buffer(name_ + ".running_mean", running_mean_);
    r.add_buffer(name_ + ".running_var", running_var_);
  }

  std::string emit(onnx::GraphBuilder& g, const std::string& x) const {
    return g.op("BatchNormalization",
                {x, g.weight(name_ + ".gamma", gamma_.value()), g.weight(name_ + ".beta", beta_.value()),
                 g.weight(name_ + ".running_mean", running_mean_), g.weight(name_ + ".running_var", running_var_)},
                {onnx::Attribute::make_float("epsilon", 1e-5f)});
  }

 private:
  std::string name_;
  Var<T> gamma_, beta_;
  Tensor<T> running_mean_, running_var_;
};

/// Multi-head self-attention with separate query/key/value/output projections.
template <typename T>
class SelfAttention {
 public:
  SelfAttention() = default;
  SelfAttention(const std::string& name, std::size_t dim, std::size_t heads, Rng& rng)
      : name_(name), dim_(dim), heads_(heads), query_(name + ".query", dim, dim, rng),
        key_(name + ".key", dim, dim, rng), value_(name + ".value", dim, dim, rng),
        output_(name + ".output", dim, dim, rng) {
    if (heads == 0 || dim % heads != 0)
      throw ConfigError(name + ": width " + std::to_string(dim) + " is not divisible by " + std::to_string(heads) + " heads");
  }

  Var<T> operator()(const Var<T>& x, const std::vector<T>& key_mask) const {
    if (x.shape().size() != 3 || x.dim(2) != dim_)
      throw ShapeError(name_ + ": expected [B,S," + std::to_string(dim_) + "], got " + shape_str(x.shape()));
    auto q = query_(x), k = key_(x), v = value_(x);
    trace_layer("attention", name_, {x.dim(0), heads_, x.dim(1), x.dim(1), dim_ / heads_});
    Tensor<T>* probe = record_probs_ ? &last_probs_ : nullptr;
    return output_(attention(q, k, v, key_mask, heads_, probe));
  }

  void collect(ParamRegistry<T>& r) const {
    query_.collect(r);
    key_.collect(r);
    value_.collect(r);
    output_.collect(r);
  }

  /// `bias` is the additive [B,1,1,S] mask tensor name, or empty.
  std::string emit(onnx::GraphBuilder& g, const std::string& x, const std::string& bias) const {
    using onnx::Attribute;
    const auto H = static_cast<std::int64_t>(heads_), Dh = static_cast<std::int64_t>(dim_ / heads_);
    auto split = g.int_const("split_heads", {0, 0, H, Dh});
    auto heads = [&](const Linear<T>& proj, std::vector<std::int64_t> perm) {
      auto r = g.op("Reshape", {proj.emit(g, x), split});
      return g.op("Transpose", {r}, {Attribute::make_ints("perm", std::move(perm))});
    };
    auto q = heads(query_, {0, 2, 1, 3});
    auto kt = heads(key_, {0, 2, 3, 1});
    auto v = heads(value_, {0, 2, 1, 3});
    auto scores = g.op("Mul", {g.op("MatMul", {q, kt}), g.scalar("attn_scale", 1.0f / std::sqrt(static_cast<float>(Dh)))});
    if (!bias.empty()) scores = g.op("Add", {scores, bias});
    auto probs = g.op("Softmax", {scores}, {Attribute::make_int("axis", -1)});
    auto ctx = g.op("Transpose", {g.op("MatMul", {probs, v})}, {Attribute::make_ints("perm", {0, 2, 1, 3})});
    auto merged = g.op("Reshape", {ctx, g.int_const("merge_heads", {0, 0, static_cast<std::int64_t>(dim_)})});
    return output_.emit(g, merged);
  }

  void record_probs(bool on) const { record_probs_ = on; }
  const Tensor<T>& last_probs() const { return last_probs_; }
  std::size_t heads() const { return heads_; }

 private:
  std::string name_;
  std::size_t dim_ = 0, heads_ = 1;
  Linear<T> query_, key_, value_, output_;
  mutable bool record_probs_ = false;
  mutable Tensor<T> last_probs_;
};

/// Transformer encoder layer. Post-norm: LN(x + Attn(x)), LN(h + FF(h)).
/// Pre-norm: x + Attn(LN(x)), h + FF(LN(h)).
/// Dropout on sublayer outputs; inactive unless `training` and p > 0.
struct DropoutSpec {
  double p = 0.0;
  bool training = false;
  Rng* rng = nullptr;

  template <typename T>
  Var<T> operator()(const Var<T>& x) const {
    return rng ? dropout(x, p, training, *rng) : x;
  }
};

template <typename T>
class TransformerLayer {
 public:
  enum class Norm { Post, Pre };

  TransformerLayer() = default;
  TransformerLayer(const std::string& name, std::size_t dim, std::size_t heads, std::size_t ff_dim, Norm norm,
                   double eps, Rng& rng)
      : name_(name), dim_(dim), norm_(norm), attn_(name + ".attn", dim, heads, rng),
        norm1_(name + ".norm1", dim, eps), ff1_(name + ".ff1", dim, ff_dim, rng), ff2_(name + ".ff2", ff_dim, dim, rng),
        norm2_(name + ".norm2", dim, eps) {}

  Var<T> operator()(const Var<T>& x, const std::vector<T>& key_mask, const DropoutSpec& drop = {}) const {
    if (norm_ == Norm::Post) {
      auto h = norm1_(add(x, drop(attn_(x, key_mask))));
      return norm2_(add(h, drop(feed_forward(h))));
    }
    auto h = add(x, drop(attn_(norm1_(x), key_mask)));
    return add(h, drop(feed_forward(norm2_(h))));
  }

  void collect(ParamRegistry<T>& r) const {
    attn_.collect(r);
    norm1_.collect(r);
    ff1_.collect(r);
    ff2_.collect(r);
    norm2_.collect(r);
  }

  std::string emit(onnx::GraphBuilder& g, const std::string& x, const std::string& bias) const {
    auto ff = [&](const std::string& in) { return ff2_.emit(g, emit::gelu(g, ff1_.emit(g, in))); };
    if (norm_ == Norm::Post) {
      auto h = norm1_.emit(g, g.op("Add", {x, attn_.emit(g, x, bias)}));
      return norm2_.emit(g, g.op("Add", {h, ff(h)}));
    }
    auto h = g.op("Add", {x, attn_.emit(g, norm1_.emit(g, x), bias)});
    return g.op("Add", {h, ff(norm2_.emit(g, h))});
  }

  const SelfAttention<T>& attention_layer() const { return attn_; }
  std::size_t dim() const { return dim_; }

 private:
  Var<T> feed_forward(const Var<T>& x) const {
    auto h = ff1_(x);
    trace_layer("activation", name_ + ".gelu", {h.size()});
    return ff2_(gelu(h));
  }

  std::string name_;
  std::size_t dim_ = 0;
  Norm norm_ = Norm::Post;
  SelfAttention<T> attn_;
  LayerNorm<T> norm1_;
  Linear<T> ff1_, ff2_;
  LayerNorm<T> norm2_;
};

}  // namespace mmfuse

#pragma once

// Reference interpreter for the ONNX subset the exporter emits. It is written
// independently of the training ops so that parity checks compare two
// implementations rather than one.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "mmfuse/onnx.hpp"

namespace mmfuse::onnx {

struct Value {
  DType dtype = DType::Float;
  std::vector<std::int64_t> shape;
  std::vector<float> f;
  std::vector<std::int64_t> i;

  std::size_t count() const {
    std::size_t n = 1;
    for (auto d : shape) n *= static_cast<std::size_t>(d);
    return n;
  }
  static Value floats(std::vector<std::int64_t> shape, std::vector<float> data) {
    Value v;
    v.shape = std::move(shape);
    v.f = std::move(data);
    return v;
  }
  static Value ints(std::vector<std::int64_t> shape, std::vector<std::int64_t> data) {
    Value v;
    v.dtype = DType::Int64;
    v.shape = std::move(shape);
    v.i = std::move(data);
    return v;
  }
};

namespace rt {

inline std::string dims_str(const std::vector<std::int64_t>& s) {
  std::string out = "[";
  for (std::size_t k = 0; k < s.size(); ++k) out += (k ? "," : "") + std::to_string(s[k]);
  return out + "]";
}

inline std::vector<std::size_t> strides(const std::vector<std::int64_t>& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t k = s.size(); k-- > 1;) st[k - 1] = st[k] * static_cast<std::size_t>(s[k]);
  return st;
}

inline std::size_t norm_axis(std::int64_t axis, std::size_t rank) {
  const auto r = static_cast<std::int64_t>(rank);
  if (axis < -r || axis >= r) throw FormatError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

inline std::vector<std::int64_t> broadcast_shape(const std::vector<std::int64_t>& a, const std::vector<std::int64_t>& b) {
  const std::size_t r = std::max(a.size(), b.size());
  std::vector<std::int64_t> out(r);
  for (std::size_t k = 0; k < r; ++k) {
    const std::int64_t da = k < r - a.size() ? 1 : a[k - (r - a.size())];
    const std::int64_t db = k < r - b.size() ? 1 : b[k - (r - b.size())];
    if (da != db && da != 1 && db != 1) throw FormatError("cannot broadcast " + dims_str(a) + " with " + dims_str(b));
    out[k] = std::max(da, db);
  }
  return out;
}

/// Strides of `in` viewed in the broadcast output shape (0 on broadcast axes).
inline std::vector<std::size_t> broadcast_strides(const std::vector<std::int64_t>& in, const std::vector<std::int64_t>& out) {
  const auto st = strides(in);
  std::vector<std::size_t> bs(out.size(), 0);
  const std::size_t off = out.size() - in.size();
  for (std::size_t k = 0; k < in.size(); ++k) bs[k + off] = in[k] == 1 ? 0 : st[k];
  return bs;
}

/// Calls fn(out_index, offset_a, offset_b) over the broadcast shape.
template <typename Fn>
void for_each_broadcast(const std::vector<std::int64_t>& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, Fn&& fn) {
  std::size_t total = 1;
  for (auto d : out) total *= static_cast<std::size_t>(d);
  std::vector<std::size_t> idx(out.size(), 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t n = 0; n < total; ++n) {
    fn(n, oa, ob);
    for (std::size_t k = out.size(); k-- > 0;) {
      ++idx[k];
      oa += sa[k];
      ob += sb[k];
      if (idx[k] < static_cast<std::size_t>(out[k])) break;
      oa -= sa[k] * idx[k];
      ob -= sb[k] * idx[k];
      idx[k] = 0;
    }
  }
}

template <typename Op>
Value binary(const Value& a, const Value& b, Op op) {
  if (a.dtype != DType::Float || b.dtype != DType::Float) throw FormatError("arithmetic expects float inputs");
  Value out;
  if (a.shape == b.shape) {
    out.shape = a.shape;
    out.f.resize(a.f.size());
    for (std::size_t k = 0; k < a.f.size(); ++k) out.f[k] = op(a.f[k], b.f[k]);
    return out;
  }
  out.shape = broadcast_shape(a.shape, b.shape);
  out.f.resize(out.count());
  for_each_broadcast(out.shape, broadcast_strides(a.shape, out.shape), broadcast_strides(b.shape, out.shape),
                     [&](std::size_t n, std::size_t oa, std::size_t ob) { out.f[n] = op(a.f[oa], b.f[ob]); });
  return out;
}

template <typename Op>
Value unary(const Value& a, Op op) {
  Value out = a;
  for (auto& v : out.f) v = op(v);
  return out;
}

inline std::vector<std::int64_t> as_ints(const Value& v) {
  if (v.dtype != DType::Int64) throw FormatError("expected an int64 tensor");
  return v.i;
}

/// Moves data along with shape for either dtype through an index map.
inline Value gather_elements(const Value& src, std::vector<std::int64_t> shape, const std::vector<std::size_t>& from) {
  Value out;
  out.dtype = src.dtype;
  out.shape = std::move(shape);
  if (src.dtype == DType::Float) {
    out.f.resize(from.size());
    for (std::size_t k = 0; k < from.size(); ++k) out.f[k] = src.f[from[k]];
  } else {
    out.i.resize(from.size());
    for (std::size_t k = 0; k < from.size(); ++k) out.i[k] = src.i[from[k]];
  }
  return out;
}

inline Value transpose(const Value& x, std::vector<std::int64_t> perm) {
  const std::size_t r = x.shape.size();
  if (perm.empty())
    for (std::size_t k = r; k-- > 0;) perm.push_back(static_cast<std::int64_t>(k));
  if (perm.size() != r) throw FormatError("Transpose perm rank mismatch");
  std::vector<std::int64_t> out_shape(r);
  for (std::size_t k = 0; k < r; ++k) out_shape[k] = x.shape[static_cast<std::size_t>(perm[k])];
  const auto in_st = strides(x.shape);
  std::vector<std::size_t> st(r);
  for (std::size_t k = 0; k < r; ++k) st[k] = in_st[static_cast<std::size_t>(perm[k])];
  std::vector<std::size_t> from(x.count());
  for_each_broadcast(out_shape, st, std::vector<std::size_t>(r, 0),
                     [&](std::size_t n, std::size_t oa, std::size_t) { from[n] = oa; });
  return gather_elements(x, out_shape, from);
}

inline Value matmul(const Value& a, const Value& b) {
  if (a.shape.size() < 2 || b.shape.size() < 2) throw FormatError("MatMul expects rank >= 2");
  const auto M = a.shape[a.shape.size() - 2], K = a.shape.back(), N = b.shape.back();
  if (b.shape[b.shape.size() - 2] != K) throw FormatError("MatMul inner dims " + dims_str(a.shape) + " x " + dims_str(b.shape));
  std::vector<std::int64_t> ba(a.shape.begin(), a.shape.end() - 2), bb(b.shape.begin(), b.shape.end() - 2);
  auto batch = broadcast_shape(ba, bb);
  Value out;
  out.shape = batch;
  out.shape.push_back(M);
  out.shape.push_back(N);
  out.f.assign(out.count(), 0.f);
  using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const std::size_t ma = static_cast<std::size_t>(M * K), mb = static_cast<std::size_t>(K * N), mo = static_cast<std::size_t>(M * N);
  auto sa = broadcast_strides(ba, batch), sb = broadcast_strides(bb, batch);
  for_each_broadcast(batch, sa, sb, [&](std::size_t n, std::size_t oa, std::size_t ob) {
    Eigen::Map<const RowMat> A(a.f.data() + oa * ma, M, K);
    Eigen::Map<const RowMat> B(b.f.data() + ob * mb, K, N);
    Eigen::Map<RowMat> C(out.f.data() + n * mo, M, N);
    C.noalias() = A * B;
  });
  return out;
}

/// Reduction over `axes` (all axes when empty) with sum, optionally divided by count.
inline Value reduce(const Value& x, std::vector<std::int64_t> axes, bool keepdims, bool mean) {
  const std::size_t r = x.shape.size();
  std::vector<bool> red(r, axes.empty());
  for (auto a : axes) red[norm_axis(a, r)] = true;
  std::vector<std::int64_t> kept(r);
  std::size_t group = 1;
  for (std::size_t k = 0; k < r; ++k) {
    kept[k] = red[k] ? 1 : x.shape[k];
    if (red[k]) group *= static_cast<std::size_t>(x.shape[k]);
  }
  Value out;
  out.shape = kept;
  out.f.assign(out.count(), 0.f);
  const auto ost = broadcast_strides(kept, x.shape);
  for_each_broadcast(x.shape, strides(x.shape), ost,
                     [&](std::size_t, std::size_t ix, std::size_t io) { out.f[io] += x.f[ix]; });
  if (mean)
    for (auto& v : out.f) v /= static_cast<float>(group);
  if (!keepdims) {
    std::vector<std::int64_t> s;
    for (std::size_t k = 0; k < r; ++k)
      if (!red[k]) s.push_back(x.shape[k]);
    out.shape = s;
  }
  return out;
}

inline Value softmax(const Value& x, std::int64_t axis_attr) {
  const std::size_t axis = norm_axis(axis_attr, x.shape.size());
  const auto st = strides(x.shape);
  const auto n = static_cast<std::size_t>(x.shape[axis]);
  const std::size_t inner = st[axis], outer = x.count() / (n * inner);
  Value out = x;
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      float mx = -INFINITY;
      for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, x.f[base + k * inner]);
      float s = 0;
      for (std::size_t k = 0; k < n; ++k) s += out.f[base + k * inner] = std::exp(x.f[base + k * inner] - mx);
      for (std::size_t k = 0; k < n; ++k) out.f[base + k * inner] /= s;
    }
  return out;
}

inline Value conv(const Value& x, const Value& w, const Value* bias, const NodeDef& node) {
  if (x.shape.size() != 4 || w.shape.size() != 4) throw FormatError("Conv expects 4-D input and weight");
  const auto group = static_cast<std::size_t>(node.attr_int("group", 1));
  auto pads = node.attr_ints("pads");
  auto strd = node.attr_ints("strides");
  if (pads.empty()) pads = {0, 0, 0, 0};
  if (strd.empty()) strd = {1, 1};
  const auto B = static_cast<std::size_t>(x.shape[0]), C = static_cast<std::size_t>(x.shape[1]);
  const auto H = static_cast<std::int64_t>(x.shape[2]), W = static_cast<std::int64_t>(x.shape[3]);
  const auto O = static_cast<std::size_t>(w.shape[0]), Cg = static_cast<std::size_t>(w.shape[1]);
  const auto kh = w.shape[2], kw = w.shape[3];
  if (C != Cg * group || O % group != 0) throw FormatError("Conv channel/group mismatch in " + node.name);
  const std::int64_t Ho = (H + pads[0] + pads[2] - kh) / strd[0] + 1, Wo = (W + pads[1] + pads[3] - kw) / strd[1] + 1;
  Value out;
  out.shape = {static_cast<std::int64_t>(B), static_cast<std::int64_t>(O), Ho, Wo};
  out.f.assign(out.count(), 0.f);
  const std::size_t Og = O / group, P = static_cast<std::size_t>(Ho * Wo), Kc = Cg * static_cast<std::size_t>(kh * kw);
  using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  RowMat cols(Kc, P);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t g = 0; g < group; ++g) {
      for (std::size_t c = 0; c < Cg; ++c)
        for (std::int64_t i = 0; i < kh; ++i)
          for (std::int64_t j = 0; j < kw; ++j) {
            const std::size_t row = (c * static_cast<std::size_t>(kh) + static_cast<std::size_t>(i)) * static_cast<std::size_t>(kw) + static_cast<std::size_t>(j);
            const float* plane = x.f.data() + (b * C + g * Cg + c) * static_cast<std::size_t>(H * W);
            for (std::int64_t oy = 0; oy < Ho; ++oy)
              for (std::int64_t ox = 0; ox < Wo; ++ox) {
                const std::int64_t iy = oy * strd[0] - pads[0] + i, ix = ox * strd[1] - pads[1] + j;
                cols(static_cast<Eigen::Index>(row), oy * Wo + ox) =
                    (iy >= 0 && iy < H && ix >= 0 && ix < W) ? plane[iy * W + ix] : 0.f;
              }
          }
      Eigen::Map<const RowMat> Wm(w.f.data() + g * Og * Kc, static_cast<Eigen::Index>(Og), static_cast<Eigen::Index>(Kc));
      Eigen::Map<RowMat> Y(out.f.data() + (b * O + g * Og) * P, static_cast<Eigen::Index>(Og), static_cast<Eigen::Index>(P));
      Y.noalias() = Wm * cols;
    }
  if (bias)
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t p = 0; p < P; ++p) out.f[(b * O + o) * P + p] += bias->f[o];
  return out;
}

}  // namespace rt

/// Executes a parsed model. Construction validates opset and op coverage.
class Session {
 public:
  explicit Session(Model model) : model_(std::move(model)) {
    if (model_.opset != 13) throw FormatError("unsupported opset " + std::to_string(model_.opset) + " (expected 13)");
    static const std::vector<std::string> supported{
        "Gather", "Add", "Sub", "Mul", "Div", "MatMul", "Transpose", "Reshape", "Concat", "ReduceMean", "ReduceSum",
        "Sqrt", "Erf", "Tanh", "Relu", "Softmax", "Clip", "Conv", "BatchNormalization", "GlobalAveragePool",
        "Flatten", "Cast", "Unsqueeze", "Squeeze", "Shape", "Expand"};
    for (const auto& n : model_.graph.nodes)
      if (std::find(supported.begin(), supported.end(), n.op_type) == supported.end())
        throw FormatError("unsupported op " + n.op_type + " in node " + n.name);
    for (const auto& t : model_.graph.initializers) {
      Value v;
      v.dtype = t.dtype;
      v.shape = t.dims;
      v.f = t.floats;
      v.i = t.ints;
      if (v.count() != (v.dtype == DType::Float ? v.f.size() : v.i.size()))
        throw FormatError("initializer " + t.name + " has " + std::to_string(v.dtype == DType::Float ? v.f.size() : v.i.size()) +
                          " elements for shape " + rt::dims_str(t.dims));
      constants_[t.name] = std::move(v);
    }
  }

  static Session from_file(const std::string& path) { return Session(parse(read_file(path))); }

  const Model& model() const { return model_; }

  std::map<std::string, Value> run(const std::map<std::string, Value>& feeds) const {
    std::map<std::string, const Value*> env;
    std::map<std::string, Value> produced;
    for (const auto& [k, v] : constants_) env[k] = &v;
    for (const auto& in : model_.graph.inputs) {
      auto it = feeds.find(in.name);
      if (it == feeds.end()) throw ValidationError("missing graph input " + in.name);
      if (it->second.dtype != in.dtype || it->second.shape.size() != in.shape.size())
        throw ValidationError("input " + in.name + ": expected " + dtype_name(in.dtype) + " rank " +
                              std::to_string(in.shape.size()) + ", got " + dtype_name(it->second.dtype) + " " +
                              rt::dims_str(it->second.shape));
      for (std::size_t k = 0; k < in.shape.size(); ++k)
        if (in.shape[k].param.empty() && in.shape[k].value != it->second.shape[k])
          throw ValidationError("input " + in.name + ": expected dim " + std::to_string(k) + " = " +
                                std::to_string(in.shape[k].value) + ", got " + std::to_string(it->second.shape[k]));
      env[in.name] = &it->second;
    }
    for (const auto& node : model_.graph.nodes) {
      std::vector<const Value*> ins;
      for (const auto& name : node.inputs) {
        if (name.empty()) {
          ins.push_back(nullptr);
          continue;
        }
        auto it = env.find(name);
        if (it == env.end()) throw FormatError("node " + node.name + " reads undefined value " + name);
        ins.push_back(it->second);
      }
      Value out;
      try {
        out = exec(node, ins);
      } catch (const FormatError& e) {
        throw FormatError(node.name + " (" + node.op_type + "): " + e.what());
      }
      auto& slot = produced[node.outputs.at(0)];
      slot = std::move(out);
      env[node.outputs[0]] = &slot;
    }
    std::map<std::string, Value> outs;
    for (const auto& o : model_.graph.outputs) {
      auto it = env.find(o.name);
      if (it == env.end()) throw FormatError("graph output " + o.name + " never produced");
      outs[o.name] = *it->second;
    }
    return outs;
  }

 private:
  static const Value& arg(const std::vector<const Value*>& ins, std::size_t k, const NodeDef& n) {
    if (k >= ins.size() || !ins[k]) throw FormatError("missing input " + std::to_string(k) + " of " + n.op_type);
    return *ins[k];
  }

  static Value exec(const NodeDef& n, const std::vector<const Value*>& ins) {
    using namespace rt;
    const auto& op = n.op_type;
    if (op == "Add") return binary(arg(ins, 0, n), arg(ins, 1, n), [](float a, float b) { return a + b; });
    if (op == "Sub") return binary(arg(ins, 0, n), arg(ins, 1, n), [](float a, float b) { return a - b; });
    if (op == "Mul") return binary(arg(ins, 0, n), arg(ins, 1, n), [](float a, float b) { return a * b; });
    if (op == "Div") return binary(arg(ins, 0, n), arg(ins, 1, n), [](float a, float b) { return a / b; });
    if (op == "MatMul") return matmul(arg(ins, 0, n), arg(ins, 1, n));
    if (op == "Sqrt") return unary(arg(ins, 0, n), [](float v) { return std::sqrt(v); });
    if (op == "Erf") return unary(arg(ins, 0, n), [](float v) { return std::erf(v); });
    if (op == "Tanh") return unary(arg(ins, 0, n), [](float v) { return std::tanh(v); });
    if (op == "Relu") return unary(arg(ins, 0, n), [](float v) { return std::max(v, 0.f); });
    if (op == "Softmax") return softmax(arg(ins, 0, n), n.attr_int("axis", -1));
    if (op == "Clip") {
      const float lo = ins.size() > 1 && ins[1] ? ins[1]->f.at(0) : -INFINITY;
      const float hi = ins.size() > 2 && ins[2] ? ins[2]->f.at(0) : INFINITY;
      return unary(arg(ins, 0, n), [=](float v) { return std::min(std::max(v, lo), hi); });
    }
    if (op == "Transpose") return transpose(arg(ins, 0, n), n.attr_ints("perm"));
    if (op == "ReduceMean") return reduce(arg(ins, 0, n), n.attr_ints("axes"), n.attr_int("keepdims", 1) != 0, true);
    if (op == "ReduceSum") {
      std::vector<std::int64_t> axes;
      if (ins.size() > 1 && ins[1]) axes = as_ints(*ins[1]);
      return reduce(arg(ins, 0, n), axes, n.attr_int("keepdims", 1) != 0, false);
    }
    if (op == "Shape") {
      const auto& x = arg(ins, 0, n);
      return Value::ints({static_cast<std::int64_t>(x.shape.size())}, x.shape);
    }
    if (op == "Cast") {
      const auto& x = arg(ins, 0, n);
      const auto to = n.attr_int("to", 1);
      Value out;
      out.shape = x.shape;
      if (to == static_cast<std::int64_t>(DType::Float)) {
        out.f.resize(x.count());
        for (std::size_t k = 0; k < out.f.size(); ++k)
          out.f[k] = x.dtype == DType::Float ? x.f[k] : static_cast<float>(x.i[k]);
      } else if (to == static_cast<std::int64_t>(DType::Int64)) {
        out.dtype = DType::Int64;
        out.i.resize(x.count());
        for (std::size_t k = 0; k < out.i.size(); ++k)
          out.i[k] = x.dtype == DType::Int64 ? x.i[k] : static_cast<std::int64_t>(x.f[k]);
      } else {
        throw FormatError("Cast to unsupported type " + std::to_string(to));
      }
      return out;
    }
    if (op == "Reshape") {
      const auto& x = arg(ins, 0, n);
      auto target = as_ints(arg(ins, 1, n));
      std::int64_t known = 1;
      int infer = -1;
      for (std::size_t k = 0; k < target.size(); ++k) {
        if (target[k] == 0) target[k] = x.shape.at(k);
        if (target[k] == -1) {
          if (infer >= 0) throw FormatError("Reshape with two -1 dims");
          infer = static_cast<int>(k);
        } else {
          known *= target[k];
        }
      }
      if (infer >= 0) target[static_cast<std::size_t>(infer)] = static_cast<std::int64_t>(x.count()) / known;
      Value out = x;
      out.shape = target;
      if (out.count() != x.count()) throw FormatError("Reshape " + dims_str(x.shape) + " -> " + dims_str(target));
      return out;
    }
    if (op == "Flatten") {
      const auto& x = arg(ins, 0, n);
      const auto axis = norm_axis(n.attr_int("axis", 1), x.shape.size() + 1);
      std::int64_t a = 1, b = 1;
      for (std::size_t k = 0; k < x.shape.size(); ++k) (k < axis ? a : b) *= x.shape[k];
      Value out = x;
      out.shape = {a, b};
      return out;
    }
    if (op == "Unsqueeze" || op == "Squeeze") {
      const auto& x = arg(ins, 0, n);
      auto axes = as_ints(arg(ins, 1, n));
      Value out = x;
      if (op == "Unsqueeze") {
        const std::size_t r = x.shape.size() + axes.size();
        std::vector<bool> ins_at(r, false);
        for (auto a : axes) ins_at[norm_axis(a, r)] = true;
        out.shape.clear();
        std::size_t src = 0;
        for (std::size_t k = 0; k < r; ++k) out.shape.push_back(ins_at[k] ? 1 : x.shape[src++]);
      } else {
        std::vector<bool> drop(x.shape.size(), false);
        for (auto a : axes) drop[norm_axis(a, x.shape.size())] = true;
        out.shape.clear();
        for (std::size_t k = 0; k < x.shape.size(); ++k) {
          if (drop[k] && x.shape[k] != 1) throw FormatError("Squeeze of non-unit axis");
          if (!drop[k]) out.shape.push_back(x.shape[k]);
        }
      }
      return out;
    }
    if (op == "Concat") {
      const auto& first = arg(ins, 0, n);
      const auto axis = norm_axis(n.attr_int("axis", 0), first.shape.size());
      std::vector<std::int64_t> shape = first.shape;
      shape[axis] = 0;
      for (std::size_t k = 0; k < ins.size(); ++k) {
        const auto& v = arg(ins, k, n);
        if (v.shape.size() != shape.size() || v.dtype != first.dtype) throw FormatError("Concat rank/dtype mismatch");
        for (std::size_t d = 0; d < shape.size(); ++d)
          if (d != axis && v.shape[d] != first.shape[d]) throw FormatError("Concat shape mismatch " + dims_str(v.shape));
        shape[axis] += v.shape[axis];
      }
      Value out;
      out.dtype = first.dtype;
      out.shape = shape;
      std::size_t outer = 1, inner = 1;
      for (std::size_t d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(shape[d]);
      for (std::size_t d = axis + 1; d < shape.size(); ++d) inner *= static_cast<std::size_t>(shape[d]);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < ins.size(); ++k) {
          const std::size_t chunk = static_cast<std::size_t>(ins[k]->shape[axis]) * inner;
          if (first.dtype == DType::Float)
            out.f.insert(out.f.end(), ins[k]->f.begin() + static_cast<std::ptrdiff_t>(o * chunk),
                         ins[k]->f.begin() + static_cast<std::ptrdiff_t>((o + 1) * chunk));
          else
            out.i.insert(out.i.end(), ins[k]->i.begin() + static_cast<std::ptrdiff_t>(o * chunk),
                         ins[k]->i.begin() + static_cast<std::ptrdiff_t>((o + 1) * chunk));
        }
      return out;
    }
    if (op == "Gather") {
      const auto& data = arg(ins, 0, n);
      const auto idx = as_ints(arg(ins, 1, n));
      const auto& idx_shape = arg(ins, 1, n).shape;
      const auto axis = norm_axis(n.attr_int("axis", 0), data.shape.size());
      std::size_t outer = 1, inner = 1;
      for (std::size_t d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(data.shape[d]);
      for (std::size_t d = axis + 1; d < data.shape.size(); ++d) inner *= static_cast<std::size_t>(data.shape[d]);
      const auto len = data.shape[axis];
      std::vector<std::int64_t> shape(data.shape.begin(), data.shape.begin() + static_cast<std::ptrdiff_t>(axis));
      shape.insert(shape.end(), idx_shape.begin(), idx_shape.end());
      shape.insert(shape.end(), data.shape.begin() + static_cast<std::ptrdiff_t>(axis) + 1, data.shape.end());
      std::vector<std::size_t> from;
      from.reserve(outer * idx.size() * inner);
      for (std::size_t o = 0; o < outer; ++o)
        for (auto ix : idx) {
          if (ix < -len || ix >= len) throw FormatError("Gather index " + std::to_string(ix) + " out of range");
          const auto j = static_cast<std::size_t>(ix < 0 ? ix + len : ix);
          for (std::size_t in = 0; in < inner; ++in) from.push_back((o * static_cast<std::size_t>(len) + j) * inner + in);
        }
      return gather_elements(data, shape, from);
    }
    if (op == "Expand") {
      const auto& x = arg(ins, 0, n);
      auto shape = broadcast_shape(x.shape, as_ints(arg(ins, 1, n)));
      std::size_t total = 1;
      for (auto d : shape) total *= static_cast<std::size_t>(d);
      std::vector<std::size_t> from(total);
      for_each_broadcast(shape, broadcast_strides(x.shape, shape), std::vector<std::size_t>(shape.size(), 0),
                         [&](std::size_t k, std::size_t oa, std::size_t) { from[k] = oa; });
      return gather_elements(x, shape, from);
    }
    if (op == "Conv") return conv(arg(ins, 0, n), arg(ins, 1, n), ins.size() > 2 ? ins[2] : nullptr, n);
    if (op == "BatchNormalization") {
      const auto& x = arg(ins, 0, n);
      const auto &g = arg(ins, 1, n), &b = arg(ins, 2, n), &m = arg(ins, 3, n), &v = arg(ins, 4, n);
      const float eps = n.attr_float("epsilon", 1e-5f);
      const auto B = static_cast<std::size_t>(x.shape[0]), C = static_cast<std::size_t>(x.shape[1]);
      const std::size_t P = x.count() / (B * C);
      Value out = x;
      for (std::size_t bi = 0; bi < B; ++bi)
        for (std::size_t c = 0; c < C; ++c) {
          const float s = g.f[c] / std::sqrt(v.f[c] + eps);
          for (std::size_t p = 0; p < P; ++p) {
            auto& y = out.f[(bi * C + c) * P + p];
            y = (y - m.f[c]) * s + b.f[c];
          }
        }
      return out;
    }
    if (op == "GlobalAveragePool") return reduce(arg(ins, 0, n), {2, 3}, true, true);
    throw FormatError("unsupported op " + op);
  }

  Model model_;
  std::map<std::string, Value> constants_;
};

}  // namespace mmfuse::onnx

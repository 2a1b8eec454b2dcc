#pragma once

// Differentiable tensor operations. Every op computes its forward value
// eagerly and, when recording, attaches a closure that accumulates input
// gradients from the output gradient.

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <vector>

#include "mmfuse/autograd.hpp"
#include "mmfuse/rng.hpp"

namespace mmfuse {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;
template <typename T>
using SMapR = Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CSMapR = Eigen::Map<const MatR<T>, 0, Eigen::OuterStride<>>;

/// Additive bias applied to masked attention keys.
inline constexpr double kMaskBias = 1e9;

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <typename T>
Tensor<T>& grad_of(Node<T>& self, std::size_t i) {
  return self.parents[i]->grad_buffer();
}

template <typename T>
const Tensor<T>& value_of(const Node<T>& self, std::size_t i) {
  return self.parents[i]->value;
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!wants_grad(self, p)) continue;
      auto& g = detail::grad_of(self, p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require(a.shape() == b.shape(), "mul: shape mismatch");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = detail::value_of(self, 0);
    const auto& bv = detail::value_of(self, 1);
    if (wants_grad(self, 0)) {
      auto& g = detail::grad_of(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (wants_grad(self, 1)) {
      auto& g = detail::grad_of(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.vec()) v *= s;
  return make_op(std::move(out), {a}, [s](Node<T>& self) {
    auto& g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

/// x + p where p's shape equals the trailing dimensions of x (bias, positions).
template <typename T>
Var<T> add_trailing(const Var<T>& x, const Var<T>& p) {
  const auto& xs = x.shape();
  const auto& ps = p.shape();
  detail::require(ps.size() <= xs.size() && std::equal(ps.rbegin(), ps.rend(), xs.rbegin()),
                  "add_trailing: " + shape_str(ps) + " is not a suffix of " + shape_str(xs));
  const std::size_t inner = p.size();
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += p.value()[i % inner];
  return make_op(std::move(out), {x, p}, [inner](Node<T>& self) {
    if (wants_grad(self, 0)) {
      auto& g = detail::grad_of(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants_grad(self, 1)) {
      auto& g = detail::grad_of(self, 1);
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % inner] += self.grad[i];
    }
  });
}

template <typename T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.vec()) v = gelu_value(v);
  return make_op(std::move(out), {x}, [](Node<T>& self) {
    const auto& xv = detail::value_of(self, 0);
    auto& g = detail::grad_of(self, 0);
    const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = xv[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

template <typename T>
Var<T> relu6(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.vec()) v = std::min(std::max(v, T(0)), T(6));
  return make_op(std::move(out), {x}, [](Node<T>& self) {
    const auto& xv = detail::value_of(self, 0);
    auto& g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > T(0) && xv[i] < T(6)) g[i] += self.grad[i];
  });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.vec()) v = std::tanh(v);
  return make_op(out, {x}, [out](Node<T>& self) {
    auto& g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (T(1) - out[i] * out[i]);
  });
}

/// Inverted dropout; identity when not training or p == 0.
template <typename T>
Var<T> dropout(const Var<T>& x, double p, bool training, Rng& rng) {
  if (!training || p <= 0.0) return x;
  const T keep_scale = T(1) / T(1.0 - p);
  std::vector<T> keep(x.size());
  for (auto& k : keep) k = rng.uniform() >= p ? keep_scale : T(0);
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= keep[i];
  return make_op(std::move(out), {x}, [keep = std::move(keep)](Node<T>& self) {
    auto& g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * keep[i];
  });
}

// -------------------------------------------------------------- reductions

template <typename T>
Var<T> sum(const Var<T>& x) {
  T s{0};
  for (T v : x.value().vec()) s += v;
  return make_op(Tensor<T>({1}, s), {x}, [](Node<T>& self) {
    auto& g = detail::grad_of(self, 0);
    for (auto& v : g.vec()) v += self.grad[0];
  });
}

/// Mean over axis 1 of [B, S, D], counting only positions whose mask is 1.
/// An empty mask means all positions count.
template <typename T>
Var<T> masked_mean_seq(const Var<T>& x, const std::vector<T>& mask) {
  detail::require(x.shape().size() == 3, "masked_mean_seq expects [B,S,D]");
  const std::size_t B = x.dim(0), S = x.dim(1), D = x.dim(2);
  detail::require(mask.empty() || mask.size() == B * S, "masked_mean_seq: mask size");
  std::vector<T> weights(B * S);
  for (std::size_t b = 0; b < B; ++b) {
    T total{0};
    for (std::size_t s = 0; s < S; ++s) total += mask.empty() ? T(1) : mask[b * S + s];
    if (total <= T(0)) throw ShapeError("masked_mean_seq: row has no valid positions");
    for (std::size_t s = 0; s < S; ++s) weights[b * S + s] = (mask.empty() ? T(1) : mask[b * S + s]) / total;
  }
  Tensor<T> out({B, D});
  const auto& xv = x.value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t s = 0; s < S; ++s) {
      const T w = weights[b * S + s];
      if (w == T(0)) continue;
      for (std::size_t d = 0; d < D; ++d) out[b * D + d] += w * xv[(b * S + s) * D + d];
    }
  return make_op(std::move(out), {x}, [weights = std::move(weights), B, S, D](Node<T>& self) {
    auto& g = detail::grad_of(self, 0);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t s = 0; s < S; ++s) {
        const T w = weights[b * S + s];
        if (w == T(0)) continue;
        for (std::size_t d = 0; d < D; ++d) g[(b * S + s) * D + d] += w * self.grad[b * D + d];
      }
  });
}

// ---------------------------------------------------------- shape plumbing

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value();
  out.reshape(std::move(shape));
  return make_op(std::move(out), {x}, [](Node<T>& self) {
    auto& g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

namespace detail {
inline std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Maps each output flat index to the input flat index under `perm`.
inline std::vector<std::size_t> permute_index(const Shape& in, const std::vector<std::size_t>& perm) {
  Shape out(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out[i] = in[perm[i]];
  const auto in_st = strides_of(in);
  std::vector<std::size_t> idx(numel(out));
  std::vector<std::size_t> coord(out.size(), 0);
  for (std::size_t flat = 0; flat < idx.size(); ++flat) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < out.size(); ++d) src += coord[d] * in_st[perm[d]];
    idx[flat] = src;
    for (std::size_t d = out.size(); d-- > 0;) {
      if (++coord[d] < out[d]) break;
      coord[d] = 0;
    }
  }
  return idx;
}
}  // namespace detail

template <typename T>
Var<T> permute(const Var<T>& x, const std::vector<std::size_t>& perm) {
  detail::require(perm.size() == x.shape().size(), "permute: rank mismatch");
  Shape out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = x.dim(perm[i]);
  auto idx = detail::permute_index(x.shape(), perm);
  Tensor<T> out(out_shape);
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = x.value()[idx[i]];
  return make_op(std::move(out), {x}, [idx = std::move(idx)](Node<T>& self) {
    auto& g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += self.grad[i];
  });
}

/// Slice [start, start+len) along `axis`.
template <typename T>
Var<T> narrow(const Var<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
  const auto& s = x.shape();
  detail::require(axis < s.size() && start + len <= s[axis], "narrow: out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape out_shape = s;
  out_shape[axis] = len;
  Tensor<T> out(out_shape);
  const std::size_t n = s[axis];
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.value().data() + (o * n + start) * inner, len * inner, out.data() + o * len * inner);
  return make_op(std::move(out), {x}, [outer, inner, n, start, len](Node<T>& self) {
    auto& g = detail::grad_of(self, 0);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < len * inner; ++i) g[(o * n + start) * inner + i] += self.grad[o * len * inner + i];
  });
}

/// x[:, index, ...] with the axis removed.
template <typename T>
Var<T> select(const Var<T>& x, std::size_t axis, std::size_t index) {
  Var<T> n = narrow(x, axis, index, 1);
  Shape s = x.shape();
  s.erase(s.begin() + static_cast<std::ptrdiff_t>(axis));
  return reshape(n, s);
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis) {
  detail::require(!xs.empty(), "concat: no inputs");
  const Shape& s0 = xs[0].shape();
  detail::require(axis < s0.size(), "concat: bad axis");
  std::size_t outer = 1, inner = 1, total = 0;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  std::vector<std::size_t> lens;
  for (const auto& x : xs) {
    const auto& s = x.shape();
    detail::require(s.size() == s0.size(), "concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != s0[i])
        throw ShapeError("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(s0));
    lens.push_back(s[axis]);
    total += s[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = total;
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      std::copy_n(xs[k].value().data() + o * lens[k] * inner, lens[k] * inner,
                  out.data() + (o * total + off) * inner);
      off += lens[k];
    }
  }
  return make_op(std::move(out), xs, [outer, inner, total, lens](Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < lens.size(); ++k) {
      if (wants_grad(self, k)) {
        auto& g = detail::grad_of(self, k);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < lens[k] * inner; ++i)
            g[o * lens[k] * inner + i] += self.grad[(o * total + off) * inner + i];
      }
      off += lens[k];
    }
  });
}

/// Repeat a [1, ...] tensor `batch` times along axis 0.
template <typename T>
Var<T> expand_batch(const Var<T>& p, std::size_t batch) {
  detail::require(!p.shape().empty() && p.dim(0) == 1, "expand_batch expects leading dim 1");
  Shape s = p.shape();
  s[0] = batch;
  const std::size_t inner = p.size();
  Tensor<T> out(s);
  for (std::size_t b = 0; b < batch; ++b) std::copy_n(p.value().data(), inner, out.data() + b * inner);
  return make_op(std::move(out), {p}, [inner, batch](Node<T>& self) {
    auto& g = detail::grad_of(self, 0);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < inner; ++i) g[i] += self.grad[b * inner + i];
  });
}

// ------------------------------------------------------------ dense layers

/// y = x W^T + b with x [..., in], W [out, in], b [out] (optional).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const std::size_t in = w.dim(1), out_f = w.dim(0);
  detail::require(!x.shape().empty() && x.shape().back() == in,
                  "linear: input width " + shape_str(x.shape()) + " does not match weight " + shape_str(w.shape()));
  const std::size_t rows = x.size() / in;
  Shape os = x.shape();
  os.back() = out_f;
  Tensor<T> out(os);
  MapR<T> Y(out.data(), rows, out_f);
  Y.noalias() = CMapR<T>(x.value().data(), rows, in) * CMapR<T>(w.value().data(), out_f, in).transpose();
  if (b.defined()) Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.value().data(), out_f);
  return make_op(std::move(out), {x, w, b}, [rows, in, out_f](Node<T>& self) {
    CMapR<T> dY(self.grad.data(), rows, out_f);
    if (wants_grad(self, 0))
      MapR<T>(detail::grad_of(self, 0).data(), rows, in).noalias() +=
          dY * CMapR<T>(detail::value_of(self, 1).data(), out_f, in);
    if (wants_grad(self, 1))
      MapR<T>(detail::grad_of(self, 1).data(), out_f, in).noalias() +=
          dY.transpose() * CMapR<T>(detail::value_of(self, 0).data(), rows, in);
    if (wants_grad(self, 2))
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(detail::grad_of(self, 2).data(), out_f) += dY.colwise().sum();
  });
}

/// Layer normalization over the last dimension.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const std::size_t D = x.shape().back();
  detail::require(gamma.size() == D && beta.size() == D, "layer_norm: parameter width mismatch");
  const std::size_t rows = x.size() / D;
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.size()), inv_std(rows);
  const auto& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * D;
    T mean{0};
    for (std::size_t d = 0; d < D; ++d) mean += xr[d];
    mean /= T(D);
    T var{0};
    for (std::size_t d = 0; d < D; ++d) var += (xr[d] - mean) * (xr[d] - mean);
    var /= T(D);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t d = 0; d < D; ++d) {
      const T h = (xr[d] - mean) * is;
      xhat[r * D + d] = h;
      out[r * D + d] = h * gamma.value()[d] + beta.value()[d];
    }
  }
  return make_op(std::move(out), {x, gamma, beta},
                 [xhat = std::move(xhat), inv_std = std::move(inv_std), rows, D](Node<T>& self) {
                   const auto& gv = detail::value_of(self, 1);
                   for (std::size_t r = 0; r < rows; ++r) {
                     const T* dy = self.grad.data() + r * D;
                     const T* h = xhat.data() + r * D;
                     if (wants_grad(self, 1)) {
                       auto& gg = detail::grad_of(self, 1);
                       for (std::size_t d = 0; d < D; ++d) gg[d] += dy[d] * h[d];
                     }
                     if (wants_grad(self, 2)) {
                       auto& gb = detail::grad_of(self, 2);
                       for (std::size_t d = 0; d < D; ++d) gb[d] += dy[d];
                     }
                     if (wants_grad(self, 0)) {
                       T m1{0}, m2{0};
                       for (std::size_t d = 0; d < D; ++d) {
                         const T dh = dy[d] * gv[d];
                         m1 += dh;
                         m2 += dh * h[d];
                       }
                       m1 /= T(D);
                       m2 /= T(D);
                       auto& gx = detail::grad_of(self, 0);
                       for (std::size_t d = 0; d < D; ++d)
                         gx[r * D + d] += inv_std[r] * (dy[d] * gv[d] - m1 - h[d] * m2);
                     }
                   }
                 });
}

/// Row lookup: ids [B, L] into table [V, D] gives [B, L, D].
template <typename T>
Var<T> embedding(const std::vector<std::int64_t>& ids, std::size_t batch, std::size_t len, const Var<T>& table) {
  const std::size_t V = table.dim(0), D = table.dim(1);
  detail::require(ids.size() == batch * len, "embedding: id count does not match batch x len");
  Tensor<T> out({batch, len, D});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V)
      throw ShapeError("embedding: token id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(V));
    std::copy_n(table.value().data() + static_cast<std::size_t>(ids[i]) * D, D, out.data() + i * D);
  }
  return make_op(std::move(out), {table}, [ids, D](Node<T>& self) {
    auto& g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      T* row = g.data() + static_cast<std::size_t>(ids[i]) * D;
      for (std::size_t d = 0; d < D; ++d) row[d] += self.grad[i * D + d];
    }
  });
}

/// Scaled dot-product multi-head attention over pre-projected q [B,Sq,D],
/// k/v [B,Sk,D]. `key_mask` is [B,Sk] with 1 for valid keys (empty = all).
/// When `probs_out` is non-null the softmax probabilities [B,H,Sq,Sk] are
/// copied there.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const std::vector<T>& key_mask,
                 std::size_t heads, Tensor<T>* probs_out = nullptr) {
  detail::require(q.shape().size() == 3 && k.shape() == v.shape() && k.shape().size() == 3,
                  "attention expects q [B,Sq,D], k/v [B,Sk,D]");
  const std::size_t B = q.dim(0), Sq = q.dim(1), D = q.dim(2), Sk = k.dim(1);
  detail::require(k.dim(0) == B && k.dim(2) == D, "attention: q/k mismatch");
  detail::require(heads > 0 && D % heads == 0, "attention: width not divisible by heads");
  detail::require(key_mask.empty() || key_mask.size() == B * Sk, "attention: mask size");
  const std::size_t Dh = D / heads;
  const T scale_f = T(1) / std::sqrt(T(Dh));
  auto probs = std::make_shared<std::vector<T>>(B * heads * Sq * Sk);
  Tensor<T> out({B, Sq, D});
  MatR<T> scores(Sq, Sk);
  Eigen::Array<T, 1, Eigen::Dynamic> bias = Eigen::Array<T, 1, Eigen::Dynamic>::Zero(Sk);
  Eigen::Array<T, 1, Eigen::Dynamic> keep = Eigen::Array<T, 1, Eigen::Dynamic>::Ones(Sk);
  Eigen::Array<T, Eigen::Dynamic, 1> rowmax(Sq);
  for (std::size_t b = 0; b < B; ++b) {
    bool any_valid = key_mask.empty();
    if (!key_mask.empty())
      for (std::size_t j = 0; j < Sk; ++j) {
        bias(j) = (key_mask[b * Sk + j] - T(1)) * T(kMaskBias);
        keep(j) = key_mask[b * Sk + j] > T(0.5) ? T(1) : T(0);
        any_valid = any_valid || keep(j) > T(0);
      }
    for (std::size_t h = 0; h < heads; ++h) {
      CSMapR<T> Q(q.value().data() + b * Sq * D + h * Dh, Sq, Dh, Eigen::OuterStride<>(D));
      CSMapR<T> K(k.value().data() + b * Sk * D + h * Dh, Sk, Dh, Eigen::OuterStride<>(D));
      CSMapR<T> Vm(v.value().data() + b * Sk * D + h * Dh, Sk, Dh, Eigen::OuterStride<>(D));
      scores.noalias() = Q * K.transpose();
      auto S = scores.array();
      S = S * scale_f;
      S.rowwise() += bias;
      MapR<T> P(probs->data() + (b * heads + h) * Sq * Sk, Sq, Sk);
      rowmax = S.rowwise().maxCoeff();
      P.array() = S.colwise() - rowmax;
      P.array() = P.array().exp();
      // Vectorised exp clamps its argument near -88, so masked keys would get
      // a denormal weight instead of 0; denormals slow every later op ~40x.
      if (any_valid && !key_mask.empty()) P.array().rowwise() *= keep;
      P.array().colwise() /= P.array().rowwise().sum();
      SMapR<T> O(out.data() + b * Sq * D + h * Dh, Sq, Dh, Eigen::OuterStride<>(D));
      O.noalias() = P * Vm;
    }
  }
  if (probs_out) *probs_out = Tensor<T>({B, heads, Sq, Sk}, *probs);
  return make_op(std::move(out), {q, k, v}, [probs, B, Sq, Sk, D, heads, Dh, scale_f](Node<T>& self) {
    const auto& qv = detail::value_of(self, 0);
    const auto& kv = detail::value_of(self, 1);
    const auto& vv = detail::value_of(self, 2);
    T* gq = wants_grad(self, 0) ? detail::grad_of(self, 0).data() : nullptr;
    T* gk = wants_grad(self, 1) ? detail::grad_of(self, 1).data() : nullptr;
    T* gv = wants_grad(self, 2) ? detail::grad_of(self, 2).data() : nullptr;
    MatR<T> dP(Sq, Sk), dS(Sq, Sk);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < heads; ++h) {
        const Eigen::OuterStride<> st(D);
        CSMapR<T> dO(self.grad.data() + b * Sq * D + h * Dh, Sq, Dh, st);
        CSMapR<T> Q(qv.data() + b * Sq * D + h * Dh, Sq, Dh, st);
        CSMapR<T> K(kv.data() + b * Sk * D + h * Dh, Sk, Dh, st);
        CSMapR<T> Vm(vv.data() + b * Sk * D + h * Dh, Sk, Dh, st);
        CMapR<T> P(probs->data() + (b * heads + h) * Sq * Sk, Sq, Sk);
        if (gv) SMapR<T>(gv + b * Sk * D + h * Dh, Sk, Dh, st).noalias() += P.transpose() * dO;
        if (!gq && !gk) continue;
        dP.noalias() = dO * Vm.transpose();
        for (std::size_t i = 0; i < Sq; ++i) {
          T dot{0};
          for (std::size_t j = 0; j < Sk; ++j) dot += dP(i, j) * P(i, j);
          for (std::size_t j = 0; j < Sk; ++j) dS(i, j) = P(i, j) * (dP(i, j) - dot) * scale_f;
        }
        if (gq) SMapR<T>(gq + b * Sq * D + h * Dh, Sq, Dh, st).noalias() += dS * K;
        if (gk) SMapR<T>(gk + b * Sk * D + h * Dh, Sk, Dh, st).noalias() += dS.transpose() * Q;
      }
  });
}

// ---------------------------------------------------------- convolutions

struct ConvGeometry {
  std::size_t batch, cin, h, w, cout, kernel, stride, pad, hout, wout;
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& w, std::size_t stride, std::size_t pad,
                                  std::size_t groups) {
  if (x.size() != 4 || w.size() != 4) throw ShapeError("conv2d expects x [B,C,H,W] and w [O,I,k,k]");
  if (w[2] != w[3]) throw ShapeError("conv2d: only square kernels");
  if (x[1] != w[1] * groups)
    throw ShapeError("conv2d: input channels " + std::to_string(x[1]) + " do not match weight " + shape_str(w));
  const std::size_t k = w[2];
  if (x[2] + 2 * pad < k || x[3] + 2 * pad < k) throw ShapeError("conv2d: input smaller than kernel");
  return {x[0], x[1], x[2], x[3], w[0], k, stride, pad, (x[2] + 2 * pad - k) / stride + 1,
          (x[3] + 2 * pad - k) / stride + 1};
}

namespace detail {
template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
  const std::size_t hw = g.hout * g.wout;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.kernel; ++ky)
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        T* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * hw;
        for (std::size_t oy = 0; oy < g.hout; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < g.wout; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                ix < static_cast<std::ptrdiff_t>(g.w);
            row[oy * g.wout + ox] = inside ? img[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] : T(0);
          }
        }
      }
}

template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* img) {
  const std::size_t hw = g.hout * g.wout;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.kernel; ++ky)
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const T* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * hw;
        for (std::size_t oy = 0; oy < g.hout; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wout; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            img[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] += row[oy * g.wout + ox];
          }
        }
      }
}
}  // namespace detail

/// Dense 2-D convolution (groups = 1) via im2col + GEMM.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t stride, std::size_t pad) {
  const ConvGeometry g = conv_geometry(x.shape(), w.shape(), stride, pad, 1);
  const std::size_t K = g.cin * g.kernel * g.kernel, HW = g.hout * g.wout;
  const bool pointwise = g.kernel == 1 && g.stride == 1 && g.pad == 0;
  Tensor<T> out({g.batch, g.cout, g.hout, g.wout});
  std::vector<T> cols(pointwise ? 0 : K * HW);
  CMapR<T> W(w.value().data(), g.cout, K);
  for (std::size_t n = 0; n < g.batch; ++n) {
    const T* img = x.value().data() + n * g.cin * g.h * g.w;
    if (!pointwise) detail::im2col(img, g, cols.data());
    MapR<T> Y(out.data() + n * g.cout * HW, g.cout, HW);
    Y.noalias() = W * CMapR<T>(pointwise ? img : cols.data(), K, HW);
    if (b.defined()) Y.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(b.value().data(), g.cout);
  }
  return make_op(std::move(out), {x, w, b}, [g, K, HW, pointwise](Node<T>& self) {
    const auto& xv = detail::value_of(self, 0);
    const auto& wv = detail::value_of(self, 1);
    std::vector<T> cols(pointwise ? 0 : K * HW), dcols(pointwise ? 0 : K * HW);
    for (std::size_t n = 0; n < g.batch; ++n) {
      CMapR<T> dY(self.grad.data() + n * g.cout * HW, g.cout, HW);
      const T* img = xv.data() + n * g.cin * g.h * g.w;
      if (wants_grad(self, 1)) {
        if (!pointwise) detail::im2col(img, g, cols.data());
        MapR<T>(detail::grad_of(self, 1).data(), g.cout, K).noalias() +=
            dY * CMapR<T>(pointwise ? img : cols.data(), K, HW).transpose();
      }
      if (wants_grad(self, 2))
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(detail::grad_of(self, 2).data(), g.cout) += dY.rowwise().sum();
      if (wants_grad(self, 0)) {
        T* gx = detail::grad_of(self, 0).data() + n * g.cin * g.h * g.w;
        if (pointwise) {
          MapR<T>(gx, K, HW).noalias() += CMapR<T>(wv.data(), g.cout, K).transpose() * dY;
        } else {
          MapR<T>(dcols.data(), K, HW).noalias() = CMapR<T>(wv.data(), g.cout, K).transpose() * dY;
          detail::col2im(dcols.data(), g, gx);
        }
      }
    }
  });
}

/// Depthwise convolution: one k x k filter per channel, w [C,1,k,k].
template <typename T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t stride, std::size_t pad) {
  const std::size_t C = x.shape().size() == 4 ? x.dim(1) : 0;
  const ConvGeometry g = conv_geometry(x.shape(), w.shape(), stride, pad, C);
  detail::require(g.cout == g.cin, "depthwise_conv2d: channel multiplier must be 1");
  Tensor<T> out({g.batch, g.cout, g.hout, g.wout});
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto in_range = [stride = g.stride, pad = g.pad](std::size_t o, std::size_t kk, std::size_t lim, std::size_t& i) {
    const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(o * stride + kk) - static_cast<std::ptrdiff_t>(pad);
    if (p < 0 || p >= static_cast<std::ptrdiff_t>(lim)) return false;
    i = static_cast<std::size_t>(p);
    return true;
  };
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* img = xv.data() + (n * C + c) * g.h * g.w;
      const T* f = wv.data() + c * g.kernel * g.kernel;
      T* o = out.data() + (n * C + c) * g.hout * g.wout;
      const T bias = b.defined() ? b.value()[c] : T(0);
      for (std::size_t oy = 0; oy < g.hout; ++oy)
        for (std::size_t ox = 0; ox < g.wout; ++ox) {
          T acc = bias;
          for (std::size_t ky = 0; ky < g.kernel; ++ky) {
            std::size_t iy;
            if (!in_range(oy, ky, g.h, iy)) continue;
            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
              std::size_t ix;
              if (!in_range(ox, kx, g.w, ix)) continue;
              acc += img[iy * g.w + ix] * f[ky * g.kernel + kx];
            }
          }
          o[oy * g.wout + ox] = acc;
        }
    }
  return make_op(std::move(out), {x, w, b}, [g, C, in_range](Node<T>& self) {
    const auto& xv = detail::value_of(self, 0);
    const auto& wv = detail::value_of(self, 1);
    T* gx = wants_grad(self, 0) ? detail::grad_of(self, 0).data() : nullptr;
    T* gw = wants_grad(self, 1) ? detail::grad_of(self, 1).data() : nullptr;
    T* gb = wants_grad(self, 2) ? detail::grad_of(self, 2).data() : nullptr;
    for (std::size_t n = 0; n < g.batch; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        const T* img = xv.data() + (n * C + c) * g.h * g.w;
        const T* f = wv.data() + c * g.kernel * g.kernel;
        const T* dy = self.grad.data() + (n * C + c) * g.hout * g.wout;
        for (std::size_t oy = 0; oy < g.hout; ++oy)
          for (std::size_t ox = 0; ox < g.wout; ++ox) {
            const T d = dy[oy * g.wout + ox];
            if (gb) gb[c] += d;
            for (std::size_t ky = 0; ky < g.kernel; ++ky) {
              std::size_t iy;
              if (!in_range(oy, ky, g.h, iy)) continue;
              for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                std::size_t ix;
                if (!in_range(ox, kx, g.w, ix)) continue;
                if (gw) gw[c * g.kernel * g.kernel + ky * g.kernel + kx] += d * img[iy * g.w + ix];
                if (gx) gx[(n * C + c) * g.h * g.w + iy * g.w + ix] += d * f[ky * g.kernel + kx];
              }
            }
          }
      }
  });
}

/// Per-channel batch normalization on [B,C,H,W]. In training mode the batch
/// statistics are used and the running buffers are updated in place.
template <typename T>
Var<T> batch_norm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                    Tensor<T>& running_var, bool training, T momentum, T eps) {
  detail::require(x.shape().size() == 4, "batch_norm2d expects [B,C,H,W]");
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3), N = B * HW;
  detail::require(gamma.size() == C, "batch_norm2d: channel mismatch");
  std::vector<T> mean(C), inv_std(C);
  const auto& xv = x.value();
  if (training) {
    for (std::size_t c = 0; c < C; ++c) {
      T m{0};
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t i = 0; i < HW; ++i) m += xv[(n * C + c) * HW + i];
      m /= T(N);
      T v{0};
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t i = 0; i < HW; ++i) {
          const T d = xv[(n * C + c) * HW + i] - m;
          v += d * d;
        }
      v /= T(N);
      mean[c] = m;
      inv_std[c] = T(1) / std::sqrt(v + eps);
      const T unbiased = N > 1 ? v * T(N) / T(N - 1) : v;
      running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * m;
      running_var[c] = (T(1) - momentum) * running_var[c] + momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = running_mean[c];
      inv_std[c] = T(1) / std::sqrt(running_var[c] + eps);
    }
  }
  Tensor<T> out(x.shape());
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t idx = (n * C + c) * HW + i;
        out[idx] = (xv[idx] - mean[c]) * inv_std[c] * gamma.value()[c] + beta.value()[c];
      }
  return make_op(std::move(out), {x, gamma, beta}, [mean, inv_std, training, B, C, HW, N](Node<T>& self) {
    const auto& xv = detail::value_of(self, 0);
    const auto& gv = detail::value_of(self, 1);
    for (std::size_t c = 0; c < C; ++c) {
      T sum_dy{0}, sum_dy_xhat{0};
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t i = 0; i < HW; ++i) {
          const std::size_t idx = (n * C + c) * HW + i;
          sum_dy += self.grad[idx];
          sum_dy_xhat += self.grad[idx] * (xv[idx] - mean[c]) * inv_std[c];
        }
      if (wants_grad(self, 1)) detail::grad_of(self, 1)[c] += sum_dy_xhat;
      if (wants_grad(self, 2)) detail::grad_of(self, 2)[c] += sum_dy;
      if (!wants_grad(self, 0)) continue;
      auto& gx = detail::grad_of(self, 0);
      const T k = gv[c] * inv_std[c];
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t i = 0; i < HW; ++i) {
          const std::size_t idx = (n * C + c) * HW + i;
          if (training) {
            const T xhat = (xv[idx] - mean[c]) * inv_std[c];
            gx[idx] += k * (self.grad[idx] - sum_dy / T(N) - xhat * sum_dy_xhat / T(N));
          } else {
            gx[idx] += k * self.grad[idx];
          }
        }
    }
  });
}

/// [B,C,H,W] -> [B,C]
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  detail::require(x.shape().size() == 4, "global_avg_pool expects [B,C,H,W]");
  const std::size_t BC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> out({x.dim(0), x.dim(1)});
  for (std::size_t i = 0; i < BC; ++i) {
    T s{0};
    for (std::size_t j = 0; j < HW; ++j) s += x.value()[i * HW + j];
    out[i] = s / T(HW);
  }
  return make_op(std::move(out), {x}, [BC, HW](Node<T>& self) {
    auto& g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < BC; ++i)
      for (std::size_t j = 0; j < HW; ++j) g[i * HW + j] += self.grad[i] / T(HW);
  });
}

// ------------------------------------------------------------------ losses

/// Mean softmax cross-entropy; logits [B, C], labels in [0, C).
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
  detail::require(logits.shape().size() == 2 && logits.dim(0) == labels.size(), "cross_entropy: shape mismatch");
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  std::vector<T> soft(B * C);
  T loss{0};
  for (std::size_t b = 0; b < B; ++b) {
    const T* z = logits.value().data() + b * C;
    const T mx = *std::max_element(z, z + C);
    T s{0};
    for (std::size_t c = 0; c < C; ++c) s += std::exp(z[c] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t c = 0; c < C; ++c) soft[b * C + c] = std::exp(z[c] - lse);
    const auto y = static_cast<std::size_t>(labels[b]);
    if (y >= C) throw ShapeError("cross_entropy: label out of range");
    loss += lse - z[y];
  }
  loss /= T(B);
  return make_op(Tensor<T>({1}, loss), {logits}, [soft = std::move(soft), labels, B, C](Node<T>& self) {
    auto& g = detail::grad_of(self, 0);
    const T s = self.grad[0] / T(B);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        g[b * C + c] += s * (soft[b * C + c] - (static_cast<std::size_t>(labels[b]) == c ? T(1) : T(0)));
  });
}

}  // namespace mmfuse

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "udissect/blas.hpp"
#include "udissect/error.hpp"
#include "udissect/tensor.hpp"

namespace udissect {

enum class OpKind {
  Leaf,
  Constant,
  MatMul,
  Add,
  Sub,
  Mul,
  Scale,
  Silu,
  Softmax,
  LogSoftmax,
  RmsNorm,
  Embedding,
  Attention,
  CrossEntropy,
  TokenLogProbs,
  SegmentSum,
  LogSigmoid,
  KlDivergence,
  Mse,
  Sum,
  Mean,
  Custom,
};

inline const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Constant: return "constant";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::Silu: return "silu";
    case OpKind::Softmax: return "softmax";
    case OpKind::LogSoftmax: return "log_softmax";
    case OpKind::RmsNorm: return "rms_norm";
    case OpKind::Embedding: return "embedding";
    case OpKind::Attention: return "attention";
    case OpKind::CrossEntropy: return "cross_entropy";
    case OpKind::TokenLogProbs: return "token_log_probs";
    case OpKind::SegmentSum: return "segment_sum";
    case OpKind::LogSigmoid: return "log_sigmoid";
    case OpKind::KlDivergence: return "kl_divergence";
    case OpKind::Mse: return "mse";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Custom: return "custom";
  }
  return "?";
}

/// Handle to a node inside one Graph.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const noexcept { return id != npos; }
};

template <class T>
class Graph;

namespace detail {

inline std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

template <class T>
T log_sum_exp(std::span<const T> row) {
  T peak = row[0];
  for (T v : row) peak = std::max(peak, v);
  T total = 0;
  for (T v : row) total += std::exp(v - peak);
  return peak + std::log(total);
}

template <class T>
T stable_log_sigmoid(T x) {
  // log(sigmoid(x)) = -softplus(-x)
  return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

template <class T>
T sigmoid(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace detail

/// A static computation graph built in topological order. Nodes are evaluated
/// eagerly when added; evaluate() re-runs every forward rule so perturbed leaf
/// tensors can be re-scored, and backpropagate() walks nodes in exact reverse
/// creation order, visiting each once.
template <class T>
class Graph {
 public:
  using ForwardFn = std::function<void(Graph&, std::size_t self)>;
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  // ---- leaves -------------------------------------------------------------

  /// Leaf that reads `tensor` by reference; gradients accumulate into its grad
  /// buffer when the tensor requires grad.
  Var leaf(Tensor<T>& tensor) {
    Node n;
    n.kind = OpKind::Leaf;
    n.source = &tensor;
    if (tensor.requires_grad()) {
      n.sink = &tensor;
      n.needs_grad = true;
    }
    return push(std::move(n), false);
  }

  /// Read-only leaf; never receives gradient.
  Var leaf(const Tensor<T>& tensor) {
    Node n;
    n.kind = OpKind::Leaf;
    n.source = &tensor;
    return push(std::move(n), false);
  }

  Var constant(Tensor<T> tensor) {
    Node n;
    n.kind = OpKind::Constant;
    n.value = std::move(tensor);
    return push(std::move(n), false);
  }

  // ---- access ---------------------------------------------------------------

  std::size_t size() const noexcept { return nodes_.size(); }
  OpKind kind(Var v) const { return node(v).kind; }

  const Tensor<T>& value(Var v) const { return value_of(v.id); }
  const Tensor<T>& value_of(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.source ? *n.source : n.value;
  }
  Tensor<T>& output(std::size_t id) { return nodes_[id].value; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  /// Upstream gradient of a node during backward; empty when nothing flowed in.
  std::span<const T> upstream(std::size_t id) const { return nodes_[id].grad; }

  /// Gradient buffer of a node, zero-initialised on first access.
  std::span<T> grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(value_of(id).size(), T(0));
    return n.grad;
  }

  /// Gradient a node received in the most recent backward pass.
  std::span<const T> grad(Var v) const { return node(v).grad; }

  // ---- evaluation -----------------------------------------------------------

  /// Recomputes every node up to and including `root` and returns its value.
  const Tensor<T>& evaluate(Var root) {
    check(root);
    for (std::size_t id = 0; id <= root.id; ++id) run_forward(id);
    return value(root);
  }

  /// Reverse-mode sweep from a scalar root. Every grad-requiring leaf tensor
  /// reachable from the root gets the root's derivative added to its grad.
  void backpropagate(Var root) {
    check(root);
    require(value(root).size() == 1, ErrorKind::NonScalarRoot,
            "backpropagate needs a scalar root, got shape " + shape_string(value(root).shape()));
    for (Node& n : nodes_) n.grad.clear();
    if (!nodes_[root.id].needs_grad) return;
    grad_buffer(root.id)[0] = T(1);
    for (std::size_t id = root.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.kind == OpKind::Leaf) {
        if (n.sink) {
          auto dst = n.sink->grad();
          for (std::size_t i = 0; i < dst.size(); ++i) {
            require(std::isfinite(n.grad[i]), ErrorKind::NonFinite, "gradient of leaf is not finite");
            dst[i] += n.grad[i];
          }
        }
        continue;
      }
      if (n.backward) n.backward(*this, id);
    }
  }

  // ---- primitive ops --------------------------------------------------------

  /// op(a) * op(b) for rank-2 operands.
  Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false) {
    const auto& av = value(a);
    const auto& bv = value(b);
    require(av.rank() == 2 && bv.rank() == 2, ErrorKind::ShapeMismatch, "matmul needs rank-2 operands");
    const std::size_t m = trans_a ? av.shape()[1] : av.shape()[0];
    const std::size_t k = trans_a ? av.shape()[0] : av.shape()[1];
    const std::size_t kb = trans_b ? bv.shape()[1] : bv.shape()[0];
    const std::size_t n = trans_b ? bv.shape()[0] : bv.shape()[1];
    require(k == kb, ErrorKind::ShapeMismatch,
            "matmul " + shape_string(av.shape()) + (trans_a ? "^T" : "") + " x " +
                shape_string(bv.shape()) + (trans_b ? "^T" : ""));
    auto fwd = [trans_a, trans_b, m, n, k](Graph& g, std::size_t self) {
      const auto& x = g.value_of(g.inputs(self)[0]);
      const auto& y = g.value_of(g.inputs(self)[1]);
      Tensor<T>& out = g.output(self);
      if (out.shape() != Shape{m, n}) out = Tensor<T>({m, n});
      blas::gemm(trans_a, trans_b, int(m), int(n), int(k), T(1), x.data().data(), int(x.shape()[1]),
                 y.data().data(), int(y.shape()[1]), T(0), out.data().data(), int(n));
    };
    auto bwd = [trans_a, trans_b, m, n, k](Graph& g, std::size_t self) {
      const std::size_t ia = g.inputs(self)[0], ib = g.inputs(self)[1];
      const auto& x = g.value_of(ia);
      const auto& y = g.value_of(ib);
      const T* dc = g.upstream(self).data();
      const int lda = int(x.shape()[1]), ldb = int(y.shape()[1]);
      if (g.needs_grad(ia)) {
        T* da = g.grad_buffer(ia).data();
        if (!trans_a) {
          blas::gemm(false, !trans_b, int(m), int(k), int(n), T(1), dc, int(n), y.data().data(), ldb, T(1), da, lda);
        } else {
          blas::gemm(trans_b, true, int(k), int(m), int(n), T(1), y.data().data(), ldb, dc, int(n), T(1), da, lda);
        }
      }
      if (g.needs_grad(ib)) {
        T* db = g.grad_buffer(ib).data();
        if (!trans_b) {
          blas::gemm(!trans_a, false, int(k), int(n), int(m), T(1), x.data().data(), lda, dc, int(n), T(1), db, ldb);
        } else {
          blas::gemm(true, trans_a, int(n), int(k), int(m), T(1), dc, int(n), x.data().data(), lda, T(1), db, ldb);
        }
      }
    };
    return push_op(OpKind::MatMul, {a, b}, std::move(fwd), std::move(bwd));
  }

  Var add(Var a, Var b) { return linear_combination(OpKind::Add, a, b, T(1)); }
  Var sub(Var a, Var b) { return linear_combination(OpKind::Sub, a, b, T(-1)); }

  Var mul(Var a, Var b) {
    same_shape(a, b, "mul");
    auto fwd = [](Graph& g, std::size_t self) {
      const auto& x = g.value_of(g.inputs(self)[0]);
      const auto& y = g.value_of(g.inputs(self)[1]);
      Tensor<T>& out = g.output(self);
      if (out.shape() != x.shape()) out = Tensor<T>(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
    };
    auto bwd = [](Graph& g, std::size_t self) {
      const std::size_t ia = g.inputs(self)[0], ib = g.inputs(self)[1];
      auto up = g.upstream(self);
      const auto& x = g.value_of(ia);
      const auto& y = g.value_of(ib);
      if (g.needs_grad(ia)) {
        auto d = g.grad_buffer(ia);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += up[i] * y[i];
      }
      if (g.needs_grad(ib)) {
        auto d = g.grad_buffer(ib);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += up[i] * x[i];
      }
    };
    return push_op(OpKind::Mul, {a, b}, std::move(fwd), std::move(bwd));
  }

  Var scale(Var a, T factor) {
    auto fwd = [factor](Graph& g, std::size_t self) {
      const auto& x = g.value_of(g.inputs(self)[0]);
      Tensor<T>& out = g.output(self);
      if (out.shape() != x.shape()) out = Tensor<T>(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = factor * x[i];
    };
    auto bwd = [factor](Graph& g, std::size_t self) {
      auto up = g.upstream(self);
      auto d = g.grad_buffer(g.inputs(self)[0]);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += factor * up[i];
    };
    return push_op(OpKind::Scale, {a}, std::move(fwd), std::move(bwd));
  }

  /// Sigmoid-weighted linear unit, x * sigmoid(x).
  Var silu(Var a) {
    auto fwd = [](Graph& g, std::size_t self) {
      const auto& x = g.value_of(g.inputs(self)[0]);
      Tensor<T>& out = g.output(self);
      if (out.shape() != x.shape()) out = Tensor<T>(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * detail::sigmoid(x[i]);
    };
    auto bwd = [](Graph& g, std::size_t self) {
      const std::size_t ia = g.inputs(self)[0];
      const auto& x = g.value_of(ia);
      auto up = g.upstream(self);
      auto d = g.grad_buffer(ia);
      for (std::size_t i = 0; i < d.size(); ++i) {
        const T s = detail::sigmoid(x[i]);
        d[i] += up[i] * s * (T(1) + x[i] * (T(1) - s));
      }
    };
    return push_op(OpKind::Silu, {a}, std::move(fwd), std::move(bwd));
  }

  /// Softmax over the last dimension.
  Var softmax(Var a) {
    auto fwd = [](Graph& g, std::size_t self) {
      const auto& x = g.value_of(g.inputs(self)[0]);
      Tensor<T>& out = g.output(self);
      if (out.shape() != x.shape()) out = Tensor<T>(x.shape());
      const std::size_t width = detail::last_dim(x.shape());
      for (std::size_t r = 0; r < x.size() / width; ++r) {
        std::span<const T> in(x.data().data() + r * width, width);
        const T lse = detail::log_sum_exp(in);
        for (std::size_t c = 0; c < width; ++c) out[r * width + c] = std::exp(in[c] - lse);
      }
    };
    auto bwd = [](Graph& g, std::size_t self) {
      const auto& y = g.value_of(self);
      auto up = g.upstream(self);
      auto d = g.grad_buffer(g.inputs(self)[0]);
      const std::size_t width = detail::last_dim(y.shape());
      for (std::size_t r = 0; r < y.size() / width; ++r) {
        T dot = 0;
        for (std::size_t c = 0; c < width; ++c) dot += up[r * width + c] * y[r * width + c];
        for (std::size_t c = 0; c < width; ++c) {
          d[r * width + c] += y[r * width + c] * (up[r * width + c] - dot);
        }
      }
    };
    return push_op(OpKind::Softmax, {a}, std::move(fwd), std::move(bwd));
  }

  /// Log-softmax over the last dimension.
  Var log_softmax(Var a) {
    auto fwd = [](Graph& g, std::size_t self) {
      const auto& x = g.value_of(g.inputs(self)[0]);
      Tensor<T>& out = g.output(self);
      if (out.shape() != x.shape()) out = Tensor<T>(x.shape());
      const std::size_t width = detail::last_dim(x.shape());
      for (std::size_t r = 0; r < x.size() / width; ++r) {
        std::span<const T> in(x.data().data() + r * width, width);
        const T lse = detail::log_sum_exp(in);
        for (std::size_t c = 0; c < width; ++c) out[r * width + c] = in[c] - lse;
      }
    };
    auto bwd = [](Graph& g, std::size_t self) {
      const auto& y = g.value_of(self);
      auto up = g.upstream(self);
      auto d = g.grad_buffer(g.inputs(self)[0]);
      const std::size_t width = detail::last_dim(y.shape());
      for (std::size_t r = 0; r < y.size() / width; ++r) {
        T total = 0;
        for (std::size_t c = 0; c < width; ++c) total += up[r * width + c];
        for (std::size_t c = 0; c < width; ++c) {
          d[r * width + c] += up[r * width + c] - std::exp(y[r * width + c]) * total;
        }
      }
    };
    return push_op(OpKind::LogSoftmax, {a}, std::move(fwd), std::move(bwd));
  }

  /// Row-wise root-mean-square normalisation with a learned gain vector.
  Var rms_norm(Var x, Var gain, T eps = T(1e-5)) {
    const auto& xv = value(x);
    const auto& gv = value(gain);
    require(xv.rank() == 2 && gv.size() == xv.shape()[1], ErrorKind::ShapeMismatch,
            "rms_norm " + shape_string(xv.shape()) + " with gain " + shape_string(gv.shape()));
    auto inv_rms = std::make_shared<std::vector<T>>();
    auto fwd = [eps, inv_rms](Graph& g, std::size_t self) {
      const auto& in = g.value_of(g.inputs(self)[0]);
      const auto& w = g.value_of(g.inputs(self)[1]);
      Tensor<T>& out = g.output(self);
      if (out.shape() != in.shape()) out = Tensor<T>(in.shape());
      const std::size_t rows = in.shape()[0], width = in.shape()[1];
      inv_rms->assign(rows, T(0));
      for (std::size_t r = 0; r < rows; ++r) {
        T ss = 0;
        for (std::size_t c = 0; c < width; ++c) ss += in[r * width + c] * in[r * width + c];
        const T inv = T(1) / std::sqrt(ss / T(width) + eps);
        (*inv_rms)[r] = inv;
        for (std::size_t c = 0; c < width; ++c) out[r * width + c] = in[r * width + c] * inv * w[c];
      }
    };
    auto bwd = [inv_rms](Graph& g, std::size_t self) {
      const std::size_t ix = g.inputs(self)[0], iw = g.inputs(self)[1];
      const auto& in = g.value_of(ix);
      const auto& w = g.value_of(iw);
      auto up = g.upstream(self);
      const std::size_t rows = in.shape()[0], width = in.shape()[1];
      if (g.needs_grad(ix)) {
        auto d = g.grad_buffer(ix);
        for (std::size_t r = 0; r < rows; ++r) {
          const T inv = (*inv_rms)[r];
          T dot = 0;
          for (std::size_t c = 0; c < width; ++c) dot += up[r * width + c] * w[c] * in[r * width + c];
          const T coeff = inv * inv * inv * dot / T(width);
          for (std::size_t c = 0; c < width; ++c) {
            d[r * width + c] += inv * w[c] * up[r * width + c] - coeff * in[r * width + c];
          }
        }
      }
      if (g.needs_grad(iw)) {
        auto d = g.grad_buffer(iw);
        for (std::size_t r = 0; r < rows; ++r) {
          const T inv = (*inv_rms)[r];
          for (std::size_t c = 0; c < width; ++c) d[c] += up[r * width + c] * in[r * width + c] * inv;
        }
      }
    };
    return push_op(OpKind::RmsNorm, {x, gain}, std::move(fwd), std::move(bwd));
  }

  /// Gathers rows of a rank-2 table.
  Var embedding(Var table, std::vector<std::size_t> ids) {
    const auto& tv = value(table);
    require(tv.rank() == 2, ErrorKind::ShapeMismatch, "embedding table must be rank 2");
    require(!ids.empty(), ErrorKind::ShapeMismatch, "embedding lookup of zero ids");
    for (std::size_t id : ids) {
      require(id < tv.shape()[0], ErrorKind::TokenOutOfRange,
              "row " + std::to_string(id) + " outside table of " + std::to_string(tv.shape()[0]));
    }
    auto shared_ids = std::make_shared<const std::vector<std::size_t>>(std::move(ids));
    auto fwd = [shared_ids](Graph& g, std::size_t self) {
      const auto& t = g.value_of(g.inputs(self)[0]);
      const std::size_t width = t.shape()[1];
      Tensor<T>& out = g.output(self);
      const Shape shape{shared_ids->size(), width};
      if (out.shape() != shape) out = Tensor<T>(shape);
      for (std::size_t r = 0; r < shared_ids->size(); ++r) {
        std::copy_n(t.data().data() + (*shared_ids)[r] * width, width, out.data().data() + r * width);
      }
    };
    auto bwd = [shared_ids](Graph& g, std::size_t self) {
      const std::size_t it = g.inputs(self)[0];
      const std::size_t width = g.value_of(it).shape()[1];
      auto up = g.upstream(self);
      auto d = g.grad_buffer(it);
      for (std::size_t r = 0; r < shared_ids->size(); ++r) {
        T* dst = d.data() + (*shared_ids)[r] * width;
        for (std::size_t c = 0; c < width; ++c) dst[c] += up[r * width + c];
      }
    };
    return push_op(OpKind::Embedding, {table}, std::move(fwd), std::move(bwd));
  }

  /// Multi-head causal self-attention core on packed rows. `segments` gives
  /// the length of each independent sequence; rows of different sequences
  /// never attend to each other. Returns the per-head context concatenated
  /// along columns (before any output projection).
  Var causal_attention(Var q, Var k, Var v, std::vector<std::size_t> segments, std::size_t heads) {
    const auto& qv = value(q);
    require(qv.rank() == 2 && value(k).shape() == qv.shape() && value(v).shape() == qv.shape(),
            ErrorKind::ShapeMismatch, "attention q/k/v shapes differ");
    const std::size_t width = qv.shape()[1];
    require(heads > 0 && width % heads == 0, ErrorKind::ShapeMismatch, "width not divisible by heads");
    std::size_t total = 0;
    for (std::size_t s : segments) {
      require(s > 0, ErrorKind::ShapeMismatch, "empty attention segment");
      total += s;
    }
    require(total == qv.shape()[0], ErrorKind::ShapeMismatch, "attention segments do not cover rows");

    struct Saved {
      std::vector<std::size_t> segments;
      std::size_t heads;
      std::vector<std::vector<T>> probs;  // [segment * heads + head] -> t x t
    };
    auto saved = std::make_shared<Saved>(Saved{std::move(segments), heads, {}});

    auto fwd = [saved, width](Graph& g, std::size_t self) {
      const auto& Q = g.value_of(g.inputs(self)[0]);
      const auto& K = g.value_of(g.inputs(self)[1]);
      const auto& V = g.value_of(g.inputs(self)[2]);
      Tensor<T>& out = g.output(self);
      if (out.shape() != Q.shape()) out = Tensor<T>(Q.shape());
      const std::size_t hd = width / saved->heads;
      const T inv_sqrt = T(1) / std::sqrt(T(hd));
      saved->probs.assign(saved->segments.size() * saved->heads, {});
      std::size_t start = 0;
      for (std::size_t s = 0; s < saved->segments.size(); ++s) {
        const std::size_t t = saved->segments[s];
        for (std::size_t h = 0; h < saved->heads; ++h) {
          std::vector<T>& p = saved->probs[s * saved->heads + h];
          p.assign(t * t, T(0));
          const T* qh = Q.data().data() + start * width + h * hd;
          const T* kh = K.data().data() + start * width + h * hd;
          const T* vh = V.data().data() + start * width + h * hd;
          blas::gemm(false, true, int(t), int(t), int(hd), inv_sqrt, qh, int(width), kh, int(width),
                     T(0), p.data(), int(t));
          for (std::size_t i = 0; i < t; ++i) {
            T* row = p.data() + i * t;
            T peak = row[0];
            for (std::size_t j = 1; j <= i; ++j) peak = std::max(peak, row[j]);
            T total = 0;
            for (std::size_t j = 0; j <= i; ++j) {
              row[j] = std::exp(row[j] - peak);
              total += row[j];
            }
            for (std::size_t j = 0; j <= i; ++j) row[j] /= total;
            for (std::size_t j = i + 1; j < t; ++j) row[j] = T(0);
          }
          blas::gemm(false, false, int(t), int(hd), int(t), T(1), p.data(), int(t), vh, int(width), T(0),
                     out.data().data() + start * width + h * hd, int(width));
        }
        start += t;
      }
    };
    auto bwd = [saved, width](Graph& g, std::size_t self) {
      const std::size_t iq = g.inputs(self)[0], ik = g.inputs(self)[1], iv = g.inputs(self)[2];
      const auto& Q = g.value_of(iq);
      const auto& K = g.value_of(ik);
      const auto& V = g.value_of(iv);
      auto up = g.upstream(self);
      const bool gq = g.needs_grad(iq), gk = g.needs_grad(ik), gv = g.needs_grad(iv);
      T* dq = gq ? g.grad_buffer(iq).data() : nullptr;
      T* dk = gk ? g.grad_buffer(ik).data() : nullptr;
      T* dv = gv ? g.grad_buffer(iv).data() : nullptr;
      const std::size_t hd = width / saved->heads;
      const T inv_sqrt = T(1) / std::sqrt(T(hd));
      std::vector<T> dp;
      std::size_t start = 0;
      for (std::size_t s = 0; s < saved->segments.size(); ++s) {
        const std::size_t t = saved->segments[s];
        for (std::size_t h = 0; h < saved->heads; ++h) {
          const std::vector<T>& p = saved->probs[s * saved->heads + h];
          const std::size_t off = start * width + h * hd;
          const T* dout = up.data() + off;
          if (gv) {
            blas::gemm(true, false, int(t), int(hd), int(t), T(1), p.data(), int(t), dout, int(width), T(1),
                       dv + off, int(width));
          }
          if (!gq && !gk) continue;
          dp.assign(t * t, T(0));
          blas::gemm(false, true, int(t), int(t), int(hd), T(1), dout, int(width), V.data().data() + off,
                     int(width), T(0), dp.data(), int(t));
          for (std::size_t i = 0; i < t; ++i) {
            T dot = 0;
            for (std::size_t j = 0; j <= i; ++j) dot += dp[i * t + j] * p[i * t + j];
            for (std::size_t j = 0; j <= i; ++j) dp[i * t + j] = p[i * t + j] * (dp[i * t + j] - dot) * inv_sqrt;
            for (std::size_t j = i + 1; j < t; ++j) dp[i * t + j] = T(0);
          }
          if (gq) {
            blas::gemm(false, false, int(t), int(hd), int(t), T(1), dp.data(), int(t), K.data().data() + off,
                       int(width), T(1), dq + off, int(width));
          }
          if (gk) {
            blas::gemm(true, false, int(t), int(hd), int(t), T(1), dp.data(), int(t), Q.data().data() + off,
                       int(width), T(1), dk + off, int(width));
          }
        }
        start += t;
      }
    };
    return push_op(OpKind::Attention, {q, k, v}, std::move(fwd), std::move(bwd));
  }

  /// Mean negative log-likelihood of `targets[i]` under softmax(logits[rows[i]]).
  Var cross_entropy(Var logits, std::vector<std::size_t> rows, std::vector<std::size_t> targets) {
    check_row_targets(logits, rows, targets, "cross_entropy");
    auto pairs = std::make_shared<const std::pair<std::vector<std::size_t>, std::vector<std::size_t>>>(
        std::move(rows), std::move(targets));
    auto lse = std::make_shared<std::vector<T>>();
    auto fwd = [pairs, lse](Graph& g, std::size_t self) {
      const auto& x = g.value_of(g.inputs(self)[0]);
      const auto& [rs, ts] = *pairs;
      lse->assign(rs.size(), T(0));
      T total = 0;
      for (std::size_t i = 0; i < rs.size(); ++i) {
        (*lse)[i] = detail::log_sum_exp(x.row(rs[i]));
        total += (*lse)[i] - x.at(rs[i], ts[i]);
      }
      g.output(self) = Tensor<T>::scalar(total / T(rs.size()));
    };
    auto bwd = [pairs, lse](Graph& g, std::size_t self) {
      const std::size_t ix = g.inputs(self)[0];
      const auto& x = g.value_of(ix);
      const auto& [rs, ts] = *pairs;
      const T up = g.upstream(self)[0] / T(rs.size());
      auto d = g.grad_buffer(ix);
      const std::size_t width = x.cols();
      for (std::size_t i = 0; i < rs.size(); ++i) {
        const T* row = x.data().data() + rs[i] * width;
        T* drow = d.data() + rs[i] * width;
        for (std::size_t c = 0; c < width; ++c) drow[c] += up * std::exp(row[c] - (*lse)[i]);
        drow[ts[i]] -= up;
      }
    };
    return push_op(OpKind::CrossEntropy, {logits}, std::move(fwd), std::move(bwd));
  }

  /// Vector of log softmax(logits[rows[i]])[targets[i]].
  Var token_log_probs(Var logits, std::vector<std::size_t> rows, std::vector<std::size_t> targets) {
    check_row_targets(logits, rows, targets, "token_log_probs");
    auto pairs = std::make_shared<const std::pair<std::vector<std::size_t>, std::vector<std::size_t>>>(
        std::move(rows), std::move(targets));
    auto lse = std::make_shared<std::vector<T>>();
    auto fwd = [pairs, lse](Graph& g, std::size_t self) {
      const auto& x = g.value_of(g.inputs(self)[0]);
      const auto& [rs, ts] = *pairs;
      Tensor<T>& out = g.output(self);
      if (out.shape() != Shape{rs.size()}) out = Tensor<T>({rs.size()});
      lse->assign(rs.size(), T(0));
      for (std::size_t i = 0; i < rs.size(); ++i) {
        (*lse)[i] = detail::log_sum_exp(x.row(rs[i]));
        out[i] = x.at(rs[i], ts[i]) - (*lse)[i];
      }
    };
    auto bwd = [pairs, lse](Graph& g, std::size_t self) {
      const std::size_t ix = g.inputs(self)[0];
      const auto& x = g.value_of(ix);
      const auto& [rs, ts] = *pairs;
      auto up = g.upstream(self);
      auto d = g.grad_buffer(ix);
      const std::size_t width = x.cols();
      for (std::size_t i = 0; i < rs.size(); ++i) {
        const T* row = x.data().data() + rs[i] * width;
        T* drow = d.data() + rs[i] * width;
        for (std::size_t c = 0; c < width; ++c) drow[c] -= up[i] * std::exp(row[c] - (*lse)[i]);
        drow[ts[i]] += up[i];
      }
    };
    return push_op(OpKind::TokenLogProbs, {logits}, std::move(fwd), std::move(bwd));
  }

  /// Sums consecutive runs of a vector; run lengths given by `lengths`.
  Var segment_sum(Var x, std::vector<std::size_t> lengths) {
    std::size_t total = 0;
    for (std::size_t len : lengths) {
      require(len > 0, ErrorKind::ShapeMismatch, "segment_sum with an empty segment");
      total += len;
    }
    require(total == value(x).size(), ErrorKind::ShapeMismatch, "segment_sum lengths do not cover input");
    auto lens = std::make_shared<const std::vector<std::size_t>>(std::move(lengths));
    auto fwd = [lens](Graph& g, std::size_t self) {
      const auto& in = g.value_of(g.inputs(self)[0]);
      Tensor<T>& out = g.output(self);
      if (out.shape() != Shape{lens->size()}) out = Tensor<T>({lens->size()});
      std::size_t pos = 0;
      for (std::size_t s = 0; s < lens->size(); ++s) {
        T total = 0;
        for (std::size_t i = 0; i < (*lens)[s]; ++i) total += in[pos++];
        out[s] = total;
      }
    };
    auto bwd = [lens](Graph& g, std::size_t self) {
      auto up = g.upstream(self);
      auto d = g.grad_buffer(g.inputs(self)[0]);
      std::size_t pos = 0;
      for (std::size_t s = 0; s < lens->size(); ++s) {
        for (std::size_t i = 0; i < (*lens)[s]; ++i) d[pos++] += up[s];
      }
    };
    return push_op(OpKind::SegmentSum, {x}, std::move(fwd), std::move(bwd));
  }

  /// Elementwise log(sigmoid(x)), evaluated without overflow.
  Var log_sigmoid(Var a) {
    auto fwd = [](Graph& g, std::size_t self) {
      const auto& x = g.value_of(g.inputs(self)[0]);
      Tensor<T>& out = g.output(self);
      if (out.shape() != x.shape()) out = Tensor<T>(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = detail::stable_log_sigmoid(x[i]);
    };
    auto bwd = [](Graph& g, std::size_t self) {
      const std::size_t ia = g.inputs(self)[0];
      const auto& x = g.value_of(ia);
      auto up = g.upstream(self);
      auto d = g.grad_buffer(ia);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += up[i] * detail::sigmoid(-x[i]);
    };
    return push_op(OpKind::LogSigmoid, {a}, std::move(fwd), std::move(bwd));
  }

  /// Mean over `rows` of KL(reference || softmax(logits[row])). The reference
  /// distribution is given as log-probabilities, one row per entry of `rows`,
  /// and is treated as a constant.
  Var kl_divergence(Var logits, Var reference_log_probs, std::vector<std::size_t> rows) {
    const auto& lv = value(logits);
    const auto& rv = value(reference_log_probs);
    require(lv.rank() == 2 && rv.rank() == 2 && rv.shape()[0] == rows.size() && rv.shape()[1] == lv.shape()[1],
            ErrorKind::ShapeMismatch,
            "kl_divergence logits " + shape_string(lv.shape()) + " reference " + shape_string(rv.shape()));
    require(!rows.empty(), ErrorKind::ShapeMismatch, "kl_divergence over zero rows");
    for (std::size_t r : rows) require(r < lv.shape()[0], ErrorKind::ShapeMismatch, "kl_divergence row out of range");
    auto rs = std::make_shared<const std::vector<std::size_t>>(std::move(rows));
    auto lse = std::make_shared<std::vector<T>>();
    auto fwd = [rs, lse](Graph& g, std::size_t self) {
      const auto& x = g.value_of(g.inputs(self)[0]);
      const auto& ref = g.value_of(g.inputs(self)[1]);
      const std::size_t width = x.cols();
      lse->assign(rs->size(), T(0));
      T total = 0;
      for (std::size_t i = 0; i < rs->size(); ++i) {
        (*lse)[i] = detail::log_sum_exp(x.row((*rs)[i]));
        for (std::size_t c = 0; c < width; ++c) {
          const T lp = ref.at(i, c);
          total += std::exp(lp) * (lp - (x.at((*rs)[i], c) - (*lse)[i]));
        }
      }
      g.output(self) = Tensor<T>::scalar(total / T(rs->size()));
    };
    auto bwd = [rs, lse](Graph& g, std::size_t self) {
      const std::size_t ix = g.inputs(self)[0];
      const auto& x = g.value_of(ix);
      const auto& ref = g.value_of(g.inputs(self)[1]);
      const T up = g.upstream(self)[0] / T(rs->size());
      auto d = g.grad_buffer(ix);
      const std::size_t width = x.cols();
      for (std::size_t i = 0; i < rs->size(); ++i) {
        const std::size_t r = (*rs)[i];
        for (std::size_t c = 0; c < width; ++c) {
          d[r * width + c] += up * (std::exp(x.at(r, c) - (*lse)[i]) - std::exp(ref.at(i, c)));
        }
      }
    };
    return push_op(OpKind::KlDivergence, {logits, reference_log_probs}, std::move(fwd), std::move(bwd),
                   /*grad_inputs=*/{true, false});
  }

  /// Mean of squared differences over all elements.
  Var mse(Var a, Var b) {
    same_shape(a, b, "mse");
    auto fwd = [](Graph& g, std::size_t self) {
      const auto& x = g.value_of(g.inputs(self)[0]);
      const auto& y = g.value_of(g.inputs(self)[1]);
      T total = 0;
      for (std::size_t i = 0; i < x.size(); ++i) total += (x[i] - y[i]) * (x[i] - y[i]);
      g.output(self) = Tensor<T>::scalar(total / T(x.size()));
    };
    auto bwd = [](Graph& g, std::size_t self) {
      const std::size_t ia = g.inputs(self)[0], ib = g.inputs(self)[1];
      const auto& x = g.value_of(ia);
      const auto& y = g.value_of(ib);
      const T up = g.upstream(self)[0] * T(2) / T(x.size());
      if (g.needs_grad(ia)) {
        auto d = g.grad_buffer(ia);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += up * (x[i] - y[i]);
      }
      if (g.needs_grad(ib)) {
        auto d = g.grad_buffer(ib);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] -= up * (x[i] - y[i]);
      }
    };
    return push_op(OpKind::Mse, {a, b}, std::move(fwd), std::move(bwd));
  }

  Var sum(Var a) { return reduce(OpKind::Sum, a, false); }
  Var mean(Var a) { return reduce(OpKind::Mean, a, true); }

  /// User-supplied primitive. `forward` must write the node's output via
  /// g.output(self); `backward` must add into g.grad_buffer(input).
  Var custom(std::vector<Var> operands, ForwardFn forward, BackwardFn backward) {
    return push_op(OpKind::Custom, std::move(operands), std::move(forward), std::move(backward));
  }

 private:
  struct Node {
    OpKind kind = OpKind::Constant;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    const Tensor<T>* source = nullptr;
    Tensor<T>* sink = nullptr;
    std::vector<T> grad;
    bool needs_grad = false;
    ForwardFn forward;
    BackwardFn backward;
  };

  const Node& node(Var v) const {
    check(v);
    return nodes_[v.id];
  }

  void check(Var v) const {
    require(v.valid() && v.id < nodes_.size(), ErrorKind::InvalidArgument, "variable does not belong to graph");
  }

  void same_shape(Var a, Var b, const char* what) const {
    require(value(a).shape() == value(b).shape(), ErrorKind::ShapeMismatch,
            std::string(what) + " " + shape_string(value(a).shape()) + " vs " + shape_string(value(b).shape()));
  }

  void check_row_targets(Var logits, const std::vector<std::size_t>& rows, const std::vector<std::size_t>& targets,
                         const char* what) const {
    const auto& lv = value(logits);
    require(lv.rank() == 2, ErrorKind::ShapeMismatch, std::string(what) + " needs rank-2 logits");
    require(!rows.empty() && rows.size() == targets.size(), ErrorKind::ShapeMismatch,
            std::string(what) + " rows/targets mismatch");
    for (std::size_t i = 0; i < rows.size(); ++i) {
      require(rows[i] < lv.shape()[0], ErrorKind::ShapeMismatch, std::string(what) + " row out of range");
      require(targets[i] < lv.shape()[1], ErrorKind::TokenOutOfRange, std::string(what) + " target out of range");
    }
  }

  Var linear_combination(OpKind kind, Var a, Var b, T sign) {
    same_shape(a, b, op_name(kind));
    auto fwd = [sign](Graph& g, std::size_t self) {
      const auto& x = g.value_of(g.inputs(self)[0]);
      const auto& y = g.value_of(g.inputs(self)[1]);
      Tensor<T>& out = g.output(self);
      if (out.shape() != x.shape()) out = Tensor<T>(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + sign * y[i];
    };
    auto bwd = [sign](Graph& g, std::size_t self) {
      const std::size_t ia = g.inputs(self)[0], ib = g.inputs(self)[1];
      auto up = g.upstream(self);
      if (g.needs_grad(ia)) {
        auto d = g.grad_buffer(ia);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += up[i];
      }
      if (g.needs_grad(ib)) {
        auto d = g.grad_buffer(ib);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += sign * up[i];
      }
    };
    return push_op(kind, {a, b}, std::move(fwd), std::move(bwd));
  }

  Var reduce(OpKind kind, Var a, bool average) {
    auto fwd = [average](Graph& g, std::size_t self) {
      const auto& x = g.value_of(g.inputs(self)[0]);
      T total = 0;
      for (T v : x.data()) total += v;
      g.output(self) = Tensor<T>::scalar(average ? total / T(x.size()) : total);
    };
    auto bwd = [average](Graph& g, std::size_t self) {
      const std::size_t ia = g.inputs(self)[0];
      auto d = g.grad_buffer(ia);
      const T up = average ? g.upstream(self)[0] / T(d.size()) : g.upstream(self)[0];
      for (T& v : d) v += up;
    };
    return push_op(kind, {a}, std::move(fwd), std::move(bwd));
  }

  Var push_op(OpKind kind, std::vector<Var> operands, ForwardFn forward, BackwardFn backward,
              std::vector<bool> grad_inputs = {}) {
    Node n;
    n.kind = kind;
    for (std::size_t i = 0; i < operands.size(); ++i) {
      check(operands[i]);
      n.inputs.push_back(operands[i].id);
      const bool may_flow = grad_inputs.empty() || grad_inputs[i];
      if (may_flow && nodes_[operands[i].id].needs_grad) n.needs_grad = true;
    }
    n.forward = std::move(forward);
    n.backward = std::move(backward);
    return push(std::move(n), true);
  }

  Var push(Node n, bool compute) {
    nodes_.push_back(std::move(n));
    const std::size_t id = nodes_.size() - 1;
    if (compute) run_forward(id);
    return Var{id};
  }

  void run_forward(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.forward) return;
    n.forward(*this, id);
    require(nodes_[id].value.all_finite(), ErrorKind::NonFinite,
            std::string("non-finite output from ") + op_name(nodes_[id].kind));
  }

  std::vector<Node> nodes_;
};

}  // namespace udissect

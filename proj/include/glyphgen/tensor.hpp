#pragma once

// Reverse-mode autodiff over dense row-major float arrays. Templated on the
// scalar type so gradient checks can run the identical code in double
// precision (the 64-bit check mode).
//
// Tensors are immutable value types holding shared const storage. Ops are
// free functions; when an input carries a tape node the result is recorded
// on that tape with a backward rule. Tensors must not outlive the tape they
// were recorded on.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace glyphgen {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

[[noreturn]] inline void shape_error(const std::string& msg) {
  throw std::invalid_argument(msg);
}

template <class S>
class TapeT;

template <class S>
class TensorT {
 public:
  using Storage = std::shared_ptr<const std::vector<S>>;

  TensorT() : shape_{0}, values_(std::make_shared<const std::vector<S>>()) {}

  TensorT(Shape shape, std::vector<S> values)
      : shape_(std::move(shape)),
        values_(std::make_shared<const std::vector<S>>(std::move(values))) {
    check_shape();
  }

  TensorT(Shape shape, Storage values, TapeT<S>* tape, int node)
      : shape_(std::move(shape)), values_(std::move(values)), tape_(tape), node_(node) {
    check_shape();
  }

  static TensorT zeros(Shape shape) {
    auto n = numel(shape);
    return TensorT(std::move(shape), std::vector<S>(static_cast<std::size_t>(n), S(0)));
  }

  static TensorT full(Shape shape, S v) {
    auto n = numel(shape);
    return TensorT(std::move(shape), std::vector<S>(static_cast<std::size_t>(n), v));
  }

  static TensorT ones(Shape shape) { return full(std::move(shape), S(1)); }

  static TensorT scalar(S v) { return TensorT(Shape{1}, std::vector<S>{v}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(values_->size()); }

  const std::vector<S>& values() const { return *values_; }
  const Storage& storage() const { return values_; }
  S operator[](std::int64_t i) const { return (*values_)[static_cast<std::size_t>(i)]; }

  // Scalar convenience; requires size() == 1.
  S value() const {
    if (size() != 1) shape_error("value(): tensor " + shape_str(shape_) + " is not a scalar");
    return (*values_)[0];
  }

  TapeT<S>* tape() const { return tape_; }
  int node() const { return node_; }
  bool on_tape() const { return tape_ != nullptr && node_ >= 0; }

  // Same values, no tape linkage.
  TensorT detach() const { return TensorT(shape_, values_, nullptr, -1); }

 private:
  void check_shape() {
    for (int d : shape_) {
      if (d <= 0) shape_error("tensor shape " + shape_str(shape_) + " has a non-positive dim");
    }
    if (numel(shape_) != static_cast<std::int64_t>(values_->size())) {
      shape_error("tensor shape " + shape_str(shape_) + " does not match value count " +
                  std::to_string(values_->size()));
    }
  }

  Shape shape_;
  Storage values_;
  TapeT<S>* tape_ = nullptr;
  int node_ = -1;
};

// Records one node per op output. Node ids are topologically ordered by
// construction (inputs always recorded before outputs), so backward is a
// single reverse sweep. Gradient buffers are allocated lazily: nodes that do
// not influence the requested scalar never get one.
template <class S>
class TapeT {
 public:
  using Grad = std::vector<S>;
  using BackwardFn = std::function<void(TapeT&, const Grad&)>;

  // Register a constant tensor as a tracked leaf. Calls with the same
  // underlying storage return the same node, so a parameter used at two
  // graph sites accumulates both gradient contributions.
  TensorT<S> leaf(const TensorT<S>& t) {
    if (t.tape() == this && t.node() >= 0) return t;
    if (t.tape() != nullptr && t.tape() != this) {
      throw std::logic_error("leaf: tensor already belongs to another tape");
    }
    const void* key = t.storage().get();
    auto it = leaf_memo_.find(key);
    if (it != leaf_memo_.end()) {
      return TensorT<S>(t.shape(), t.storage(), this, it->second);
    }
    int id = add_node({}, nullptr, t.size());
    leaf_memo_.emplace(key, id);
    return TensorT<S>(t.shape(), t.storage(), this, id);
  }

  // Node id of a previously registered leaf with the same storage, or -1.
  int leaf_id(const TensorT<S>& t) const {
    auto it = leaf_memo_.find(t.storage().get());
    return it == leaf_memo_.end() ? -1 : it->second;
  }

  // Record an op result. `parents` may contain -1 entries (constant inputs).
  TensorT<S> record(Shape shape, std::vector<S> values, std::vector<int> parents,
                    BackwardFn fn) {
    auto storage = std::make_shared<const std::vector<S>>(std::move(values));
    std::int64_t n = static_cast<std::int64_t>(storage->size());
    int id = add_node(std::move(parents), std::move(fn), n);
    return TensorT<S>(std::move(shape), storage, this, id);
  }

  std::size_t node_count() const { return nodes_.size(); }

  // Populate gradients of everything the scalar depends on. One reverse pass.
  void backward(const TensorT<S>& out) {
    if (out.size() != 1) {
      throw std::invalid_argument("backward: output has " + std::to_string(out.size()) +
                                  " elements, expected a scalar");
    }
    if (out.tape() != this || out.node() < 0) {
      throw std::invalid_argument("backward: scalar does not belong to this tape");
    }
    grads_.assign(nodes_.size(), Grad{});
    grad_buffer(out.node(), 1)[0] = S(1);
    for (int id = out.node(); id >= 0; --id) {
      auto& node = nodes_[static_cast<std::size_t>(id)];
      if (!node.backward || grads_[static_cast<std::size_t>(id)].empty()) continue;
      node.backward(*this, grads_[static_cast<std::size_t>(id)]);
    }
  }

  bool has_grad(int node) const {
    return node >= 0 && node < static_cast<int>(grads_.size()) &&
           !grads_[static_cast<std::size_t>(node)].empty();
  }

  // Gradient of a tensor recorded on this tape (or registered via leaf()).
  // Zeros if the tensor did not influence the differentiated scalar.
  Grad grad(const TensorT<S>& t) const {
    int id = (t.tape() == this && t.node() >= 0) ? t.node() : leaf_id(t);
    if (id < 0) throw std::invalid_argument("grad: tensor is not on this tape");
    if (has_grad(id)) return grads_[static_cast<std::size_t>(id)];
    return Grad(static_cast<std::size_t>(t.size()), S(0));
  }

  const Grad* grad_by_id(int node) const {
    if (!has_grad(node)) return nullptr;
    return &grads_[static_cast<std::size_t>(node)];
  }

  // Zeroed gradient buffer for a node, created on first use.
  Grad& grad_buffer(int node, std::int64_t size) {
    auto& g = grads_[static_cast<std::size_t>(node)];
    if (g.empty()) g.assign(static_cast<std::size_t>(size), S(0));
    return g;
  }

 private:
  struct Node {
    std::vector<int> parents;
    BackwardFn backward;
    std::int64_t size;
  };

  int add_node(std::vector<int> parents, BackwardFn fn, std::int64_t size) {
    nodes_.push_back(Node{std::move(parents), std::move(fn), size});
    grads_.emplace_back();
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
  std::vector<Grad> grads_;
  std::unordered_map<const void*, int> leaf_memo_;
};

namespace detail {

// C[M,N] += A[M,K] * B[K,N]
template <class S>
void gemm_nn(int m, int k, int n, const S* a, const S* b, S* c) {
  for (int i = 0; i < m; ++i) {
    S* crow = c + static_cast<std::size_t>(i) * n;
    const S* arow = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const S aik = arow[p];
      const S* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <class S>
void gemm_nt(int m, int k, int n, const S* a, const S* b, S* c) {
  for (int i = 0; i < m; ++i) {
    const S* arow = a + static_cast<std::size_t>(i) * k;
    S* crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const S* brow = b + static_cast<std::size_t>(j) * k;
      S acc = S(0);
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <class S>
void gemm_tn(int m, int k, int n, const S* a, const S* b, S* c) {
  for (int p = 0; p < k; ++p) {
    const S* arow = a + static_cast<std::size_t>(p) * m;
    const S* brow = b + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const S aki = arow[i];
      S* crow = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += aki * brow[j];
    }
  }
}

// img [C,IH,IW] -> col [C*kh*kw, GH*GW]; window origin (g*stride - pad).
template <class S>
void im2col(const S* img, int c_ch, int ih, int iw, int kh, int kw, int stride, int pad,
            int gh, int gw, S* col) {
  const int p = gh * gw;
  for (int c = 0; c < c_ch; ++c) {
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        S* row = col + (static_cast<std::size_t>(c) * kh * kw + static_cast<std::size_t>(i) * kw + j) * p;
        for (int y = 0; y < gh; ++y) {
          const int sy = y * stride - pad + i;
          if (sy < 0 || sy >= ih) {
            for (int x = 0; x < gw; ++x) row[y * gw + x] = S(0);
            continue;
          }
          const S* src = img + (static_cast<std::size_t>(c) * ih + sy) * iw;
          for (int x = 0; x < gw; ++x) {
            const int sx = x * stride - pad + j;
            row[y * gw + x] = (sx >= 0 && sx < iw) ? src[sx] : S(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add col back into img.
template <class S>
void col2im_add(const S* col, int c_ch, int ih, int iw, int kh, int kw, int stride, int pad,
                int gh, int gw, S* img) {
  const int p = gh * gw;
  for (int c = 0; c < c_ch; ++c) {
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        const S* row = col + (static_cast<std::size_t>(c) * kh * kw + static_cast<std::size_t>(i) * kw + j) * p;
        for (int y = 0; y < gh; ++y) {
          const int sy = y * stride - pad + i;
          if (sy < 0 || sy >= ih) continue;
          S* dst = img + (static_cast<std::size_t>(c) * ih + sy) * iw;
          for (int x = 0; x < gw; ++x) {
            const int sx = x * stride - pad + j;
            if (sx >= 0 && sx < iw) dst[sx] += row[y * gw + x];
          }
        }
      }
    }
  }
}

struct BroadcastPlan {
  Shape out;
  std::vector<std::int64_t> stride_a;  // per out dim; 0 where broadcast
  std::vector<std::int64_t> stride_b;
};

inline BroadcastPlan broadcast_plan(const Shape& a, const Shape& b, const char* opname) {
  const int rank = std::max(static_cast<int>(a.size()), static_cast<int>(b.size()));
  BroadcastPlan plan;
  plan.out.resize(static_cast<std::size_t>(rank));
  Shape pa(static_cast<std::size_t>(rank), 1), pb(static_cast<std::size_t>(rank), 1);
  std::copy(a.begin(), a.end(), pa.end() - static_cast<std::ptrdiff_t>(a.size()));
  std::copy(b.begin(), b.end(), pb.end() - static_cast<std::ptrdiff_t>(b.size()));
  for (int d = 0; d < rank; ++d) {
    const int da = pa[static_cast<std::size_t>(d)];
    const int db = pb[static_cast<std::size_t>(d)];
    if (da != db && da != 1 && db != 1) {
      shape_error(std::string(opname) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                  " not broadcastable");
    }
    plan.out[static_cast<std::size_t>(d)] = std::max(da, db);
  }
  plan.stride_a.assign(static_cast<std::size_t>(rank), 0);
  plan.stride_b.assign(static_cast<std::size_t>(rank), 0);
  std::int64_t sa = 1, sb = 1;
  for (int d = rank - 1; d >= 0; --d) {
    if (pa[static_cast<std::size_t>(d)] != 1) {
      plan.stride_a[static_cast<std::size_t>(d)] = sa;
    }
    if (pb[static_cast<std::size_t>(d)] != 1) {
      plan.stride_b[static_cast<std::size_t>(d)] = sb;
    }
    sa *= pa[static_cast<std::size_t>(d)];
    sb *= pb[static_cast<std::size_t>(d)];
  }
  return plan;
}

// Walk the broadcast output space calling fn(out_flat, a_flat, b_flat).
template <class Fn>
void broadcast_walk(const BroadcastPlan& plan, Fn&& fn) {
  const int rank = static_cast<int>(plan.out.size());
  const std::int64_t n = numel(plan.out);
  std::vector<int> idx(static_cast<std::size_t>(rank), 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t o = 0; o < n; ++o) {
    fn(o, ia, ib);
    for (int d = rank - 1; d >= 0; --d) {
      ++idx[static_cast<std::size_t>(d)];
      ia += plan.stride_a[static_cast<std::size_t>(d)];
      ib += plan.stride_b[static_cast<std::size_t>(d)];
      if (idx[static_cast<std::size_t>(d)] < plan.out[static_cast<std::size_t>(d)]) break;
      idx[static_cast<std::size_t>(d)] = 0;
      ia -= plan.stride_a[static_cast<std::size_t>(d)] * plan.out[static_cast<std::size_t>(d)];
      ib -= plan.stride_b[static_cast<std::size_t>(d)] * plan.out[static_cast<std::size_t>(d)];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

enum class UnaryOp { Relu, LeakyRelu, Tanh, Sigmoid, Exp, Log, Neg, Sqrt, Clamp };

// a/b carry the op's extra scalars: LeakyRelu slope in a, Clamp bounds in (a, b).
template <class S>
TensorT<S> apply_unary(const TensorT<S>& x, UnaryOp op, double a = 0.0, double b = 0.0) {
  const auto& xv = x.values();
  const std::size_t n = xv.size();
  std::vector<S> y(n);
  std::vector<S> dydx(n);
  switch (op) {
    case UnaryOp::Relu:
      for (std::size_t i = 0; i < n; ++i) {
        y[i] = xv[i] > S(0) ? xv[i] : S(0);
        dydx[i] = xv[i] > S(0) ? S(1) : S(0);
      }
      break;
    case UnaryOp::LeakyRelu: {
      const S slope = static_cast<S>(a);
      for (std::size_t i = 0; i < n; ++i) {
        y[i] = xv[i] > S(0) ? xv[i] : slope * xv[i];
        dydx[i] = xv[i] > S(0) ? S(1) : slope;
      }
      break;
    }
    case UnaryOp::Tanh:
      for (std::size_t i = 0; i < n; ++i) {
        y[i] = std::tanh(xv[i]);
        dydx[i] = S(1) - y[i] * y[i];
      }
      break;
    case UnaryOp::Sigmoid:
      for (std::size_t i = 0; i < n; ++i) {
        // Stable in both tails.
        if (xv[i] >= S(0)) {
          const S e = std::exp(-xv[i]);
          y[i] = S(1) / (S(1) + e);
        } else {
          const S e = std::exp(xv[i]);
          y[i] = e / (S(1) + e);
        }
        dydx[i] = y[i] * (S(1) - y[i]);
      }
      break;
    case UnaryOp::Exp:
      for (std::size_t i = 0; i < n; ++i) {
        y[i] = std::exp(xv[i]);
        dydx[i] = y[i];
      }
      break;
    case UnaryOp::Log:
      for (std::size_t i = 0; i < n; ++i) {
        if (!(xv[i] > S(0))) {
          throw std::domain_error("log: non-positive value at index " + std::to_string(i));
        }
        y[i] = std::log(xv[i]);
        dydx[i] = S(1) / xv[i];
      }
      break;
    case UnaryOp::Neg:
      for (std::size_t i = 0; i < n; ++i) {
        y[i] = -xv[i];
        dydx[i] = S(-1);
      }
      break;
    case UnaryOp::Sqrt:
      for (std::size_t i = 0; i < n; ++i) {
        if (!(xv[i] >= S(0))) {
          throw std::domain_error("sqrt: negative value at index " + std::to_string(i));
        }
        y[i] = std::sqrt(xv[i]);
        dydx[i] = y[i] > S(0) ? S(1) / (S(2) * y[i]) : S(0);
      }
      break;
    case UnaryOp::Clamp: {
      const S lo = static_cast<S>(a), hi = static_cast<S>(b);
      for (std::size_t i = 0; i < n; ++i) {
        y[i] = std::min(std::max(xv[i], lo), hi);
        dydx[i] = (xv[i] >= lo && xv[i] <= hi) ? S(1) : S(0);
      }
      break;
    }
  }
  if (!x.on_tape()) return TensorT<S>(x.shape(), std::move(y));
  auto deriv = std::make_shared<std::vector<S>>(std::move(dydx));
  const int parent = x.node();
  return x.tape()->record(
      x.shape(), std::move(y), {parent},
      [parent, deriv, n](TapeT<S>& tape, const typename TapeT<S>::Grad& gout) {
        auto& gin = tape.grad_buffer(parent, static_cast<std::int64_t>(n));
        for (std::size_t i = 0; i < n; ++i) gin[i] += gout[i] * (*deriv)[i];
      });
}

template <class S> TensorT<S> relu(const TensorT<S>& x) { return apply_unary(x, UnaryOp::Relu); }
template <class S> TensorT<S> leaky_relu(const TensorT<S>& x, double slope) {
  return apply_unary(x, UnaryOp::LeakyRelu, slope);
}
template <class S> TensorT<S> tanh(const TensorT<S>& x) { return apply_unary(x, UnaryOp::Tanh); }
template <class S> TensorT<S> sigmoid(const TensorT<S>& x) { return apply_unary(x, UnaryOp::Sigmoid); }
template <class S> TensorT<S> exp(const TensorT<S>& x) { return apply_unary(x, UnaryOp::Exp); }
template <class S> TensorT<S> log(const TensorT<S>& x) { return apply_unary(x, UnaryOp::Log); }
template <class S> TensorT<S> neg(const TensorT<S>& x) { return apply_unary(x, UnaryOp::Neg); }
template <class S> TensorT<S> sqrt(const TensorT<S>& x) { return apply_unary(x, UnaryOp::Sqrt); }
template <class S> TensorT<S> clamp(const TensorT<S>& x, double lo, double hi) {
  return apply_unary(x, UnaryOp::Clamp, lo, hi);
}

// ---------------------------------------------------------------------------
// Elementwise binary ops with numpy-style broadcasting
// ---------------------------------------------------------------------------

enum class BinaryOp { Add, Sub, Mul, Div };

template <class S>
TensorT<S> apply_binary(const TensorT<S>& a, const TensorT<S>& b, BinaryOp op) {
  const char* names[] = {"add", "sub", "mul", "div"};
  const char* opname = names[static_cast<int>(op)];
  auto plan = detail::broadcast_plan(a.shape(), b.shape(), opname);
  const std::int64_t n = numel(plan.out);
  std::vector<S> y(static_cast<std::size_t>(n));
  const auto& av = a.values();
  const auto& bv = b.values();

  const bool same = a.shape() == b.shape();
  if (same) {
    switch (op) {
      case BinaryOp::Add: for (std::int64_t i = 0; i < n; ++i) y[i] = av[i] + bv[i]; break;
      case BinaryOp::Sub: for (std::int64_t i = 0; i < n; ++i) y[i] = av[i] - bv[i]; break;
      case BinaryOp::Mul: for (std::int64_t i = 0; i < n; ++i) y[i] = av[i] * bv[i]; break;
      case BinaryOp::Div: for (std::int64_t i = 0; i < n; ++i) y[i] = av[i] / bv[i]; break;
    }
  } else {
    detail::broadcast_walk(plan, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
      switch (op) {
        case BinaryOp::Add: y[o] = av[ia] + bv[ib]; break;
        case BinaryOp::Sub: y[o] = av[ia] - bv[ib]; break;
        case BinaryOp::Mul: y[o] = av[ia] * bv[ib]; break;
        case BinaryOp::Div: y[o] = av[ia] / bv[ib]; break;
      }
    });
  }

  TapeT<S>* tape = a.on_tape() ? a.tape() : (b.on_tape() ? b.tape() : nullptr);
  if (!tape) return TensorT<S>(plan.out, std::move(y));
  if (a.on_tape() && b.on_tape() && a.tape() != b.tape()) {
    throw std::logic_error(std::string(opname) + ": operands belong to different tapes");
  }

  const int pa = a.on_tape() ? a.node() : -1;
  const int pb = b.on_tape() ? b.node() : -1;
  auto astore = a.storage();
  auto bstore = b.storage();
  const std::int64_t na = a.size(), nb = b.size();
  Shape out_shape = plan.out;
  return tape->record(
      out_shape, std::move(y), {pa, pb},
      [plan, pa, pb, astore, bstore, na, nb, op](TapeT<S>& tape_ref,
                                                 const typename TapeT<S>::Grad& gout) {
        typename TapeT<S>::Grad* ga = pa >= 0 ? &tape_ref.grad_buffer(pa, na) : nullptr;
        typename TapeT<S>::Grad* gb = pb >= 0 ? &tape_ref.grad_buffer(pb, nb) : nullptr;
        const auto& av2 = *astore;
        const auto& bv2 = *bstore;
        detail::broadcast_walk(plan, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
          const S g = gout[static_cast<std::size_t>(o)];
          switch (op) {
            case BinaryOp::Add:
              if (ga) (*ga)[ia] += g;
              if (gb) (*gb)[ib] += g;
              break;
            case BinaryOp::Sub:
              if (ga) (*ga)[ia] += g;
              if (gb) (*gb)[ib] -= g;
              break;
            case BinaryOp::Mul:
              if (ga) (*ga)[ia] += g * bv2[ib];
              if (gb) (*gb)[ib] += g * av2[ia];
              break;
            case BinaryOp::Div:
              if (ga) (*ga)[ia] += g / bv2[ib];
              if (gb) (*gb)[ib] -= g * av2[ia] / (bv2[ib] * bv2[ib]);
              break;
          }
        });
      });
}

template <class S> TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) { return apply_binary(a, b, BinaryOp::Add); }
template <class S> TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) { return apply_binary(a, b, BinaryOp::Sub); }
template <class S> TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) { return apply_binary(a, b, BinaryOp::Mul); }
template <class S> TensorT<S> div(const TensorT<S>& a, const TensorT<S>& b) { return apply_binary(a, b, BinaryOp::Div); }

template <class S> TensorT<S> operator+(const TensorT<S>& a, const TensorT<S>& b) { return add(a, b); }
template <class S> TensorT<S> operator-(const TensorT<S>& a, const TensorT<S>& b) { return sub(a, b); }
template <class S> TensorT<S> operator*(const TensorT<S>& a, const TensorT<S>& b) { return mul(a, b); }
template <class S> TensorT<S> operator/(const TensorT<S>& a, const TensorT<S>& b) { return div(a, b); }

template <class S> TensorT<S> operator+(const TensorT<S>& a, double s) { return add(a, TensorT<S>::scalar(static_cast<S>(s))); }
template <class S> TensorT<S> operator-(const TensorT<S>& a, double s) { return sub(a, TensorT<S>::scalar(static_cast<S>(s))); }
template <class S> TensorT<S> operator*(const TensorT<S>& a, double s) { return mul(a, TensorT<S>::scalar(static_cast<S>(s))); }
template <class S> TensorT<S> operator/(const TensorT<S>& a, double s) { return div(a, TensorT<S>::scalar(static_cast<S>(s))); }
template <class S> TensorT<S> operator+(double s, const TensorT<S>& a) { return add(TensorT<S>::scalar(static_cast<S>(s)), a); }
template <class S> TensorT<S> operator-(double s, const TensorT<S>& a) { return sub(TensorT<S>::scalar(static_cast<S>(s)), a); }
template <class S> TensorT<S> operator*(double s, const TensorT<S>& a) { return mul(TensorT<S>::scalar(static_cast<S>(s)), a); }

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> reshape(const TensorT<S>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    shape_error("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  if (!x.on_tape()) return TensorT<S>(std::move(shape), x.storage(), nullptr, -1);
  const int parent = x.node();
  const std::int64_t n = x.size();
  return x.tape()->record(std::move(shape), std::vector<S>(x.values()), {parent},
                          [parent, n](TapeT<S>& tape, const typename TapeT<S>::Grad& gout) {
                            auto& gin = tape.grad_buffer(parent, n);
                            for (std::int64_t i = 0; i < n; ++i) gin[i] += gout[i];
                          });
}

// Contiguous range along one axis.
template <class S>
TensorT<S> slice(const TensorT<S>& x, int axis, int start, int len) {
  const auto& shape = x.shape();
  if (axis < 0 || axis >= x.rank()) shape_error("slice: axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  if (start < 0 || len <= 0 || start + len > shape[static_cast<std::size_t>(axis)]) {
    shape_error("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                ") invalid for axis " + std::to_string(axis) + " of " + shape_str(shape));
  }
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= shape[static_cast<std::size_t>(d)];
  for (int d = axis + 1; d < x.rank(); ++d) inner *= shape[static_cast<std::size_t>(d)];
  const std::int64_t ax = shape[static_cast<std::size_t>(axis)];

  Shape out_shape = shape;
  out_shape[static_cast<std::size_t>(axis)] = len;
  std::vector<S> y(static_cast<std::size_t>(outer * len * inner));
  const auto& xv = x.values();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t a = 0; a < len; ++a) {
      const S* src = xv.data() + ((o * ax) + start + a) * inner;
      S* dst = y.data() + ((o * len) + a) * inner;
      std::copy(src, src + inner, dst);
    }
  }
  if (!x.on_tape()) return TensorT<S>(std::move(out_shape), std::move(y));
  const int parent = x.node();
  const std::int64_t nx = x.size();
  return x.tape()->record(
      std::move(out_shape), std::move(y), {parent},
      [parent, nx, outer, inner, len, ax, start](TapeT<S>& tape,
                                                 const typename TapeT<S>::Grad& gout) {
        auto& gin = tape.grad_buffer(parent, nx);
        for (std::int64_t o = 0; o < outer; ++o) {
          for (std::int64_t a = 0; a < len; ++a) {
            const S* src = gout.data() + ((o * len) + a) * inner;
            S* dst = gin.data() + ((o * ax) + start + a) * inner;
            for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Matrix multiply
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    shape_error("matmul: expected rank-2 operands, got " + shape_str(a.shape()) + " and " +
                shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) {
    shape_error("matmul: inner dimensions differ, " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
  }
  std::vector<S> y(static_cast<std::size_t>(m) * n, S(0));
  detail::gemm_nn(m, k, n, a.values().data(), b.values().data(), y.data());

  TapeT<S>* tape = a.on_tape() ? a.tape() : (b.on_tape() ? b.tape() : nullptr);
  if (!tape) return TensorT<S>({m, n}, std::move(y));
  const int pa = a.on_tape() ? a.node() : -1;
  const int pb = b.on_tape() ? b.node() : -1;
  auto astore = a.storage();
  auto bstore = b.storage();
  return tape->record(
      {m, n}, std::move(y), {pa, pb},
      [pa, pb, astore, bstore, m, k, n](TapeT<S>& tape_ref,
                                        const typename TapeT<S>::Grad& gout) {
        if (pa >= 0) {
          auto& ga = tape_ref.grad_buffer(pa, static_cast<std::int64_t>(m) * k);
          detail::gemm_nt(m, n, k, gout.data(), bstore->data(), ga.data());
        }
        if (pb >= 0) {
          auto& gb = tape_ref.grad_buffer(pb, static_cast<std::int64_t>(k) * n);
          detail::gemm_tn(k, m, n, astore->data(), gout.data(), gb.data());
        }
      });
}

// ---------------------------------------------------------------------------
// Convolutions (cross-correlation convention, zero padding)
// ---------------------------------------------------------------------------

namespace detail {
struct ConvDims {
  int n, c, h, w;       // input
  int f, kh, kw;        // kernel
  int stride, pad;
  int oh, ow;
};
}  // namespace detail

// input [N,C,H,W], kernel [F,C,kh,kw], bias [F] -> [N,F,H',W']
template <class S>
TensorT<S> conv2d(const TensorT<S>& input, const TensorT<S>& kernel, const TensorT<S>& bias,
                  int stride, int pad) {
  if (input.rank() != 4 || kernel.rank() != 4) {
    shape_error("conv2d: expected rank-4 input and kernel, got " + shape_str(input.shape()) +
                " and " + shape_str(kernel.shape()));
  }
  if (stride < 1 || pad < 0) shape_error("conv2d: invalid stride/pad");
  detail::ConvDims d;
  d.n = input.dim(0); d.c = input.dim(1); d.h = input.dim(2); d.w = input.dim(3);
  d.f = kernel.dim(0); d.kh = kernel.dim(2); d.kw = kernel.dim(3);
  d.stride = stride; d.pad = pad;
  if (kernel.dim(1) != d.c) {
    shape_error("conv2d: kernel channels " + shape_str(kernel.shape()) + " do not match input " +
                shape_str(input.shape()));
  }
  if (bias.rank() != 1 || bias.dim(0) != d.f) {
    shape_error("conv2d: bias " + shape_str(bias.shape()) + " must be [" + std::to_string(d.f) + "]");
  }
  if (d.h + 2 * pad < d.kh || d.w + 2 * pad < d.kw) {
    shape_error("conv2d: kernel " + shape_str(kernel.shape()) + " larger than padded input " +
                shape_str(input.shape()) + " with pad " + std::to_string(pad));
  }
  d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
  d.ow = (d.w + 2 * pad - d.kw) / stride + 1;

  const int ckk = d.c * d.kh * d.kw;
  const int p = d.oh * d.ow;
  std::vector<S> y(static_cast<std::size_t>(d.n) * d.f * p, S(0));
  std::vector<S> col(static_cast<std::size_t>(ckk) * p);
  const auto& xv = input.values();
  const auto& kv = kernel.values();
  const auto& bv = bias.values();
  for (int b = 0; b < d.n; ++b) {
    detail::im2col(xv.data() + static_cast<std::size_t>(b) * d.c * d.h * d.w, d.c, d.h, d.w,
                   d.kh, d.kw, stride, pad, d.oh, d.ow, col.data());
    S* out = y.data() + static_cast<std::size_t>(b) * d.f * p;
    detail::gemm_nn(d.f, ckk, p, kv.data(), col.data(), out);
    for (int f = 0; f < d.f; ++f) {
      const S bf = bv[static_cast<std::size_t>(f)];
      S* row = out + static_cast<std::size_t>(f) * p;
      for (int i = 0; i < p; ++i) row[i] += bf;
    }
  }

  TapeT<S>* tape = input.on_tape() ? input.tape()
                   : kernel.on_tape() ? kernel.tape()
                   : bias.on_tape() ? bias.tape() : nullptr;
  if (!tape) return TensorT<S>({d.n, d.f, d.oh, d.ow}, std::move(y));
  const int px = input.on_tape() ? input.node() : -1;
  const int pk = kernel.on_tape() ? kernel.node() : -1;
  const int pbias = bias.on_tape() ? bias.node() : -1;
  auto xstore = input.storage();
  auto kstore = kernel.storage();
  return tape->record(
      {d.n, d.f, d.oh, d.ow}, std::move(y), {px, pk, pbias},
      [px, pk, pbias, xstore, kstore, d](TapeT<S>& tape_ref,
                                         const typename TapeT<S>::Grad& gout) {
        const int ckk = d.c * d.kh * d.kw;
        const int p = d.oh * d.ow;
        std::vector<S> col(static_cast<std::size_t>(ckk) * p);
        std::vector<S> dcol(static_cast<std::size_t>(ckk) * p);
        typename TapeT<S>::Grad* gx =
            px >= 0 ? &tape_ref.grad_buffer(px, static_cast<std::int64_t>(d.n) * d.c * d.h * d.w) : nullptr;
        typename TapeT<S>::Grad* gk =
            pk >= 0 ? &tape_ref.grad_buffer(pk, static_cast<std::int64_t>(d.f) * ckk) : nullptr;
        typename TapeT<S>::Grad* gb =
            pbias >= 0 ? &tape_ref.grad_buffer(pbias, d.f) : nullptr;
        for (int b = 0; b < d.n; ++b) {
          const S* gy = gout.data() + static_cast<std::size_t>(b) * d.f * p;
          if (gk) {
            detail::im2col(xstore->data() + static_cast<std::size_t>(b) * d.c * d.h * d.w, d.c,
                           d.h, d.w, d.kh, d.kw, d.stride, d.pad, d.oh, d.ow, col.data());
            detail::gemm_nt(d.f, p, ckk, gy, col.data(), gk->data());
          }
          if (gx) {
            std::fill(dcol.begin(), dcol.end(), S(0));
            detail::gemm_tn(ckk, d.f, p, kstore->data(), gy, dcol.data());
            detail::col2im_add(dcol.data(), d.c, d.h, d.w, d.kh, d.kw, d.stride, d.pad, d.oh,
                               d.ow, gx->data() + static_cast<std::size_t>(b) * d.c * d.h * d.w);
          }
          if (gb) {
            for (int f = 0; f < d.f; ++f) {
              const S* row = gy + static_cast<std::size_t>(f) * p;
              S acc = S(0);
              for (int i = 0; i < p; ++i) acc += row[i];
              (*gb)[static_cast<std::size_t>(f)] += acc;
            }
          }
        }
      });
}

// input [N,C,H,W], kernel [C,F,kh,kw], bias [F] -> [N,F,H',W'] with
// H' = (H-1)*stride - 2*pad + kh. Adjoint of conv2d with matched parameters.
template <class S>
TensorT<S> conv_transpose2d(const TensorT<S>& input, const TensorT<S>& kernel,
                            const TensorT<S>& bias, int stride, int pad) {
  if (input.rank() != 4 || kernel.rank() != 4) {
    shape_error("conv_transpose2d: expected rank-4 input and kernel, got " +
                shape_str(input.shape()) + " and " + shape_str(kernel.shape()));
  }
  if (stride < 1 || pad < 0) shape_error("conv_transpose2d: invalid stride/pad");
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int f = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(0) != c) {
    shape_error("conv_transpose2d: kernel " + shape_str(kernel.shape()) +
                " does not match input channels of " + shape_str(input.shape()));
  }
  if (bias.rank() != 1 || bias.dim(0) != f) {
    shape_error("conv_transpose2d: bias " + shape_str(bias.shape()) + " must be [" + std::to_string(f) + "]");
  }
  const int oh = (h - 1) * stride - 2 * pad + kh;
  const int ow = (w - 1) * stride - 2 * pad + kw;
  if (oh < 1 || ow < 1) {
    shape_error("conv_transpose2d: output would be empty for input " + shape_str(input.shape()));
  }

  const int fkk = f * kh * kw;
  const int p = h * w;
  std::vector<S> y(static_cast<std::size_t>(n) * f * oh * ow, S(0));
  std::vector<S> col(static_cast<std::size_t>(fkk) * p);
  const auto& xv = input.values();
  const auto& kv = kernel.values();
  const auto& bv = bias.values();
  for (int b = 0; b < n; ++b) {
    // col[f*kh*kw, h*w] = K^T x; then scatter into the output image.
    std::fill(col.begin(), col.end(), S(0));
    detail::gemm_tn(fkk, c, p, kv.data(), xv.data() + static_cast<std::size_t>(b) * c * p,
                    col.data());
    S* out = y.data() + static_cast<std::size_t>(b) * f * oh * ow;
    detail::col2im_add(col.data(), f, oh, ow, kh, kw, stride, pad, h, w, out);
    for (int j = 0; j < f; ++j) {
      const S bj = bv[static_cast<std::size_t>(j)];
      S* row = out + static_cast<std::size_t>(j) * oh * ow;
      for (int i = 0; i < oh * ow; ++i) row[i] += bj;
    }
  }

  TapeT<S>* tape = input.on_tape() ? input.tape()
                   : kernel.on_tape() ? kernel.tape()
                   : bias.on_tape() ? bias.tape() : nullptr;
  if (!tape) return TensorT<S>({n, f, oh, ow}, std::move(y));
  const int px = input.on_tape() ? input.node() : -1;
  const int pk = kernel.on_tape() ? kernel.node() : -1;
  const int pbias = bias.on_tape() ? bias.node() : -1;
  auto xstore = input.storage();
  auto kstore = kernel.storage();
  return tape->record(
      {n, f, oh, ow}, std::move(y), {px, pk, pbias},
      [px, pk, pbias, xstore, kstore, n, c, h, w, f, kh, kw, stride, pad, oh,
       ow](TapeT<S>& tape_ref, const typename TapeT<S>::Grad& gout) {
        const int fkk = f * kh * kw;
        const int p = h * w;
        std::vector<S> col_g(static_cast<std::size_t>(fkk) * p);
        typename TapeT<S>::Grad* gx =
            px >= 0 ? &tape_ref.grad_buffer(px, static_cast<std::int64_t>(n) * c * p) : nullptr;
        typename TapeT<S>::Grad* gk =
            pk >= 0 ? &tape_ref.grad_buffer(pk, static_cast<std::int64_t>(c) * fkk) : nullptr;
        typename TapeT<S>::Grad* gb = pbias >= 0 ? &tape_ref.grad_buffer(pbias, f) : nullptr;
        for (int b = 0; b < n; ++b) {
          const S* gy = gout.data() + static_cast<std::size_t>(b) * f * oh * ow;
          detail::im2col(gy, f, oh, ow, kh, kw, stride, pad, h, w, col_g.data());
          if (gx) {
            detail::gemm_nn(c, fkk, p, kstore->data(), col_g.data(),
                            gx->data() + static_cast<std::size_t>(b) * c * p);
          }
          if (gk) {
            detail::gemm_nt(c, p, fkk, xstore->data() + static_cast<std::size_t>(b) * c * p,
                            col_g.data(), gk->data());
          }
          if (gb) {
            for (int j = 0; j < f; ++j) {
              const S* row = gy + static_cast<std::size_t>(j) * oh * ow;
              S acc = S(0);
              for (int i = 0; i < oh * ow; ++i) acc += row[i];
              (*gb)[static_cast<std::size_t>(j)] += acc;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions (reduced axes kept as singleton dims)
// ---------------------------------------------------------------------------

enum class ReduceOp { Sum, Mean, Var };

namespace detail {

// Maps each input element to its reduction cell; copyable so backward
// closures can hold it by value.
struct ReduceWalk {
  Shape shape;
  std::vector<std::int64_t> ostride;  // per input dim; 0 on reduced dims
  std::int64_t n = 0;

  template <class Fn>
  void operator()(Fn&& fn) const {
    const int rank = static_cast<int>(shape.size());
    std::vector<int> idx(static_cast<std::size_t>(rank), 0);
    std::int64_t io = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      fn(i, io);
      for (int d = rank - 1; d >= 0; --d) {
        ++idx[static_cast<std::size_t>(d)];
        io += ostride[static_cast<std::size_t>(d)];
        if (idx[static_cast<std::size_t>(d)] < shape[static_cast<std::size_t>(d)]) break;
        idx[static_cast<std::size_t>(d)] = 0;
        io -= ostride[static_cast<std::size_t>(d)] * shape[static_cast<std::size_t>(d)];
      }
    }
  }
};

}  // namespace detail

template <class S>
TensorT<S> reduce(const TensorT<S>& x, const std::vector<int>& axes, ReduceOp op) {
  const auto& shape = x.shape();
  std::vector<bool> reduced(shape.size(), false);
  for (int a : axes) {
    if (a < 0 || a >= x.rank()) {
      throw std::invalid_argument("reduce: axis " + std::to_string(a) + " out of range for " +
                                  shape_str(shape));
    }
    if (reduced[static_cast<std::size_t>(a)]) {
      throw std::invalid_argument("reduce: duplicate axis " + std::to_string(a));
    }
    reduced[static_cast<std::size_t>(a)] = true;
  }
  Shape out_shape = shape;
  std::int64_t count = 1;
  for (std::size_t d = 0; d < shape.size(); ++d) {
    if (reduced[d]) {
      count *= shape[d];
      out_shape[d] = 1;
    }
  }
  const std::int64_t n = x.size();
  const std::int64_t m = numel(out_shape);

  const int rank = x.rank();
  detail::ReduceWalk walk;
  walk.shape = shape;
  walk.n = n;
  walk.ostride.assign(static_cast<std::size_t>(rank), 0);
  std::int64_t acc = 1;
  for (int d = rank - 1; d >= 0; --d) {
    if (!reduced[static_cast<std::size_t>(d)]) walk.ostride[static_cast<std::size_t>(d)] = acc;
    acc *= out_shape[static_cast<std::size_t>(d)];
  }

  // Accumulate in double regardless of S so scalar functionals of large
  // tensors keep enough precision for finite-difference verification.
  const auto& xv = x.values();
  std::vector<double> sums(static_cast<std::size_t>(m), 0.0);
  walk([&](std::int64_t i, std::int64_t io) {
    sums[static_cast<std::size_t>(io)] += static_cast<double>(xv[static_cast<std::size_t>(i)]);
  });

  std::vector<S> y(static_cast<std::size_t>(m));
  std::shared_ptr<std::vector<S>> means;  // kept for var backward
  const S inv_count = S(1) / static_cast<S>(count);
  const double inv_count_d = 1.0 / static_cast<double>(count);
  switch (op) {
    case ReduceOp::Sum:
      for (std::int64_t i = 0; i < m; ++i) y[i] = static_cast<S>(sums[i]);
      break;
    case ReduceOp::Mean:
      for (std::int64_t i = 0; i < m; ++i) y[i] = static_cast<S>(sums[i] * inv_count_d);
      break;
    case ReduceOp::Var: {
      means = std::make_shared<std::vector<S>>(static_cast<std::size_t>(m));
      for (std::int64_t i = 0; i < m; ++i) {
        (*means)[i] = static_cast<S>(sums[i] * inv_count_d);
      }
      std::vector<double> acc2(static_cast<std::size_t>(m), 0.0);
      walk([&](std::int64_t i, std::int64_t io) {
        const double dlt = static_cast<double>(xv[static_cast<std::size_t>(i)]) -
                           static_cast<double>((*means)[static_cast<std::size_t>(io)]);
        acc2[static_cast<std::size_t>(io)] += dlt * dlt;
      });
      // population convention
      for (std::int64_t i = 0; i < m; ++i) y[i] = static_cast<S>(acc2[i] * inv_count_d);
      break;
    }
  }

  if (!x.on_tape()) return TensorT<S>(std::move(out_shape), std::move(y));
  const int parent = x.node();
  auto xstore = x.storage();
  return x.tape()->record(
      std::move(out_shape), std::move(y), {parent},
      [parent, n, op, inv_count, walk, xstore, means](TapeT<S>& tape,
                                                      const typename TapeT<S>::Grad& gout) {
        auto& gin = tape.grad_buffer(parent, n);
        switch (op) {
          case ReduceOp::Sum:
            walk([&](std::int64_t i, std::int64_t io) { gin[static_cast<std::size_t>(i)] += gout[static_cast<std::size_t>(io)]; });
            break;
          case ReduceOp::Mean:
            walk([&](std::int64_t i, std::int64_t io) {
              gin[static_cast<std::size_t>(i)] += gout[static_cast<std::size_t>(io)] * inv_count;
            });
            break;
          case ReduceOp::Var: {
            const auto& xv2 = *xstore;
            walk([&](std::int64_t i, std::int64_t io) {
              const S dlt = xv2[static_cast<std::size_t>(i)] - (*means)[static_cast<std::size_t>(io)];
              gin[static_cast<std::size_t>(i)] +=
                  gout[static_cast<std::size_t>(io)] * S(2) * dlt * inv_count;
            });
            break;
          }
        }
      });
}

template <class S>
TensorT<S> reduce_sum(const TensorT<S>& x, const std::vector<int>& axes) { return reduce(x, axes, ReduceOp::Sum); }
template <class S>
TensorT<S> reduce_mean(const TensorT<S>& x, const std::vector<int>& axes) { return reduce(x, axes, ReduceOp::Mean); }
template <class S>
TensorT<S> reduce_var(const TensorT<S>& x, const std::vector<int>& axes) { return reduce(x, axes, ReduceOp::Var); }

template <class S>
std::vector<int> all_axes(const TensorT<S>& x) {
  std::vector<int> axes(static_cast<std::size_t>(x.rank()));
  for (int d = 0; d < x.rank(); ++d) axes[static_cast<std::size_t>(d)] = d;
  return axes;
}

template <class S>
TensorT<S> sum_all(const TensorT<S>& x) { return reshape(reduce_sum(x, all_axes(x)), {1}); }
template <class S>
TensorT<S> mean_all(const TensorT<S>& x) { return reshape(reduce_mean(x, all_axes(x)), {1}); }

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

}  // namespace glyphgen

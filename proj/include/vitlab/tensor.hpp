#pragma once

// Reductions must not depend on heap addresses: with nonzero max alignment,
// Eigen's redux peels scalars up to the first aligned element, so the
// summation order (and the f32 result) would vary with where malloc happens
// to place a buffer. Forcing 0 keeps vectorized traversal but starts it at
// index 0 unconditionally, making every run bit-identical.
#define EIGEN_MAX_ALIGN_BYTES 0

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "vitlab/rng.hpp"

namespace vitlab {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? " x " : "") << s[i];
  os << "]";
  return os.str();
}

[[noreturn]] inline void tensor_fail(const std::string& msg) {
  throw std::invalid_argument("tensor: " + msg);
}

template <typename S>
struct TensorNode {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // lazily sized; empty means "no gradient yet"
  bool requires_grad = false;
};

// Value-semantics handle over a shared node. Copies alias the same storage,
// which is what the tape needs to accumulate gradients across fan-out.
template <typename S>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, S fill = S(0), bool requires_grad = false) {
    check_shape(shape);
    node_ = std::make_shared<TensorNode<S>>();
    node_->shape = std::move(shape);
    node_->value.assign(static_cast<std::size_t>(shape_numel(node_->shape)), fill);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<S> data, bool requires_grad = false) {
    check_shape(shape);
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
      tensor_fail("data length " + std::to_string(data.size()) + " does not match shape " +
                  shape_str(shape));
    node_ = std::make_shared<TensorNode<S>>();
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(S v) { return Tensor(Shape{1}, std::vector<S>{v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(node_->value.size()); }

  std::vector<S>& data() { return node_->value; }
  const std::vector<S>& data() const { return node_->value; }
  S item() const {
    if (size() != 1) tensor_fail("item() on non-scalar tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<S>& grad() const {
    if (node_->grad.empty()) tensor_fail("gradient not populated");
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.assign(node_->grad.size(), S(0));
  }

  std::shared_ptr<TensorNode<S>> node() const { return node_; }

 private:
  static void check_shape(const Shape& s) {
    if (s.empty()) tensor_fail("shape must have at least one axis");
    for (auto e : s)
      if (e <= 0) tensor_fail("shape extents must be positive, got " + shape_str(s));
  }

  std::shared_ptr<TensorNode<S>> node_;
};

template <typename S>
void ensure_grad(const std::shared_ptr<TensorNode<S>>& n) {
  if (n->grad.empty()) n->grad.assign(n->value.size(), S(0));
}

// Define-by-run gradient tape. One forward pass builds entries in execution
// order; backward() walks them once in reverse and then consumes the tape.
template <typename S>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape*& active_slot() {
    thread_local Tape* slot = nullptr;
    return slot;
  }
  static Tape* active() { return active_slot(); }

  void record(std::shared_ptr<TensorNode<S>> out, std::function<void()> backward) {
    entries_.push_back(Entry{std::move(out), std::move(backward)});
  }

  std::size_t size() const { return entries_.size(); }

  void backward(const Tensor<S>& loss) {
    if (consumed_) tensor_fail("backward on an already consumed tape");
    if (loss.size() != 1)
      tensor_fail("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    bool found = false;
    for (const auto& e : entries_)
      if (e.out == loss.node()) {
        found = true;
        break;
      }
    if (!found) tensor_fail("loss tensor is not a result recorded on this tape");
    ensure_grad(loss.node());
    loss.node()->grad[0] = S(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->out->grad.empty()) continue;  // not on any path to the loss
      it->backward();
    }
    entries_.clear();
    consumed_ = true;
  }

  void reset() {
    entries_.clear();
    consumed_ = false;
  }

 private:
  struct Entry {
    std::shared_ptr<TensorNode<S>> out;
    std::function<void()> backward;
  };
  std::vector<Entry> entries_;
  bool consumed_ = false;
};

// RAII activation; ops record only while a scope is alive on this thread.
template <typename S>
class TapeScope {
 public:
  explicit TapeScope(Tape<S>& t) : prev_(Tape<S>::active_slot()) { Tape<S>::active_slot() = &t; }
  ~TapeScope() { Tape<S>::active_slot() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<S>* prev_;
};

namespace detail {

template <typename S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using CMatMap =
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using ArrMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
template <typename S>
using CArrMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;

template <typename S>
bool any_requires_grad(std::initializer_list<const Tensor<S>*> ins) {
  for (auto* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

// Marks `out` as differentiable and records `fn` if a tape is active.
template <typename S, typename F>
void finish_op(std::initializer_list<const Tensor<S>*> ins, Tensor<S>& out, F&& fn) {
  if (!any_requires_grad(ins)) return;
  out.set_requires_grad(true);
  if (auto* tape = Tape<S>::active()) tape->record(out.node(), std::forward<F>(fn));
}

inline bool shape_suffix_of(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  std::size_t off = big.size() - small.size();
  for (std::size_t i = 0; i < small.size(); ++i)
    if (small[i] != big[off + i]) return false;
  return true;
}

}  // namespace detail

// ---- matrix products ----

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    tensor_fail("matmul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<S> out(Shape{m, n});
  detail::CMatMap<S> A(a.data().data(), m, k), B(b.data().data(), k, n);
  detail::MatMap<S>(out.data().data(), m, n).noalias() = A * B;
  auto an = a.node(), bn = b.node(), on = out.node();
  detail::finish_op<S>({&a, &b}, out, [an, bn, on, m, k, n] {
    detail::CMatMap<S> G(on->grad.data(), m, n);
    if (an->requires_grad) {
      ensure_grad(an);
      detail::CMatMap<S> B(bn->value.data(), k, n);
      detail::MatMap<S>(an->grad.data(), m, k).noalias() += G * B.transpose();
    }
    if (bn->requires_grad) {
      ensure_grad(bn);
      detail::CMatMap<S> A(an->value.data(), m, k);
      detail::MatMap<S>(bn->grad.data(), k, n).noalias() += A.transpose() * G;
    }
  });
  return out;
}

template <typename S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    tensor_fail("bmm shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::int64_t nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Tensor<S> out(Shape{nb, m, n});
  for (std::int64_t i = 0; i < nb; ++i) {
    detail::CMatMap<S> A(a.data().data() + i * m * k, m, k);
    detail::CMatMap<S> B(b.data().data() + i * k * n, k, n);
    detail::MatMap<S>(out.data().data() + i * m * n, m, n).noalias() = A * B;
  }
  auto an = a.node(), bn = b.node(), on = out.node();
  detail::finish_op<S>({&a, &b}, out, [an, bn, on, nb, m, k, n] {
    for (std::int64_t i = 0; i < nb; ++i) {
      detail::CMatMap<S> G(on->grad.data() + i * m * n, m, n);
      if (an->requires_grad) {
        ensure_grad(an);
        detail::CMatMap<S> B(bn->value.data() + i * k * n, k, n);
        detail::MatMap<S>(an->grad.data() + i * m * k, m, k).noalias() += G * B.transpose();
      }
      if (bn->requires_grad) {
        ensure_grad(bn);
        detail::CMatMap<S> A(an->value.data() + i * m * k, m, k);
        detail::MatMap<S>(bn->grad.data() + i * k * n, k, n).noalias() += A.transpose() * G;
      }
    }
  });
  return out;
}

// Fused scaled dot-product attention over a flat batch of heads.
// q, k, v: [N x T x dh]. Returns [N x T x dh]. Only the row-stochastic
// attention matrix is retained for backward, which keeps peak memory at one
// [T x T] buffer per call instead of three.
template <typename S>
Tensor<S> scaled_dot_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                               double scale,
                               std::shared_ptr<std::vector<S>>* attn_out = nullptr) {
  if (q.ndim() != 3 || k.ndim() != 3 || v.ndim() != 3)
    tensor_fail("scaled_dot_attention expects rank-3 inputs");
  if (q.shape() != k.shape() || q.shape() != v.shape())
    tensor_fail("scaled_dot_attention shape mismatch: " + shape_str(q.shape()) + " vs " +
                shape_str(k.shape()) + " vs " + shape_str(v.shape()));
  const std::int64_t nb = q.dim(0), t = q.dim(1), dh = q.dim(2);
  Tensor<S> out(Shape{nb, t, dh});
  auto attn = std::make_shared<std::vector<S>>(static_cast<std::size_t>(nb * t * t));
  const S alpha = static_cast<S>(scale);
  for (std::int64_t i = 0; i < nb; ++i) {
    detail::CMatMap<S> Q(q.data().data() + i * t * dh, t, dh);
    detail::CMatMap<S> K(k.data().data() + i * t * dh, t, dh);
    detail::CMatMap<S> V(v.data().data() + i * t * dh, t, dh);
    detail::MatMap<S> W(attn->data() + i * t * t, t, t);
    W.noalias() = Q * K.transpose();
    W *= alpha;
    for (std::int64_t r = 0; r < t; ++r) {
      auto row = W.row(r).array();
      S mx = row.maxCoeff();
      row = (row - mx).exp();
      row /= row.sum();
    }
    detail::MatMap<S>(out.data().data() + i * t * dh, t, dh).noalias() = W * V;
  }
  if (attn_out) *attn_out = attn;
  auto qn = q.node(), kn = k.node(), vn = v.node(), on = out.node();
  detail::finish_op<S>({&q, &k, &v}, out, [qn, kn, vn, on, attn, alpha, nb, t, dh] {
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> dW(t, t);
    if (qn->requires_grad) ensure_grad(qn);
    if (kn->requires_grad) ensure_grad(kn);
    if (vn->requires_grad) ensure_grad(vn);
    for (std::int64_t i = 0; i < nb; ++i) {
      detail::CMatMap<S> G(on->grad.data() + i * t * dh, t, dh);
      detail::CMatMap<S> W(attn->data() + i * t * t, t, t);
      detail::CMatMap<S> V(vn->value.data() + i * t * dh, t, dh);
      if (vn->requires_grad)
        detail::MatMap<S>(vn->grad.data() + i * t * dh, t, dh).noalias() += W.transpose() * G;
      if (!qn->requires_grad && !kn->requires_grad) continue;
      dW.noalias() = G * V.transpose();
      // softmax backward, rowwise: dS = W .* (dW - rowsum(dW .* W))
      for (std::int64_t r = 0; r < t; ++r) {
        S dot = dW.row(r).cwiseProduct(W.row(r)).sum();
        dW.row(r).array() = W.row(r).array() * (dW.row(r).array() - dot);
      }
      dW *= alpha;
      detail::CMatMap<S> Q(qn->value.data() + i * t * dh, t, dh);
      detail::CMatMap<S> K(kn->value.data() + i * t * dh, t, dh);
      if (qn->requires_grad)
        detail::MatMap<S>(qn->grad.data() + i * t * dh, t, dh).noalias() += dW * K;
      if (kn->requires_grad)
        detail::MatMap<S>(kn->grad.data() + i * t * dh, t, dh).noalias() += dW.transpose() * Q;
    }
  });
  return out;
}

// ---- elementwise with suffix broadcasting ----

namespace detail {

enum class EwKind { Add, Sub, Mul };

template <typename S>
Tensor<S> elementwise(const Tensor<S>& a, const Tensor<S>& b, EwKind kind, const char* name) {
  const bool b_suffix = shape_suffix_of(b.shape(), a.shape());
  const bool a_suffix = shape_suffix_of(a.shape(), b.shape());
  if (!b_suffix && !a_suffix)
    tensor_fail(std::string(name) + " shape mismatch: " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
  const Tensor<S>& big = b_suffix ? a : b;
  const Tensor<S>& small = b_suffix ? b : a;
  const bool small_is_b = b_suffix;
  const std::int64_t nbig = big.size(), nsmall = small.size();
  Tensor<S> out(big.shape());
  const S* pb = big.data().data();
  const S* ps = small.data().data();
  S* po = out.data().data();
  for (std::int64_t off = 0; off < nbig; off += nsmall) {
    CArrMap<S> x(pb + off, nsmall), y(ps, nsmall);
    ArrMap<S> o(po + off, nsmall);
    switch (kind) {
      case EwKind::Add: o = x + y; break;
      case EwKind::Sub: o = small_is_b ? (x - y).eval() : (y - x).eval(); break;
      case EwKind::Mul: o = x * y; break;
    }
  }
  auto bign = big.node(), smalln = small.node(), on = out.node();
  finish_op<S>({&a, &b}, out, [bign, smalln, on, kind, small_is_b, nbig, nsmall] {
    // d(out)/d(big) is +-1 or small's value; d(out)/d(small) sums over blocks
    const S big_sign = (kind == EwKind::Sub && !small_is_b) ? S(-1) : S(1);
    const S small_sign = (kind == EwKind::Sub && small_is_b) ? S(-1) : S(1);
    for (std::int64_t off = 0; off < nbig; off += nsmall) {
      CArrMap<S> g(on->grad.data() + off, nsmall);
      if (bign->requires_grad) {
        ensure_grad(bign);
        ArrMap<S> gb(bign->grad.data() + off, nsmall);
        if (kind == EwKind::Mul)
          gb += g * CArrMap<S>(smalln->value.data(), nsmall);
        else
          gb += big_sign * g;
      }
      if (smalln->requires_grad) {
        ensure_grad(smalln);
        ArrMap<S> gs(smalln->grad.data(), nsmall);
        if (kind == EwKind::Mul)
          gs += g * CArrMap<S>(bign->value.data() + off, nsmall);
        else
          gs += small_sign * g;
      }
    }
  });
  return out;
}

}  // namespace detail

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::elementwise(a, b, detail::EwKind::Add, "add");
}
template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::elementwise(a, b, detail::EwKind::Sub, "sub");
}
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::elementwise(a, b, detail::EwKind::Mul, "mul");
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, double c) {
  Tensor<S> out(a.shape());
  detail::ArrMap<S>(out.data().data(), a.size()) =
      detail::CArrMap<S>(a.data().data(), a.size()) * static_cast<S>(c);
  auto an = a.node(), on = out.node();
  detail::finish_op<S>({&a}, out, [an, on, c] {
    ensure_grad(an);
    detail::ArrMap<S>(an->grad.data(), static_cast<std::int64_t>(an->grad.size())) +=
        detail::CArrMap<S>(on->grad.data(), static_cast<std::int64_t>(on->grad.size())) *
        static_cast<S>(c);
  });
  return out;
}

// ---- shape ops ----

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (shape_numel(shape) != a.size())
    tensor_fail("reshape from " + shape_str(a.shape()) + " to " + shape_str(shape) +
                " changes element count");
  Tensor<S> out(std::move(shape), a.data());
  auto an = a.node(), on = out.node();
  detail::finish_op<S>({&a}, out, [an, on] {
    ensure_grad(an);
    detail::ArrMap<S>(an->grad.data(), static_cast<std::int64_t>(an->grad.size())) +=
        detail::CArrMap<S>(on->grad.data(), static_cast<std::int64_t>(on->grad.size()));
  });
  return out;
}

namespace detail {

inline std::vector<std::int64_t> row_major_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size());
  std::int64_t acc = 1;
  for (std::size_t i = s.size(); i-- > 0;) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

// apply out[idx] = in[perm_source(idx)] for arbitrary rank
template <typename S, typename F>
void permute_copy(const Shape& out_shape, const std::vector<std::int64_t>& in_strides_for_out,
                  F&& assign) {
  const int nd = static_cast<int>(out_shape.size());
  std::vector<std::int64_t> idx(static_cast<std::size_t>(nd), 0);
  const std::int64_t total = shape_numel(out_shape);
  std::int64_t src = 0;
  for (std::int64_t flat = 0; flat < total; ++flat) {
    assign(flat, src);
    for (int d = nd - 1; d >= 0; --d) {
      idx[static_cast<std::size_t>(d)]++;
      src += in_strides_for_out[static_cast<std::size_t>(d)];
      if (idx[static_cast<std::size_t>(d)] < out_shape[static_cast<std::size_t>(d)]) break;
      src -= in_strides_for_out[static_cast<std::size_t>(d)] * out_shape[static_cast<std::size_t>(d)];
      idx[static_cast<std::size_t>(d)] = 0;
    }
  }
}

}  // namespace detail

template <typename S>
Tensor<S> permute(const Tensor<S>& a, const std::vector<int>& axes) {
  const int nd = a.ndim();
  if (static_cast<int>(axes.size()) != nd)
    tensor_fail("permute axes rank " + std::to_string(axes.size()) + " does not match tensor rank " +
                std::to_string(nd));
  std::vector<bool> seen(static_cast<std::size_t>(nd), false);
  for (int ax : axes) {
    if (ax < 0 || ax >= nd || seen[static_cast<std::size_t>(ax)])
      tensor_fail("permute axes must be a permutation of 0.." + std::to_string(nd - 1));
    seen[static_cast<std::size_t>(ax)] = true;
  }
  Shape out_shape(static_cast<std::size_t>(nd));
  for (int i = 0; i < nd; ++i) out_shape[static_cast<std::size_t>(i)] = a.dim(axes[static_cast<std::size_t>(i)]);
  auto in_strides = detail::row_major_strides(a.shape());
  std::vector<std::int64_t> strides_for_out(static_cast<std::size_t>(nd));
  for (int i = 0; i < nd; ++i)
    strides_for_out[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
  Tensor<S> out(out_shape);
  const S* src = a.data().data();
  S* dst = out.data().data();
  detail::permute_copy<S>(out_shape, strides_for_out,
                          [&](std::int64_t flat, std::int64_t s) { dst[flat] = src[s]; });
  auto an = a.node(), on = out.node();
  detail::finish_op<S>({&a}, out, [an, on, out_shape, strides_for_out] {
    ensure_grad(an);
    S* g = an->grad.data();
    const S* go = on->grad.data();
    detail::permute_copy<S>(out_shape, strides_for_out,
                            [&](std::int64_t flat, std::int64_t s) { g[s] += go[flat]; });
  });
  return out;
}

template <typename S>
Tensor<S> slice(const Tensor<S>& a, int axis, std::int64_t start, std::int64_t len) {
  const int nd = a.ndim();
  if (axis < 0 || axis >= nd) tensor_fail("slice axis out of range");
  if (start < 0 || len <= 0 || start + len > a.dim(axis))
    tensor_fail("slice [" + std::to_string(start) + ", " + std::to_string(start + len) +
                ") out of bounds for axis extent " + std::to_string(a.dim(axis)));
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(axis)] = len;
  Tensor<S> out(out_shape);
  std::int64_t inner = 1;
  for (int i = axis + 1; i < nd; ++i) inner *= a.dim(i);
  std::int64_t outer = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  const std::int64_t in_ax = a.dim(axis);
  const S* src = a.data().data();
  S* dst = out.data().data();
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy(src + (o * in_ax + start) * inner, src + (o * in_ax + start + len) * inner,
              dst + o * len * inner);
  auto an = a.node(), on = out.node();
  detail::finish_op<S>({&a}, out, [an, on, outer, inner, in_ax, start, len] {
    ensure_grad(an);
    for (std::int64_t o = 0; o < outer; ++o) {
      detail::ArrMap<S>(an->grad.data() + (o * in_ax + start) * inner, len * inner) +=
          detail::CArrMap<S>(on->grad.data() + o * len * inner, len * inner);
    }
  });
  return out;
}

template <typename S>
Tensor<S> concat(const Tensor<S>& a, const Tensor<S>& b, int axis) {
  const int nd = a.ndim();
  if (b.ndim() != nd || axis < 0 || axis >= nd)
    tensor_fail("concat rank mismatch or bad axis: " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
  for (int i = 0; i < nd; ++i)
    if (i != axis && a.dim(i) != b.dim(i))
      tensor_fail("concat shapes differ off-axis: " + shape_str(a.shape()) + " vs " +
                  shape_str(b.shape()));
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(axis)] += b.dim(axis);
  Tensor<S> out(out_shape);
  std::int64_t inner = 1;
  for (int i = axis + 1; i < nd; ++i) inner *= a.dim(i);
  std::int64_t outer = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  const std::int64_t la = a.dim(axis) * inner, lb = b.dim(axis) * inner;
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  S* po = out.data().data();
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy(pa + o * la, pa + (o + 1) * la, po + o * (la + lb));
    std::copy(pb + o * lb, pb + (o + 1) * lb, po + o * (la + lb) + la);
  }
  auto an = a.node(), bn = b.node(), on = out.node();
  detail::finish_op<S>({&a, &b}, out, [an, bn, on, outer, la, lb] {
    for (std::int64_t o = 0; o < outer; ++o) {
      if (an->requires_grad) {
        ensure_grad(an);
        detail::ArrMap<S>(an->grad.data() + o * la, la) +=
            detail::CArrMap<S>(on->grad.data() + o * (la + lb), la);
      }
      if (bn->requires_grad) {
        ensure_grad(bn);
        detail::ArrMap<S>(bn->grad.data() + o * lb, lb) +=
            detail::CArrMap<S>(on->grad.data() + o * (la + lb) + la, lb);
      }
    }
  });
  return out;
}

// stack n copies of `a` along a new leading axis
template <typename S>
Tensor<S> expand0(const Tensor<S>& a, std::int64_t n) {
  if (n <= 0) tensor_fail("expand0 count must be positive");
  Shape out_shape;
  out_shape.push_back(n);
  for (auto e : a.shape()) out_shape.push_back(e);
  Tensor<S> out(out_shape);
  const std::int64_t m = a.size();
  for (std::int64_t i = 0; i < n; ++i)
    std::copy(a.data().begin(), a.data().end(), out.data().begin() + i * m);
  auto an = a.node(), on = out.node();
  detail::finish_op<S>({&a}, out, [an, on, n, m] {
    ensure_grad(an);
    detail::ArrMap<S> g(an->grad.data(), m);
    for (std::int64_t i = 0; i < n; ++i) g += detail::CArrMap<S>(on->grad.data() + i * m, m);
  });
  return out;
}

// ---- nonlinearities and normalization ----

template <typename S>
Tensor<S> softmax(const Tensor<S>& a, int axis) {
  const int nd = a.ndim();
  if (axis < 0 || axis >= nd) tensor_fail("softmax axis out of range for " + shape_str(a.shape()));
  const std::int64_t k = a.dim(axis);
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < nd; ++i) inner *= a.dim(i);
  Tensor<S> out(a.shape());
  const S* src = a.data().data();
  S* dst = out.data().data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const S* x = src + o * k * inner + in;
      S* y = dst + o * k * inner + in;
      S mx = x[0];
      for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, x[j * inner]);
      S sum = S(0);
      for (std::int64_t j = 0; j < k; ++j) {
        S e = std::exp(x[j * inner] - mx);
        y[j * inner] = e;
        sum += e;
      }
      for (std::int64_t j = 0; j < k; ++j) y[j * inner] /= sum;
    }
  }
  auto an = a.node(), on = out.node();
  detail::finish_op<S>({&a}, out, [an, on, outer, inner, k] {
    ensure_grad(an);
    const S* y = on->value.data();
    const S* g = on->grad.data();
    S* gx = an->grad.data();
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t in = 0; in < inner; ++in) {
        const std::int64_t base = o * k * inner + in;
        S dot = S(0);
        for (std::int64_t j = 0; j < k; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::int64_t j = 0; j < k; ++j)
          gx[base + j * inner] += y[base + j * inner] * (g[base + j * inner] - dot);
      }
    }
  });
  return out;
}

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     double eps = 1e-6) {
  const int nd = x.ndim();
  const std::int64_t d = x.dim(nd - 1);
  if (gamma.ndim() != 1 || beta.ndim() != 1 || gamma.dim(0) != d || beta.dim(0) != d)
    tensor_fail("layer_norm parameter shapes " + shape_str(gamma.shape()) + ", " +
                shape_str(beta.shape()) + " do not match last axis of " + shape_str(x.shape()));
  const std::int64_t rows = x.size() / d;
  Tensor<S> out(x.shape());
  auto stats = std::make_shared<std::vector<S>>(static_cast<std::size_t>(rows * 2));
  const S* px = x.data().data();
  const S* pg = gamma.data().data();
  const S* pb = beta.data().data();
  S* po = out.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    detail::CArrMap<S> row(px + r * d, d);
    S mu = row.mean();
    S var = (row - mu).square().mean();
    S inv = S(1) / std::sqrt(var + static_cast<S>(eps));
    (*stats)[static_cast<std::size_t>(r * 2)] = mu;
    (*stats)[static_cast<std::size_t>(r * 2 + 1)] = inv;
    detail::ArrMap<S>(po + r * d, d) =
        ((row - mu) * inv) * detail::CArrMap<S>(pg, d) + detail::CArrMap<S>(pb, d);
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
  detail::finish_op<S>({&x, &gamma, &beta}, out, [xn, gn, bn, on, stats, rows, d] {
    const S* px = xn->value.data();
    const S* pg = gn->value.data();
    const S* g = on->grad.data();
    if (xn->requires_grad) ensure_grad(xn);
    if (gn->requires_grad) ensure_grad(gn);
    if (bn->requires_grad) ensure_grad(bn);
    Eigen::Array<S, Eigen::Dynamic, 1> xhat(d), gg(d);
    for (std::int64_t r = 0; r < rows; ++r) {
      const S mu = (*stats)[static_cast<std::size_t>(r * 2)];
      const S inv = (*stats)[static_cast<std::size_t>(r * 2 + 1)];
      detail::CArrMap<S> row(px + r * d, d), go(g + r * d, d);
      xhat = (row - mu) * inv;
      if (bn->requires_grad) detail::ArrMap<S>(bn->grad.data(), d) += go;
      if (gn->requires_grad) detail::ArrMap<S>(gn->grad.data(), d) += go * xhat;
      if (xn->requires_grad) {
        gg = go * detail::CArrMap<S>(pg, d);
        S m1 = gg.mean();
        S m2 = (gg * xhat).mean();
        detail::ArrMap<S>(xn->grad.data() + r * d, d) += inv * (gg - m1 - xhat * m2);
      }
    }
  });
  return out;
}

template <typename S>
Tensor<S> gelu(const Tensor<S>& a) {
  Tensor<S> out(a.shape());
  const std::int64_t n = a.size();
  detail::CArrMap<S> x(a.data().data(), n);
  // exact form: x * Phi(x), Phi via erf
  detail::ArrMap<S>(out.data().data(), n) =
      x * S(0.5) * (S(1) + (x * S(0.70710678118654752440)).erf());
  auto an = a.node(), on = out.node();
  detail::finish_op<S>({&a}, out, [an, on, n] {
    ensure_grad(an);
    detail::CArrMap<S> x(an->value.data(), n);
    auto phi_big = S(0.5) * (S(1) + (x * S(0.70710678118654752440)).erf());
    auto pdf = (x.square() * S(-0.5)).exp() * S(0.39894228040143267794);
    detail::ArrMap<S>(an->grad.data(), n) +=
        detail::CArrMap<S>(on->grad.data(), n) * (phi_big + x * pdf);
  });
  return out;
}

// inverted dropout; mask depends only on the seed
template <typename S>
Tensor<S> dropout(const Tensor<S>& a, double rate, std::uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0) tensor_fail("dropout rate must be in [0, 1)");
  if (rate == 0.0) return a;
  Tensor<S> out(a.shape());
  const std::int64_t n = a.size();
  auto mask = std::make_shared<std::vector<S>>(static_cast<std::size_t>(n));
  Rng rng(Rng::mix(seed, 0x64726f70ull));
  const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
  for (std::int64_t i = 0; i < n; ++i)
    (*mask)[static_cast<std::size_t>(i)] = rng.uniform() < rate ? S(0) : keep_scale;
  detail::ArrMap<S>(out.data().data(), n) =
      detail::CArrMap<S>(a.data().data(), n) * detail::CArrMap<S>(mask->data(), n);
  auto an = a.node(), on = out.node();
  detail::finish_op<S>({&a}, out, [an, on, mask, n] {
    ensure_grad(an);
    detail::ArrMap<S>(an->grad.data(), n) +=
        detail::CArrMap<S>(on->grad.data(), n) * detail::CArrMap<S>(mask->data(), n);
  });
  return out;
}

// ---- reductions and loss ----

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  Tensor<S> out = Tensor<S>::scalar(detail::CArrMap<S>(a.data().data(), a.size()).sum());
  auto an = a.node(), on = out.node();
  detail::finish_op<S>({&a}, out, [an, on] {
    ensure_grad(an);
    detail::ArrMap<S>(an->grad.data(), static_cast<std::int64_t>(an->grad.size())) += on->grad[0];
  });
  return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  const std::int64_t n = a.size();
  Tensor<S> out =
      Tensor<S>::scalar(detail::CArrMap<S>(a.data().data(), n).sum() / static_cast<S>(n));
  auto an = a.node(), on = out.node();
  detail::finish_op<S>({&a}, out, [an, on, n] {
    ensure_grad(an);
    detail::ArrMap<S>(an->grad.data(), n) += on->grad[0] / static_cast<S>(n);
  });
  return out;
}

// mean cross-entropy over rows of [B x K] logits, with the softmax fused into
// both directions for numerical stability
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<int>& labels) {
  if (logits.ndim() != 2)
    tensor_fail("cross_entropy expects [batch x classes] logits, got " + shape_str(logits.shape()));
  const std::int64_t b = logits.dim(0), k = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != b)
    tensor_fail("cross_entropy label count " + std::to_string(labels.size()) +
                " does not match batch " + std::to_string(b));
  for (std::int64_t i = 0; i < b; ++i)
    if (labels[static_cast<std::size_t>(i)] < 0 || labels[static_cast<std::size_t>(i)] >= k)
      tensor_fail("cross_entropy label " + std::to_string(labels[static_cast<std::size_t>(i)]) +
                  " out of range [0, " + std::to_string(k) + ") at row " + std::to_string(i));
  auto probs = std::make_shared<std::vector<S>>(static_cast<std::size_t>(b * k));
  const S* x = logits.data().data();
  S loss = S(0);
  for (std::int64_t i = 0; i < b; ++i) {
    detail::CArrMap<S> row(x + i * k, k);
    detail::ArrMap<S> p(probs->data() + i * k, k);
    S mx = row.maxCoeff();
    p = (row - mx).exp();
    S sum = p.sum();
    p /= sum;
    loss += std::log(sum) + mx - row[labels[static_cast<std::size_t>(i)]];
  }
  loss /= static_cast<S>(b);
  Tensor<S> out = Tensor<S>::scalar(loss);
  auto ln = logits.node(), on = out.node();
  auto lbl = labels;
  detail::finish_op<S>({&logits}, out, [ln, on, probs, lbl, b, k] {
    ensure_grad(ln);
    const S g = on->grad[0] / static_cast<S>(b);
    S* gx = ln->grad.data();
    const S* p = probs->data();
    for (std::int64_t i = 0; i < b; ++i) {
      detail::ArrMap<S>(gx + i * k, k) += detail::CArrMap<S>(p + i * k, k) * g;
      gx[i * k + lbl[static_cast<std::size_t>(i)]] -= g;
    }
  });
  return out;
}

// x @ W + bias over the last axis; W is [in x out]
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias) {
  const std::int64_t in = w.dim(0), outd = w.dim(1);
  if (x.dim(x.ndim() - 1) != in)
    tensor_fail("linear input " + shape_str(x.shape()) + " does not match weight " +
                shape_str(w.shape()));
  Shape flat{x.size() / in, in};
  Shape out_shape = x.shape();
  out_shape.back() = outd;
  Tensor<S> y = matmul(reshape(x, flat), w);
  return reshape(add(y, bias), out_shape);
}

}  // namespace vitlab

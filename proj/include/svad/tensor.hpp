#pragma once

#include <array>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "svad/common.hpp"

namespace svad {

// ---------------------------------------------------------------------------
// Shape: dense row-major extents, rank <= 4, no heap allocation.
// ---------------------------------------------------------------------------

struct Shape {
  std::array<size_t, 4> dims{1, 1, 1, 1};
  uint8_t rank = 0;

  Shape() = default;
  Shape(std::initializer_list<size_t> ds) {
    if (ds.size() > 4) throw ValidationError("Shape: rank > 4 unsupported");
    rank = static_cast<uint8_t>(ds.size());
    size_t i = 0;
    for (size_t d : ds) dims[i++] = d;
  }

  size_t numel() const {
    size_t n = 1;
    for (uint8_t i = 0; i < rank; ++i) n *= dims[i];
    return n;
  }

  size_t operator[](size_t i) const { return dims[i]; }

  bool operator==(const Shape& o) const {
    if (rank != o.rank) return false;
    for (uint8_t i = 0; i < rank; ++i)
      if (dims[i] != o.dims[i]) return false;
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::string s = "[";
    for (uint8_t i = 0; i < rank; ++i) {
      if (i) s += ", ";
      s += std::to_string(dims[i]);
    }
    return s + "]";
  }
};

// ---------------------------------------------------------------------------
// TensorT: immutable-by-convention value type.  `node >= 0` marks the tensor
// as tracked on some tape; untracked tensors flow through ops for free.
// ---------------------------------------------------------------------------

template <typename S>
struct TensorT {
  Shape shape;
  std::shared_ptr<std::vector<S>> values;
  int64_t node = -1;

  TensorT() : values(std::make_shared<std::vector<S>>()) {}
  TensorT(Shape s, std::vector<S> v) : shape(s), values(std::make_shared<std::vector<S>>(std::move(v))) {
    if (values->size() != shape.numel())
      throw ValidationError("Tensor: data size " + std::to_string(values->size()) +
                            " != shape numel " + std::to_string(shape.numel()));
  }

  static TensorT zeros(Shape s) { return TensorT(s, std::vector<S>(s.numel(), S(0))); }
  static TensorT full(Shape s, S v) { return TensorT(s, std::vector<S>(s.numel(), v)); }
  static TensorT ones(Shape s) { return full(s, S(1)); }
  static TensorT scalar_of(S v) { return TensorT(Shape{1}, std::vector<S>{v}); }

  size_t numel() const { return shape.numel(); }
  size_t rows() const { return shape.rank >= 1 ? shape[0] : 1; }
  size_t cols() const { return shape.rank >= 2 ? shape[1] : 1; }

  const S* data() const { return values->data(); }
  S* mut() { return values->data(); }
  S scalar() const {
    if (numel() != 1) throw ValidationError("scalar(): tensor has " + std::to_string(numel()) + " elements");
    return (*values)[0];
  }
  bool tracked() const { return node >= 0; }
};

using Tensor = TensorT<float>;

template <typename To, typename From>
TensorT<To> convert(const TensorT<From>& t) {
  std::vector<To> v(t.numel());
  for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<To>((*t.values)[i]);
  return TensorT<To>(t.shape, std::move(v));
}

template <typename S>
bool all_finite(const TensorT<S>& t) {
  for (S v : *t.values)
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

// ---------------------------------------------------------------------------
// TapeT: reverse-mode tape.  Nodes are appended in forward order; backward
// walks them in reverse, so the ordering is already topological.  One tape
// per differentiation; tapes are cheap and meant to be discarded after use.
// ---------------------------------------------------------------------------

template <typename S>
class TapeT {
 public:
  using BackFn = std::function<void(TapeT&)>;

  TapeT() = default;
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  // RAII activation; nests (the previous active tape is restored on exit).
  class Scope {
   public:
    explicit Scope(TapeT& t) : prev_(active_) { active_ = &t; }
    ~Scope() { active_ = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    TapeT* prev_;
  };

  static TapeT* active() { return active_; }

  int64_t add_leaf(size_t numel) {
    nodes_.push_back(Node{nullptr, numel, {}});
    return static_cast<int64_t>(nodes_.size()) - 1;
  }

  int64_t add_op(size_t numel) { return add_leaf(numel); }

  void set_back(int64_t id, BackFn fn) { nodes_[static_cast<size_t>(id)].back = std::move(fn); }

  // Lazily allocated zero-filled gradient buffer.
  std::vector<S>& grad(int64_t id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.empty()) n.grad.assign(n.numel, S(0));
    return n.grad;
  }

  bool has_grad(int64_t id) const { return !nodes_[static_cast<size_t>(id)].grad.empty(); }

  size_t size() const { return nodes_.size(); }

  // Seeds d(root)/d(root) = 1 and propagates to every reachable node.
  void backward(const TensorT<S>& root) {
    if (root.numel() != 1) throw ValidationError("backward: root must be a single element");
    if (!root.tracked()) throw ValidationError("backward: root is not on a tape");
    grad(root.node)[0] += S(1);
    for (int64_t i = root.node; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.back && !n.grad.empty()) n.back(*this);
    }
  }

  // Gradient of a watched tensor after backward(); zeros if untouched.
  std::vector<S> grad_of(const TensorT<S>& t) {
    if (!t.tracked()) throw ValidationError("grad_of: tensor is not on a tape");
    return grad(t.node);
  }

 private:
  struct Node {
    BackFn back;
    size_t numel;
    std::vector<S> grad;
  };
  std::vector<Node> nodes_;
  inline static thread_local TapeT* active_ = nullptr;
};

using Tape = TapeT<float>;

// Registers `t` as a differentiable leaf on the active tape.
template <typename S>
TensorT<S> watch(const TensorT<S>& t) {
  auto* tape = TapeT<S>::active();
  if (!tape) throw ValidationError("watch: no active tape");
  TensorT<S> out = t;
  out.node = tape->add_leaf(t.numel());
  return out;
}

namespace detail {

template <typename S>
bool want_track(const TensorT<S>& a) {
  return TapeT<S>::active() != nullptr && a.tracked();
}
template <typename S>
bool want_track(const TensorT<S>& a, const TensorT<S>& b) {
  return TapeT<S>::active() != nullptr && (a.tracked() || b.tracked());
}

// GEMM micro-kernels.  Every kernel accumulates, for some set of output rows,
//   crow[j] += sum_s coef[s*stride] * b[s*n + j]
// nn reads A rows (stride 1), tn reads A columns (stride k); both share the
// same inner loops, so no operand is ever transposed in memory.  Accumulator
// banks merge in a fixed order, keeping results deterministic without any
// reassociation flags.
//
// SVAD_VEC_LOOP stops complete peeling of the short fixed-trip lane loops:
// peeling scalarizes the accumulator arrays before the loop vectorizer runs,
// which costs an order of magnitude on the 16-wide kernels.
#if defined(__GNUC__) && !defined(__clang__)
#define SVAD_VEC_LOOP _Pragma("GCC unroll 1")
#elif defined(__clang__)
#define SVAD_VEC_LOOP _Pragma("clang loop unroll(disable)")
#else
#define SVAD_VEC_LOOP
#endif

// 64-wide output chunk held in registers across the whole step loop; two
// banks hide FMA latency.
template <typename S>
void gemm_chunk64(const S* __restrict coef, size_t stride, size_t steps,
                  const S* __restrict b, size_t n, S* __restrict crow) {
  constexpr size_t JB = 64;
  S acc0[JB], acc1[JB];
  for (size_t j = 0; j < JB; ++j) acc0[j] = crow[j];
  for (size_t j = 0; j < JB; ++j) acc1[j] = S(0);
  size_t s = 0;
  for (; s + 2 <= steps; s += 2) {
    const S c0 = coef[s * stride], c1 = coef[(s + 1) * stride];
    const S* __restrict b0 = b + s * n;
    const S* __restrict b1 = b0 + n;
    for (size_t j = 0; j < JB; ++j) acc0[j] += c0 * b0[j];
    for (size_t j = 0; j < JB; ++j) acc1[j] += c1 * b1[j];
  }
  if (s < steps) {
    const S c0 = coef[s * stride];
    const S* __restrict b0 = b + s * n;
    for (size_t j = 0; j < JB; ++j) acc0[j] += c0 * b0[j];
  }
  for (size_t j = 0; j < JB; ++j) crow[j] = acc0[j] + acc1[j];
}

// 16-wide chunk: one vector per bank, so four banks are needed to keep the
// FMA pipeline busy.
template <typename S>
void gemm_chunk16(const S* __restrict coef, size_t stride, size_t steps,
                  const S* __restrict b, size_t n, S* __restrict crow) {
  constexpr size_t JB = 16;
  S acc0[JB], acc1[JB], acc2[JB], acc3[JB];
  SVAD_VEC_LOOP for (size_t j = 0; j < JB; ++j) acc0[j] = crow[j];
  SVAD_VEC_LOOP for (size_t j = 0; j < JB; ++j) acc1[j] = S(0);
  SVAD_VEC_LOOP for (size_t j = 0; j < JB; ++j) acc2[j] = S(0);
  SVAD_VEC_LOOP for (size_t j = 0; j < JB; ++j) acc3[j] = S(0);
  size_t s = 0;
  for (; s + 4 <= steps; s += 4) {
    const S c0 = coef[s * stride], c1 = coef[(s + 1) * stride];
    const S c2 = coef[(s + 2) * stride], c3 = coef[(s + 3) * stride];
    const S* __restrict b0 = b + s * n;
    const S* __restrict b1 = b0 + n;
    const S* __restrict b2 = b1 + n;
    const S* __restrict b3 = b2 + n;
    SVAD_VEC_LOOP for (size_t j = 0; j < JB; ++j) acc0[j] += c0 * b0[j];
    SVAD_VEC_LOOP for (size_t j = 0; j < JB; ++j) acc1[j] += c1 * b1[j];
    SVAD_VEC_LOOP for (size_t j = 0; j < JB; ++j) acc2[j] += c2 * b2[j];
    SVAD_VEC_LOOP for (size_t j = 0; j < JB; ++j) acc3[j] += c3 * b3[j];
  }
  for (; s < steps; ++s) {
    const S c0 = coef[s * stride];
    const S* __restrict b0 = b + s * n;
    SVAD_VEC_LOOP for (size_t j = 0; j < JB; ++j) acc0[j] += c0 * b0[j];
  }
  SVAD_VEC_LOOP for (size_t j = 0; j < JB; ++j) crow[j] = (acc0[j] + acc1[j]) + (acc2[j] + acc3[j]);
}

// Low-overhead strip for short step counts and narrow tails: C stays in
// memory, four b rows stream per pass so the j loop still vectorizes.
template <typename S>
void gemm_strip(const S* __restrict coef, size_t stride, size_t steps, const S* __restrict b,
                size_t n, S* __restrict crow, size_t jb) {
  size_t s = 0;
  for (; s + 4 <= steps; s += 4) {
    const S c0 = coef[s * stride], c1 = coef[(s + 1) * stride];
    const S c2 = coef[(s + 2) * stride], c3 = coef[(s + 3) * stride];
    const S* __restrict b0 = b + s * n;
    const S* __restrict b1 = b0 + n;
    const S* __restrict b2 = b1 + n;
    const S* __restrict b3 = b2 + n;
    for (size_t j = 0; j < jb; ++j)
      crow[j] += (c0 * b0[j] + c1 * b1[j]) + (c2 * b2[j] + c3 * b3[j]);
  }
  for (; s < steps; ++s) {
    const S cv = coef[s * stride];
    const S* __restrict brow = b + s * n;
    for (size_t j = 0; j < jb; ++j) crow[j] += cv * brow[j];
  }
}

// Two 16-wide output rows, two banks each: pairs of steps share their b rows
// across both coefficient streams, halving b traffic while keeping four
// independent FMA chains.
template <typename S>
void gemm_pair16(const S* __restrict c0p, const S* __restrict c1p, size_t stride, size_t steps,
                 const S* __restrict b, S* __restrict crow0, S* __restrict crow1) {
  constexpr size_t JB = 16;
  S acc[4][JB];
  SVAD_VEC_LOOP for (size_t j = 0; j < JB; ++j) acc[0][j] = crow0[j];
  SVAD_VEC_LOOP for (size_t j = 0; j < JB; ++j) acc[1][j] = S(0);
  SVAD_VEC_LOOP for (size_t j = 0; j < JB; ++j) acc[2][j] = crow1[j];
  SVAD_VEC_LOOP for (size_t j = 0; j < JB; ++j) acc[3][j] = S(0);
  size_t s = 0;
  for (; s + 2 <= steps; s += 2) {
    const S* __restrict b0 = b + s * JB;
    const S* __restrict b1 = b0 + JB;
    const S k00 = c0p[s * stride], k01 = c0p[(s + 1) * stride];
    const S k10 = c1p[s * stride], k11 = c1p[(s + 1) * stride];
    SVAD_VEC_LOOP for (size_t j = 0; j < JB; ++j) acc[0][j] += k00 * b0[j];
    SVAD_VEC_LOOP for (size_t j = 0; j < JB; ++j) acc[2][j] += k10 * b0[j];
    SVAD_VEC_LOOP for (size_t j = 0; j < JB; ++j) acc[1][j] += k01 * b1[j];
    SVAD_VEC_LOOP for (size_t j = 0; j < JB; ++j) acc[3][j] += k11 * b1[j];
  }
  if (s < steps) {
    const S* __restrict b0 = b + s * JB;
    const S k00 = c0p[s * stride], k10 = c1p[s * stride];
    SVAD_VEC_LOOP for (size_t j = 0; j < JB; ++j) acc[0][j] += k00 * b0[j];
    SVAD_VEC_LOOP for (size_t j = 0; j < JB; ++j) acc[2][j] += k10 * b0[j];
  }
  SVAD_VEC_LOOP for (size_t j = 0; j < JB; ++j) crow0[j] = acc[0][j] + acc[1][j];
  SVAD_VEC_LOOP for (size_t j = 0; j < JB; ++j) crow1[j] = acc[2][j] + acc[3][j];
}

template <typename S>
void gemm_row(const S* __restrict coef, size_t stride, size_t steps, const S* __restrict b,
              size_t n, S* __restrict crow) {
  if (steps < 32 || n < 16) {
    gemm_strip(coef, stride, steps, b, n, crow, n);
    return;
  }
  size_t j = 0;
  for (; j + 64 <= n; j += 64) gemm_chunk64(coef, stride, steps, b + j, n, crow + j);
  for (; j + 16 <= n; j += 16) gemm_chunk16(coef, stride, steps, b + j, n, crow + j);
  if (j < n) gemm_strip(coef, stride, steps, b + j, n, crow + j, n - j);
}

// C += A(m x k) * B(k x n).
template <typename S>
void gemm_nn_acc(const S* __restrict a, const S* __restrict b, S* __restrict c,
                 size_t m, size_t k, size_t n) {
  size_t i = 0;
  if (n == 16) {
    for (; i + 2 <= m; i += 2)
      gemm_pair16(a + i * k, a + (i + 1) * k, size_t{1}, k, b, c + i * n, c + (i + 1) * n);
  }
  for (; i < m; ++i) gemm_row(a + i * k, size_t{1}, k, b, n, c + i * n);
}

// C(k x n) += A(m x k)^T * B(m x n); A stays row-major, its column l is the
// coefficient stream for output row l, so no transpose is materialized.
template <typename S>
void gemm_tn_acc(const S* __restrict a, const S* __restrict b, S* __restrict c,
                 size_t m, size_t k, size_t n) {
  size_t l = 0;
  if (n == 16) {
    for (; l + 2 <= k; l += 2)
      gemm_pair16(a + l, a + l + 1, k, m, b, c + l * n, c + (l + 1) * n);
  }
  for (; l < k; ++l) gemm_row(a + l, k, m, b, n, c + l * n);
}

template <typename S>
std::vector<S> transpose_copy(const S* src, size_t m, size_t n) {
  std::vector<S> out(m * n);
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) out[j * m + i] = src[i * n + j];
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops.  Every op: shape-check, forward, then (if tracked and a tape is
// active) register a backward closure that accumulates into parent grads.
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape.rank != 2 || b.shape.rank != 2)
    throw ValidationError("matmul: expected rank-2 operands, got " + a.shape.str() + " and " + b.shape.str());
  const size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  if (b.shape[0] != k)
    throw ValidationError("matmul: inner dims mismatch " + a.shape.str() + " x " + b.shape.str());

  TensorT<S> out = TensorT<S>::zeros(Shape{m, n});
  detail::gemm_nn_acc(a.data(), b.data(), out.mut(), m, k, n);

  if (detail::want_track(a, b)) {
    auto* tape = TapeT<S>::active();
    out.node = tape->add_op(out.numel());
    tape->set_back(out.node, [a, b, on = out.node, m, k, n](TapeT<S>& t) {
      const std::vector<S>& og = t.grad(on);
      if (a.tracked()) {
        // dA += dC * B^T
        std::vector<S> bt = detail::transpose_copy(b.data(), k, n);  // [n,k]
        detail::gemm_nn_acc(og.data(), bt.data(), t.grad(a.node).data(), m, n, k);
      }
      if (b.tracked()) {
        // dB += A^T * dC
        detail::gemm_tn_acc(a.data(), og.data(), t.grad(b.node).data(), m, k, n);
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> transpose(const TensorT<S>& x) {
  if (x.shape.rank != 2) throw ValidationError("transpose: expected rank-2, got " + x.shape.str());
  const size_t m = x.shape[0], n = x.shape[1];
  TensorT<S> out(Shape{n, m}, detail::transpose_copy(x.data(), m, n));
  if (detail::want_track(x)) {
    auto* tape = TapeT<S>::active();
    out.node = tape->add_op(out.numel());
    tape->set_back(out.node, [xn = x.node, on = out.node, m, n](TapeT<S>& t) {
      const std::vector<S>& og = t.grad(on);  // [n,m]
      std::vector<S>& xg = t.grad(xn);
      for (size_t j = 0; j < n; ++j)
        for (size_t i = 0; i < m; ++i) xg[i * n + j] += og[j * m + i];
    });
  }
  return out;
}

template <typename S>
TensorT<S> reshape(const TensorT<S>& x, Shape s) {
  if (s.numel() != x.numel())
    throw ValidationError("reshape: numel mismatch " + x.shape.str() + " -> " + s.str());
  TensorT<S> out;
  out.shape = s;
  out.values = x.values;  // aliasing is safe: op outputs are never mutated
  if (detail::want_track(x)) {
    auto* tape = TapeT<S>::active();
    out.node = tape->add_op(out.numel());
    tape->set_back(out.node, [xn = x.node, on = out.node](TapeT<S>& t) {
      const std::vector<S>& og = t.grad(on);
      std::vector<S>& xg = t.grad(xn);
      for (size_t i = 0; i < og.size(); ++i) xg[i] += og[i];
    });
  }
  return out;
}

namespace detail {

enum class Bcast { Same, Scalar, Row, Col };

template <typename S>
Bcast bcast_kind(const TensorT<S>& a, const TensorT<S>& b, const char* op) {
  if (a.shape == b.shape) return Bcast::Same;
  if (b.numel() == 1) return Bcast::Scalar;
  if (a.shape.rank == 2) {
    const size_t m = a.shape[0], n = a.shape[1];
    if ((b.shape.rank == 1 && b.shape[0] == n) ||
        (b.shape.rank == 2 && b.shape[0] == 1 && b.shape[1] == n))
      return Bcast::Row;
    if (b.shape.rank == 2 && b.shape[0] == m && b.shape[1] == 1) return Bcast::Col;
  }
  throw ValidationError(std::string(op) + ": incompatible shapes " + a.shape.str() + " vs " + b.shape.str());
}

// Index of the b element paired with flat index i of a.
inline size_t bcast_index(Bcast k, size_t i, size_t n) {
  switch (k) {
    case Bcast::Same: return i;
    case Bcast::Scalar: return 0;
    case Bcast::Row: return i % n;
    case Bcast::Col: return i / n;
  }
  return 0;
}

template <typename S, typename FwdFn, typename BackA, typename BackB>
TensorT<S> binary_op(const char* name, const TensorT<S>& a, const TensorT<S>& b,
                     FwdFn fwd, BackA back_a, BackB back_b) {
  const Bcast kind = bcast_kind(a, b, name);
  const size_t n = a.shape.rank == 2 ? a.shape[1] : a.numel();
  TensorT<S> out = TensorT<S>::zeros(a.shape);
  {
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.mut();
    for (size_t i = 0; i < a.numel(); ++i) po[i] = fwd(pa[i], pb[bcast_index(kind, i, n)]);
  }
  if (want_track(a, b)) {
    auto* tape = TapeT<S>::active();
    out.node = tape->add_op(out.numel());
    tape->set_back(out.node, [a, b, on = out.node, kind, n, back_a, back_b](TapeT<S>& t) {
      const std::vector<S>& og = t.grad(on);
      const S* pa = a.data();
      const S* pb = b.data();
      if (a.tracked()) {
        std::vector<S>& ag = t.grad(a.node);
        for (size_t i = 0; i < og.size(); ++i)
          ag[i] += back_a(og[i], pa[i], pb[bcast_index(kind, i, n)]);
      }
      if (b.tracked()) {
        std::vector<S>& bg = t.grad(b.node);
        for (size_t i = 0; i < og.size(); ++i)
          bg[bcast_index(kind, i, n)] += back_b(og[i], pa[i], pb[bcast_index(kind, i, n)]);
      }
    });
  }
  return out;
}

}  // namespace detail

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  return detail::binary_op(
      "add", a, b, [](S x, S y) { return x + y; },
      [](S g, S, S) { return g; }, [](S g, S, S) { return g; });
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  return detail::binary_op(
      "sub", a, b, [](S x, S y) { return x - y; },
      [](S g, S, S) { return g; }, [](S g, S, S) { return -g; });
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  return detail::binary_op(
      "mul", a, b, [](S x, S y) { return x * y; },
      [](S g, S, S y) { return g * y; }, [](S g, S x, S) { return g * x; });
}

template <typename S>
TensorT<S> divide(const TensorT<S>& a, const TensorT<S>& b) {
  return detail::binary_op(
      "divide", a, b, [](S x, S y) { return x / y; },
      [](S g, S, S y) { return g / y; }, [](S g, S x, S y) { return -g * x / (y * y); });
}

namespace detail {

template <typename S, typename FwdFn, typename BackFn>
TensorT<S> unary_op(const TensorT<S>& x, FwdFn fwd, BackFn back) {
  TensorT<S> out = TensorT<S>::zeros(x.shape);
  {
    const S* px = x.data();
    S* po = out.mut();
    for (size_t i = 0; i < x.numel(); ++i) po[i] = fwd(px[i]);
  }
  if (want_track(x)) {
    auto* tape = TapeT<S>::active();
    out.node = tape->add_op(out.numel());
    tape->set_back(out.node, [x, ov = out.values, on = out.node, back](TapeT<S>& t) {
      const std::vector<S>& og = t.grad(on);
      std::vector<S>& xg = t.grad(x.node);
      const S* px = x.data();
      const S* po = ov->data();
      for (size_t i = 0; i < og.size(); ++i) xg[i] += back(og[i], px[i], po[i]);
    });
  }
  return out;
}

}  // namespace detail

template <typename S>
TensorT<S> scale(const TensorT<S>& x, S c) {
  return detail::unary_op(
      x, [c](S v) { return v * c; }, [c](S g, S, S) { return g * c; });
}

template <typename S>
TensorT<S> add_scalar(const TensorT<S>& x, S c) {
  return detail::unary_op(
      x, [c](S v) { return v + c; }, [](S g, S, S) { return g; });
}

// Subgradient at 0 is 0: gradient flows only where the input is strictly positive.
template <typename S>
TensorT<S> relu(const TensorT<S>& x) {
  return detail::unary_op(
      x, [](S v) { return v > S(0) ? v : S(0); },
      [](S g, S v, S) { return v > S(0) ? g : S(0); });
}

template <typename S>
TensorT<S> sigmoid(const TensorT<S>& x) {
  return detail::unary_op(
      x, [](S v) { return S(1) / (S(1) + std::exp(-v)); },
      [](S g, S, S y) { return g * y * (S(1) - y); });
}

template <typename S>
TensorT<S> silu(const TensorT<S>& x) {
  return detail::unary_op(
      x,
      [](S v) {
        const S s = S(1) / (S(1) + std::exp(-v));
        return v * s;
      },
      [](S g, S v, S) {
        const S s = S(1) / (S(1) + std::exp(-v));
        return g * s * (S(1) + v * (S(1) - s));
      });
}

template <typename S>
TensorT<S> sqrt_(const TensorT<S>& x) {
  return detail::unary_op(
      x, [](S v) { return std::sqrt(v); },
      [](S g, S, S y) { return g * S(0.5) / y; });
}

// Row-wise softmax over the last axis of a rank-1 or rank-2 tensor,
// stabilized by subtracting the row maximum.
template <typename S>
TensorT<S> softmax(const TensorT<S>& x) {
  if (x.shape.rank < 1 || x.shape.rank > 2)
    throw ValidationError("softmax: expected rank-1 or rank-2, got " + x.shape.str());
  const size_t m = x.shape.rank == 2 ? x.shape[0] : 1;
  const size_t n = x.shape.rank == 2 ? x.shape[1] : x.shape[0];
  TensorT<S> out = TensorT<S>::zeros(x.shape);
  {
    const S* px = x.data();
    S* po = out.mut();
    for (size_t i = 0; i < m; ++i) {
      const S* row = px + i * n;
      S* orow = po + i * n;
      S mx = row[0];
      for (size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
      S sum = S(0);
      for (size_t j = 0; j < n; ++j) {
        orow[j] = std::exp(row[j] - mx);
        sum += orow[j];
      }
      for (size_t j = 0; j < n; ++j) orow[j] /= sum;
    }
  }
  if (detail::want_track(x)) {
    auto* tape = TapeT<S>::active();
    out.node = tape->add_op(out.numel());
    tape->set_back(out.node, [xn = x.node, ov = out.values, on = out.node, m, n](TapeT<S>& t) {
      const std::vector<S>& og = t.grad(on);
      std::vector<S>& xg = t.grad(xn);
      const S* po = ov->data();
      for (size_t i = 0; i < m; ++i) {
        const S* y = po + i * n;
        const S* gy = og.data() + i * n;
        S dot = S(0);
        for (size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
        for (size_t j = 0; j < n; ++j) xg[i * n + j] += y[j] * (gy[j] - dot);
      }
    });
  }
  return out;
}

// Per-row normalization with learned gain/bias; biased variance.
template <typename S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                      S eps = S(1e-5)) {
  if (x.shape.rank != 2) throw ValidationError("layer_norm: expected rank-2 input, got " + x.shape.str());
  const size_t m = x.shape[0], n = x.shape[1];
  if (gamma.numel() != n || beta.numel() != n)
    throw ValidationError("layer_norm: gain/bias must have " + std::to_string(n) + " elements");

  TensorT<S> out = TensorT<S>::zeros(x.shape);
  auto mean_v = std::make_shared<std::vector<S>>(m);
  auto rstd_v = std::make_shared<std::vector<S>>(m);
  {
    const S* px = x.data();
    const S* pg = gamma.data();
    const S* pb = beta.data();
    S* po = out.mut();
    for (size_t i = 0; i < m; ++i) {
      const S* row = px + i * n;
      S mu = S(0);
      for (size_t j = 0; j < n; ++j) mu += row[j];
      mu /= S(n);
      S var = S(0);
      for (size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
      var /= S(n);
      const S r = S(1) / std::sqrt(var + eps);
      (*mean_v)[i] = mu;
      (*rstd_v)[i] = r;
      for (size_t j = 0; j < n; ++j) po[i * n + j] = pg[j] * (row[j] - mu) * r + pb[j];
    }
  }
  if (detail::want_track(x, gamma) || detail::want_track(x, beta)) {
    auto* tape = TapeT<S>::active();
    out.node = tape->add_op(out.numel());
    tape->set_back(out.node,
                   [x, gamma, beta, mean_v, rstd_v, on = out.node, m, n](TapeT<S>& t) {
      const std::vector<S>& og = t.grad(on);
      const S* px = x.data();
      const S* pg = gamma.data();
      for (size_t i = 0; i < m; ++i) {
        const S mu = (*mean_v)[i];
        const S r = (*rstd_v)[i];
        const S* row = px + i * n;
        const S* gy = og.data() + i * n;
        if (gamma.tracked()) {
          std::vector<S>& gg = t.grad(gamma.node);
          for (size_t j = 0; j < n; ++j) gg[j] += gy[j] * (row[j] - mu) * r;
        }
        if (beta.tracked()) {
          std::vector<S>& bg = t.grad(beta.node);
          for (size_t j = 0; j < n; ++j) bg[j] += gy[j];
        }
        if (x.tracked()) {
          std::vector<S>& xg = t.grad(x.node);
          S mean_g = S(0), mean_gx = S(0);
          for (size_t j = 0; j < n; ++j) {
            const S gj = gy[j] * pg[j];
            mean_g += gj;
            mean_gx += gj * (row[j] - mu) * r;
          }
          mean_g /= S(n);
          mean_gx /= S(n);
          for (size_t j = 0; j < n; ++j) {
            const S gj = gy[j] * pg[j];
            const S xh = (row[j] - mu) * r;
            xg[i * n + j] += (gj - mean_g - xh * mean_gx) * r;
          }
        }
      }
    });
  }
  return out;
}

namespace detail {

template <typename S>
TensorT<S> reduce_all(const TensorT<S>& x, S denom) {
  S acc = S(0);
  for (S v : *x.values) acc += v;
  TensorT<S> out = TensorT<S>::scalar_of(acc / denom);
  if (want_track(x)) {
    auto* tape = TapeT<S>::active();
    out.node = tape->add_op(1);
    tape->set_back(out.node, [xn = x.node, on = out.node, denom](TapeT<S>& t) {
      const S g = t.grad(on)[0] / denom;
      std::vector<S>& xg = t.grad(xn);
      for (size_t i = 0; i < xg.size(); ++i) xg[i] += g;
    });
  }
  return out;
}

}  // namespace detail

template <typename S>
TensorT<S> sum(const TensorT<S>& x) {
  return detail::reduce_all(x, S(1));
}

template <typename S>
TensorT<S> mean(const TensorT<S>& x) {
  return detail::reduce_all(x, static_cast<S>(x.numel()));
}

// Column means of a rank-2 tensor -> rank-1 [n].
template <typename S>
TensorT<S> mean_axis0(const TensorT<S>& x) {
  if (x.shape.rank != 2) throw ValidationError("mean_axis0: expected rank-2, got " + x.shape.str());
  const size_t m = x.shape[0], n = x.shape[1];
  TensorT<S> out = TensorT<S>::zeros(Shape{n});
  {
    const S* px = x.data();
    S* po = out.mut();
    for (size_t i = 0; i < m; ++i)
      for (size_t j = 0; j < n; ++j) po[j] += px[i * n + j];
    for (size_t j = 0; j < n; ++j) po[j] /= S(m);
  }
  if (detail::want_track(x)) {
    auto* tape = TapeT<S>::active();
    out.node = tape->add_op(n);
    tape->set_back(out.node, [xn = x.node, on = out.node, m, n](TapeT<S>& t) {
      const std::vector<S>& og = t.grad(on);
      std::vector<S>& xg = t.grad(xn);
      for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) xg[i * n + j] += og[j] / S(m);
    });
  }
  return out;
}

// Row sums of a rank-2 tensor -> [m,1] column.
template <typename S>
TensorT<S> sum_axis1(const TensorT<S>& x) {
  if (x.shape.rank != 2) throw ValidationError("sum_axis1: expected rank-2, got " + x.shape.str());
  const size_t m = x.shape[0], n = x.shape[1];
  TensorT<S> out = TensorT<S>::zeros(Shape{m, 1});
  {
    const S* px = x.data();
    S* po = out.mut();
    for (size_t i = 0; i < m; ++i) {
      S acc = S(0);
      for (size_t j = 0; j < n; ++j) acc += px[i * n + j];
      po[i] = acc;
    }
  }
  if (detail::want_track(x)) {
    auto* tape = TapeT<S>::active();
    out.node = tape->add_op(m);
    tape->set_back(out.node, [xn = x.node, on = out.node, m, n](TapeT<S>& t) {
      const std::vector<S>& og = t.grad(on);
      std::vector<S>& xg = t.grad(xn);
      for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) xg[i * n + j] += og[i];
    });
  }
  return out;
}

// Concatenation of rank-2 tensors along axis 0 (rows) or 1 (cols).
template <typename S>
TensorT<S> concat(int axis, const std::vector<TensorT<S>>& parts) {
  if (parts.empty()) throw ValidationError("concat: no inputs");
  if (axis != 0 && axis != 1) throw ValidationError("concat: axis must be 0 or 1");
  for (const auto& p : parts)
    if (p.shape.rank != 2) throw ValidationError("concat: expected rank-2 parts, got " + p.shape.str());

  size_t m = parts[0].shape[0], n = parts[0].shape[1];
  for (size_t i = 1; i < parts.size(); ++i) {
    if (axis == 0) {
      if (parts[i].shape[1] != n)
        throw ValidationError("concat: column mismatch " + parts[i].shape.str());
      m += parts[i].shape[0];
    } else {
      if (parts[i].shape[0] != m)
        throw ValidationError("concat: row mismatch " + parts[i].shape.str());
      n += parts[i].shape[1];
    }
  }

  TensorT<S> out = TensorT<S>::zeros(Shape{m, n});
  {
    S* po = out.mut();
    if (axis == 0) {
      size_t off = 0;
      for (const auto& p : parts) {
        std::memcpy(po + off, p.data(), p.numel() * sizeof(S));
        off += p.numel();
      }
    } else {
      size_t coff = 0;
      for (const auto& p : parts) {
        const size_t pc = p.shape[1];
        for (size_t i = 0; i < m; ++i)
          std::memcpy(po + i * n + coff, p.data() + i * pc, pc * sizeof(S));
        coff += pc;
      }
    }
  }

  bool any_tracked = false;
  for (const auto& p : parts) any_tracked |= p.tracked();
  if (TapeT<S>::active() && any_tracked) {
    auto* tape = TapeT<S>::active();
    out.node = tape->add_op(out.numel());
    tape->set_back(out.node, [parts, on = out.node, axis, m, n](TapeT<S>& t) {
      const std::vector<S>& og = t.grad(on);
      if (axis == 0) {
        size_t off = 0;
        for (const auto& p : parts) {
          if (p.tracked()) {
            std::vector<S>& pg = t.grad(p.node);
            for (size_t i = 0; i < p.numel(); ++i) pg[i] += og[off + i];
          }
          off += p.numel();
        }
      } else {
        size_t coff = 0;
        for (const auto& p : parts) {
          const size_t pc = p.shape[1];
          if (p.tracked()) {
            std::vector<S>& pg = t.grad(p.node);
            for (size_t i = 0; i < m; ++i)
              for (size_t j = 0; j < pc; ++j) pg[i * pc + j] += og[i * n + coff + j];
          }
          coff += pc;
        }
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> slice_rows(const TensorT<S>& x, size_t r0, size_t r1) {
  if (x.shape.rank != 2) throw ValidationError("slice_rows: expected rank-2, got " + x.shape.str());
  const size_t m = x.shape[0], n = x.shape[1];
  if (r0 > r1 || r1 > m) throw ValidationError("slice_rows: bad range");
  TensorT<S> out(Shape{r1 - r0, n},
                 std::vector<S>(x.data() + r0 * n, x.data() + r1 * n));
  if (detail::want_track(x)) {
    auto* tape = TapeT<S>::active();
    out.node = tape->add_op(out.numel());
    tape->set_back(out.node, [xn = x.node, on = out.node, r0, n](TapeT<S>& t) {
      const std::vector<S>& og = t.grad(on);
      std::vector<S>& xg = t.grad(xn);
      for (size_t i = 0; i < og.size(); ++i) xg[r0 * n + i] += og[i];
    });
  }
  return out;
}

template <typename S>
TensorT<S> slice_cols(const TensorT<S>& x, size_t c0, size_t c1) {
  if (x.shape.rank != 2) throw ValidationError("slice_cols: expected rank-2, got " + x.shape.str());
  const size_t m = x.shape[0], n = x.shape[1];
  if (c0 > c1 || c1 > n) throw ValidationError("slice_cols: bad range");
  const size_t w = c1 - c0;
  TensorT<S> out = TensorT<S>::zeros(Shape{m, w});
  {
    const S* px = x.data();
    S* po = out.mut();
    for (size_t i = 0; i < m; ++i)
      std::memcpy(po + i * w, px + i * n + c0, w * sizeof(S));
  }
  if (detail::want_track(x)) {
    auto* tape = TapeT<S>::active();
    out.node = tape->add_op(out.numel());
    tape->set_back(out.node, [xn = x.node, on = out.node, m, n, c0, w](TapeT<S>& t) {
      const std::vector<S>& og = t.grad(on);
      std::vector<S>& xg = t.grad(xn);
      for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < w; ++j) xg[i * n + c0 + j] += og[i * w + j];
    });
  }
  return out;
}

// Rows of x selected by idx (duplicates allowed); backward scatter-adds.
template <typename S>
TensorT<S> gather_rows(const TensorT<S>& x, const std::vector<size_t>& idx) {
  if (x.shape.rank != 2) throw ValidationError("gather_rows: expected rank-2, got " + x.shape.str());
  const size_t m = x.shape[0], n = x.shape[1];
  for (size_t r : idx)
    if (r >= m) throw ValidationError("gather_rows: index out of range");
  TensorT<S> out = TensorT<S>::zeros(Shape{idx.size(), n});
  {
    const S* px = x.data();
    S* po = out.mut();
    for (size_t r = 0; r < idx.size(); ++r)
      std::memcpy(po + r * n, px + idx[r] * n, n * sizeof(S));
  }
  if (detail::want_track(x)) {
    auto* tape = TapeT<S>::active();
    out.node = tape->add_op(out.numel());
    tape->set_back(out.node, [xn = x.node, on = out.node, idx, n](TapeT<S>& t) {
      const std::vector<S>& og = t.grad(on);
      std::vector<S>& xg = t.grad(xn);
      for (size_t r = 0; r < idx.size(); ++r)
        for (size_t j = 0; j < n; ++j) xg[idx[r] * n + j] += og[r * n + j];
    });
  }
  return out;
}

// out = base with rows[r,:] added at row idx[r]; duplicates accumulate.
template <typename S>
TensorT<S> scatter_add_rows(const TensorT<S>& base, const std::vector<size_t>& idx,
                            const TensorT<S>& rows) {
  if (base.shape.rank != 2 || rows.shape.rank != 2)
    throw ValidationError("scatter_add_rows: expected rank-2 operands");
  const size_t m = base.shape[0], n = base.shape[1];
  if (rows.shape[1] != n || rows.shape[0] != idx.size())
    throw ValidationError("scatter_add_rows: rows shape " + rows.shape.str() +
                          " does not match " + std::to_string(idx.size()) + " indices of width " +
                          std::to_string(n));
  for (size_t r : idx)
    if (r >= m) throw ValidationError("scatter_add_rows: index out of range");

  TensorT<S> out(base.shape, *base.values);
  {
    const S* pr = rows.data();
    S* po = out.mut();
    for (size_t r = 0; r < idx.size(); ++r)
      for (size_t j = 0; j < n; ++j) po[idx[r] * n + j] += pr[r * n + j];
  }
  if (detail::want_track(base, rows)) {
    auto* tape = TapeT<S>::active();
    out.node = tape->add_op(out.numel());
    tape->set_back(out.node, [bn = base.node, rn = rows.node, on = out.node, idx, n](TapeT<S>& t) {
      const std::vector<S>& og = t.grad(on);
      if (bn >= 0) {
        std::vector<S>& bg = t.grad(bn);
        for (size_t i = 0; i < og.size(); ++i) bg[i] += og[i];
      }
      if (rn >= 0) {
        std::vector<S>& rg = t.grad(rn);
        for (size_t r = 0; r < idx.size(); ++r)
          for (size_t j = 0; j < n; ++j) rg[r * n + j] += og[idx[r] * n + j];
      }
    });
  }
  return out;
}

// Patch rows -> [C,H,W] image.  Patch r covers the p x p block at
// (r / (W/p), r % (W/p)); within a row the layout is (c, dy, dx).
template <typename S>
TensorT<S> patches_to_image(const TensorT<S>& patches, size_t channels, size_t height,
                            size_t width, size_t p) {
  if (patches.shape.rank != 2) throw ValidationError("patches_to_image: expected rank-2 input");
  if (height % p != 0 || width % p != 0)
    throw ValidationError("patches_to_image: image extent not divisible by patch size");
  const size_t gw = width / p, gh = height / p;
  const size_t np = gh * gw, pd = p * p * channels;
  if (patches.shape[0] != np || patches.shape[1] != pd)
    throw ValidationError("patches_to_image: got " + patches.shape.str() + ", expected [" +
                          std::to_string(np) + ", " + std::to_string(pd) + "]");

  TensorT<S> out = TensorT<S>::zeros(Shape{channels, height, width});
  {
    const S* pp = patches.data();
    S* po = out.mut();
    for (size_t r = 0; r < np; ++r) {
      const size_t gy = r / gw, gx = r % gw;
      for (size_t c = 0; c < channels; ++c)
        for (size_t dy = 0; dy < p; ++dy)
          for (size_t dx = 0; dx < p; ++dx)
            po[c * height * width + (gy * p + dy) * width + (gx * p + dx)] =
                pp[r * pd + (c * p + dy) * p + dx];
    }
  }
  if (detail::want_track(patches)) {
    auto* tape = TapeT<S>::active();
    out.node = tape->add_op(out.numel());
    tape->set_back(out.node,
                   [xn = patches.node, on = out.node, channels, height, width, p, gw, np, pd](TapeT<S>& t) {
      const std::vector<S>& og = t.grad(on);
      std::vector<S>& xg = t.grad(xn);
      for (size_t r = 0; r < np; ++r) {
        const size_t gy = r / gw, gx = r % gw;
        for (size_t c = 0; c < channels; ++c)
          for (size_t dy = 0; dy < p; ++dy)
            for (size_t dx = 0; dx < p; ++dx)
              xg[r * pd + (c * p + dy) * p + dx] +=
                  og[c * height * width + (gy * p + dy) * width + (gx * p + dx)];
      }
    });
  }
  return out;
}

// Inverse of patches_to_image for plain (untracked) image data.
template <typename S>
TensorT<S> image_to_patches(const TensorT<S>& image, size_t channels, size_t height,
                            size_t width, size_t p) {
  if (image.numel() != channels * height * width)
    throw ValidationError("image_to_patches: image numel mismatch");
  if (height % p != 0 || width % p != 0)
    throw ValidationError("image_to_patches: image extent not divisible by patch size");
  const size_t gw = width / p, gh = height / p;
  const size_t np = gh * gw, pd = p * p * channels;
  TensorT<S> out = TensorT<S>::zeros(Shape{np, pd});
  const S* pi = image.data();
  S* po = out.mut();
  for (size_t r = 0; r < np; ++r) {
    const size_t gy = r / gw, gx = r % gw;
    for (size_t c = 0; c < channels; ++c)
      for (size_t dy = 0; dy < p; ++dy)
        for (size_t dx = 0; dx < p; ++dx)
          po[r * pd + (c * p + dy) * p + dx] =
              pi[c * height * width + (gy * p + dy) * width + (gx * p + dx)];
  }
  return out;
}

// Multi-head softmax(Q K^T / sqrt(d_head)) V, built from primitive ops.
// Columns are split into `heads` contiguous groups; outputs re-concatenated.
template <typename S>
TensorT<S> scaled_dot_product_attention(const TensorT<S>& q, const TensorT<S>& k,
                                        const TensorT<S>& v, size_t heads = 1) {
  if (q.shape.rank != 2 || k.shape.rank != 2 || v.shape.rank != 2)
    throw ValidationError("attention: expected rank-2 q/k/v");
  if (q.shape[1] != k.shape[1] || k.shape[0] != v.shape[0] || v.shape[1] != q.shape[1])
    throw ValidationError("attention: shape mismatch q=" + q.shape.str() + " k=" + k.shape.str() +
                          " v=" + v.shape.str());
  const size_t d = q.shape[1];
  if (heads == 0 || d % heads != 0)
    throw ValidationError("attention: dim " + std::to_string(d) + " not divisible by " +
                          std::to_string(heads) + " heads");
  const size_t dh = d / heads;
  const S inv = S(1) / std::sqrt(static_cast<S>(dh));

  auto one_head = [&](const TensorT<S>& qh, const TensorT<S>& kh, const TensorT<S>& vh) {
    TensorT<S> scores = scale(matmul(qh, transpose(kh)), inv);
    return matmul(softmax(scores), vh);
  };
  if (heads == 1) return one_head(q, k, v);

  std::vector<TensorT<S>> outs;
  outs.reserve(heads);
  for (size_t h = 0; h < heads; ++h) {
    const size_t c0 = h * dh, c1 = c0 + dh;
    outs.push_back(one_head(slice_cols(q, c0, c1), slice_cols(k, c0, c1), slice_cols(v, c0, c1)));
  }
  return concat(1, outs);
}

// ---------------------------------------------------------------------------
// Initializers.
// ---------------------------------------------------------------------------

inline double sample_normal(Rng& rng) {
  const double u1 = 1.0 - rng.next_double();  // (0,1]
  const double u2 = rng.next_double();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

template <typename S>
TensorT<S> randn(Shape s, Rng& rng, double stddev) {
  std::vector<S> v(s.numel());
  for (auto& x : v) x = static_cast<S>(sample_normal(rng) * stddev);
  return TensorT<S>(s, std::move(v));
}

template <typename S>
TensorT<S> rand_uniform(Shape s, Rng& rng, double lo, double hi) {
  std::vector<S> v(s.numel());
  for (auto& x : v) x = static_cast<S>(rng.uniform(lo, hi));
  return TensorT<S>(s, std::move(v));
}

}  // namespace svad

#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <vector>

#include "svad/tensor.hpp"

namespace svad {

// Sparse feature filtering: a mixture of bottleneck filter experts with a
// linear router, top-k gating over the routing experts, always-on shared
// experts, and load statistics feeding the expert-balance loss.

struct SffmConfig {
  size_t n_experts = 64;      // N
  size_t k_shared = 1;        // K_s (always-applied experts)
  size_t k_active = 8;        // K (total active per token, shared included)
  size_t dim = 64;            // d
  size_t reduction_rate = 4;  // r; bottleneck width d_b = d / r
  double alpha = 0.001;       // balance factor

  size_t n_routing() const { return n_experts - k_shared; }
  size_t k_routed() const { return k_active - k_shared; }
  size_t bottleneck_dim() const { return dim / reduction_rate; }

  void validate() const {
    if (n_experts < 1) throw ValidationError("sffm: need at least one expert");
    if (k_shared > k_active) throw ValidationError("sffm: k_shared exceeds k_active");
    if (k_active > n_experts) throw ValidationError("sffm: k_active exceeds n_experts");
    if (k_shared >= n_experts)
      throw ValidationError("sffm: at least one routing expert required");
    if (k_routed() > n_routing())
      throw ValidationError("sffm: more routed activations than routing experts");
    if (reduction_rate < 1) throw ValidationError("sffm: reduction_rate must be >= 1");
    const size_t db = bottleneck_dim();
    if (db < 1 || db >= dim)
      throw ValidationError("sffm: bottleneck width must satisfy 1 <= d/r < d, got " +
                            std::to_string(db) + " for d=" + std::to_string(dim));
  }
};

// Reduce -> SiLU -> Expand, hidden width d_b < d, no skip path.
template <typename S>
struct BottleneckFilterT {
  TensorT<S> reduce_w, reduce_b;  // [d,d_b], [d_b]
  TensorT<S> expand_w, expand_b;  // [d_b,d], [d]
};

using BottleneckFilter = BottleneckFilterT<float>;

template <typename S>
BottleneckFilterT<S> make_bottleneck_filter(size_t d, size_t d_b, Rng& rng) {
  BottleneckFilterT<S> f;
  const double lim_r = 1.0 / std::sqrt(static_cast<double>(d));
  const double lim_e = 1.0 / std::sqrt(static_cast<double>(d_b));
  f.reduce_w = rand_uniform<S>(Shape{d, d_b}, rng, -lim_r, lim_r);
  f.reduce_b = TensorT<S>::zeros(Shape{d_b});
  f.expand_w = rand_uniform<S>(Shape{d_b, d}, rng, -lim_e, lim_e);
  f.expand_b = TensorT<S>::zeros(Shape{d});
  return f;
}

template <typename S>
TensorT<S> bff_forward(const TensorT<S>& x, const BottleneckFilterT<S>& f) {
  if (x.shape.rank != 2 || x.shape[1] != f.reduce_w.shape[0])
    throw ValidationError("bff_forward: input " + x.shape.str() + " does not match reduce " +
                          f.reduce_w.shape.str());
  TensorT<S> h = silu(add(matmul(x, f.reduce_w), f.reduce_b));
  return add(matmul(h, f.expand_w), f.expand_b);
}

// Row-wise softmax over the linear routing projection (no bias).
template <typename S>
TensorT<S> route(const TensorT<S>& x, const TensorT<S>& router_w) {
  return softmax(matmul(x, router_w));
}

struct GatingDecision {
  size_t k_routed = 0;
  std::vector<std::vector<size_t>> indices;  // per token, size k_routed, ascending score order not guaranteed
  std::vector<std::vector<double>> gates;    // matching softmax scores
};

// Top-k selection on raw score values; ties broken toward the lower index.
template <typename S>
GatingDecision select_topk(const TensorT<S>& scores, size_t k) {
  if (scores.shape.rank != 2)
    throw ValidationError("select_topk: expected rank-2 scores, got " + scores.shape.str());
  const size_t T = scores.shape[0], n = scores.shape[1];
  if (k > n)
    throw ValidationError("select_topk: k=" + std::to_string(k) + " exceeds " + std::to_string(n) +
                          " routing experts");
  GatingDecision d;
  d.k_routed = k;
  d.indices.resize(T);
  d.gates.resize(T);
  std::vector<size_t> order(n);
  for (size_t t = 0; t < T; ++t) {
    const S* row = scores.data() + t * n;
    std::iota(order.begin(), order.end(), size_t{0});
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [row](size_t a, size_t b) {
      if (row[a] != row[b]) return row[a] > row[b];
      return a < b;
    });
    d.indices[t].assign(order.begin(), order.begin() + k);
    std::sort(d.indices[t].begin(), d.indices[t].end());
    d.gates[t].resize(k);
    for (size_t j = 0; j < k; ++j) d.gates[t][j] = static_cast<double>(row[d.indices[t][j]]);
  }
  return d;
}

struct ExpertLoadStats {
  std::vector<int64_t> counts;      // selections per routing expert
  std::vector<double> mean_scores;  // p_i
  size_t tokens = 0;                // T
};

// alpha * sum_i f_i * p_i with f_i = (N - K_s) / ((K - K_s) * T) * count_i.
inline double expert_balance_loss(const ExpertLoadStats& stats, const SffmConfig& cfg) {
  if (stats.tokens == 0 || cfg.k_routed() == 0) return 0.0;
  const double norm = static_cast<double>(cfg.n_routing()) /
                      (static_cast<double>(cfg.k_routed()) * static_cast<double>(stats.tokens));
  double acc = 0.0;
  for (size_t i = 0; i < stats.counts.size(); ++i)
    acc += norm * static_cast<double>(stats.counts[i]) * stats.mean_scores[i];
  return cfg.alpha * acc;
}

namespace detail {

// All selected routing experts evaluated as one tape node: tokens are grouped
// per expert so each expert runs two small GEMMs instead of per-token matvecs.
// y[t] = sum over selected e of gate[t,e] * BFF_e(x[t]).
template <typename S>
TensorT<S> routed_mix(const TensorT<S>& x, const TensorT<S>& scores, const GatingDecision& dec,
                      const std::vector<BottleneckFilterT<S>>& experts, size_t first_routed) {
  const size_t T = x.shape[0], d = x.shape[1];
  const size_t n_routing = scores.shape[1];
  const size_t d_b = experts[first_routed].reduce_w.shape[1];

  // Token groups per expert.
  std::vector<std::vector<size_t>> groups(n_routing);
  for (size_t t = 0; t < T; ++t)
    for (size_t e : dec.indices[t]) groups[e].push_back(t);

  struct Saved {
    std::vector<size_t> tokens;
    std::vector<S> hpre, h, y;  // [rows,d_b], [rows,d_b], [rows,d] pre-gate
  };
  auto saved = std::make_shared<std::vector<Saved>>(n_routing);

  TensorT<S> out = TensorT<S>::zeros(Shape{T, d});
  {
    S* po = out.mut();
    const S* px = x.data();
    const S* ps = scores.data();
    std::vector<S> xe;
    for (size_t e = 0; e < n_routing; ++e) {
      const auto& toks = groups[e];
      if (toks.empty()) continue;
      const auto& f = experts[first_routed + e];
      const size_t rows = toks.size();
      xe.assign(rows * d, S(0));
      for (size_t r = 0; r < rows; ++r)
        std::copy(px + toks[r] * d, px + (toks[r] + 1) * d, xe.begin() + r * d);

      Saved& sv = (*saved)[e];
      sv.tokens = toks;
      sv.hpre.assign(rows * d_b, S(0));
      for (size_t r = 0; r < rows; ++r)
        std::copy(f.reduce_b.data(), f.reduce_b.data() + d_b, sv.hpre.begin() + r * d_b);
      gemm_nn_acc(xe.data(), f.reduce_w.data(), sv.hpre.data(), rows, d, d_b);
      sv.h.resize(rows * d_b);
      for (size_t i = 0; i < sv.h.size(); ++i) {
        const S v = sv.hpre[i];
        sv.h[i] = v / (S(1) + std::exp(-v));
      }
      sv.y.assign(rows * d, S(0));
      for (size_t r = 0; r < rows; ++r)
        std::copy(f.expand_b.data(), f.expand_b.data() + d, sv.y.begin() + r * d);
      gemm_nn_acc(sv.h.data(), f.expand_w.data(), sv.y.data(), rows, d_b, d);

      for (size_t r = 0; r < rows; ++r) {
        const S g = ps[toks[r] * n_routing + e];
        S* orow = po + toks[r] * d;
        const S* yrow = sv.y.data() + r * d;
        for (size_t j = 0; j < d; ++j) orow[j] += g * yrow[j];
      }
    }
  }

  bool any_tracked = x.tracked() || scores.tracked();
  for (size_t e = 0; e < n_routing && !any_tracked; ++e)
    any_tracked |= experts[first_routed + e].reduce_w.tracked();
  auto* tape = TapeT<S>::active();
  if (!tape || !any_tracked) return out;

  out.node = tape->add_op(out.numel());
  tape->set_back(out.node, [x, scores, experts, first_routed, saved, on = out.node, d, d_b,
                            n_routing](TapeT<S>& t) {
    const std::vector<S>& og = t.grad(on);
    const S* px = x.data();
    const S* ps = scores.data();
    std::vector<S> dye, dh, dhpre, xe, dxe, trans;
    for (size_t e = 0; e < n_routing; ++e) {
      const Saved& sv = (*saved)[e];
      if (sv.tokens.empty()) continue;
      const auto& f = experts[first_routed + e];
      const size_t rows = sv.tokens.size();

      // Gate-scaled output grads and the gate grads themselves.
      dye.assign(rows * d, S(0));
      for (size_t r = 0; r < rows; ++r) {
        const size_t tok = sv.tokens[r];
        const S g = ps[tok * n_routing + e];
        const S* grow = og.data() + tok * d;
        S* drow = dye.data() + r * d;
        const S* yrow = sv.y.data() + r * d;
        S gd = S(0);
        for (size_t j = 0; j < d; ++j) {
          drow[j] = g * grow[j];
          gd += grow[j] * yrow[j];
        }
        if (scores.tracked()) t.grad(scores.node)[tok * n_routing + e] += gd;
      }

      if (f.expand_w.tracked()) {
        // d expand_w = h^T * dye
        gemm_tn_acc(sv.h.data(), dye.data(), t.grad(f.expand_w.node).data(), rows, d_b, d);
      }
      if (f.expand_b.tracked()) {
        std::vector<S>& bg = t.grad(f.expand_b.node);
        for (size_t r = 0; r < rows; ++r)
          for (size_t j = 0; j < d; ++j) bg[j] += dye[r * d + j];
      }

      dh.assign(rows * d_b, S(0));
      trans = transpose_copy(f.expand_w.data(), d_b, d);  // [d, d_b]
      gemm_nn_acc(dye.data(), trans.data(), dh.data(), rows, d, d_b);
      dhpre.resize(rows * d_b);
      for (size_t i = 0; i < dhpre.size(); ++i) {
        const S v = sv.hpre[i];
        const S sg = S(1) / (S(1) + std::exp(-v));
        dhpre[i] = dh[i] * sg * (S(1) + v * (S(1) - sg));
      }

      if (f.reduce_w.tracked()) {
        xe.assign(rows * d, S(0));
        for (size_t r = 0; r < rows; ++r)
          std::copy(px + sv.tokens[r] * d, px + (sv.tokens[r] + 1) * d, xe.begin() + r * d);
        // d reduce_w = xe^T * dhpre
        gemm_tn_acc(xe.data(), dhpre.data(), t.grad(f.reduce_w.node).data(), rows, d, d_b);
      }
      if (f.reduce_b.tracked()) {
        std::vector<S>& bg = t.grad(f.reduce_b.node);
        for (size_t r = 0; r < rows; ++r)
          for (size_t j = 0; j < d_b; ++j) bg[j] += dhpre[r * d_b + j];
      }
      if (x.tracked()) {
        dxe.assign(rows * d, S(0));
        trans = transpose_copy(f.reduce_w.data(), d, d_b);  // [d_b, d]
        gemm_nn_acc(dhpre.data(), trans.data(), dxe.data(), rows, d_b, d);
        std::vector<S>& xg = t.grad(x.node);
        for (size_t r = 0; r < rows; ++r) {
          S* xrow = xg.data() + sv.tokens[r] * d;
          const S* drow = dxe.data() + r * d;
          for (size_t j = 0; j < d; ++j) xrow[j] += drow[j];
        }
      }
    }
  });
  return out;
}

}  // namespace detail

template <typename S>
struct SffmLayerT {
  std::vector<BottleneckFilterT<S>> experts;  // first k_shared are shared
  TensorT<S> router_w;                        // [d, n_routing]
};

using SffmLayer = SffmLayerT<float>;

template <typename S>
SffmLayerT<S> make_sffm_layer(const SffmConfig& cfg, Rng& rng) {
  cfg.validate();
  SffmLayerT<S> layer;
  for (size_t i = 0; i < cfg.n_experts; ++i)
    layer.experts.push_back(make_bottleneck_filter<S>(cfg.dim, cfg.bottleneck_dim(), rng));
  const double lim = 0.01 / std::sqrt(static_cast<double>(cfg.dim));
  layer.router_w = rand_uniform<S>(Shape{cfg.dim, cfg.n_routing()}, rng, -lim, lim);
  return layer;
}

template <typename S>
struct SffmResultT {
  TensorT<S> y;       // [T,d]
  TensorT<S> scores;  // [T,n_routing], taped softmax output
  GatingDecision decision;
  ExpertLoadStats stats;
};

template <typename S>
SffmResultT<S> sffm_forward(const TensorT<S>& x, const SffmConfig& cfg,
                            const SffmLayerT<S>& layer) {
  cfg.validate();
  if (layer.experts.size() != cfg.n_experts)
    throw ValidationError("sffm_forward: expert count " + std::to_string(layer.experts.size()) +
                          " does not match config N=" + std::to_string(cfg.n_experts));
  if (x.shape.rank != 2 || x.shape[1] != cfg.dim)
    throw ValidationError("sffm_forward: input " + x.shape.str() + " does not match d=" +
                          std::to_string(cfg.dim));
  const size_t T = x.shape[0];

  SffmResultT<S> result;
  result.scores = route(x, layer.router_w);
  result.decision = select_topk(result.scores, cfg.k_routed());

  // Shared experts: unconditional, unweighted.
  TensorT<S> y = TensorT<S>::zeros(Shape{T, cfg.dim});
  for (size_t i = 0; i < cfg.k_shared; ++i) y = add(y, bff_forward(x, layer.experts[i]));
  if (cfg.k_routed() > 0)
    y = add(y, detail::routed_mix(x, result.scores, result.decision, layer.experts, cfg.k_shared));
  result.y = y;

  result.stats.counts.assign(cfg.n_routing(), 0);
  result.stats.mean_scores.assign(cfg.n_routing(), 0.0);
  result.stats.tokens = T;
  for (size_t t = 0; t < T; ++t)
    for (size_t e : result.decision.indices[t]) result.stats.counts[e] += 1;
  const S* ps = result.scores.data();
  for (size_t t = 0; t < T; ++t)
    for (size_t e = 0; e < cfg.n_routing(); ++e)
      result.stats.mean_scores[e] += static_cast<double>(ps[t * cfg.n_routing() + e]);
  for (auto& v : result.stats.mean_scores) v /= static_cast<double>(T);
  return result;
}

// ---------------------------------------------------------------------------
// Memory-module baseline: soft addressing over learned prototype slots by
// temperature-scaled cosine similarity; output is a convex slot combination.
// ---------------------------------------------------------------------------

template <typename S>
struct MemoryModuleT {
  TensorT<S> slots;  // [M,d]
  double temperature = 0.1;
};

using MemoryModule = MemoryModuleT<float>;

template <typename S>
MemoryModuleT<S> make_memory_module(size_t slots, size_t d, Rng& rng) {
  MemoryModuleT<S> m;
  const double lim = 1.0 / std::sqrt(static_cast<double>(d));
  m.slots = rand_uniform<S>(Shape{slots, d}, rng, -lim, lim);
  return m;
}

template <typename S>
TensorT<S> memory_forward(const TensorT<S>& x, const MemoryModuleT<S>& mem) {
  if (x.shape.rank != 2 || x.shape[1] != mem.slots.shape[1])
    throw ValidationError("memory_forward: input " + x.shape.str() + " does not match slots " +
                          mem.slots.shape.str());
  auto l2_normalize_rows = [](const TensorT<S>& v) {
    TensorT<S> norms = sqrt_(add_scalar(sum_axis1(mul(v, v)), S(1e-12)));
    return divide(v, norms);
  };
  TensorT<S> xn = l2_normalize_rows(x);
  TensorT<S> sn = l2_normalize_rows(mem.slots);
  TensorT<S> sim = matmul(xn, transpose(sn));
  TensorT<S> weights = softmax(scale(sim, static_cast<S>(1.0 / mem.temperature)));
  return matmul(weights, mem.slots);
}

}  // namespace svad

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "svad/losses.hpp"
#include "svad/model.hpp"
#include "svad/tensor.hpp"

using namespace svad;

namespace {

using DT = TensorT<double>;
using DTape = TapeT<double>;
using OpFn = std::function<DT(const std::vector<DT>&)>;

constexpr double kEps = 1e-3;      // central-difference step
constexpr double kOpTol = 1e-4;    // per-op relative tolerance
constexpr double kModelTol = 1e-3; // end-to-end relative tolerance

// Maps an op through sum() so every case reduces to a scalar root.
double forward_sum(const OpFn& fn, const std::vector<DT>& inputs) {
  return sum(fn(inputs)).scalar();
}

// Central finite difference of sum(fn(inputs)) w.r.t. inputs[which][j].
double fd_entry(const OpFn& fn, std::vector<DT> inputs, size_t which, size_t j) {
  DT plus = DT(inputs[which].shape,
               std::vector<double>(inputs[which].data(), inputs[which].data() + inputs[which].numel()));
  plus.mut()[j] += kEps;
  DT minus = DT(inputs[which].shape,
                std::vector<double>(inputs[which].data(), inputs[which].data() + inputs[which].numel()));
  minus.mut()[j] -= kEps;
  std::vector<DT> in_p = inputs, in_m = inputs;
  in_p[which] = plus;
  in_m[which] = minus;
  return (forward_sum(fn, in_p) - forward_sum(fn, in_m)) / (2.0 * kEps);
}

void expect_close(double analytic, double fd, double tol, const std::string& ctx) {
  const double mag = std::max(std::abs(analytic), std::abs(fd));
  if (mag <= 1e-6) return;  // both effectively zero
  const double rel = std::abs(analytic - fd) / mag;
  EXPECT_LT(rel, tol) << ctx << ": analytic=" << analytic << " fd=" << fd;
}

// Runs the full check for one op: analytic grads via the tape vs central
// differences, every input, every element.
void check_op(const std::string& name, const OpFn& fn, const std::vector<Shape>& shapes,
              uint64_t seed, double lo = -1.5, double hi = 1.5,
              const std::function<void(size_t, std::vector<double>&)>& adjust = {}) {
  Rng rng(seed);
  std::vector<DT> inputs;
  for (size_t i = 0; i < shapes.size(); ++i) {
    std::vector<double> v(shapes[i].numel());
    for (auto& x : v) x = rng.uniform(lo, hi);
    if (adjust) adjust(i, v);
    inputs.emplace_back(shapes[i], std::move(v));
  }

  DTape tape;
  std::vector<std::vector<double>> grads;
  {
    DTape::Scope scope(tape);
    std::vector<DT> watched;
    for (const auto& t : inputs) watched.push_back(watch(t));
    DT root = sum(fn(watched));
    tape.backward(root);
    for (const auto& w : watched)
      grads.push_back(tape.has_grad(w.node) ? tape.grad_of(w)
                                            : std::vector<double>(w.numel(), 0.0));
  }

  for (size_t i = 0; i < inputs.size(); ++i)
    for (size_t j = 0; j < inputs[i].numel(); ++j) {
      const double fd = fd_entry(fn, inputs, i, j);
      expect_close(grads[i][j], fd, kOpTol,
                   name + " input " + std::to_string(i) + " elem " + std::to_string(j) +
                       " seed " + std::to_string(seed));
    }
}

void check_op_seeds(const std::string& name, const OpFn& fn, const std::vector<Shape>& shapes,
                    double lo = -1.5, double hi = 1.5,
                    const std::function<void(size_t, std::vector<double>&)>& adjust = {}) {
  for (uint64_t seed = 1; seed <= 10; ++seed) check_op(name, fn, shapes, seed, lo, hi, adjust);
}

}  // namespace

TEST(GradCheck, Matmul) {
  check_op_seeds("matmul", [](const std::vector<DT>& in) { return matmul(in[0], in[1]); },
                 {Shape{3, 4}, Shape{4, 2}});
}

TEST(GradCheck, ElementwiseBinary) {
  check_op_seeds("add", [](const std::vector<DT>& in) { return add(in[0], in[1]); },
                 {Shape{3, 4}, Shape{3, 4}});
  check_op_seeds("sub", [](const std::vector<DT>& in) { return sub(in[0], in[1]); },
                 {Shape{3, 4}, Shape{3, 4}});
  check_op_seeds("mul", [](const std::vector<DT>& in) { return mul(in[0], in[1]); },
                 {Shape{3, 4}, Shape{3, 4}});
  check_op_seeds("div",
                 [](const std::vector<DT>& in) { return divide(in[0], in[1]); },
                 {Shape{3, 4}, Shape{3, 4}}, -1.5, 1.5, [](size_t i, std::vector<double>& v) {
                   if (i == 1)
                     for (auto& x : v) x = (x < 0 ? -1 : 1) * (0.4 + std::abs(x));
                 });
}

TEST(GradCheck, Broadcasts) {
  check_op_seeds("add_row", [](const std::vector<DT>& in) { return add(in[0], in[1]); },
                 {Shape{3, 4}, Shape{1, 4}});
  check_op_seeds("mul_row", [](const std::vector<DT>& in) { return mul(in[0], in[1]); },
                 {Shape{3, 4}, Shape{4}});
  check_op_seeds("add_col", [](const std::vector<DT>& in) { return add(in[0], in[1]); },
                 {Shape{3, 4}, Shape{3, 1}});
  check_op_seeds("mul_scalar", [](const std::vector<DT>& in) { return mul(in[0], in[1]); },
                 {Shape{3, 4}, Shape{1}});
}

TEST(GradCheck, Unary) {
  check_op_seeds("scale", [](const std::vector<DT>& in) { return scale(in[0], 1.7); },
                 {Shape{3, 4}});
  check_op_seeds("add_scalar", [](const std::vector<DT>& in) { return add_scalar(in[0], -0.3); },
                 {Shape{3, 4}});
  check_op_seeds("sigmoid", [](const std::vector<DT>& in) { return sigmoid(in[0]); },
                 {Shape{3, 4}}, -3, 3);
  check_op_seeds("silu", [](const std::vector<DT>& in) { return silu(in[0]); }, {Shape{3, 4}},
                 -3, 3);
  check_op_seeds("relu", [](const std::vector<DT>& in) { return relu(in[0]); }, {Shape{3, 4}},
                 -1.5, 1.5, [](size_t, std::vector<double>& v) {
                   for (auto& x : v)  // keep clear of the kink
                     if (std::abs(x) < 0.05) x = x < 0 ? -0.05 : 0.05;
                 });
  check_op_seeds("sqrt", [](const std::vector<DT>& in) { return sqrt_(in[0]); }, {Shape{3, 4}},
                 0.2, 2.0);
}

TEST(GradCheck, SoftmaxAndLayerNorm) {
  // sum(softmax) is constant, so weight the output to expose the Jacobian.
  check_op_seeds("softmax",
                 [](const std::vector<DT>& in) { return mul(softmax(in[0]), in[1]); },
                 {Shape{3, 5}, Shape{3, 5}}, -2, 2);
  check_op_seeds("layer_norm",
                 [](const std::vector<DT>& in) {
                   return mul(layer_norm(in[0], in[1], in[2]), in[3]);
                 },
                 {Shape{3, 5}, Shape{5}, Shape{5}, Shape{3, 5}});
}

TEST(GradCheck, Reductions) {
  check_op_seeds("sum", [](const std::vector<DT>& in) { return sum(in[0]); }, {Shape{3, 4}});
  check_op_seeds("mean", [](const std::vector<DT>& in) { return mean(in[0]); }, {Shape{3, 4}});
  check_op_seeds("mean_axis0",
                 [](const std::vector<DT>& in) { return mul(mean_axis0(in[0]), in[1]); },
                 {Shape{4, 3}, Shape{3}});
  check_op_seeds("sum_axis1",
                 [](const std::vector<DT>& in) { return mul(sum_axis1(in[0]), in[1]); },
                 {Shape{4, 3}, Shape{4, 1}});
}

TEST(GradCheck, ShapeOps) {
  check_op_seeds("transpose",
                 [](const std::vector<DT>& in) { return mul(transpose(in[0]), in[1]); },
                 {Shape{3, 4}, Shape{4, 3}});
  check_op_seeds("reshape",
                 [](const std::vector<DT>& in) { return mul(reshape(in[0], Shape{4, 3}), in[1]); },
                 {Shape{3, 4}, Shape{4, 3}});
  check_op_seeds("concat0",
                 [](const std::vector<DT>& in) {
                   return mul(concat(0, std::vector<DT>{in[0], in[1]}), in[2]);
                 },
                 {Shape{2, 3}, Shape{1, 3}, Shape{3, 3}});
  check_op_seeds("concat1",
                 [](const std::vector<DT>& in) {
                   return mul(concat(1, std::vector<DT>{in[0], in[1]}), in[2]);
                 },
                 {Shape{2, 3}, Shape{2, 2}, Shape{2, 5}});
  check_op_seeds("slice_rows",
                 [](const std::vector<DT>& in) { return mul(slice_rows(in[0], 1, 3), in[1]); },
                 {Shape{4, 3}, Shape{2, 3}});
  check_op_seeds("slice_cols",
                 [](const std::vector<DT>& in) { return mul(slice_cols(in[0], 1, 4), in[1]); },
                 {Shape{3, 5}, Shape{3, 3}});
  check_op_seeds("gather_rows_dup",
                 [](const std::vector<DT>& in) {
                   return mul(gather_rows(in[0], {2, 0, 2, 1}), in[1]);
                 },
                 {Shape{3, 4}, Shape{4, 4}});
  check_op_seeds("scatter_add",
                 [](const std::vector<DT>& in) {
                   return mul(scatter_add_rows(in[0], {2, 0}, in[1]), in[2]);
                 },
                 {Shape{4, 3}, Shape{2, 3}, Shape{4, 3}});
  check_op_seeds("patches_to_image",
                 [](const std::vector<DT>& in) {
                   return mul(patches_to_image(in[0], 1, 4, 4, 2), in[1]);
                 },
                 {Shape{4, 4}, Shape{1, 4, 4}});
}

TEST(GradCheck, Attention) {
  check_op_seeds("attention_1h",
                 [](const std::vector<DT>& in) {
                   return mul(scaled_dot_product_attention(in[0], in[1], in[2], 1), in[3]);
                 },
                 {Shape{3, 4}, Shape{3, 4}, Shape{3, 4}, Shape{3, 4}});
  check_op_seeds("attention_2h",
                 [](const std::vector<DT>& in) {
                   return mul(scaled_dot_product_attention(in[0], in[1], in[2], 2), in[3]);
                 },
                 {Shape{3, 4}, Shape{3, 4}, Shape{3, 4}, Shape{3, 4}});
}

TEST(GradCheck, Losses) {
  check_op_seeds("pred_loss",
                 [](const std::vector<DT>& in) { return pred_loss(in[0], in[1]); },
                 {Shape{1, 4, 4}, Shape{1, 4, 4}}, 0.0, 1.0);
  check_op_seeds("sim_loss",
                 [](const std::vector<DT>& in) { return sim_loss(in[0], in[1]); },
                 {Shape{1, 6}, Shape{1, 6}}, 0.3, 1.5);
  check_op_seeds("motion_hinge_pixel",
                 [](const std::vector<DT>& in) {
                   return motion_loss(in[0], in[1], in[2], MotionHinge::PerPixel);
                 },
                 {Shape{1, 3, 3}, Shape{1, 3, 3}, Shape{1, 3, 3}}, 0.0, 1.0,
                 [](size_t i, std::vector<double>& v) {
                   // spread the three frames so no hinge argument sits near the kink
                   for (size_t j = 0; j < v.size(); ++j) v[j] = 0.15 + 0.7 * v[j];
                   if (i == 1)
                     for (auto& x : v) x += 0.9;
                   if (i == 2)
                     for (auto& x : v) x -= 0.4;
                 });
  check_op_seeds("motion_hinge_scalar",
                 [](const std::vector<DT>& in) {
                   return motion_loss(in[0], in[1], in[2], MotionHinge::Scalar);
                 },
                 {Shape{1, 3, 3}, Shape{1, 3, 3}, Shape{1, 3, 3}}, 0.0, 1.0,
                 [](size_t i, std::vector<double>& v) {
                   if (i == 1)
                     for (auto& x : v) x += 0.8;
                 });
}

// ---------------------------------------------------------------------------
// End-to-end: every parameter of a tiny model against finite differences.
// ---------------------------------------------------------------------------

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.height = 16;
  cfg.width = 16;
  cfg.patch = 8;  // 4 patch tokens
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.layers = 1;
  cfg.motion_layers = 1;
  cfg.mlp_factor = 2;
  cfg.d_text = 8;
  cfg.sffm.n_experts = 4;
  cfg.sffm.k_shared = 1;
  cfg.sffm.k_active = 2;
  cfg.sffm.dim = 16;
  cfg.sffm.reduction_rate = 4;
  cfg.sffm.alpha = 0.001;
  return cfg;
}

struct TinyInputs {
  ClipInput<double> clip;
  DT target, last;
  DT sem_target;
};

TinyInputs tiny_inputs(const ModelConfig& cfg, uint64_t seed) {
  Rng rng(seed);
  TinyInputs in;
  in.clip.video_id = "gc";
  in.clip.start = 0;
  std::vector<DT> frames;
  for (size_t i = 0; i < cfg.t + 1; ++i)
    frames.push_back(rand_uniform<double>(Shape{cfg.channels, cfg.height, cfg.width}, rng, 0, 1));
  // keep adjacent frames apart so no motion-hinge argument sits at its kink
  for (size_t i = 1; i < frames.size(); ++i)
    for (size_t j = 0; j < frames[i].numel(); ++j)
      if (std::abs(frames[i].data()[j] - frames[i - 1].data()[j]) < 0.05)
        frames[i].mut()[j] = frames[i - 1].data()[j] + (j % 2 ? 0.08 : -0.08);
  for (size_t i = 0; i < cfg.t; ++i)
    in.clip.frame_patches.push_back(
        image_to_patches(frames[i], cfg.channels, cfg.height, cfg.width, cfg.patch));
  in.target = frames[cfg.t];
  in.last = frames[cfg.t - 1];
  std::vector<double> sem(cfg.d_text);
  for (auto& x : sem) x = rng.uniform(-1, 1);
  DT sem_t(Shape{1, cfg.d_text}, std::move(sem));
  double norm = 0;
  for (size_t i = 0; i < sem_t.numel(); ++i) norm += sem_t.data()[i] * sem_t.data()[i];
  norm = std::sqrt(norm);
  for (size_t i = 0; i < sem_t.numel(); ++i) sem_t.mut()[i] /= norm;
  in.clip.semantic = sem_t;
  in.sem_target = sem_t;
  return in;
}

// Scalar loss of the tiny model; balance uses load fractions recomputed from
// the forward's own counts (asserted stable across FD perturbations).
double tiny_loss(ModelT<double>& m, const TinyInputs& in, const LossWeights& w,
                 std::vector<std::vector<int64_t>>* counts_out = nullptr) {
  ForwardResult<double> res = model_forward(m, in.clip);
  double loss =
      w.lambda_pred * pred_loss(*res.frame, in.target).scalar() +
      w.lambda_sim * sim_loss(in.sem_target, *res.semantic).scalar() +
      w.lambda_motion * motion_loss(*res.frame, in.target, in.last, MotionHinge::Scalar).scalar();
  for (const auto& lr : res.sffm) {
    loss += expert_balance_loss(lr.stats, m.cfg.sffm);
    if (counts_out) counts_out->push_back(lr.stats.counts);
  }
  return loss;
}

}  // namespace

namespace {

// Min top-k routing margin and scalar hinge argument at the base point; FD
// steps must not cross either kink.
std::pair<double, double> kink_margins(ModelT<double>& model, const TinyInputs& in) {
  ForwardResult<double> res = model_forward(model, in.clip);
  const double hinge_arg =
      pred_loss(*res.frame, in.target).scalar() - pred_loss(*res.frame, in.last).scalar();
  double min_margin = 1e30;
  const size_t k = model.cfg.sffm.k_routed();
  for (const auto& lr : res.sffm) {
    const size_t T = lr.scores.rows(), NR = lr.scores.cols();
    for (size_t t = 0; t < T; ++t) {
      std::vector<double> row(lr.scores.data() + t * NR, lr.scores.data() + (t + 1) * NR);
      std::sort(row.begin(), row.end(), std::greater<>());
      min_margin = std::min(min_margin, row[k - 1] - row[k]);
    }
  }
  return {min_margin, std::abs(hinge_arg)};
}

}  // namespace

TEST(GradCheck, FullModelAllParameters) {
  const ModelConfig cfg = tiny_config();
  ModelT<double> model = make_model<double>(cfg, 1234);
  const LossWeights w;

  // Fresh init gives near-uniform routing, so top-k gaps sit at FD noise
  // scale.  Amplify the router weights: the graph is unchanged but the gaps
  // become macroscopic, so FD steps cannot flip a selection.
  visit_params(model, [](const std::string& n, DT& t) {
    if (n.find("router_w") != std::string::npos)
      for (size_t i = 0; i < t.numel(); ++i) t.mut()[i] *= 8.0;
  });

  // Deterministic search over a frozen seed range for an input whose kink
  // margins comfortably exceed any FD-induced perturbation.
  std::optional<TinyInputs> picked;
  for (uint64_t seed = 99; seed < 160 && !picked; ++seed) {
    TinyInputs cand = tiny_inputs(cfg, seed);
    auto [margin, hinge] = kink_margins(model, cand);
    if (margin > 2e-3 && hinge > 1e-3) picked = std::move(cand);
  }
  ASSERT_TRUE(picked.has_value()) << "no input in the frozen seed range clears the kink margins";
  const TinyInputs& in = *picked;

  // Analytic gradients.
  DTape tape;
  std::vector<DT> leaves;
  std::vector<std::string> names;
  std::vector<std::vector<double>> analytic;
  std::vector<std::vector<int64_t>> base_counts;
  {
    DTape::Scope scope(tape);
    ModelT<double> watched = watch_model(model);
    visit_params(watched, [&](const std::string& n, DT& t) {
      leaves.push_back(t);
      names.push_back(n);
    });
    ForwardResult<double> res = model_forward(watched, in.clip);
    DT root = scale(pred_loss(*res.frame, in.target), w.lambda_pred);
    root = add(root, scale(sim_loss(in.sem_target, *res.semantic), w.lambda_sim));
    root = add(root, scale(motion_loss(*res.frame, in.target, in.last, MotionHinge::Scalar),
                           w.lambda_motion));
    for (const auto& lr : res.sffm) {
      base_counts.push_back(lr.stats.counts);
      const size_t NR = cfg.sffm.n_routing();
      std::vector<double> f(NR);
      const double norm = double(NR) / (double(cfg.sffm.k_routed()) * double(lr.stats.tokens));
      for (size_t i = 0; i < NR; ++i) f[i] = norm * double(lr.stats.counts[i]);
      DT fc(Shape{NR}, std::move(f));
      root = add(root, scale(sum(mul(mean_axis0(lr.scores), fc)), cfg.sffm.alpha));
    }
    tape.backward(root);
    for (const auto& l : leaves)
      analytic.push_back(tape.has_grad(l.node) ? tape.grad_of(l)
                                               : std::vector<double>(l.numel(), 0.0));
  }

  // Central differences on every parameter element.
  size_t checked = 0, skipped_small = 0;
  for (size_t pi = 0; pi < leaves.size(); ++pi) {
    DT* param = nullptr;
    size_t found = 0;
    visit_params(model, [&](const std::string& n, DT& t) {
      if (n == names[pi]) {
        param = &t;
        ++found;
      }
    });
    ASSERT_EQ(found, 1u) << names[pi];
    for (size_t j = 0; j < param->numel(); ++j) {
      const double keep = param->data()[j];
      param->mut()[j] = keep + kEps;
      std::vector<std::vector<int64_t>> cp;
      const double fp = tiny_loss(model, in, w, &cp);
      param->mut()[j] = keep - kEps;
      std::vector<std::vector<int64_t>> cm;
      const double fm = tiny_loss(model, in, w, &cm);
      param->mut()[j] = keep;
      ASSERT_EQ(cp, base_counts) << "routing flipped under +eps at " << names[pi];
      ASSERT_EQ(cm, base_counts) << "routing flipped under -eps at " << names[pi];
      const double fd = (fp - fm) / (2.0 * kEps);
      const double a = analytic[pi][j];
      const double mag = std::max(std::abs(a), std::abs(fd));
      if (mag <= 1e-7) {
        ++skipped_small;
        continue;
      }
      const double rel = std::abs(a - fd) / mag;
      EXPECT_LT(rel, kModelTol) << names[pi] << "[" << j << "] analytic=" << a << " fd=" << fd;
      ++checked;
    }
  }
  std::printf("[ GRADCHECK] %zu entries checked, %zu near-zero skipped\n", checked, skipped_small);
  EXPECT_GT(checked, 1000u);
}

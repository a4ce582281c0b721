#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "svad/losses.hpp"
#include "svad/model.hpp"

using namespace svad;

namespace {

using DT = TensorT<double>;
using DTape = TapeT<double>;

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.height = 16;
  cfg.width = 16;
  cfg.patch = 8;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.layers = 1;
  cfg.motion_layers = 1;
  cfg.d_text = 8;
  cfg.sffm.dim = 16;
  cfg.sffm.n_experts = 4;
  cfg.sffm.k_shared = 1;
  cfg.sffm.k_active = 2;
  cfg.sffm.reduction_rate = 4;
  return cfg;
}

ClipInput<double> tiny_clip(const ModelConfig& cfg, uint64_t seed) {
  Rng rng(seed);
  ClipInput<double> clip;
  clip.video_id = "dec";
  for (size_t i = 0; i < cfg.t; ++i)
    clip.frame_patches.push_back(
        rand_uniform<double>(Shape{cfg.np(), cfg.patch_dim()}, rng, 0, 1));
  DT sem = rand_uniform<double>(Shape{1, cfg.d_text}, rng, -1, 1);
  double n = 0;
  for (size_t i = 0; i < sem.numel(); ++i) n += sem.data()[i] * sem.data()[i];
  for (size_t i = 0; i < sem.numel(); ++i) sem.mut()[i] /= std::sqrt(n);
  clip.semantic = sem;
  return clip;
}

DT scalar_of(double v) { return DT(Shape{1}, std::vector<double>{v}); }

}  // namespace

// ---------------------------------------------------------------------------
// Decoder-level contracts.
// ---------------------------------------------------------------------------

TEST(Decode, OutputShapesAndRange) {
  ModelConfig cfg = tiny_config();
  ModelT<double> m = make_model<double>(cfg, 3);
  auto res = model_forward(m, tiny_clip(cfg, 4));
  ASSERT_TRUE(res.frame.has_value());
  ASSERT_TRUE(res.semantic.has_value());
  EXPECT_EQ(res.frame->shape, (Shape{1, 16, 16}));
  EXPECT_EQ(res.semantic->shape, (Shape{1, 8}));
  for (size_t i = 0; i < res.frame->numel(); ++i) {
    EXPECT_GT(res.frame->data()[i], 0.0);
    EXPECT_LT(res.frame->data()[i], 1.0);
  }
  for (size_t i = 0; i < res.semantic->numel(); ++i)
    EXPECT_TRUE(std::isfinite(res.semantic->data()[i]));
}

TEST(Decode, ZeroedParametersWithoutSkipGiveConstantHalfImage) {
  ModelConfig cfg = tiny_config();
  cfg.skip = false;
  ModelT<double> m = make_model<double>(cfg, 3);
  visit_params(m, [](const std::string&, DT& t) {
    for (size_t i = 0; i < t.numel(); ++i) t.mut()[i] = 0.0;
  });
  auto res = model_forward(m, tiny_clip(cfg, 5));
  for (size_t i = 0; i < res.frame->numel(); ++i) EXPECT_DOUBLE_EQ(res.frame->data()[i], 0.5);
}

TEST(Decode, SkipConnectionChangesPrediction) {
  ModelConfig with = tiny_config();
  ModelConfig without = tiny_config();
  without.skip = false;
  ModelT<double> a = make_model<double>(with, 3);
  ModelT<double> b = make_model<double>(without, 3);  // same seed -> same params
  auto clip = tiny_clip(with, 6);
  auto ra = model_forward(a, clip);
  auto rb = model_forward(b, clip);
  double diff = 0;
  for (size_t i = 0; i < ra.frame->numel(); ++i)
    diff += std::abs(ra.frame->data()[i] - rb.frame->data()[i]);
  EXPECT_GT(diff, 1e-6);
}

TEST(Decode, GatingSparsityHoldsAtEveryLayer) {
  ModelConfig cfg = tiny_config();
  cfg.layers = 3;
  ModelT<double> m = make_model<double>(cfg, 7);
  auto res = model_forward(m, tiny_clip(cfg, 8));
  ASSERT_EQ(res.sffm.size(), 3u);
  for (const auto& lr : res.sffm) {
    for (const auto& idx : lr.decision.indices) EXPECT_EQ(idx.size(), cfg.sffm.k_routed());
    for (const auto& g : lr.decision.gates)
      for (double v : g) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
      }
  }
}

TEST(Decode, MemoryAndPlainModesRun) {
  ModelConfig mem = tiny_config();
  mem.sffm_mode = SffmMode::Memory;
  mem.memory_slots = 8;
  ModelT<double> a = make_model<double>(mem, 9);
  auto ra = model_forward(a, tiny_clip(mem, 10));
  EXPECT_TRUE(ra.sffm.empty());
  EXPECT_EQ(ra.frame->shape, (Shape{1, 16, 16}));

  ModelConfig none = tiny_config();
  none.sffm_mode = SffmMode::None;
  ModelT<double> b = make_model<double>(none, 9);
  auto rb = model_forward(b, tiny_clip(none, 10));
  EXPECT_TRUE(rb.sffm.empty());
}

// ---------------------------------------------------------------------------
// pred_loss.
// ---------------------------------------------------------------------------

TEST(PredLoss, IdenticalFramesGiveZero) {
  Rng rng(11);
  DT a = rand_uniform<double>(Shape{1, 4, 4}, rng, 0, 1);
  EXPECT_DOUBLE_EQ(pred_loss(a, a).scalar(), 0.0);
}

TEST(PredLoss, ConstantOffsetGivesSquaredOffset) {
  Rng rng(12);
  DT a = rand_uniform<double>(Shape{1, 4, 4}, rng, 0, 0.5);
  DT b = add_scalar(a, 0.5);
  EXPECT_NEAR(pred_loss(b, a).scalar(), 0.25, 1e-12);
}

TEST(PredLoss, MatchesMeanSquareOracle) {
  Rng rng(13);
  DT a = rand_uniform<double>(Shape{1, 5, 3}, rng, 0, 1);
  DT b = rand_uniform<double>(Shape{1, 5, 3}, rng, 0, 1);
  double want = 0;
  for (size_t i = 0; i < a.numel(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    want += d * d;
  }
  want /= double(a.numel());
  EXPECT_NEAR(pred_loss(a, b).scalar(), want, 1e-6);
}

TEST(PredLoss, ShapeMismatchRejected) {
  DT a = DT::zeros(Shape{1, 4, 4});
  DT b = DT::zeros(Shape{1, 4, 5});
  EXPECT_THROW(pred_loss(a, b), ValidationError);
}

// ---------------------------------------------------------------------------
// sim_loss.
// ---------------------------------------------------------------------------

TEST(SimLoss, IdenticalOrthogonalOpposite) {
  DT a(Shape{1, 4}, {1, 2, -1, 0.5});
  EXPECT_NEAR(sim_loss(a, a).scalar(), 0.0, 1e-9);
  DT e1(Shape{1, 2}, {1, 0});
  DT e2(Shape{1, 2}, {0, 1});
  EXPECT_NEAR(sim_loss(e1, e2).scalar(), 1.0, 1e-9);
  DT neg = scale(a, -1.0);
  EXPECT_NEAR(sim_loss(a, neg).scalar(), 2.0, 1e-9);
}

TEST(SimLoss, StaysInZeroTwoRange) {
  Rng rng(14);
  for (int i = 0; i < 20; ++i) {
    DT a = rand_uniform<double>(Shape{1, 8}, rng, -2, 2);
    DT b = rand_uniform<double>(Shape{1, 8}, rng, -2, 2);
    const double v = sim_loss(a, b).scalar();
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 2.0);
  }
}

TEST(SimLoss, ZeroNormRejected) {
  DT a(Shape{1, 3}, {1, 0, 0});
  DT z = DT::zeros(Shape{1, 3});
  EXPECT_THROW(sim_loss(a, z), ValidationError);
  EXPECT_THROW(sim_loss(z, a), ValidationError);
}

TEST(SimLoss, DimensionMismatchRejected) {
  DT a(Shape{1, 3}, {1, 0, 0});
  DT b(Shape{1, 4}, {1, 0, 0, 0});
  EXPECT_THROW(sim_loss(a, b), ValidationError);
}

// ---------------------------------------------------------------------------
// motion_loss.
// ---------------------------------------------------------------------------

TEST(MotionLoss, PerfectPredictionGivesZero) {
  Rng rng(15);
  DT next = rand_uniform<double>(Shape{1, 3, 3}, rng, 0, 1);
  DT last = rand_uniform<double>(Shape{1, 3, 3}, rng, 0, 1);
  EXPECT_DOUBLE_EQ(motion_loss(next, next, last).scalar(), 0.0);
  EXPECT_DOUBLE_EQ(motion_loss(next, next, last, MotionHinge::Scalar).scalar(), 0.0);
}

TEST(MotionLoss, CopyingPreviousFrameIsPenalized) {
  Rng rng(16);
  DT last = rand_uniform<double>(Shape{1, 3, 3}, rng, 0, 1);
  DT next = add_scalar(last, 0.3);
  double want = 0;
  for (size_t i = 0; i < last.numel(); ++i) {
    const double d = last.data()[i] - next.data()[i];
    want += d * d;
  }
  want /= double(last.numel());
  EXPECT_NEAR(motion_loss(last, next, last).scalar(), want, 1e-9);
  EXPECT_GT(want, 0.0);
}

TEST(MotionLoss, MatchesElementwiseHingeOracle) {
  Rng rng(17);
  DT pred = rand_uniform<double>(Shape{1, 4, 4}, rng, 0, 1);
  DT next = rand_uniform<double>(Shape{1, 4, 4}, rng, 0, 1);
  DT last = rand_uniform<double>(Shape{1, 4, 4}, rng, 0, 1);
  double pixel_want = 0, mean_next = 0, mean_last = 0;
  for (size_t i = 0; i < pred.numel(); ++i) {
    const double dn = pred.data()[i] - next.data()[i];
    const double dl = pred.data()[i] - last.data()[i];
    pixel_want += std::max(0.0, dn * dn - dl * dl);
    mean_next += dn * dn;
    mean_last += dl * dl;
  }
  pixel_want /= double(pred.numel());
  const double scalar_want =
      std::max(0.0, (mean_next - mean_last) / double(pred.numel()));
  EXPECT_NEAR(motion_loss(pred, next, last).scalar(), pixel_want, 1e-6);
  EXPECT_NEAR(motion_loss(pred, next, last, MotionHinge::Scalar).scalar(), scalar_want, 1e-6);
  // Jensen: clipping per pixel can only keep more of the positive part.
  EXPECT_GE(pixel_want + 1e-12, scalar_want);
}

TEST(MotionLoss, ShapeMismatchRejected) {
  DT a = DT::zeros(Shape{1, 3, 3});
  DT b = DT::zeros(Shape{1, 3, 4});
  EXPECT_THROW(motion_loss(a, b, a), ValidationError);
}

// ---------------------------------------------------------------------------
// total_loss.
// ---------------------------------------------------------------------------

TEST(TotalLoss, AllZeroPartsGiveZero) {
  LossWeights w;
  DT z = scalar_of(0.0);
  EXPECT_DOUBLE_EQ(total_loss(z, z, z, w, z).scalar(), 0.0);
}

TEST(TotalLoss, PinnedArithmeticExample) {
  LossWeights w;  // 1,1,1 + alpha applied upstream
  DT total = total_loss(scalar_of(0.2), scalar_of(0.3), scalar_of(0.1), w, scalar_of(0.001));
  EXPECT_NEAR(total.scalar(), 0.601, 1e-12);
}

TEST(TotalLoss, GradientIsWeightedSumOfPartGradients) {
  // One shared parameter feeds all three parts; total's gradient must equal
  // the weighted sum of the parts' separate gradients.
  Rng rng(18);
  DT base = rand_uniform<double>(Shape{1, 3, 3}, rng, 0.2, 0.8);
  DT next = rand_uniform<double>(Shape{1, 3, 3}, rng, 0, 1);
  DT last = add_scalar(next, -0.4);
  DT sem_t(Shape{1, 4}, {0.5, -0.5, 0.5, 0.5});
  DT sem_w_raw = rand_uniform<double>(Shape{9, 4}, rng, -1, 1);

  auto parts = [&](DTape& tape, const DT& p) {
    DT pred = pred_loss(sigmoid(p), next);
    DT flat = reshape(sigmoid(p), Shape{1, 9});
    DT sim = sim_loss(sem_t, matmul(flat, sem_w_raw));
    DT motion = motion_loss(sigmoid(p), next, last, MotionHinge::Scalar);
    return std::array<DT, 3>{pred, sim, motion};
  };

  std::array<std::vector<double>, 3> separate;
  for (int i = 0; i < 3; ++i) {
    DTape tape;
    DTape::Scope scope(tape);
    DT p = watch(base);
    auto pr = parts(tape, p);
    tape.backward(pr[i]);
    separate[i] = tape.has_grad(p.node) ? tape.grad_of(p) : std::vector<double>(p.numel(), 0.0);
  }

  LossWeights w;
  w.lambda_pred = 2.0;
  w.lambda_sim = 0.5;
  w.lambda_motion = 3.0;
  std::vector<double> total_grad;
  {
    DTape tape;
    DTape::Scope scope(tape);
    DT p = watch(base);
    auto pr = parts(tape, p);
    tape.backward(total_loss(pr[0], pr[1], pr[2], w, scalar_of(0.001)));
    total_grad = tape.grad_of(p);
  }
  for (size_t j = 0; j < total_grad.size(); ++j)
    EXPECT_NEAR(total_grad[j],
                2.0 * separate[0][j] + 0.5 * separate[1][j] + 3.0 * separate[2][j], 1e-9)
        << "elem " << j;
}

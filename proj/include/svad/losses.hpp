#pragma once

#include <cmath>
#include <string>

#include "svad/tensor.hpp"

namespace svad {

struct LossWeights {
  double lambda_pred = 1.0;
  double lambda_sim = 1.0;
  double lambda_motion = 1.0;
  double alpha = 0.001;

  void validate() const {
    if (lambda_pred < 0 || lambda_sim < 0 || lambda_motion < 0 || alpha < 0)
      throw ValidationError("loss weights must be non-negative");
  }
};

enum class MotionHinge { PerPixel, Scalar };

// Mean squared error over all elements.
template <typename S>
TensorT<S> pred_loss(const TensorT<S>& predicted, const TensorT<S>& target) {
  if (predicted.shape != target.shape)
    throw ValidationError("pred_loss: shape mismatch " + predicted.shape.str() + " vs " +
                          target.shape.str());
  TensorT<S> diff = sub(predicted, target);
  return mean(mul(diff, diff));
}

namespace detail {

template <typename S>
S plain_norm(const TensorT<S>& v) {
  S acc = S(0);
  for (S x : *v.values) acc += x * x;
  return std::sqrt(acc);
}

template <typename S>
TensorT<S> cosine_similarity(const TensorT<S>& a, const TensorT<S>& b) {
  constexpr S eps = S(1e-12);
  TensorT<S> dot = sum(mul(a, b));
  TensorT<S> na = sqrt_(add_scalar(sum(mul(a, a)), eps));
  TensorT<S> nb = sqrt_(add_scalar(sum(mul(b, b)), eps));
  return divide(dot, mul(na, nb));
}

}  // namespace detail

// 1 - cos(target, predicted); the target is the input window's own embedding.
template <typename S>
TensorT<S> sim_loss(const TensorT<S>& target_embedding, const TensorT<S>& predicted_embedding) {
  if (target_embedding.numel() != predicted_embedding.numel())
    throw ValidationError("sim_loss: dimension mismatch");
  if (detail::plain_norm(target_embedding) < S(1e-9) ||
      detail::plain_norm(predicted_embedding) < S(1e-9))
    throw ValidationError("sim_loss: zero-norm vector makes cosine degenerate");
  return add_scalar(scale(detail::cosine_similarity(target_embedding, predicted_embedding), S(-1)),
                    S(1));
}

// Hinge on the squared error against the next frame vs the current frame:
// predicting I_t (frame copying) is penalized, predicting I_{t+1} is free.
template <typename S>
TensorT<S> motion_loss(const TensorT<S>& predicted, const TensorT<S>& next_frame,
                       const TensorT<S>& last_frame, MotionHinge mode = MotionHinge::PerPixel) {
  if (predicted.shape != next_frame.shape || predicted.shape != last_frame.shape)
    throw ValidationError("motion_loss: frame shape mismatch");
  TensorT<S> dn = sub(predicted, next_frame);
  TensorT<S> dl = sub(predicted, last_frame);
  TensorT<S> sq_next = mul(dn, dn);
  TensorT<S> sq_last = mul(dl, dl);
  if (mode == MotionHinge::PerPixel) return mean(relu(sub(sq_next, sq_last)));
  return relu(sub(mean(sq_next), mean(sq_last)));
}

// lambda1 * pred + lambda2 * sim + lambda3 * motion + balance.
template <typename S>
TensorT<S> total_loss(const TensorT<S>& pred, const TensorT<S>& sim, const TensorT<S>& motion,
                      const LossWeights& w, const TensorT<S>& balance) {
  TensorT<S> acc = scale(pred, static_cast<S>(w.lambda_pred));
  acc = add(acc, scale(sim, static_cast<S>(w.lambda_sim)));
  acc = add(acc, scale(motion, static_cast<S>(w.lambda_motion)));
  return add(acc, balance);
}

}  // namespace svad

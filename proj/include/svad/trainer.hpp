#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "svad/adam.hpp"
#include "svad/checkpoint.hpp"
#include "svad/corpus.hpp"
#include "svad/losses.hpp"
#include "svad/model.hpp"

namespace svad {

struct TrainParams {
  AdamConfig adam;
  size_t epochs = 20;
  size_t batch = 16;
  uint64_t seed = 7;
  LossWeights weights;
  MotionHinge hinge = MotionHinge::PerPixel;
  double grad_clip = 0.0;  // global L2-norm cap; 0 disables clipping
  size_t threads = 1;      // worker threads; must never change results

  void validate() const {
    adam.validate();
    weights.validate();
    if (epochs == 0) throw ValidationError("train: epochs must be >= 1");
    if (batch == 0) throw ValidationError("train: batch must be >= 1");
    if (threads == 0) throw ValidationError("train: threads must be >= 1");
    if (grad_clip < 0) throw ValidationError("train: grad_clip must be >= 0");
  }
};

struct LossRow {
  size_t epoch = 0;   // 1-based
  uint64_t step = 0;  // global optimizer step, 1-based
  double pred = 0, sim = 0, motion = 0, balance = 0, total = 0;
};

struct TrainHooks {
  std::function<void(const LossRow&)> on_step;
  // Called after each completed epoch; gives the caller a chance to persist a
  // checkpoint.  rng_state is the serialized shuffle-RNG stream position.
  std::function<void(Model&, const AdamState&, uint32_t epoch, uint64_t step,
                     const std::string& rng_state)>
      on_epoch_end;
};

struct TrainOutcome {
  std::shared_ptr<Model> model;
  AdamState adam;
  uint32_t epochs_done = 0;
  uint64_t steps_done = 0;
  std::string rng_state;
};

struct ClipRef {
  size_t video = 0;
  size_t start = 0;
};

// Stride-1 windows of t input frames plus one target frame.
inline std::vector<ClipRef> training_windows(const Corpus& corpus, size_t t) {
  std::vector<ClipRef> out;
  for (size_t vi = 0; vi < corpus.train.size(); ++vi) {
    const size_t frames = corpus.train[vi].frames.shape[0];
    if (frames < t + 1)
      throw ValidationError("training video " + corpus.train[vi].id + " is shorter than " +
                            std::to_string(t + 1) + " frames");
    for (size_t s = 0; s + t < frames; ++s) out.push_back({vi, s});
  }
  return out;
}

namespace detail {

// Static-order work distribution: item i is always processed the same way; the
// merge below happens in index order, so thread count cannot affect results.
inline void parallel_for(size_t n, size_t threads, const std::function<void(size_t)>& fn) {
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::mutex err_mutex;
  std::exception_ptr first_error;
  auto worker = [&] {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  for (size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

// Per-clip state between the forward pass and the deferred backward pass.
struct ClipWork {
  std::unique_ptr<Tape> tape;
  std::vector<Tensor> leaves;  // watched params, registry order
  std::optional<Tensor> pred, sim, motion;
  std::vector<Tensor> p;                     // per layer, taped [n_routing] score means
  std::vector<std::vector<int64_t>> counts;  // per layer selection counts
  size_t tokens = 0;
  std::vector<std::vector<float>> grads;  // harvested after backward
  double pred_v = 0, sim_v = 0, motion_v = 0;
};

}  // namespace detail

inline TrainOutcome train_model(const Corpus& corpus, const ModelConfig& mcfg,
                                const TrainParams& tp,
                                const std::optional<Checkpoint>& resume_from,
                                const TrainHooks& hooks = {}) {
  mcfg.validate();
  tp.validate();
  if (corpus.train.empty()) throw ValidationError("training corpus has no videos");
  for (const auto& v : corpus.train) {
    if (v.frames.shape[1] != mcfg.height || v.frames.shape[2] != mcfg.width)
      throw ValidationError("video " + v.id + " resolution does not match the model config");
    for (int lab : v.labels)
      if (lab != 0)
        throw ValidationError("training video " + v.id +
                              " carries anomalous frames; training data must be normal only");
  }

  TrainOutcome out;
  out.model = std::make_shared<Model>(make_model<float>(mcfg, tp.seed));
  Model& model = *out.model;

  std::vector<Tensor*> registry;
  std::vector<std::string> names;
  std::vector<size_t> sizes;
  visit_params(model, [&](const std::string& name, Tensor& t) {
    registry.push_back(&t);
    names.push_back(name);
    sizes.push_back(t.numel());
  });
  out.adam = make_adam_state(sizes);

  Rng shuffle_rng(tp.seed ^ 0x73687566666c65ULL);  // dedicated shuffle stream
  uint32_t start_epoch = 0;
  uint64_t step = 0;
  if (resume_from) {
    restore(model, out.adam, *resume_from);
    shuffle_rng.deserialize(resume_from->rng_state);
    start_epoch = resume_from->epoch;
    step = resume_from->step;
    out.adam.step = static_cast<int64_t>(step);
  }

  const std::vector<ClipRef> windows = training_windows(corpus, mcfg.t);
  const double lp = mcfg.branches.vision ? tp.weights.lambda_pred : 0.0;
  const double ls = mcfg.branches.semantic ? tp.weights.lambda_sim : 0.0;
  const double lm = mcfg.branches.vision ? tp.weights.lambda_motion : 0.0;
  const size_t n_layers = model.decoder.size();
  const size_t n_routing = mcfg.sffm.n_routing();
  const bool moe = mcfg.sffm_mode == SffmMode::Sffm && mcfg.sffm.k_routed() > 0;

  for (uint32_t epoch = start_epoch; epoch < tp.epochs; ++epoch) {
    std::vector<ClipRef> order = windows;
    shuffle_rng.shuffle(order);

    for (size_t base = 0; base < order.size(); base += tp.batch) {
      const size_t bsz = std::min(tp.batch, order.size() - base);
      std::vector<detail::ClipWork> work(bsz);

      // Phase A: independent forward passes, one tape per clip.
      detail::parallel_for(bsz, tp.threads, [&](size_t c) {
        detail::ClipWork& w = work[c];
        const ClipRef ref = order[base + c];
        const CorpusVideo& video = corpus.train[ref.video];
        w.tape = std::make_unique<Tape>();
        Tape::Scope scope(*w.tape);
        Model watched = watch_model(model);
        visit_params(watched, [&](const std::string&, Tensor& t) { w.leaves.push_back(t); });

        ClipInput<float> clip;
        clip.video_id = video.id;
        clip.start = ref.start;
        if (mcfg.branches.spatial())
          clip.frame_patches = video_window_patches<float>(video.frames, ref.start, mcfg.t, mcfg);
        std::optional<Tensor> sem_target;
        if (mcfg.branches.semantic) {
          clip.semantic = model.semantic_provider->embed(video.descriptors[ref.start], video.id,
                                                         static_cast<int64_t>(ref.start));
          sem_target = clip.semantic;
        }
        ForwardResult<float> res = model_forward(watched, clip);

        if (mcfg.branches.vision) {
          Tensor target = video_frame<float>(video.frames, ref.start + mcfg.t);
          Tensor last = video_frame<float>(video.frames, ref.start + mcfg.t - 1);
          w.pred = pred_loss(*res.frame, target);
          w.motion = motion_loss(*res.frame, target, last, tp.hinge);
          w.pred_v = w.pred->scalar();
          w.motion_v = w.motion->scalar();
        }
        if (mcfg.branches.semantic) {
          w.sim = sim_loss(*sem_target, *res.semantic);
          w.sim_v = w.sim->scalar();
        }
        if (moe) {
          for (const auto& layer_res : res.sffm) {
            w.p.push_back(mean_axis0(layer_res.scores));
            w.counts.push_back(layer_res.stats.counts);
            w.tokens = layer_res.stats.tokens;
          }
        }
      });

      // Batch-level load fractions from pooled integer counts.
      std::vector<Tensor> f_const;
      double balance_value = 0.0;
      if (moe) {
        const double kr = static_cast<double>(mcfg.sffm.k_routed());
        for (size_t l = 0; l < n_layers; ++l) {
          std::vector<float> f(n_routing, 0.0f);
          int64_t total_tokens = 0;
          for (const auto& w : work) total_tokens += static_cast<int64_t>(w.tokens);
          if (total_tokens > 0) {
            const double norm =
                static_cast<double>(n_routing) / (kr * static_cast<double>(total_tokens));
            std::vector<int64_t> csum(n_routing, 0);
            for (const auto& w : work)
              for (size_t i = 0; i < n_routing; ++i) csum[i] += w.counts[l][i];
            std::vector<double> pbatch(n_routing, 0.0);
            for (const auto& w : work)
              for (size_t i = 0; i < n_routing; ++i)
                pbatch[i] += static_cast<double>(w.p[l].data()[i]) / static_cast<double>(bsz);
            for (size_t i = 0; i < n_routing; ++i) {
              f[i] = static_cast<float>(norm * static_cast<double>(csum[i]));
              balance_value += mcfg.sffm.alpha * norm * static_cast<double>(csum[i]) * pbatch[i];
            }
          }
          f_const.emplace_back(Shape{n_routing}, std::move(f));
        }
      }

      // Phase B: per-clip backward with the batch-level balance term folded in.
      detail::parallel_for(bsz, tp.threads, [&](size_t c) {
        detail::ClipWork& w = work[c];
        Tape::Scope scope(*w.tape);
        std::optional<Tensor> root;
        auto add_part = [&](Tensor part, double lam) {
          Tensor scaled = scale(part, static_cast<float>(lam));
          root = root ? add(*root, scaled) : scaled;
        };
        if (w.pred && lp != 0) add_part(*w.pred, lp);
        if (w.sim && ls != 0) add_part(*w.sim, ls);
        if (w.motion && lm != 0) add_part(*w.motion, lm);
        for (size_t l = 0; l < w.p.size(); ++l)
          add_part(sum(mul(w.p[l], f_const[l])), mcfg.sffm.alpha);
        w.grads.resize(w.leaves.size());
        if (root) {
          Tensor scaled_root = scale(*root, static_cast<float>(1.0 / static_cast<double>(bsz)));
          w.tape->backward(scaled_root);
          for (size_t i = 0; i < w.leaves.size(); ++i)
            if (w.tape->has_grad(w.leaves[i].node)) w.grads[i] = w.tape->grad_of(w.leaves[i]);
        }
        w.leaves.clear();
        w.tape.reset();
      });

      // Deterministic merge in clip order, then one optimizer step.
      std::vector<std::vector<float>> accum(registry.size());
      for (size_t i = 0; i < registry.size(); ++i) accum[i].assign(sizes[i], 0.0f);
      for (const auto& w : work)
        for (size_t i = 0; i < registry.size(); ++i) {
          if (w.grads.size() <= i || w.grads[i].empty()) continue;
          float* dst = accum[i].data();
          const float* src = w.grads[i].data();
          for (size_t j = 0; j < sizes[i]; ++j) dst[j] += src[j];
        }
      if (tp.grad_clip > 0) {
        double norm2 = 0;
        for (const auto& g : accum)
          for (float v : g) norm2 += static_cast<double>(v) * static_cast<double>(v);
        const double norm = std::sqrt(norm2);
        if (norm > tp.grad_clip) {
          const float s = static_cast<float>(tp.grad_clip / norm);
          for (auto& g : accum)
            for (float& v : g) v *= s;
        }
      }
      adam_step(registry, names, accum, out.adam, tp.adam);
      step += 1;

      LossRow row;
      row.epoch = epoch + 1;
      row.step = step;
      for (const auto& w : work) {
        row.pred += w.pred_v / static_cast<double>(bsz);
        row.sim += w.sim_v / static_cast<double>(bsz);
        row.motion += w.motion_v / static_cast<double>(bsz);
      }
      row.balance = balance_value;
      row.total = lp * row.pred + ls * row.sim + lm * row.motion + row.balance;
      if (!std::isfinite(row.total)) throw NumericError("non-finite training loss");
      if (hooks.on_step) hooks.on_step(row);
    }

    out.epochs_done = epoch + 1;
    out.steps_done = step;
    out.rng_state = shuffle_rng.serialize();
    if (hooks.on_epoch_end) hooks.on_epoch_end(model, out.adam, epoch + 1, step, out.rng_state);
  }

  if (start_epoch >= tp.epochs) {  // resumed past the target: nothing to do
    out.epochs_done = start_epoch;
    out.steps_done = step;
    out.rng_state = shuffle_rng.serialize();
  }
  return out;
}

}  // namespace svad

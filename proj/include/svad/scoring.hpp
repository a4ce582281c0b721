#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "svad/corpus.hpp"
#include "svad/losses.hpp"
#include "svad/model.hpp"
#include "svad/trainer.hpp"

namespace svad {

// ---------------------------------------------------------------------------
// Temporal smoothing.
// ---------------------------------------------------------------------------

// 1-D Gaussian smoothing, kernel radius ceil(3*sigma), kernel normalized to
// sum 1, mirrored (edge-repeating) boundary.  sigma = 0 returns the input.
inline std::vector<double> gaussian_smooth(const std::vector<double>& x, double sigma) {
  if (x.empty()) throw ValidationError("gaussian_smooth: empty series");
  if (sigma < 0) throw ValidationError("gaussian_smooth: sigma must be >= 0");
  if (sigma == 0) return x;
  const int64_t radius = static_cast<int64_t>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
  double ksum = 0.0;
  for (int64_t k = -radius; k <= radius; ++k) {
    const double w = std::exp(-0.5 * (static_cast<double>(k) / sigma) * (static_cast<double>(k) / sigma));
    kernel[static_cast<size_t>(k + radius)] = w;
    ksum += w;
  }
  for (double& w : kernel) w /= ksum;

  const int64_t n = static_cast<int64_t>(x.size());
  auto mirror = [&](int64_t i) {  // ... x1 x0 | x0 x1 ... xn-1 | xn-1 xn-2 ...
    while (i < 0 || i >= n) {
      if (i < 0) i = -i - 1;
      if (i >= n) i = 2 * n - 1 - i;
    }
    return static_cast<size_t>(i);
  };
  std::vector<double> out(x.size(), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int64_t k = -radius; k <= radius; ++k)
      acc += kernel[static_cast<size_t>(k + radius)] * x[mirror(i + k)];
    out[static_cast<size_t>(i)] = acc;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Series normalization and combination.
// ---------------------------------------------------------------------------

// Min-max to [0,1]; a constant series maps to all zeros.
inline std::vector<double> min_max_normalize(const std::vector<double>& x) {
  if (x.empty()) throw ValidationError("min_max_normalize: empty series");
  const auto [lo_it, hi_it] = std::minmax_element(x.begin(), x.end());
  const double lo = *lo_it, hi = *hi_it;
  std::vector<double> out(x.size(), 0.0);
  if (hi > lo)
    for (size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - lo) / (hi - lo);
  return out;
}

inline std::vector<double> combine_scores(const std::vector<double>& s_v,
                                          const std::vector<double>& s_t, double w_v, double w_t,
                                          bool normalize) {
  if (s_v.size() != s_t.size()) throw ValidationError("combine: series length mismatch");
  std::vector<double> a = normalize ? min_max_normalize(s_v) : s_v;
  std::vector<double> b = normalize ? min_max_normalize(s_t) : s_t;
  std::vector<double> out(a.size());
  for (size_t i = 0; i < a.size(); ++i) out[i] = w_v * a[i] + w_t * b[i];
  return out;
}

// ---------------------------------------------------------------------------
// Frame-level ROC-AUC (Mann-Whitney, average ranks; ties count 1/2).
// ---------------------------------------------------------------------------

inline double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw ValidationError("roc_auc: length mismatch");
  if (scores.empty()) throw ValidationError("roc_auc: empty input");
  size_t pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw ValidationError("roc_auc: labels must be 0/1");
    pos += static_cast<size_t>(l);
  }
  const size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw ValidationError("roc_auc: both classes must be present");

  std::vector<size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < idx.size()) {
    size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));  // 1-based
    for (size_t k = i; k < j; ++k)
      if (labels[idx[k]] == 1) rank_sum_pos += avg_rank;
    i = j;
  }
  const double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n);
}

// ---------------------------------------------------------------------------
// Per-video score series.
// ---------------------------------------------------------------------------

struct ScoringParams {
  double sigma = 3.0;
  double w_v = 0.5, w_t = 0.5;
  bool normalize = true;

  void validate() const {
    if (sigma < 0) throw ValidationError("scoring: sigma must be >= 0");
    if (w_v < 0 || w_t < 0) throw ValidationError("scoring: weights must be >= 0");
  }
};

struct ScoreSeries {
  std::string video_id;
  std::vector<double> s_v, s_t, s;
  std::vector<int> labels;
};

// Extends a smoothed window-level series (frames t..F-1) to all F frames:
// the first t frames inherit the first computed score.
inline std::vector<double> extend_to_frames(const std::vector<double>& smoothed, size_t t,
                                            size_t frames) {
  std::vector<double> out(frames, smoothed.empty() ? 0.0 : smoothed.front());
  for (size_t i = 0; i < smoothed.size(); ++i) out[t + i] = smoothed[i];
  return out;
}

struct VideoScoreOutputs {
  ScoreSeries series;
  std::optional<Tensor> error_maps;  // [F-t, H, W, 1] squared prediction error
};

inline VideoScoreOutputs score_video(const Model& model, const CorpusVideo& video,
                                     const ScoringParams& sp, bool want_error_maps = false) {
  const ModelConfig& cfg = model.cfg;
  const size_t frames = video.frames.shape[0];
  if (frames < cfg.t + 1)
    throw ValidationError("video " + video.id + " is shorter than a scoring window");
  const size_t n_windows = frames - cfg.t;
  const size_t H = cfg.height, W = cfg.width;

  std::vector<double> raw_v, raw_t;
  Tensor maps;
  if (want_error_maps && cfg.branches.vision)
    maps = Tensor::zeros(Shape{n_windows, H, W, 1});

  for (size_t s = 0; s < n_windows; ++s) {
    ClipInput<float> clip;
    clip.video_id = video.id;
    clip.start = s;
    if (cfg.branches.spatial())
      clip.frame_patches = video_window_patches<float>(video.frames, s, cfg.t, cfg);
    if (cfg.branches.semantic)
      clip.semantic = model.semantic_provider->embed(video.descriptors[s], video.id,
                                                     static_cast<int64_t>(s));
    ForwardResult<float> res = model_forward(model, clip);

    if (cfg.branches.vision) {
      Tensor target = video_frame<float>(video.frames, s + cfg.t);
      double acc = 0.0;
      const float* ph = res.frame->data();
      const float* pt = target.data();
      float* pm = want_error_maps ? maps.mut() + s * H * W : nullptr;
      for (size_t i = 0; i < target.numel(); ++i) {
        const double d = static_cast<double>(ph[i]) - static_cast<double>(pt[i]);
        acc += d * d;
        if (pm) pm[i] = static_cast<float>(d * d);
      }
      raw_v.push_back(acc / static_cast<double>(target.numel()));
    }
    if (cfg.branches.semantic) {
      raw_t.push_back(static_cast<double>(sim_loss(*clip.semantic, *res.semantic).scalar()));
    }
  }

  VideoScoreOutputs out;
  out.series.video_id = video.id;
  out.series.labels = video.labels;
  const std::vector<double> zeros(frames, 0.0);
  out.series.s_v = cfg.branches.vision
                       ? extend_to_frames(gaussian_smooth(raw_v, sp.sigma), cfg.t, frames)
                       : zeros;
  out.series.s_t = cfg.branches.semantic
                       ? extend_to_frames(gaussian_smooth(raw_t, sp.sigma), cfg.t, frames)
                       : zeros;
  if (cfg.branches.vision && cfg.branches.semantic) {
    out.series.s = combine_scores(out.series.s_v, out.series.s_t, sp.w_v, sp.w_t, sp.normalize);
  } else if (cfg.branches.vision) {
    out.series.s = sp.normalize ? min_max_normalize(out.series.s_v) : out.series.s_v;
  } else {
    out.series.s = sp.normalize ? min_max_normalize(out.series.s_t) : out.series.s_t;
  }
  if (want_error_maps && cfg.branches.vision) out.error_maps = maps;
  return out;
}

inline std::vector<ScoreSeries> score_corpus(const Model& model, const Corpus& corpus,
                                             const ScoringParams& sp, size_t threads = 1) {
  sp.validate();
  if (corpus.test.empty()) throw ValidationError("no test videos to score");
  std::vector<ScoreSeries> out(corpus.test.size());
  detail::parallel_for(corpus.test.size(), threads, [&](size_t i) {
    out[i] = score_video(model, corpus.test[i], sp).series;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation report.
// ---------------------------------------------------------------------------

struct EvalReport {
  double auc_micro = 0.0;
  double auc_per_video = 0.0;  // macro average over videos with both classes
  std::vector<std::pair<std::string, double>> per_video;
};

inline EvalReport evaluate_scores(const std::vector<ScoreSeries>& series) {
  if (series.empty()) throw ValidationError("evaluate: no score series");
  std::vector<double> all_scores;
  std::vector<int> all_labels;
  EvalReport rep;
  double macro = 0.0;
  size_t macro_n = 0;
  for (const auto& sr : series) {
    all_scores.insert(all_scores.end(), sr.s.begin(), sr.s.end());
    all_labels.insert(all_labels.end(), sr.labels.begin(), sr.labels.end());
    const bool has_pos = std::count(sr.labels.begin(), sr.labels.end(), 1) > 0;
    const bool has_neg = std::count(sr.labels.begin(), sr.labels.end(), 0) > 0;
    if (has_pos && has_neg) {
      const double a = roc_auc(sr.s, sr.labels);
      rep.per_video.emplace_back(sr.video_id, a);
      macro += a;
      macro_n += 1;
    }
  }
  rep.auc_micro = roc_auc(all_scores, all_labels);
  if (macro_n == 0) throw ValidationError("no video contains both classes");
  rep.auc_per_video = macro / static_cast<double>(macro_n);
  return rep;
}

// ---------------------------------------------------------------------------
// Expert usage over a corpus (selection fractions and mean routing scores).
// ---------------------------------------------------------------------------

struct ExpertUsageRow {
  size_t layer = 0, expert_index = 0;
  double selection_fraction = 0.0;
  double mean_score = 0.0;
};

inline std::vector<ExpertUsageRow> expert_usage(const Model& model, const Corpus& corpus,
                                                size_t threads = 1) {
  const ModelConfig& cfg = model.cfg;
  if (cfg.sffm_mode != SffmMode::Sffm)
    throw ValidationError("expert usage requires routed-expert layers");
  if (corpus.test.empty()) throw ValidationError("no test videos");
  const size_t L = cfg.layers, NR = cfg.sffm.n_routing();

  std::vector<std::vector<int64_t>> counts(corpus.test.size(),
                                           std::vector<int64_t>(L * NR, 0));
  std::vector<std::vector<double>> score_sums(corpus.test.size(),
                                              std::vector<double>(L * NR, 0.0));
  std::vector<int64_t> tokens(corpus.test.size(), 0);

  detail::parallel_for(corpus.test.size(), threads, [&](size_t vi) {
    const CorpusVideo& video = corpus.test[vi];
    const size_t n_windows = video.frames.shape[0] - cfg.t;
    for (size_t s = 0; s < n_windows; ++s) {
      ClipInput<float> clip;
      clip.video_id = video.id;
      clip.start = s;
      if (cfg.branches.spatial())
        clip.frame_patches = video_window_patches<float>(video.frames, s, cfg.t, cfg);
      if (cfg.branches.semantic)
        clip.semantic = model.semantic_provider->embed(video.descriptors[s], video.id,
                                                       static_cast<int64_t>(s));
      ForwardResult<float> res = model_forward(model, clip);
      for (size_t l = 0; l < res.sffm.size(); ++l) {
        const auto& st = res.sffm[l].stats;
        for (size_t e = 0; e < NR; ++e) {
          counts[vi][l * NR + e] += st.counts[e];
          score_sums[vi][l * NR + e] += st.mean_scores[e] * static_cast<double>(st.tokens);
        }
        if (l == 0) tokens[vi] += static_cast<int64_t>(st.tokens);
      }
    }
  });

  int64_t total_tokens = 0;
  for (int64_t t : tokens) total_tokens += t;
  std::vector<ExpertUsageRow> rows;
  for (size_t l = 0; l < L; ++l)
    for (size_t e = 0; e < NR; ++e) {
      ExpertUsageRow r;
      r.layer = l;
      r.expert_index = e;
      int64_t c = 0;
      double ssum = 0.0;
      for (size_t vi = 0; vi < corpus.test.size(); ++vi) {
        c += counts[vi][l * NR + e];
        ssum += score_sums[vi][l * NR + e];
      }
      if (total_tokens > 0) {
        r.selection_fraction = static_cast<double>(c) / static_cast<double>(total_tokens);
        r.mean_score = ssum / static_cast<double>(total_tokens);
      }
      rows.push_back(r);
    }
  return rows;
}

}  // namespace svad

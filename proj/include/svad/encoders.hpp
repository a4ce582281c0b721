#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "svad/corpus.hpp"
#include "svad/sfnf.hpp"
#include "svad/tensor.hpp"
#include "svad/transformer.hpp"

namespace svad {

// Fixed provider seeds: the frozen embedding providers must give identical
// outputs regardless of run seed, mirroring pretrained-and-frozen encoders.
constexpr uint64_t kVisionProviderSeed = 0x76697331;    // "vis1"
constexpr uint64_t kSemanticProviderSeed = 0x73656d31;  // "sem1"
constexpr size_t kDescriptorDim = 7;

// ---------------------------------------------------------------------------
// Frozen vision provider: seeded random linear projection of non-overlapping
// p x p patches (zero bias); cls token = mean of patch tokens.  File mode
// reads precomputed [Np+1, d_v] token blocks (row 0 = cls) instead.
// ---------------------------------------------------------------------------

template <typename S>
class VisionProviderT {
 public:
  VisionProviderT(size_t patch, size_t channels, size_t d_v) : patch_(patch), d_v_(d_v) {
    Rng rng(kVisionProviderSeed);
    proj_ = rand_uniform<S>(Shape{patch * patch * channels, d_v}, rng,
                            -1.0 / std::sqrt(static_cast<double>(patch * patch * channels)),
                            1.0 / std::sqrt(static_cast<double>(patch * patch * channels)));
  }

  VisionProviderT(std::shared_ptr<FeatureFileReader> file, size_t d_v)
      : d_v_(d_v), file_(std::move(file)) {}

  // Returns [Np+1, d_v]; row 0 is the cls token.
  TensorT<S> embed(const TensorT<S>& frame_patches, const std::string& video_id,
                   int64_t frame_index) const {
    if (file_) {
      Tensor raw = file_->fetch(video_id, frame_index);
      if (raw.shape.rank != 2 || raw.shape[1] != d_v_)
        throw IoError("vision feature block has shape " + raw.shape.str() + ", expected [*, " +
                      std::to_string(d_v_) + "]");
      return convert<S>(raw);
    }
    TensorT<S> patches = matmul(frame_patches, proj_);
    TensorT<S> cls = reshape(mean_axis0(patches), Shape{1, d_v_});
    return concat(0, std::vector<TensorT<S>>{cls, patches});
  }

  bool file_backed() const { return static_cast<bool>(file_); }
  size_t token_dim() const { return d_v_; }

 private:
  size_t patch_ = 0;
  size_t d_v_;
  TensorT<S> proj_;
  std::shared_ptr<FeatureFileReader> file_;
};

// ---------------------------------------------------------------------------
// Semantic provider: frozen seeded projection of the 7-value scene descriptor
// to d_text, L2-normalized.  File mode reads [d_text] vectors keyed by
// (video_id, window start).
// ---------------------------------------------------------------------------

template <typename S>
class SemanticProviderT {
 public:
  explicit SemanticProviderT(size_t d_text) : d_text_(d_text) {
    Rng rng(kSemanticProviderSeed);
    proj_ = rand_uniform<S>(Shape{kDescriptorDim, d_text}, rng,
                            -1.0 / std::sqrt(static_cast<double>(kDescriptorDim)),
                            1.0 / std::sqrt(static_cast<double>(kDescriptorDim)));
  }

  SemanticProviderT(std::shared_ptr<FeatureFileReader> file, size_t d_text)
      : d_text_(d_text), file_(std::move(file)) {}

  // Returns [1, d_text] with unit L2 norm.
  TensorT<S> embed(const SceneDescriptor& desc, const std::string& video_id,
                   int64_t window_start) const {
    if (file_) {
      Tensor raw = file_->fetch(video_id, window_start);
      if (raw.numel() != d_text_)
        throw IoError("semantic feature block has " + std::to_string(raw.numel()) +
                      " values, expected " + std::to_string(d_text_));
      TensorT<S> v = reshape(convert<S>(raw), Shape{1, d_text_});
      return normalize(v);
    }
    std::vector<S> dv(kDescriptorDim);
    for (size_t i = 0; i < kDescriptorDim; ++i) dv[i] = static_cast<S>(desc.values[i]);
    TensorT<S> v = matmul(TensorT<S>(Shape{1, kDescriptorDim}, std::move(dv)), proj_);
    return normalize(v);
  }

  size_t dim() const { return d_text_; }

 private:
  static TensorT<S> normalize(const TensorT<S>& v) {
    S norm2 = S(0);
    for (S x : *v.values) norm2 += x * x;
    const S norm = std::sqrt(norm2);
    if (!(norm > S(0))) throw NumericError("semantic embedding has zero norm");
    return scale(v, S(1) / norm);
  }

  size_t d_text_;
  TensorT<S> proj_;
  std::shared_ptr<FeatureFileReader> file_;
};

// ---------------------------------------------------------------------------
// Trainable motion encoder: patch embedding + learned cls + learned positional
// embedding, then pre-norm transformer layers over each difference frame.
// ---------------------------------------------------------------------------

template <typename S>
struct MotionEncoderT {
  TensorT<S> patch_w, patch_b;  // [p*p*C, d_m], [d_m]
  TensorT<S> cls;               // [1, d_m]
  TensorT<S> pos;               // [Np+1, d_m]
  std::vector<TransformerLayerT<S>> layers;
};

using MotionEncoder = MotionEncoderT<float>;

template <typename S>
MotionEncoderT<S> make_motion_encoder(size_t patch_dim, size_t np, size_t d_m, size_t depth,
                                      size_t mlp_factor, Rng& rng) {
  MotionEncoderT<S> enc;
  enc.patch_w = linear_uniform<S>(patch_dim, d_m, rng);
  enc.patch_b = TensorT<S>::zeros(Shape{d_m});
  enc.cls = randn<S>(Shape{1, d_m}, rng, 0.02);
  enc.pos = randn<S>(Shape{np + 1, d_m}, rng, 0.02);
  for (size_t i = 0; i < depth; ++i) enc.layers.push_back(make_transformer_layer<S>(d_m, mlp_factor, rng));
  return enc;
}

// diffs: one [Np, p*p*C] patch matrix per difference frame.  Returns the
// per-diff token sets stacked on axis 0: [(t-1) * (Np+1), d_m].
template <typename S>
TensorT<S> motion_encode(const std::vector<TensorT<S>>& diffs, const MotionEncoderT<S>& enc,
                         size_t heads) {
  if (diffs.empty()) throw ValidationError("motion_encode: no difference frames");
  const size_t np = diffs[0].shape[0];
  std::vector<TensorT<S>> token_sets;
  for (const auto& dpatch : diffs) {
    TensorT<S> tok = add(matmul(dpatch, enc.patch_w), enc.patch_b);  // [Np, d_m]
    TensorT<S> with_cls = concat(0, std::vector<TensorT<S>>{enc.cls, tok});
    token_sets.push_back(add(with_cls, enc.pos));
  }
  TensorT<S> x = token_sets.size() == 1 ? token_sets[0] : concat(0, token_sets);
  for (const auto& layer : enc.layers)
    x = transformer_layer_forward(x, layer, heads, np + 1);
  return x;
}

// ---------------------------------------------------------------------------
// Fusion: per position (cls + each patch), channel-concat the t vision token
// sets and t motion token sets (slot for frame 1 zero-padded), project to d,
// add learned positional embedding to patch rows, prepend the projected
// semantic token.
// ---------------------------------------------------------------------------

struct BranchToggles {
  bool vision = true;
  bool semantic = true;
  bool motion = true;

  bool spatial() const { return vision || motion; }
  void validate() const {
    if (!vision && !semantic && !motion)
      throw ValidationError("branches: at least one of vision/semantic/motion must be enabled");
    if (!vision && !semantic)
      throw ValidationError(
          "branches: motion alone provides no training objective (needs vision for frame "
          "prediction or semantic for similarity)");
  }
};

template <typename S>
struct FusionT {
  TensorT<S> proj_w, proj_b;  // [channels, d], [d]
  TensorT<S> pos;             // [Np, d]
  TensorT<S> sem_w, sem_b;    // [d_text, d], [d]  (semantic branch only)
};

using Fusion = FusionT<float>;

template <typename S>
FusionT<S> make_fusion(size_t channels, size_t np, size_t d, size_t d_text,
                       const BranchToggles& branches, Rng& rng) {
  FusionT<S> f;
  if (branches.spatial()) {
    f.proj_w = linear_uniform<S>(channels, d, rng);
    f.proj_b = TensorT<S>::zeros(Shape{d});
    f.pos = randn<S>(Shape{np, d}, rng, 0.02);
  }
  if (branches.semantic) {
    f.sem_w = linear_uniform<S>(d_text, d, rng);
    f.sem_b = TensorT<S>::zeros(Shape{d});
  }
  return f;
}

template <typename S>
struct FusedSequenceT {
  TensorT<S> tokens;      // [len, d]
  size_t patch_offset = 0;  // row of the first patch token
  size_t np = 0;
  bool has_semantic = false;
  bool has_spatial = false;
};

// vision: t token sets [Np+1, d_v] (row 0 cls), empty when branch off.
// motion: [(t-1)*(Np+1), d_m] stacked, empty when branch off.
// semantic: [1, d_text], empty when branch off.
template <typename S>
FusedSequenceT<S> fuse(const std::vector<TensorT<S>>& vision, const TensorT<S>& motion,
                       const std::optional<TensorT<S>>& semantic, const FusionT<S>& fusion,
                       const BranchToggles& branches, size_t t) {
  FusedSequenceT<S> out;
  out.has_semantic = branches.semantic;
  out.has_spatial = branches.spatial();

  std::vector<TensorT<S>> parts;
  size_t np = 0;
  if (branches.vision) {
    if (vision.size() != t) throw ValidationError("fuse: expected " + std::to_string(t) + " vision token sets");
    np = vision[0].shape[0] - 1;
    for (const auto& v : vision) parts.push_back(v);
  }
  if (branches.motion) {
    const size_t rows = motion.shape[0];
    if (rows % (t - 1) != 0) throw ValidationError("fuse: motion rows not divisible by t-1");
    const size_t set = rows / (t - 1);
    np = set - 1;
    // Zero slot for frame 1 keeps the channel layout uniform across positions.
    parts.push_back(TensorT<S>::zeros(Shape{set, motion.shape[1]}));
    for (size_t i = 0; i + 1 < t; ++i) parts.push_back(slice_rows(motion, i * set, (i + 1) * set));
  }

  std::vector<TensorT<S>> rows;
  if (out.has_spatial) {
    TensorT<S> stacked = concat(1, parts);  // [Np+1, channels]
    TensorT<S> proj = add(matmul(stacked, fusion.proj_w), fusion.proj_b);
    TensorT<S> cls = slice_rows(proj, 0, 1);
    TensorT<S> patches = add(slice_rows(proj, 1, np + 1), fusion.pos);
    if (branches.semantic) {
      if (!semantic) throw ValidationError("fuse: semantic branch enabled but no embedding given");
      TensorT<S> sem_tok = add(matmul(*semantic, fusion.sem_w), fusion.sem_b);
      rows = {sem_tok, cls, patches};
      out.patch_offset = 2;
    } else {
      rows = {cls, patches};
      out.patch_offset = 1;
    }
    out.np = np;
    out.tokens = concat(0, rows);
  } else {
    if (!semantic) throw ValidationError("fuse: semantic branch enabled but no embedding given");
    out.tokens = add(matmul(*semantic, fusion.sem_w), fusion.sem_b);
    out.patch_offset = 1;
    out.np = 0;
  }
  return out;
}

}  // namespace svad

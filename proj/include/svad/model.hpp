#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "svad/corpus.hpp"
#include "svad/encoders.hpp"
#include "svad/sffm.hpp"
#include "svad/tensor.hpp"
#include "svad/transformer.hpp"

namespace svad {

enum class SffmMode { Sffm, Memory, None };

inline const char* sffm_mode_name(SffmMode m) {
  switch (m) {
    case SffmMode::Sffm: return "sffm";
    case SffmMode::Memory: return "memory";
    case SffmMode::None: return "none";
  }
  return "?";
}

struct ModelConfig {
  size_t height = 64, width = 64, channels = 1;
  size_t patch = 8;
  size_t t = kWindow;  // temporal context
  size_t dim = 64;     // shared token dim d (= d_v = d_m)
  size_t heads = 4;
  size_t layers = 4;        // decoder depth
  size_t mlp_factor = 2;    // transformer MLP hidden multiple
  size_t motion_layers = 2;
  size_t d_text = 32;
  SffmConfig sffm;
  SffmMode sffm_mode = SffmMode::Sffm;
  size_t memory_slots = 256;
  BranchToggles branches;
  bool skip = true;

  size_t np() const { return (height / patch) * (width / patch); }
  size_t patch_dim() const { return patch * patch * channels; }
  size_t fusion_channels() const {
    size_t c = 0;
    if (branches.vision) c += t * dim;
    if (branches.motion) c += t * dim;  // includes the zero-padded frame-1 slot
    return c;
  }

  void validate() const {
    if (height == 0 || width == 0 || channels == 0) throw ValidationError("model: empty frame shape");
    if (patch == 0 || height % patch != 0 || width % patch != 0)
      throw ValidationError("model: patch size " + std::to_string(patch) +
                            " must divide frame extents " + std::to_string(height) + "x" +
                            std::to_string(width));
    if (t < 2) throw ValidationError("model: temporal context must be >= 2");
    if (dim == 0 || heads == 0 || dim % heads != 0)
      throw ValidationError("model: dim " + std::to_string(dim) + " not divisible by heads " +
                            std::to_string(heads));
    if (layers < 1) throw ValidationError("model: decoder needs at least one layer");
    if (motion_layers < 1) throw ValidationError("model: motion encoder needs at least one layer");
    branches.validate();
    if (sffm_mode == SffmMode::Sffm) {
      if (sffm.dim != dim) throw ValidationError("model: sffm dim must equal model dim");
      sffm.validate();
    }
    if (sffm_mode == SffmMode::Memory && memory_slots == 0)
      throw ValidationError("model: memory mode needs at least one slot");
  }
};

template <typename S>
struct DecoderLayerT {
  TransformerLayerT<S> block;
  SffmLayerT<S> sffm;  // populated only in Sffm mode
};

template <typename S>
struct ModelT {
  ModelConfig cfg;

  // Frozen providers (no trainable parameters).
  std::shared_ptr<VisionProviderT<S>> vision_provider;
  std::shared_ptr<SemanticProviderT<S>> semantic_provider;

  // Trainable modules.
  MotionEncoderT<S> motion;
  FusionT<S> fusion;
  std::vector<DecoderLayerT<S>> decoder;
  MemoryModuleT<S> memory;              // Memory mode only
  TensorT<S> frame_w, frame_b;          // [d, p*p*C], [p*p*C]; vision branch only
  TensorT<S> sem_head_w, sem_head_b;    // [d, d_text], [d_text]; semantic branch only
};

using Model = ModelT<float>;

// Visits every trainable tensor in a fixed order; the registry order defines
// gradient-merge order, checkpoint layout, and the parameter census.
template <typename S, typename F>
void visit_params(ModelT<S>& m, F&& f) {
  const ModelConfig& cfg = m.cfg;
  auto layer_params = [&](const std::string& prefix, TransformerLayerT<S>& l) {
    f(prefix + ".ln1_g", l.ln1_g);
    f(prefix + ".ln1_b", l.ln1_b);
    f(prefix + ".ln2_g", l.ln2_g);
    f(prefix + ".ln2_b", l.ln2_b);
    f(prefix + ".w_qkv", l.w_qkv);
    f(prefix + ".b_qkv", l.b_qkv);
    f(prefix + ".w_out", l.w_out);
    f(prefix + ".b_out", l.b_out);
    f(prefix + ".w_mlp1", l.w_mlp1);
    f(prefix + ".b_mlp1", l.b_mlp1);
    f(prefix + ".w_mlp2", l.w_mlp2);
    f(prefix + ".b_mlp2", l.b_mlp2);
  };

  if (cfg.branches.motion) {
    f("motion.patch_w", m.motion.patch_w);
    f("motion.patch_b", m.motion.patch_b);
    f("motion.cls", m.motion.cls);
    f("motion.pos", m.motion.pos);
    for (size_t i = 0; i < m.motion.layers.size(); ++i)
      layer_params("motion.layer" + std::to_string(i), m.motion.layers[i]);
  }
  if (cfg.branches.spatial()) {
    f("fusion.proj_w", m.fusion.proj_w);
    f("fusion.proj_b", m.fusion.proj_b);
    f("fusion.pos", m.fusion.pos);
  }
  if (cfg.branches.semantic) {
    f("fusion.sem_w", m.fusion.sem_w);
    f("fusion.sem_b", m.fusion.sem_b);
  }
  for (size_t i = 0; i < m.decoder.size(); ++i) {
    const std::string prefix = "decoder.layer" + std::to_string(i);
    layer_params(prefix, m.decoder[i].block);
    if (cfg.sffm_mode == SffmMode::Sffm) {
      for (size_t e = 0; e < m.decoder[i].sffm.experts.size(); ++e) {
        const std::string ep = prefix + ".expert" + std::to_string(e);
        f(ep + ".reduce_w", m.decoder[i].sffm.experts[e].reduce_w);
        f(ep + ".reduce_b", m.decoder[i].sffm.experts[e].reduce_b);
        f(ep + ".expand_w", m.decoder[i].sffm.experts[e].expand_w);
        f(ep + ".expand_b", m.decoder[i].sffm.experts[e].expand_b);
      }
      f(prefix + ".router_w", m.decoder[i].sffm.router_w);
    }
  }
  if (cfg.sffm_mode == SffmMode::Memory) f("memory.slots", m.memory.slots);
  if (cfg.branches.vision) {
    f("head.frame_w", m.frame_w);
    f("head.frame_b", m.frame_b);
  }
  if (cfg.branches.semantic) {
    f("head.sem_w", m.sem_head_w);
    f("head.sem_b", m.sem_head_b);
  }
}

template <typename S>
size_t parameter_count(ModelT<S>& m) {
  size_t total = 0;
  visit_params(m, [&](const std::string&, TensorT<S>& t) { total += t.numel(); });
  return total;
}

template <typename S>
ModelT<S> make_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ModelT<S> m;
  m.cfg = cfg;
  m.vision_provider = std::make_shared<VisionProviderT<S>>(cfg.patch, cfg.channels, cfg.dim);
  m.semantic_provider = std::make_shared<SemanticProviderT<S>>(cfg.d_text);

  Rng rng(seed ^ 0x6d6f64656cULL);  // distinct stream from corpus/batching draws
  if (cfg.branches.motion)
    m.motion = make_motion_encoder<S>(cfg.patch_dim(), cfg.np(), cfg.dim, cfg.motion_layers,
                                      cfg.mlp_factor, rng);
  m.fusion = make_fusion<S>(cfg.fusion_channels(), cfg.np(), cfg.dim, cfg.d_text, cfg.branches, rng);
  for (size_t i = 0; i < cfg.layers; ++i) {
    DecoderLayerT<S> layer;
    layer.block = make_transformer_layer<S>(cfg.dim, cfg.mlp_factor, rng);
    if (cfg.sffm_mode == SffmMode::Sffm) layer.sffm = make_sffm_layer<S>(cfg.sffm, rng);
    m.decoder.push_back(std::move(layer));
  }
  if (cfg.sffm_mode == SffmMode::Memory)
    m.memory = make_memory_module<S>(cfg.memory_slots, cfg.dim, rng);
  if (cfg.branches.vision) {
    m.frame_w = linear_uniform<S>(cfg.dim, cfg.patch_dim(), rng);
    m.frame_b = TensorT<S>::zeros(Shape{cfg.patch_dim()});
  }
  if (cfg.branches.semantic) {
    m.sem_head_w = linear_uniform<S>(cfg.dim, cfg.d_text, rng);
    m.sem_head_b = TensorT<S>::zeros(Shape{cfg.d_text});
  }
  return m;
}

// Shallow copy whose trainable tensors are registered as leaves on the active
// tape.  The original is untouched, so independent tapes can watch the same
// model concurrently.
template <typename S>
ModelT<S> watch_model(const ModelT<S>& m) {
  ModelT<S> copy = m;
  visit_params(copy, [](const std::string&, TensorT<S>& t) { t = watch(t); });
  return copy;
}

// ---------------------------------------------------------------------------
// Forward pass.
// ---------------------------------------------------------------------------

// One training/scoring window: t input frames (as patch matrices), the
// window's semantic embedding, and identifiers for file-backed providers.
template <typename S>
struct ClipInput {
  std::vector<TensorT<S>> frame_patches;  // t entries, [Np, p*p*C], untracked
  std::optional<TensorT<S>> semantic;     // [1, d_text]
  std::string video_id;
  size_t start = 0;
};

template <typename S>
struct ForwardResult {
  std::optional<TensorT<S>> frame;     // [C,H,W] in [0,1]
  std::optional<TensorT<S>> semantic;  // [1, d_text]
  std::vector<SffmResultT<S>> sffm;    // one per decoder layer in Sffm mode
};

template <typename S>
ForwardResult<S> model_forward(const ModelT<S>& m, const ClipInput<S>& clip) {
  const ModelConfig& cfg = m.cfg;
  if (cfg.branches.spatial() && clip.frame_patches.size() != cfg.t)
    throw ValidationError("model_forward: expected " + std::to_string(cfg.t) + " input frames, got " +
                          std::to_string(clip.frame_patches.size()));

  // Vision tokens (frozen).
  std::vector<TensorT<S>> vision;
  if (cfg.branches.vision) {
    for (size_t i = 0; i < cfg.t; ++i)
      vision.push_back(m.vision_provider->embed(clip.frame_patches[i], clip.video_id,
                                                static_cast<int64_t>(clip.start + i)));
  }

  // Motion tokens (trainable) over frame differences.
  TensorT<S> motion_tokens;
  if (cfg.branches.motion) {
    std::vector<TensorT<S>> diffs;
    for (size_t i = 1; i < cfg.t; ++i)
      diffs.push_back(sub(clip.frame_patches[i], clip.frame_patches[i - 1]));
    motion_tokens = motion_encode(diffs, m.motion, cfg.heads);
  }

  FusedSequenceT<S> fused =
      fuse(vision, motion_tokens, clip.semantic, m.fusion, cfg.branches, cfg.t);

  TensorT<S> x = fused.tokens;
  if (cfg.sffm_mode == SffmMode::Memory) x = memory_forward(x, m.memory);

  ForwardResult<S> out;
  for (const auto& layer : m.decoder) {
    x = transformer_layer_forward(x, layer.block, cfg.heads);
    if (cfg.sffm_mode == SffmMode::Sffm) {
      SffmResultT<S> res = sffm_forward(x, cfg.sffm, layer.sffm);
      x = res.y;
      out.sffm.push_back(std::move(res));
    }
  }

  if (cfg.branches.vision) {
    TensorT<S> patch_tokens = slice_rows(x, fused.patch_offset, fused.patch_offset + fused.np);
    if (cfg.skip) {
      TensorT<S> skip_tokens =
          slice_rows(fused.tokens, fused.patch_offset, fused.patch_offset + fused.np);
      patch_tokens = add(patch_tokens, skip_tokens);
    }
    TensorT<S> patches = add(matmul(patch_tokens, m.frame_w), m.frame_b);
    out.frame = sigmoid(patches_to_image(patches, cfg.channels, cfg.height, cfg.width, cfg.patch));
  }
  if (cfg.branches.semantic) {
    TensorT<S> tok0 = slice_rows(x, 0, 1);
    out.semantic = add(matmul(tok0, m.sem_head_w), m.sem_head_b);
  }
  return out;
}

// Extracts patch matrices for frames [start, start+count) of a [F,H,W,1] video tensor.
template <typename S>
std::vector<TensorT<S>> video_window_patches(const Tensor& video, size_t start, size_t count,
                                             const ModelConfig& cfg) {
  const size_t H = video.shape[1], W = video.shape[2];
  const size_t frame_sz = H * W;
  std::vector<TensorT<S>> out;
  for (size_t i = 0; i < count; ++i) {
    std::vector<S> fr(frame_sz);
    const float* src = video.data() + (start + i) * frame_sz;
    for (size_t j = 0; j < frame_sz; ++j) fr[j] = static_cast<S>(src[j]);
    TensorT<S> img(Shape{cfg.channels, H, W}, std::move(fr));
    out.push_back(image_to_patches(img, cfg.channels, H, W, cfg.patch));
  }
  return out;
}

// Frame `index` of a [F,H,W,1] video as a [C,H,W] tensor.
template <typename S>
TensorT<S> video_frame(const Tensor& video, size_t index) {
  const size_t H = video.shape[1], W = video.shape[2];
  std::vector<S> fr(H * W);
  const float* src = video.data() + index * H * W;
  for (size_t j = 0; j < fr.size(); ++j) fr[j] = static_cast<S>(src[j]);
  return TensorT<S>(Shape{1, H, W}, std::move(fr));
}

}  // namespace svad

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "svad/common.hpp"
#include "svad/sfnf.hpp"
#include "svad/tensor.hpp"

namespace svad {

constexpr int kGeneratorVersion = 1;
constexpr size_t kWindow = 4;  // temporal context length t

enum class ShapeType { Square = 0, Circle = 1, Triangle = 2 };
enum class AnomalyKind { FastMotion, NovelShape, ErraticMotion, SemanticFlip };

inline const char* anomaly_kind_name(AnomalyKind k) {
  switch (k) {
    case AnomalyKind::FastMotion: return "fast-motion";
    case AnomalyKind::NovelShape: return "novel-shape";
    case AnomalyKind::ErraticMotion: return "erratic-motion";
    case AnomalyKind::SemanticFlip: return "semantic-flip";
  }
  return "?";
}

struct SceneObject {
  ShapeType type;
  double size;       // half-extent (circumradius for triangle), px
  double intensity;  // fill value in (0,1]
  double px, py;     // center
  double vx, vy;     // px/frame
};

struct SceneSpec {
  size_t height = 64, width = 64, frames = 120;
  uint64_t background_seed = 0;
  std::vector<SceneObject> objects;
};

struct AnomalyEvent {
  AnomalyKind kind;
  size_t start, end;  // inclusive frame span
  size_t target;      // object index
};

// Fixed layout: [square count, circle count, triangle count (each averaged
// over window frames), mean speed, max speed, object count, erratic flag].
struct SceneDescriptor {
  std::array<double, 7> values{};
};

struct GenOptions {
  uint64_t seed = 7;
  size_t train_videos = 64;
  size_t test_videos = 16;
  size_t frames = 120;
  size_t height = 64, width = 64;
  double flip_fraction = 0.25;  // share of test videos whose event is semantic-flip
};

struct GeneratedVideo {
  std::string id;
  bool is_test = false;
  SceneSpec spec;
  std::vector<AnomalyEvent> events;
  Tensor frames;  // [F,H,W,1]
  std::vector<int> labels;
  std::vector<SceneDescriptor> descriptors;  // indexed by window start, 0..F-t
};

struct GeneratedCorpus {
  GenOptions opts;
  std::vector<GeneratedVideo> train, test;
};

namespace detail {

// Normal-regime bounds shared by the generator and the descriptor tests.
constexpr double kNormalSpeedLo = 0.5, kNormalSpeedHi = 1.5;
constexpr double kFastFactor = 4.0;

struct ObjectState {
  ShapeType type;
  double px, py, vx, vy;
  double base_speed;
  bool erratic = false;
};

struct FrameSnapshot {
  std::vector<ShapeType> types;
  std::vector<double> speeds;
  bool any_erratic = false;
};

inline bool inside_shape(ShapeType type, double dx, double dy, double s) {
  switch (type) {
    case ShapeType::Square:
      return std::abs(dx) <= s && std::abs(dy) <= s;
    case ShapeType::Circle:
      return dx * dx + dy * dy <= s * s;
    case ShapeType::Triangle: {
      // Equilateral, apex up (image y grows downward).
      const double x0 = 0.0, y0 = -s;
      const double x1 = s * 0.8660254037844386, y1 = s * 0.5;
      const double x2 = -x1, y2 = y1;
      auto side = [&](double ax, double ay, double bx, double by) {
        return (bx - ax) * (dy - ay) - (by - ay) * (dx - ax);
      };
      const double c0 = side(x0, y0, x1, y1);
      const double c1 = side(x1, y1, x2, y2);
      const double c2 = side(x2, y2, x0, y0);
      return (c0 >= 0 && c1 >= 0 && c2 >= 0) || (c0 <= 0 && c1 <= 0 && c2 <= 0);
    }
  }
  return false;
}

// 4x4 supersampled coverage, alpha-composited onto the canvas.
inline void rasterize_object(std::vector<float>& img, size_t H, size_t W,
                             const ObjectState& st, double size, double intensity) {
  const double pad = size + 1.5;
  const long x0 = std::max<long>(0, static_cast<long>(std::floor(st.px - pad)));
  const long x1 = std::min<long>(static_cast<long>(W) - 1, static_cast<long>(std::ceil(st.px + pad)));
  const long y0 = std::max<long>(0, static_cast<long>(std::floor(st.py - pad)));
  const long y1 = std::min<long>(static_cast<long>(H) - 1, static_cast<long>(std::ceil(st.py + pad)));
  for (long y = y0; y <= y1; ++y) {
    for (long x = x0; x <= x1; ++x) {
      int hit = 0;
      for (int sy = 0; sy < 4; ++sy)
        for (int sx = 0; sx < 4; ++sx) {
          const double cx = x + (sx + 0.5) / 4.0;
          const double cy = y + (sy + 0.5) / 4.0;
          if (inside_shape(st.type, cx - st.px, cy - st.py, size)) ++hit;
        }
      if (hit == 0) continue;
      const double cov = hit / 16.0;
      float& v = img[static_cast<size_t>(y) * W + static_cast<size_t>(x)];
      v = static_cast<float>(v * (1.0 - cov) + intensity * cov);
    }
  }
}

inline std::vector<float> make_background(size_t H, size_t W, uint64_t bg_seed) {
  Rng rng(bg_seed);
  const double fx = 1.0 + rng.next_below(3);  // 1..3 full periods across the canvas
  const double fy = 1.0 + rng.next_below(3);
  const double phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
  const double base = 0.08, amp = 0.12;
  std::vector<float> bg(H * W);
  for (size_t y = 0; y < H; ++y)
    for (size_t x = 0; x < W; ++x) {
      const double s = std::sin(2.0 * 3.14159265358979323846 *
                                    (fx * x / static_cast<double>(W) + fy * y / static_cast<double>(H)) +
                                phase);
      bg[y * W + x] = static_cast<float>(base + amp * 0.5 * (1.0 + s));
    }
  return bg;
}

inline void reflect_into(double& p, double& v, double lo, double hi) {
  if (p < lo) {
    p = lo + (lo - p);
    v = -v;
  } else if (p > hi) {
    p = hi - (p - hi);
    v = -v;
  }
  p = std::clamp(p, lo, hi);
}

}  // namespace detail

// Simulates and rasterizes one video.  `global_index` keys the per-video RNG
// stream (corpus seed XOR video index), making generation order-independent.
inline GeneratedVideo generate_video(const GenOptions& opts, size_t global_index, bool is_test,
                                     AnomalyKind kind_if_test) {
  const size_t H = opts.height, W = opts.width, F = opts.frames;
  const size_t t = kWindow;
  if (F < t + 2) throw ValidationError("generate_video: frame count too small");

  Rng rng(opts.seed ^ static_cast<uint64_t>(global_index));

  GeneratedVideo video;
  {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "vid_%04zu", global_index);
    video.id = buf;
  }
  video.is_test = is_test;

  SceneSpec& spec = video.spec;
  spec.height = H;
  spec.width = W;
  spec.frames = F;
  spec.background_seed = rng.next_u64();

  // Normal regime: homogeneous shape type per video so mixed-type windows are
  // never seen in training — this is what makes semantic flips out-of-distribution.
  const ShapeType video_type = rng.next_below(2) == 0 ? ShapeType::Square : ShapeType::Circle;
  const size_t n_objects = 2 + rng.next_below(3);
  std::vector<detail::ObjectState> states;
  for (size_t i = 0; i < n_objects; ++i) {
    SceneObject obj;
    obj.type = video_type;
    obj.size = rng.uniform(4.0, 7.0);
    obj.intensity = rng.uniform(0.55, 0.95);
    obj.px = rng.uniform(obj.size + 1.0, W - obj.size - 1.0);
    obj.py = rng.uniform(obj.size + 1.0, H - obj.size - 1.0);
    const double speed = rng.uniform(detail::kNormalSpeedLo, detail::kNormalSpeedHi);
    const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    obj.vx = speed * std::cos(angle);
    obj.vy = speed * std::sin(angle);
    spec.objects.push_back(obj);
    states.push_back({obj.type, obj.px, obj.py, obj.vx, obj.vy, speed, false});
  }

  if (is_test) {
    AnomalyEvent ev;
    ev.kind = kind_if_test;
    const size_t lo = std::max<size_t>(1, F / 4);
    const size_t hi = std::max(lo + 1, (7 * F) / 12);
    ev.start = lo + rng.next_below(hi - lo);
    const size_t dlo = std::max<size_t>(2, F / 6);
    const size_t dhi = std::max(dlo + 1, F / 3);
    const size_t dur = dlo + rng.next_below(dhi - dlo);
    ev.end = std::min(ev.start + dur - 1, F - 2);
    ev.target = rng.next_below(n_objects);
    video.events.push_back(ev);
  }

  const std::vector<float> bg = detail::make_background(H, W, spec.background_seed);

  std::vector<float> pixels(F * H * W);
  std::vector<detail::FrameSnapshot> snaps(F);
  video.labels.assign(F, 0);

  for (size_t f = 0; f < F; ++f) {
    // Event transitions.
    for (const AnomalyEvent& ev : video.events) {
      detail::ObjectState& st = states[ev.target];
      if (f == ev.start) {
        switch (ev.kind) {
          case AnomalyKind::FastMotion:
            st.vx *= detail::kFastFactor;
            st.vy *= detail::kFastFactor;
            break;
          case AnomalyKind::NovelShape:
            st.type = ShapeType::Triangle;
            break;
          case AnomalyKind::ErraticMotion:
            st.erratic = true;
            break;
          case AnomalyKind::SemanticFlip:
            st.type = st.type == ShapeType::Square ? ShapeType::Circle : ShapeType::Square;
            break;
        }
      }
      if (f == ev.end + 1) {
        const double sp = std::hypot(st.vx, st.vy);
        switch (ev.kind) {
          case AnomalyKind::FastMotion:
            st.vx /= detail::kFastFactor;
            st.vy /= detail::kFastFactor;
            break;
          case AnomalyKind::NovelShape:
          case AnomalyKind::SemanticFlip:
            st.type = spec.objects[ev.target].type;
            break;
          case AnomalyKind::ErraticMotion:
            st.erratic = false;
            if (sp > 0) {
              st.vx *= st.base_speed / sp;
              st.vy *= st.base_speed / sp;
            }
            break;
        }
      }
      if (f >= ev.start && f <= ev.end) video.labels[f] = 1;
    }

    // Motion step (frame 0 uses initial placement).
    if (f > 0) {
      for (size_t i = 0; i < states.size(); ++i) {
        detail::ObjectState& st = states[i];
        if (st.erratic) {
          // Direction re-randomized every frame; speed stays in the normal band.
          const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
          st.vx = st.base_speed * std::cos(angle);
          st.vy = st.base_speed * std::sin(angle);
        }
        st.px += st.vx;
        st.py += st.vy;
        const double s = spec.objects[i].size;
        detail::reflect_into(st.px, st.vx, s + 1.0, W - s - 1.0);
        detail::reflect_into(st.py, st.vy, s + 1.0, H - s - 1.0);
      }
    }

    // Rasterize.
    std::vector<float> img = bg;
    for (size_t i = 0; i < states.size(); ++i)
      detail::rasterize_object(img, H, W, states[i], spec.objects[i].size, spec.objects[i].intensity);
    std::copy(img.begin(), img.end(), pixels.begin() + f * H * W);

    // Ground-truth snapshot for descriptors.
    detail::FrameSnapshot& snap = snaps[f];
    for (const auto& st : states) {
      snap.types.push_back(st.type);
      snap.speeds.push_back(std::hypot(st.vx, st.vy));
      snap.any_erratic |= st.erratic;
    }
  }

  video.frames = Tensor(Shape{F, H, W, 1}, std::move(pixels));

  // Window descriptors from generator ground truth (an oracle captioner).
  video.descriptors.resize(F - t + 1);
  for (size_t s = 0; s + t <= F; ++s) {
    SceneDescriptor& d = video.descriptors[s];
    double mean_speed = 0, max_speed = 0;
    double erratic = 0;
    for (size_t f = s; f < s + t; ++f) {
      const auto& snap = snaps[f];
      for (size_t i = 0; i < snap.types.size(); ++i) {
        d.values[static_cast<size_t>(snap.types[i])] += 1.0;
        mean_speed += snap.speeds[i];
        max_speed = std::max(max_speed, snap.speeds[i]);
      }
      if (snap.any_erratic) erratic = 1.0;
    }
    for (int k = 0; k < 3; ++k) d.values[k] /= static_cast<double>(t);
    d.values[3] = mean_speed / static_cast<double>(t * n_objects);
    d.values[4] = max_speed;
    d.values[5] = static_cast<double>(n_objects);
    d.values[6] = erratic;
  }
  return video;
}

inline std::vector<AnomalyKind> plan_test_kinds(size_t test_videos, double flip_fraction) {
  std::vector<AnomalyKind> kinds;
  const size_t n_flip = static_cast<size_t>(std::llround(flip_fraction * test_videos));
  const AnomalyKind cycle[3] = {AnomalyKind::FastMotion, AnomalyKind::NovelShape,
                                AnomalyKind::ErraticMotion};
  for (size_t i = 0; i < test_videos; ++i)
    kinds.push_back(i < n_flip ? AnomalyKind::SemanticFlip : cycle[(i - n_flip) % 3]);
  return kinds;
}

inline GeneratedCorpus generate_corpus(const GenOptions& opts) {
  if (opts.train_videos < 1 || opts.test_videos < 1)
    throw ValidationError("generate_corpus: video counts must be >= 1");
  GeneratedCorpus corpus;
  corpus.opts = opts;
  for (size_t i = 0; i < opts.train_videos; ++i)
    corpus.train.push_back(generate_video(opts, i, false, AnomalyKind::FastMotion));
  const auto kinds = plan_test_kinds(opts.test_videos, opts.flip_fraction);
  for (size_t i = 0; i < opts.test_videos; ++i)
    corpus.test.push_back(generate_video(opts, opts.train_videos + i, true, kinds[i]));
  return corpus;
}

// ---------------------------------------------------------------------------
// Disk layout: manifest.json, train/vid_####.sfnf, test/vid_####.sfnf,
// labels.csv (video_id,frame,label), descriptors.jsonl (video_id,start,values).
// ---------------------------------------------------------------------------

inline void write_corpus(const std::string& dir, const GeneratedCorpus& corpus, bool force) {
  namespace fs = std::filesystem;
  fs::path root(dir);
  if (fs::exists(root) && !fs::is_empty(root) && !force)
    throw ValidationError("output directory not empty (use --force): " + dir);
  fs::create_directories(root / "train");
  fs::create_directories(root / "test");

  nlohmann::json manifest = {
      {"seed", corpus.opts.seed},
      {"generator_version", kGeneratorVersion},
      {"height", corpus.opts.height},
      {"width", corpus.opts.width},
      {"frames", corpus.opts.frames},
      {"train_videos", corpus.opts.train_videos},
      {"test_videos", corpus.opts.test_videos},
      {"window", kWindow},
      {"flip_fraction", corpus.opts.flip_fraction},
  };
  nlohmann::json events = nlohmann::json::array();
  for (const auto& v : corpus.test)
    for (const auto& ev : v.events)
      events.push_back({{"video_id", v.id},
                        {"kind", anomaly_kind_name(ev.kind)},
                        {"start", ev.start},
                        {"end", ev.end}});
  manifest["events"] = events;

  {
    std::ofstream os(root / "manifest.json");
    if (!os) throw IoError("cannot write manifest: " + dir);
    os << manifest.dump(2) << "\n";
  }

  std::ofstream labels(root / "labels.csv");
  if (!labels) throw IoError("cannot write labels.csv");
  labels << "video_id,frame,label\n";
  std::ofstream descs(root / "descriptors.jsonl");
  if (!descs) throw IoError("cannot write descriptors.jsonl");

  auto emit = [&](const GeneratedVideo& v, const fs::path& split_dir) {
    save_sfnf_file((split_dir / (v.id + ".sfnf")).string(), v.frames);
    for (size_t f = 0; f < v.labels.size(); ++f)
      labels << v.id << "," << f << "," << v.labels[f] << "\n";
    for (size_t s = 0; s < v.descriptors.size(); ++s) {
      nlohmann::json row = {{"video_id", v.id},
                            {"start", s},
                            {"values", v.descriptors[s].values}};
      descs << row.dump() << "\n";
    }
  };
  for (const auto& v : corpus.train) emit(v, root / "train");
  for (const auto& v : corpus.test) emit(v, root / "test");
  if (!labels || !descs) throw IoError("corpus write failed: " + dir);
}

struct CorpusVideo {
  std::string id;
  Tensor frames;  // [F,H,W,1]
  std::vector<int> labels;
  std::vector<SceneDescriptor> descriptors;
};

struct Corpus {
  nlohmann::json manifest;
  size_t height = 0, width = 0, frames = 0, window = kWindow;
  std::vector<CorpusVideo> train, test;
};

inline Corpus load_corpus(const std::string& dir) {
  namespace fs = std::filesystem;
  fs::path root(dir);
  std::ifstream mf(root / "manifest.json");
  if (!mf) throw IoError("cannot open manifest: " + (root / "manifest.json").string());
  Corpus corpus;
  corpus.manifest = nlohmann::json::parse(mf, nullptr, false);
  if (corpus.manifest.is_discarded()) throw IoError("malformed manifest.json in " + dir);
  for (const char* key : {"height", "width", "frames", "train_videos", "test_videos", "window"})
    if (!corpus.manifest.contains(key)) throw IoError(std::string("manifest missing key: ") + key);
  corpus.height = corpus.manifest["height"].get<size_t>();
  corpus.width = corpus.manifest["width"].get<size_t>();
  corpus.frames = corpus.manifest["frames"].get<size_t>();
  corpus.window = corpus.manifest["window"].get<size_t>();

  std::map<std::string, std::vector<int>> labels;
  {
    std::ifstream ls(root / "labels.csv");
    if (!ls) throw IoError("cannot open labels.csv in " + dir);
    std::string line;
    std::getline(ls, line);  // header
    while (std::getline(ls, line)) {
      if (line.empty()) continue;
      const auto c1 = line.find(',');
      const auto c2 = line.find(',', c1 + 1);
      if (c1 == std::string::npos || c2 == std::string::npos)
        throw IoError("malformed labels.csv row: " + line);
      const std::string id = line.substr(0, c1);
      const size_t frame = std::stoul(line.substr(c1 + 1, c2 - c1 - 1));
      const int label = std::stoi(line.substr(c2 + 1));
      auto& vec = labels[id];
      if (vec.size() <= frame) vec.resize(frame + 1, 0);
      vec[frame] = label;
    }
  }

  std::map<std::string, std::vector<SceneDescriptor>> descriptors;
  {
    std::ifstream ds(root / "descriptors.jsonl");
    if (!ds) throw IoError("cannot open descriptors.jsonl in " + dir);
    std::string line;
    while (std::getline(ds, line)) {
      if (line.empty()) continue;
      nlohmann::json row = nlohmann::json::parse(line, nullptr, false);
      if (row.is_discarded() || !row.contains("video_id") || !row.contains("start") ||
          !row.contains("values"))
        throw IoError("malformed descriptors row: " + line);
      const std::string id = row["video_id"].get<std::string>();
      const size_t start = row["start"].get<size_t>();
      auto vals = row["values"].get<std::vector<double>>();
      if (vals.size() != 7) throw IoError("descriptor must have 7 values: " + line);
      auto& vec = descriptors[id];
      if (vec.size() <= start) vec.resize(start + 1);
      std::copy(vals.begin(), vals.end(), vec[start].values.begin());
    }
  }

  auto load_split = [&](const char* split, size_t first, size_t count, std::vector<CorpusVideo>& out) {
    for (size_t i = 0; i < count; ++i) {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "vid_%04zu", first + i);
      CorpusVideo v;
      v.id = buf;
      v.frames = load_sfnf_file((root / split / (v.id + ".sfnf")).string());
      if (v.frames.shape.rank != 4 || v.frames.shape[0] != corpus.frames ||
          v.frames.shape[1] != corpus.height || v.frames.shape[2] != corpus.width ||
          v.frames.shape[3] != 1)
        throw IoError("video tensor shape mismatch for " + v.id + ": " + v.frames.shape.str());
      auto lit = labels.find(v.id);
      if (lit == labels.end() || lit->second.size() != corpus.frames)
        throw IoError("labels missing or wrong length for " + v.id);
      v.labels = lit->second;
      auto dit = descriptors.find(v.id);
      if (dit == descriptors.end() || dit->second.size() != corpus.frames - corpus.window + 1)
        throw IoError("descriptors missing or wrong count for " + v.id);
      v.descriptors = dit->second;
      out.push_back(std::move(v));
    }
  };
  const size_t n_train = corpus.manifest["train_videos"].get<size_t>();
  const size_t n_test = corpus.manifest["test_videos"].get<size_t>();
  load_split("train", 0, n_train, corpus.train);
  load_split("test", n_train, n_test, corpus.test);
  return corpus;
}

}  // namespace svad

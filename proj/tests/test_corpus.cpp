#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "svad/corpus.hpp"

using namespace svad;

namespace {

GenOptions small_opts() {
  GenOptions o;
  o.seed = 123;
  o.train_videos = 3;
  o.test_videos = 6;
  o.frames = 40;
  o.height = 32;
  o.width = 32;
  o.flip_fraction = 0.34;  // 2 of 6 test videos are semantic flips
  return o;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  EXPECT_TRUE(is.good()) << p;
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

// Mean absolute inter-frame pixel difference at frame f (vs f-1).
double frame_diff(const Tensor& frames, size_t f) {
  const size_t px = frames.shape[1] * frames.shape[2];
  double acc = 0;
  for (size_t j = 0; j < px; ++j)
    acc += std::abs(frames.data()[f * px + j] - frames.data()[(f - 1) * px + j]);
  return acc / double(px);
}

const GeneratedVideo* find_kind(const GeneratedCorpus& c, AnomalyKind k) {
  for (const auto& v : c.test)
    if (!v.events.empty() && v.events[0].kind == k) return &v;
  return nullptr;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() / ("svad_corpus_" + tag);
    std::filesystem::remove_all(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST(CorpusGen, SameSeedIsByteIdenticalOnDisk) {
  const GenOptions opts = small_opts();
  TempDir a("a"), b("b");
  write_corpus(a.path.string(), generate_corpus(opts), false);
  write_corpus(b.path.string(), generate_corpus(opts), false);
  for (const char* rel : {"manifest.json", "labels.csv", "descriptors.jsonl",
                          "train/vid_0000.sfnf", "test/vid_0003.sfnf"})
    EXPECT_EQ(slurp(a.path / rel), slurp(b.path / rel)) << rel;
}

TEST(CorpusGen, DifferentSeedChangesPixels) {
  GenOptions opts = small_opts();
  GeneratedCorpus c1 = generate_corpus(opts);
  opts.seed = 124;
  GeneratedCorpus c2 = generate_corpus(opts);
  EXPECT_NE(0, std::memcmp(c1.train[0].frames.data(), c2.train[0].frames.data(),
                           c1.train[0].frames.numel() * sizeof(float)));
}

TEST(CorpusGen, TrainSplitHasZeroLabels) {
  GeneratedCorpus c = generate_corpus(small_opts());
  for (const auto& v : c.train) {
    EXPECT_TRUE(v.events.empty());
    int sum = 0;
    for (int l : v.labels) sum += l;
    EXPECT_EQ(sum, 0) << v.id;
  }
}

TEST(CorpusGen, PixelsStayInUnitRange) {
  GeneratedCorpus c = generate_corpus(small_opts());
  auto check = [](const GeneratedVideo& v) {
    for (size_t i = 0; i < v.frames.numel(); ++i) {
      ASSERT_GE(v.frames.data()[i], 0.0f) << v.id;
      ASSERT_LE(v.frames.data()[i], 1.0f) << v.id;
    }
  };
  for (const auto& v : c.train) check(v);
  for (const auto& v : c.test) check(v);
}

TEST(CorpusGen, LabelsMatchEventSpansExactly) {
  GeneratedCorpus c = generate_corpus(small_opts());
  for (const auto& v : c.test) {
    ASSERT_FALSE(v.events.empty()) << v.id;
    for (size_t f = 0; f < v.labels.size(); ++f) {
      bool inside = false;
      for (const auto& ev : v.events) inside |= (f >= ev.start && f <= ev.end);
      EXPECT_EQ(v.labels[f], inside ? 1 : 0) << v.id << " frame " << f;
    }
  }
}

TEST(CorpusGen, FastMotionRaisesFrameDifference) {
  GeneratedCorpus c = generate_corpus(small_opts());
  const GeneratedVideo* v = find_kind(c, AnomalyKind::FastMotion);
  ASSERT_NE(v, nullptr);
  const AnomalyEvent& ev = v->events[0];
  double inside = 0, outside = 0;
  size_t n_in = 0, n_out = 0;
  for (size_t f = 1; f < v->spec.frames; ++f) {
    if (f >= ev.start + 1 && f <= ev.end) {
      inside += frame_diff(v->frames, f);
      ++n_in;
    } else if (f + 2 < ev.start || f > ev.end + 2) {
      outside += frame_diff(v->frames, f);
      ++n_out;
    }
  }
  ASSERT_GT(n_in, 0u);
  ASSERT_GT(n_out, 0u);
  EXPECT_GT(inside / n_in, 1.5 * (outside / n_out));
}

TEST(Descriptors, HistogramSumsToObjectCount) {
  GeneratedCorpus c = generate_corpus(small_opts());
  auto check = [](const GeneratedVideo& v) {
    for (const auto& d : v.descriptors)
      EXPECT_NEAR(d.values[0] + d.values[1] + d.values[2], d.values[5], 1e-9) << v.id;
  };
  for (const auto& v : c.train) check(v);
  for (const auto& v : c.test) check(v);
}

TEST(Descriptors, NormalVideoDescriptorsAreConstant) {
  // Normal objects keep type and speed (reflection preserves magnitude), so
  // every window of a train video describes the same scene.
  GeneratedCorpus c = generate_corpus(small_opts());
  for (const auto& v : c.train) {
    const auto& first = v.descriptors.front().values;
    for (const auto& d : v.descriptors)
      for (int k = 0; k < 7; ++k) EXPECT_NEAR(d.values[k], first[k], 1e-9) << v.id << " field " << k;
  }
}

TEST(Descriptors, SemanticFlipChangesDescriptorButNotMotionStats) {
  GeneratedCorpus c = generate_corpus(small_opts());
  const GeneratedVideo* v = find_kind(c, AnomalyKind::SemanticFlip);
  ASSERT_NE(v, nullptr);
  const AnomalyEvent& ev = v->events[0];
  const size_t t = kWindow;
  ASSERT_GT(ev.start, t);  // room for a clean pre-event window
  ASSERT_GE(ev.end, ev.start + t);
  const auto& before = v->descriptors[0].values;
  const auto& during = v->descriptors[ev.start].values;

  // Shape histogram moves...
  double hist_delta = 0;
  for (int k = 0; k < 3; ++k) hist_delta += std::abs(during[k] - before[k]);
  EXPECT_GT(hist_delta, 0.5);
  // ...while speeds stay inside the normal band and nothing reads as erratic.
  EXPECT_GE(during[3], 0.5 - 1e-9);
  EXPECT_LE(during[4], 1.5 + 1e-9);
  EXPECT_EQ(during[6], 0.0);
  EXPECT_EQ(v->labels[ev.start], 1);
}

TEST(Descriptors, ErraticMotionSetsFlagInsideEventOnly) {
  GeneratedCorpus c = generate_corpus(small_opts());
  const GeneratedVideo* v = find_kind(c, AnomalyKind::ErraticMotion);
  ASSERT_NE(v, nullptr);
  const AnomalyEvent& ev = v->events[0];
  EXPECT_EQ(v->descriptors[0].values[6], 0.0);
  EXPECT_EQ(v->descriptors[ev.start].values[6], 1.0);
}

TEST(CorpusIo, WriteLoadRoundTrip) {
  const GenOptions opts = small_opts();
  GeneratedCorpus gen = generate_corpus(opts);
  TempDir dir("roundtrip");
  write_corpus(dir.path.string(), gen, false);
  Corpus loaded = load_corpus(dir.path.string());

  ASSERT_EQ(loaded.train.size(), gen.train.size());
  ASSERT_EQ(loaded.test.size(), gen.test.size());
  EXPECT_EQ(loaded.height, opts.height);
  EXPECT_EQ(loaded.frames, opts.frames);
  for (size_t i = 0; i < gen.test.size(); ++i) {
    const auto& a = gen.test[i];
    const auto& b = loaded.test[i];
    EXPECT_EQ(a.id, b.id);
    ASSERT_EQ(a.frames.numel(), b.frames.numel());
    EXPECT_EQ(0, std::memcmp(a.frames.data(), b.frames.data(), a.frames.numel() * sizeof(float)));
    EXPECT_EQ(a.labels, b.labels);
    ASSERT_EQ(a.descriptors.size(), b.descriptors.size());
    for (size_t s = 0; s < a.descriptors.size(); ++s)
      for (int k = 0; k < 7; ++k)
        EXPECT_DOUBLE_EQ(a.descriptors[s].values[k], b.descriptors[s].values[k]);
  }
  EXPECT_EQ(loaded.manifest["seed"].get<uint64_t>(), opts.seed);
  EXPECT_TRUE(loaded.manifest.contains("events"));
}

TEST(CorpusIo, RefusesNonEmptyDirWithoutForce) {
  const GenOptions opts = small_opts();
  GeneratedCorpus gen = generate_corpus(opts);
  TempDir dir("force");
  write_corpus(dir.path.string(), gen, false);
  EXPECT_THROW(write_corpus(dir.path.string(), gen, false), ValidationError);
  EXPECT_NO_THROW(write_corpus(dir.path.string(), gen, true));
}

TEST(CorpusGen, RejectsZeroVideoCounts) {
  GenOptions opts = small_opts();
  opts.train_videos = 0;
  EXPECT_THROW(generate_corpus(opts), ValidationError);
}

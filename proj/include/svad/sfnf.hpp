#pragma once

#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "svad/tensor.hpp"

namespace svad {

// SFNF binary tensor block: magic `SFNF`, u8 version=1, u8 rank,
// u32 little-endian extents, then f32 little-endian row-major payload.
// This code assumes a little-endian host (asserted below).

namespace detail {

inline void ensure_little_endian() {
  const uint32_t probe = 1;
  if (*reinterpret_cast<const unsigned char*>(&probe) != 1)
    throw IoError("SFNF: big-endian hosts are unsupported");
}

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const char* what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError(std::string("SFNF: truncated read of ") + what);
  return v;
}

}  // namespace detail

constexpr uint8_t kSfnfVersion = 1;

inline void write_sfnf(std::ostream& os, const Tensor& t) {
  detail::ensure_little_endian();
  if (t.shape.rank < 1 || t.shape.rank > 4)
    throw ValidationError("SFNF: rank must be 1..4, got " + std::to_string(t.shape.rank));
  os.write("SFNF", 4);
  detail::write_pod<uint8_t>(os, kSfnfVersion);
  detail::write_pod<uint8_t>(os, t.shape.rank);
  for (uint8_t i = 0; i < t.shape.rank; ++i)
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(t.shape[i]));
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(float)));
  if (!os) throw IoError("SFNF: write failed");
}

inline Tensor read_sfnf(std::istream& is) {
  detail::ensure_little_endian();
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "SFNF") throw IoError("SFNF: bad magic");
  const auto version = detail::read_pod<uint8_t>(is, "version");
  if (version != kSfnfVersion)
    throw IoError("SFNF: unsupported version " + std::to_string(version));
  const auto rank = detail::read_pod<uint8_t>(is, "rank");
  if (rank < 1 || rank > 4) throw IoError("SFNF: bad rank " + std::to_string(rank));
  Shape shape;
  shape.rank = rank;
  size_t numel = 1;
  for (uint8_t i = 0; i < rank; ++i) {
    const auto e = detail::read_pod<uint32_t>(is, "extent");
    if (e == 0) throw IoError("SFNF: zero extent");
    shape.dims[i] = e;
    numel *= e;
    if (numel > (1ull << 32)) throw IoError("SFNF: extents overflow");
  }
  std::vector<float> data(numel);
  is.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(numel * sizeof(float)));
  if (!is) throw IoError("SFNF: truncated payload");
  return Tensor(shape, std::move(data));
}

inline void save_sfnf_file(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path);
  write_sfnf(os, t);
}

inline Tensor load_sfnf_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  return read_sfnf(is);
}

// ---------------------------------------------------------------------------
// Feature files: a flat file of SFNF blocks plus a JSONL index mapping
// {video_id, frame_index} to the block's byte offset.  Used for the
// file-backed embedding providers and error-map export.
// ---------------------------------------------------------------------------

inline std::string feature_index_path(const std::string& feature_path) {
  return feature_path + ".idx.jsonl";
}

class FeatureFileWriter {
 public:
  explicit FeatureFileWriter(const std::string& path)
      : path_(path), data_(path, std::ios::binary), index_(feature_index_path(path)) {
    if (!data_ || !index_) throw IoError("cannot open feature file for write: " + path);
  }

  void append(const std::string& video_id, int64_t frame_index, const Tensor& t) {
    const auto offset = static_cast<uint64_t>(data_.tellp());
    write_sfnf(data_, t);
    nlohmann::json row = {{"video_id", video_id}, {"frame_index", frame_index}, {"offset", offset}};
    index_ << row.dump() << "\n";
    if (!index_) throw IoError("feature index write failed: " + path_);
  }

 private:
  std::string path_;
  std::ofstream data_;
  std::ofstream index_;
};

class FeatureFileReader {
 public:
  explicit FeatureFileReader(const std::string& path) : data_(path, std::ios::binary) {
    if (!data_) throw IoError("cannot open feature file: " + path);
    std::ifstream index(feature_index_path(path));
    if (!index) throw IoError("cannot open feature index: " + feature_index_path(path));
    std::string line;
    while (std::getline(index, line)) {
      if (line.empty()) continue;
      nlohmann::json row = nlohmann::json::parse(line, nullptr, false);
      if (row.is_discarded() || !row.contains("video_id") || !row.contains("frame_index") ||
          !row.contains("offset"))
        throw IoError("malformed feature index row: " + line);
      offsets_[{row["video_id"].get<std::string>(), row["frame_index"].get<int64_t>()}] =
          row["offset"].get<uint64_t>();
    }
  }

  bool contains(const std::string& video_id, int64_t frame_index) const {
    return offsets_.count({video_id, frame_index}) > 0;
  }

  Tensor fetch(const std::string& video_id, int64_t frame_index) {
    auto it = offsets_.find({video_id, frame_index});
    if (it == offsets_.end())
      throw IoError("feature entry missing for video " + video_id + " frame " +
                    std::to_string(frame_index));
    data_.clear();
    data_.seekg(static_cast<std::streamoff>(it->second));
    return read_sfnf(data_);
  }

 private:
  std::ifstream data_;
  std::map<std::pair<std::string, int64_t>, uint64_t> offsets_;
};

}  // namespace svad

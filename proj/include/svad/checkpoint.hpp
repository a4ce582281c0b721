#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "svad/adam.hpp"
#include "svad/model.hpp"
#include "svad/sfnf.hpp"

namespace svad {

inline constexpr char kCheckpointMagic[4] = {'S', 'V', 'C', 'K'};
inline constexpr uint8_t kCheckpointVersion = 1;

// Full training snapshot: parameters plus optimizer moments in registry
// order, the canonical run-config JSON with its fingerprint, and the text
// state of the shuffle RNG so a resumed run continues the same stream.
struct Checkpoint {
  uint64_t fingerprint = 0;
  std::string config_json;
  uint32_t epoch = 0;   // completed epochs
  uint64_t step = 0;    // completed optimizer steps
  std::vector<std::string> names;
  std::vector<Tensor> params;
  std::vector<Tensor> m, v;
  std::string rng_state;
};

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out.write(kCheckpointMagic, 4);
  detail::write_pod(out, kCheckpointVersion);
  detail::write_pod(out, ck.fingerprint);
  detail::write_pod(out, static_cast<uint32_t>(ck.config_json.size()));
  out.write(ck.config_json.data(), static_cast<std::streamsize>(ck.config_json.size()));
  detail::write_pod(out, ck.epoch);
  detail::write_pod(out, ck.step);
  detail::write_pod(out, static_cast<uint32_t>(ck.params.size()));
  for (size_t i = 0; i < ck.params.size(); ++i) {
    const std::string& name = ck.names[i];
    detail::write_pod(out, static_cast<uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_sfnf(out, ck.params[i]);
    write_sfnf(out, ck.m[i]);
    write_sfnf(out, ck.v[i]);
  }
  detail::write_pod(out, static_cast<uint32_t>(ck.rng_state.size()));
  out.write(ck.rng_state.data(), static_cast<std::streamsize>(ck.rng_state.size()));
  if (!out) throw IoError("short write while saving checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != std::string(kCheckpointMagic, 4))
    throw IoError("bad checkpoint magic in " + path);
  const auto version = detail::read_pod<uint8_t>(in, "version");
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.fingerprint = detail::read_pod<uint64_t>(in, "fingerprint");
  const auto cfg_len = detail::read_pod<uint32_t>(in, "config length");
  ck.config_json.resize(cfg_len);
  in.read(ck.config_json.data(), cfg_len);
  ck.epoch = detail::read_pod<uint32_t>(in, "epoch");
  ck.step = detail::read_pod<uint64_t>(in, "step");
  const auto count = detail::read_pod<uint32_t>(in, "parameter count");
  for (uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::read_pod<uint16_t>(in, "name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw IoError("truncated checkpoint: " + path);
    ck.names.push_back(name);
    ck.params.push_back(read_sfnf(in));
    ck.m.push_back(read_sfnf(in));
    ck.v.push_back(read_sfnf(in));
  }
  const auto rng_len = detail::read_pod<uint32_t>(in, "rng length");
  ck.rng_state.resize(rng_len);
  in.read(ck.rng_state.data(), rng_len);
  if (!in) throw IoError("truncated checkpoint: " + path);
  return ck;
}

// Snapshot the model + optimizer into a checkpoint value (copies tensors).
inline Checkpoint snapshot(Model& model, const AdamState& adam, uint64_t fingerprint,
                           const std::string& config_json, uint32_t epoch, uint64_t step,
                           const std::string& rng_state) {
  Checkpoint ck;
  ck.fingerprint = fingerprint;
  ck.config_json = config_json;
  ck.epoch = epoch;
  ck.step = step;
  ck.rng_state = rng_state;
  size_t idx = 0;
  visit_params(model, [&](const std::string& name, Tensor& t) {
    ck.names.push_back(name);
    Tensor copy = Tensor::zeros(t.shape);
    std::copy(t.data(), t.data() + t.numel(), copy.mut());
    ck.params.push_back(copy);
    Tensor mt = Tensor::zeros(t.shape);
    Tensor vt = Tensor::zeros(t.shape);
    std::copy(adam.m[idx].begin(), adam.m[idx].end(), mt.mut());
    std::copy(adam.v[idx].begin(), adam.v[idx].end(), vt.mut());
    ck.m.push_back(mt);
    ck.v.push_back(vt);
    ++idx;
  });
  return ck;
}

// Write checkpoint tensors back into a model + optimizer state.
inline void restore(Model& model, AdamState& adam, const Checkpoint& ck) {
  size_t idx = 0;
  visit_params(model, [&](const std::string& name, Tensor& t) {
    if (idx >= ck.params.size()) throw IoError("checkpoint has too few parameters");
    if (ck.names[idx] != name)
      throw IoError("checkpoint parameter order mismatch: expected " + name + ", found " +
                    ck.names[idx]);
    if (!(ck.params[idx].shape == t.shape))
      throw IoError("checkpoint shape mismatch for " + name);
    std::copy(ck.params[idx].data(), ck.params[idx].data() + t.numel(), t.mut());
    adam.m[idx].assign(ck.m[idx].data(), ck.m[idx].data() + t.numel());
    adam.v[idx].assign(ck.v[idx].data(), ck.v[idx].data() + t.numel());
    ++idx;
  });
  if (idx != ck.params.size()) throw IoError("checkpoint has too many parameters");
}

}  // namespace svad

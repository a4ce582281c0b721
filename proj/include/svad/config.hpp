#pragma once

#include <array>
#include <cstdio>
#include <fstream>
#include <set>
#include <string>

#include "json.hpp"
#include "svad/model.hpp"
#include "svad/scoring.hpp"
#include "svad/trainer.hpp"

namespace svad {

// Canonical run configuration: one strict JSON document covering training,
// model shape, expert partition, and scoring.  Unknown keys are rejected so a
// typo cannot silently fall back to a default.
struct RunConfig {
  double lr = 2e-4;
  std::array<double, 2> betas{0.9, 0.999};
  double weight_decay = 1e-5;
  size_t epochs = 20;
  size_t batch = 16;
  uint64_t seed = 7;
  double lambda_pred = 1.0, lambda_sim = 1.0, lambda_motion = 1.0;
  double alpha = 0.001;
  size_t n_experts = 64, k_shared = 1, k_active = 8, reduction_rate = 4;
  size_t dim = 64, layers = 4, heads = 4, patch = 8;
  double sigma = 3.0;
  double w_v = 0.5, w_t = 0.5;
  bool normalize = true;
  BranchToggles branches;
  SffmMode sffm_mode = SffmMode::Sffm;
  MotionHinge motion_hinge = MotionHinge::PerPixel;
  bool skip = true;
  double grad_clip = 0.0;  // global gradient-norm cap; 0 = off
};

namespace detail {

inline const std::set<std::string>& run_config_keys() {
  static const std::set<std::string> keys = {
      "lr",          "betas",   "weight_decay", "epochs",      "batch",
      "seed",        "lambda_pred", "lambda_sim", "lambda_motion", "alpha",
      "n_experts",   "k_shared", "k_active",    "reduction_rate", "dim",
      "layers",      "heads",   "patch",        "sigma",       "w_v",
      "w_t",         "normalize", "branches",   "sffm_mode",   "motion_hinge",
      "skip",        "grad_clip"};
  return keys;
}

template <typename T>
T json_get(const nlohmann::json& j, const std::string& key, const T& fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError("config key '" + key + "' has the wrong type");
  }
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("config must be a JSON object");
  for (const auto& item : j.items())
    if (!detail::run_config_keys().count(item.key()))
      throw ValidationError("unknown config key '" + item.key() + "'");

  RunConfig c;
  c.lr = detail::json_get(j, "lr", c.lr);
  if (j.contains("betas")) {
    const auto& b = j.at("betas");
    if (!b.is_array() || b.size() != 2) throw ValidationError("config key 'betas' must be [b1, b2]");
    try {
      c.betas = {b.at(0).get<double>(), b.at(1).get<double>()};
    } catch (const nlohmann::json::exception&) {
      throw ValidationError("config key 'betas' has the wrong type");
    }
  }
  c.weight_decay = detail::json_get(j, "weight_decay", c.weight_decay);
  c.epochs = detail::json_get(j, "epochs", c.epochs);
  c.batch = detail::json_get(j, "batch", c.batch);
  c.seed = detail::json_get(j, "seed", c.seed);
  c.lambda_pred = detail::json_get(j, "lambda_pred", c.lambda_pred);
  c.lambda_sim = detail::json_get(j, "lambda_sim", c.lambda_sim);
  c.lambda_motion = detail::json_get(j, "lambda_motion", c.lambda_motion);
  c.alpha = detail::json_get(j, "alpha", c.alpha);
  c.n_experts = detail::json_get(j, "n_experts", c.n_experts);
  c.k_shared = detail::json_get(j, "k_shared", c.k_shared);
  c.k_active = detail::json_get(j, "k_active", c.k_active);
  c.reduction_rate = detail::json_get(j, "reduction_rate", c.reduction_rate);
  c.dim = detail::json_get(j, "dim", c.dim);
  c.layers = detail::json_get(j, "layers", c.layers);
  c.heads = detail::json_get(j, "heads", c.heads);
  c.patch = detail::json_get(j, "patch", c.patch);
  c.sigma = detail::json_get(j, "sigma", c.sigma);
  c.w_v = detail::json_get(j, "w_v", c.w_v);
  c.w_t = detail::json_get(j, "w_t", c.w_t);
  c.normalize = detail::json_get(j, "normalize", c.normalize);
  if (j.contains("branches")) {
    const auto& b = j.at("branches");
    if (!b.is_object()) throw ValidationError("config key 'branches' must be an object");
    for (const auto& item : b.items())
      if (item.key() != "vision" && item.key() != "semantic" && item.key() != "motion")
        throw ValidationError("unknown branch toggle '" + item.key() + "'");
    c.branches.vision = detail::json_get(b, "vision", c.branches.vision);
    c.branches.semantic = detail::json_get(b, "semantic", c.branches.semantic);
    c.branches.motion = detail::json_get(b, "motion", c.branches.motion);
  }
  if (j.contains("sffm_mode")) {
    const std::string m = detail::json_get<std::string>(j, "sffm_mode", "sffm");
    if (m == "sffm")
      c.sffm_mode = SffmMode::Sffm;
    else if (m == "memory")
      c.sffm_mode = SffmMode::Memory;
    else if (m == "none")
      c.sffm_mode = SffmMode::None;
    else
      throw ValidationError("sffm_mode must be one of sffm|memory|none");
  }
  if (j.contains("motion_hinge")) {
    const std::string m = detail::json_get<std::string>(j, "motion_hinge", "pixel");
    if (m == "pixel")
      c.motion_hinge = MotionHinge::PerPixel;
    else if (m == "scalar")
      c.motion_hinge = MotionHinge::Scalar;
    else
      throw ValidationError("motion_hinge must be pixel|scalar");
  }
  c.skip = detail::json_get(j, "skip", c.skip);
  c.grad_clip = detail::json_get(j, "grad_clip", c.grad_clip);
  return c;
}

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["lr"] = c.lr;
  j["betas"] = {c.betas[0], c.betas[1]};
  j["weight_decay"] = c.weight_decay;
  j["epochs"] = c.epochs;
  j["batch"] = c.batch;
  j["seed"] = c.seed;
  j["lambda_pred"] = c.lambda_pred;
  j["lambda_sim"] = c.lambda_sim;
  j["lambda_motion"] = c.lambda_motion;
  j["alpha"] = c.alpha;
  j["n_experts"] = c.n_experts;
  j["k_shared"] = c.k_shared;
  j["k_active"] = c.k_active;
  j["reduction_rate"] = c.reduction_rate;
  j["dim"] = c.dim;
  j["layers"] = c.layers;
  j["heads"] = c.heads;
  j["patch"] = c.patch;
  j["sigma"] = c.sigma;
  j["w_v"] = c.w_v;
  j["w_t"] = c.w_t;
  j["normalize"] = c.normalize;
  j["branches"] = {{"vision", c.branches.vision},
                   {"semantic", c.branches.semantic},
                   {"motion", c.branches.motion}};
  j["sffm_mode"] = sffm_mode_name(c.sffm_mode);
  j["motion_hinge"] = c.motion_hinge == MotionHinge::PerPixel ? "pixel" : "scalar";
  j["skip"] = c.skip;
  j["grad_clip"] = c.grad_clip;
  return j;
}

// Sorted-key compact dump; the fingerprint ties checkpoints, score CSVs, and
// reports back to the exact configuration that produced them.
inline std::string canonical_config_json(const RunConfig& c) {
  return run_config_to_json(c).dump();
}

inline uint64_t config_fingerprint(const RunConfig& c) {
  return fnv1a64(canonical_config_json(c));
}

inline std::string fingerprint_hex(uint64_t fp) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fp));
  return std::string(buf);
}

inline RunConfig load_run_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config is not valid JSON: ") + e.what());
  }
  return run_config_from_json(j);
}

// `--set key=value` override applied to the JSON document before parsing.
// Dotted paths address nested objects (branches.semantic=false); values are
// parsed as JSON when possible and fall back to strings.
inline void apply_config_override(nlohmann::json& j, const std::string& spec) {
  const size_t eq = spec.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ValidationError("override must look like key=value: " + spec);
  const std::string path = spec.substr(0, eq);
  const std::string raw = spec.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;  // unquoted strings like sffm_mode=memory
  }
  nlohmann::json* cur = &j;
  size_t pos = 0;
  for (;;) {
    const size_t dot = path.find('.', pos);
    const std::string key = path.substr(pos, dot == std::string::npos ? dot : dot - pos);
    if (key.empty()) throw ValidationError("bad override path: " + path);
    if (dot == std::string::npos) {
      (*cur)[key] = value;
      return;
    }
    cur = &(*cur)[key];
    pos = dot + 1;
  }
}

// Validates the whole document and derives per-module configs.
inline void validate_run_config(const RunConfig& c) {
  if (!(c.lr > 0)) throw ValidationError("lr must be > 0");
  for (double b : c.betas)
    if (b < 0 || b >= 1) throw ValidationError("betas must lie in [0, 1)");
  if (c.weight_decay < 0) throw ValidationError("weight_decay must be >= 0");
  if (c.epochs == 0) throw ValidationError("epochs must be >= 1");
  if (c.batch == 0) throw ValidationError("batch must be >= 1");
  if (c.lambda_pred < 0 || c.lambda_sim < 0 || c.lambda_motion < 0)
    throw ValidationError("loss weights must be >= 0");
  if (c.alpha < 0) throw ValidationError("alpha must be >= 0");
  if (c.layers == 0) throw ValidationError("layers must be >= 1");
  if (c.sigma < 0) throw ValidationError("sigma must be >= 0");
  if (c.w_v < 0 || c.w_t < 0) throw ValidationError("score weights must be >= 0");
  if (c.grad_clip < 0) throw ValidationError("grad_clip must be >= 0");
  c.branches.validate();
  SffmConfig s;
  s.n_experts = c.n_experts;
  s.k_shared = c.k_shared;
  s.k_active = c.k_active;
  s.dim = c.dim;
  s.reduction_rate = c.reduction_rate;
  s.alpha = c.alpha;
  if (c.sffm_mode == SffmMode::Sffm) s.validate();
}

inline ModelConfig model_config_from(const RunConfig& c, size_t height, size_t width) {
  ModelConfig m;
  m.height = height;
  m.width = width;
  m.patch = c.patch;
  m.dim = c.dim;
  m.heads = c.heads;
  m.layers = c.layers;
  m.sffm.n_experts = c.n_experts;
  m.sffm.k_shared = c.k_shared;
  m.sffm.k_active = c.k_active;
  m.sffm.dim = c.dim;
  m.sffm.reduction_rate = c.reduction_rate;
  m.sffm.alpha = c.alpha;
  m.sffm_mode = c.sffm_mode;
  m.branches = c.branches;
  m.skip = c.skip;
  m.validate();
  return m;
}

inline TrainParams train_params_from(const RunConfig& c, size_t threads = 1) {
  TrainParams tp;
  tp.adam.lr = c.lr;
  tp.adam.beta1 = c.betas[0];
  tp.adam.beta2 = c.betas[1];
  tp.adam.weight_decay = c.weight_decay;
  tp.epochs = c.epochs;
  tp.batch = c.batch;
  tp.seed = c.seed;
  tp.weights.lambda_pred = c.lambda_pred;
  tp.weights.lambda_sim = c.lambda_sim;
  tp.weights.lambda_motion = c.lambda_motion;
  tp.weights.alpha = c.alpha;
  tp.hinge = c.motion_hinge;
  tp.grad_clip = c.grad_clip;
  tp.threads = threads;
  return tp;
}

inline ScoringParams scoring_params_from(const RunConfig& c) {
  ScoringParams sp;
  sp.sigma = c.sigma;
  sp.w_v = c.w_v;
  sp.w_t = c.w_t;
  sp.normalize = c.normalize;
  return sp;
}

}  // namespace svad

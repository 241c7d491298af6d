#pragma once

#include <cstdint>
#include <string>

#include "iqt/denoiser.hpp"
#include "iqt/schedule.hpp"

namespace iqt {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  int steps = 2000;
  std::uint64_t seed = 0;
  PredKind parametrization = PredKind::X;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int log_every = 50;
  int grad_accum = 1;
  // train on the in-plane dihedral orbit (flips/transpose of the two axes
  // perpendicular to the slice axis) of every (hf, lf) pair; these transforms
  // commute with the slice-direction degradation
  bool augment = true;

  void validate() const {
    if (learning_rate < 0) throw CheckpointError("learning_rate must be >= 0");
    if (steps < 0) throw CheckpointError("steps must be >= 0");
    if (grad_accum < 1) throw CheckpointError("grad_accum must be >= 1");
  }
};

struct Checkpoint {
  DenoiserConfig config;
  TrainConfig train;
  ParamStore params;
  ParamStore adam_m;
  ParamStore adam_v;
  std::int64_t step = 0;
  std::uint64_t rng_state = 0;
};

// Binary: magic "IQTC", version 0x01, u32 JSON length + JSON config block,
// u32 tensor count, name table (u16 len + bytes, u8 ndim, u32 dims), then
// f32 payloads little-endian in table order.
void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

std::string denoiser_config_to_json(const DenoiserConfig& cfg);
DenoiserConfig denoiser_config_from_json(const std::string& json_text);

}  // namespace iqt

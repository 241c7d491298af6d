#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "iqt/checkpoint.hpp"
#include "iqt/denoiser.hpp"
#include "iqt/patching.hpp"
#include "iqt/schedule.hpp"
#include "iqt/volume.hpp"

namespace iqt {

// Mean squared error over all voxels of a patch group.
double group_loss(const std::vector<Tensor<float>>& targets,
                  const std::vector<Tensor<float>>& preds);

struct TrainState {
  DenoiserConfig config;
  TrainConfig train;
  ParamStore params;
  ParamStore adam_m;
  ParamStore adam_v;
  std::int64_t step = 0;

  Checkpoint to_checkpoint(std::uint64_t rng_state) const;
  static TrainState from_checkpoint(const Checkpoint& ck);
};

TrainState init_train_state(const DenoiserConfig& cfg, const TrainConfig& tc);

// One training volume prepared for patch-group sampling.
struct PreparedVolume {
  PatchGrid grid;
  Volume hf_padded;  // normalized target, reflect-padded to the grid
  Volume lf_padded;  // normalized condition, reflect-padded to the grid
  std::vector<PatchGroup> groups;
};
PreparedVolume prepare_volume(const Volume& hf_normalized,
                              const Volume& lf_normalized, int patch);

// One optimizer step on one group. Draws one shared t and per-voxel noise
// from a stream derived from (seed, step); returns the loss value.
double train_step(TrainState& state, const PreparedVolume& vol, int group_index,
                  const NoiseSchedule& sched);

struct FitLogEntry {
  std::int64_t step;
  double train_loss;
  double val_loss;  // NaN when not evaluated
  double t_wall;
};

struct FitResult {
  Checkpoint checkpoint;
  std::vector<FitLogEntry> log;
};

// Iterates extract -> group -> train_step over the dataset.
FitResult fit(const std::vector<std::pair<Volume, Volume>>& train_pairs,
              const std::vector<std::pair<Volume, Volume>>& val_pairs,
              const DenoiserConfig& cfg, const TrainConfig& tc,
              const NoiseSchedule& sched,
              const std::function<void(const FitLogEntry&)>& on_log = {});

// Validation loss with frozen parameters (deterministic given seed).
double validation_loss(const TrainState& state,
                       const std::vector<PreparedVolume>& vols,
                       const NoiseSchedule& sched, std::uint64_t seed);

struct GradCheckEntry {
  std::string param;
  std::string param_class;  // conv | norm | attention | mlp
  double analytic;
  double numeric;
  double rel_err;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  std::map<std::string, double> max_rel_err_by_class;
  double max_rel_err = 0.0;
};

// Central finite differences (f64) against the analytic gradients on
// >= min_per_class scalars from every parameter class. When corrupt_param is
// non-empty that parameter's analytic gradient is deliberately damaged so the
// harness sensitivity can be verified.
GradCheckReport gradient_check(const DenoiserConfig& cfg, double eps_fd = 1e-4,
                               int min_per_class = 14,
                               const std::string& corrupt_param = "",
                               std::uint64_t seed = 7);

std::string classify_param(const std::string& name);

}  // namespace iqt

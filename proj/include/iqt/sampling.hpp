#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "iqt/checkpoint.hpp"
#include "iqt/patching.hpp"
#include "iqt/schedule.hpp"
#include "iqt/volume.hpp"

namespace iqt {

struct SamplerConfig {
  int timesteps = 20;
  std::uint64_t seed = 0;
  bool clip_x = true;  // clamp x_hat to [-1, 1] after every prediction
};

// Predicts the clean patch for every group member. Inputs are the
// [2, q, q, q] noisy+condition halo patches; outputs are [1, p, p, p]
// x_hat patches (q = p + 2 * halo). Abstracted so tests can substitute
// an analytically known denoiser.
using DenoiserFn = std::function<std::vector<Tensor<float>>(
    const std::vector<Tensor<float>>& inputs, double t)>;

// Wraps a trained checkpoint; converts the network's parametrization
// (epsilon / x / v) back to x_hat internally.
DenoiserFn make_network_denoiser(const Checkpoint& ck,
                                 const NoiseSchedule& sched);

// Ancestral sampler over the whole volume. All patch groups advance in
// lockstep: timestep n of every group reads the timestep n-1 state of its
// halo neighbours. Returns the x_hat volume in normalized space, trimmed
// to lf_normalized's dims.
Volume sample_volume(const Volume& lf_normalized, const DenoiserConfig& cfg,
                     const DenoiserFn& denoise, const SamplerConfig& sc,
                     const NoiseSchedule& sched);

// normalize -> sample -> map back through the condition volume's affine.
Volume enhance(const Volume& lf, const Checkpoint& ck, const SamplerConfig& sc,
               const NoiseSchedule& sched);

}  // namespace iqt

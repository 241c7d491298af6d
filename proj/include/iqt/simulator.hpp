#pragma once

#include <cstdint>
#include <stdexcept>

#include "iqt/volume.hpp"

namespace iqt {

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct DecimationSpec {
  int factor = 8;
  double blur_fwhm_slices = -1.0;  // <0 means default 0.75 * factor
  double noise_sigma = 0.02;
  std::uint64_t seed = 0;
  int slice_axis = 0;

  double resolved_fwhm() const {
    return blur_fwhm_slices < 0 ? 0.75 * factor : blur_fwhm_slices;
  }
};

// blur -> keep every k-th slice -> add noise -> linear re-upsample.
// Output has the same dims as the input so it can be stacked channel-wise
// with the noisy image.
Volume decimate(const Volume& hf, const DecimationSpec& spec);

struct InterpolationResult {
  Volume volume;
  bool linear_fallback = false;  // fewer than 4 slices available
};

// Cubic (natural spline) interpolation along slice_axis from the k-subsampled
// slices back to full resolution; the baseline every model must beat.
InterpolationResult interpolation_baseline(const Volume& lf_slices_only, int k,
                                           int slice_axis);

// Keep every k-th slice along slice_axis (slice 0, k, 2k, ...).
Volume subsample_slices(const Volume& v, int k, int slice_axis);

}  // namespace iqt

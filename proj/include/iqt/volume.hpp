#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace iqt {

// 3D scalar grid, row-major with the slice (d) axis slowest.
struct Volume {
  std::array<int, 3> dims{0, 0, 0};          // (d, h, w)
  std::array<float, 3> spacing{1.f, 1.f, 1.f};  // mm per axis
  std::vector<float> data;
  float lo = 0.f, hi = 0.f;  // recorded intensity bounds

  std::int64_t numel() const {
    return (std::int64_t)dims[0] * dims[1] * dims[2];
  }
  float& at(int z, int y, int x) {
    return data[((std::int64_t)z * dims[1] + y) * dims[2] + x];
  }
  float at(int z, int y, int x) const {
    return data[((std::int64_t)z * dims[1] + y) * dims[2] + x];
  }

  static Volume filled(std::array<int, 3> dims, float value);
  void update_range();  // set lo/hi to the data min/max
  void validate() const;  // throws on invariant violation
};

struct VolumeFormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct VolumeIoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct VolumeValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Binary format: magic "IQTV", version 0x01, u32 d/h/w, f32 spacing x3,
// f32 lo/hi, then d*h*w f32 little-endian row-major.
Volume load_volume(const std::string& path);
void save_volume(const Volume& v, const std::string& path);

// Affine recorded by normalize so in-window voxels can be mapped back.
struct Normalization {
  double scale = 1.0;   // normalized = scale * raw + offset
  double offset = 0.0;
};

// Maps [p1, p99] percentiles affinely onto [-1, 1], then clamps.
// Constant volumes map to all zeros.
Volume normalize(const Volume& v, Normalization* out_affine = nullptr);
Volume denormalize(const Volume& v, const Normalization& affine);

struct PhantomSpec {
  std::uint64_t seed = 0;
  std::array<int, 3> dims{48, 48, 48};
  int n_ellipsoids = 6;
  int n_sheets = 4;
  float noise_sigma = 0.01f;
};

// Deterministic synthetic volume: smooth cosine background, filled
// ellipsoids, thin high-intensity sheets, additive Gaussian noise.
Volume generate_phantom(const PhantomSpec& spec);

// The background component alone (used by tests and the sheet contrast).
double phantom_background_value(const PhantomSpec& spec, int z, int y, int x);

}  // namespace iqt

#include "iqt/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>

#include "iqt/rng.hpp"

namespace iqt {

Volume Volume::filled(std::array<int, 3> dims, float value) {
  Volume v;
  v.dims = dims;
  v.data.assign((size_t)v.numel(), value);
  v.lo = v.hi = value;
  return v;
}

void Volume::update_range() {
  if (data.empty()) { lo = hi = 0.f; return; }
  auto [mn, mx] = std::minmax_element(data.begin(), data.end());
  lo = *mn;
  hi = *mx;
}

void Volume::validate() const {
  if (dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0)
    throw VolumeValidationError("volume dims must be positive");
  if ((std::int64_t)data.size() != numel())
    throw VolumeValidationError("volume data length does not match dims");
  float mn = std::numeric_limits<float>::infinity();
  float mx = -mn;
  for (float x : data) {
    if (!std::isfinite(x)) throw VolumeValidationError("non-finite voxel value");
    mn = std::min(mn, x);
    mx = std::max(mx, x);
  }
  if (lo > mn || hi < mx)
    throw VolumeValidationError("recorded range does not cover data");
}

namespace {

constexpr char kMagic[4] = {'I', 'Q', 'T', 'V'};
constexpr std::uint8_t kVersion = 0x01;

template <class T>
void put(std::string& buf, T x) {
  char tmp[sizeof(T)];
  std::memcpy(tmp, &x, sizeof(T));
  buf.append(tmp, sizeof(T));
}

template <class T>
T take(std::ifstream& f) {
  T x;
  if (!f.read(reinterpret_cast<char*>(&x), sizeof(T)))
    throw VolumeIoError("truncated volume file");
  return x;
}

}  // namespace

void save_volume(const Volume& v, const std::string& path) {
  v.validate();
  std::string buf;
  buf.reserve(25 + v.data.size() * 4);
  buf.append(kMagic, 4);
  buf.push_back((char)kVersion);
  put(buf, (std::uint32_t)v.dims[0]);
  put(buf, (std::uint32_t)v.dims[1]);
  put(buf, (std::uint32_t)v.dims[2]);
  for (float s : v.spacing) put(buf, s);
  put(buf, v.lo);
  put(buf, v.hi);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw VolumeIoError("cannot open for writing: " + path);
  f.write(buf.data(), (std::streamsize)buf.size());
  f.write(reinterpret_cast<const char*>(v.data.data()),
          (std::streamsize)(v.data.size() * 4));
  if (!f) throw VolumeIoError("write failed: " + path);
}

Volume load_volume(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw VolumeIoError("cannot open: " + path);
  char magic[4];
  if (!f.read(magic, 4)) throw VolumeIoError("truncated volume file");
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw VolumeFormatError("bad magic in " + path);
  auto version = take<std::uint8_t>(f);
  if (version != kVersion)
    throw VolumeFormatError("unsupported volume format version");
  Volume v;
  for (int i = 0; i < 3; ++i) {
    auto d = take<std::uint32_t>(f);
    if (d == 0 || d > (1u << 24)) throw VolumeFormatError("bad dimension");
    v.dims[i] = (int)d;
  }
  for (int i = 0; i < 3; ++i) v.spacing[i] = take<float>(f);
  v.lo = take<float>(f);
  v.hi = take<float>(f);
  v.data.resize((size_t)v.numel());
  if (!f.read(reinterpret_cast<char*>(v.data.data()),
              (std::streamsize)(v.data.size() * 4)))
    throw VolumeIoError("truncated volume payload");
  for (float x : v.data)
    if (!std::isfinite(x))
      throw VolumeValidationError("non-finite voxel in file");
  return v;
}

namespace {

double percentile(std::vector<float> sorted_copy, double p) {
  // linear interpolation between order statistics, p in [0, 100]
  std::sort(sorted_copy.begin(), sorted_copy.end());
  const size_t n = sorted_copy.size();
  if (n == 1) return sorted_copy[0];
  double pos = p / 100.0 * (double)(n - 1);
  size_t i = (size_t)pos;
  if (i >= n - 1) return sorted_copy[n - 1];
  double frac = pos - (double)i;
  return (1.0 - frac) * sorted_copy[i] + frac * sorted_copy[i + 1];
}

}  // namespace

Volume normalize(const Volume& v, Normalization* out_affine) {
  double p1 = percentile(v.data, 1.0);
  double p99 = percentile(v.data, 99.0);
  Normalization aff;
  if (p99 - p1 < 1e-12) {
    aff.scale = 0.0;
    aff.offset = 0.0;
  } else {
    aff.scale = 2.0 / (p99 - p1);
    aff.offset = -1.0 - aff.scale * p1;
  }
  Volume out = v;
  for (float& x : out.data) {
    double y = aff.scale * (double)x + aff.offset;
    x = (float)std::clamp(y, -1.0, 1.0);
  }
  out.lo = -1.f;
  out.hi = 1.f;
  if (out_affine) *out_affine = aff;
  return out;
}

Volume denormalize(const Volume& v, const Normalization& affine) {
  Volume out = v;
  if (affine.scale == 0.0) {
    out.update_range();
    return out;
  }
  for (float& x : out.data)
    x = (float)(((double)x - affine.offset) / affine.scale);
  out.update_range();
  return out;
}

namespace {

struct BackgroundParams {
  // three separable cosine terms: amp * cos(fz*z') * cos(fy*y') * cos(fx*x')
  double amp[3], fz[3], fy[3], fx[3], pz[3], py[3], px[3];
};

BackgroundParams background_params(const PhantomSpec& spec) {
  Rng rng = Rng::stream(spec.seed, 0xb6);
  BackgroundParams bp;
  for (int i = 0; i < 3; ++i) {
    bp.amp[i] = rng.uniform(0.1, 0.3);
    // low frequency: at most 1.5 periods across the volume
    bp.fz[i] = rng.uniform(0.5, 1.5) * 2.0 * M_PI / spec.dims[0];
    bp.fy[i] = rng.uniform(0.5, 1.5) * 2.0 * M_PI / spec.dims[1];
    bp.fx[i] = rng.uniform(0.5, 1.5) * 2.0 * M_PI / spec.dims[2];
    bp.pz[i] = rng.uniform(0.0, 2.0 * M_PI);
    bp.py[i] = rng.uniform(0.0, 2.0 * M_PI);
    bp.px[i] = rng.uniform(0.0, 2.0 * M_PI);
  }
  return bp;
}

double background_value(const BackgroundParams& bp, int z, int y, int x) {
  double v = 0.5;
  for (int i = 0; i < 3; ++i)
    v += bp.amp[i] * std::cos(bp.fz[i] * z + bp.pz[i]) *
         std::cos(bp.fy[i] * y + bp.py[i]) *
         std::cos(bp.fx[i] * x + bp.px[i]);
  return v;
}

}  // namespace

double phantom_background_value(const PhantomSpec& spec, int z, int y, int x) {
  return background_value(background_params(spec), z, y, x);
}

Volume generate_phantom(const PhantomSpec& spec) {
  for (int d : spec.dims)
    if (d < 16) throw VolumeValidationError("phantom dims must be >= 16");
  if (spec.n_ellipsoids < 0 || spec.n_sheets < 0 || spec.noise_sigma < 0)
    throw VolumeValidationError("bad phantom spec");

  const int d = spec.dims[0], h = spec.dims[1], w = spec.dims[2];
  Volume v;
  v.dims = spec.dims;
  v.data.resize((size_t)v.numel());

  BackgroundParams bp = background_params(spec);
  for (int z = 0; z < d; ++z)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        v.at(z, y, x) = (float)background_value(bp, z, y, x);

  Rng erng = Rng::stream(spec.seed, 0xe1);
  for (int i = 0; i < spec.n_ellipsoids; ++i) {
    double cz = erng.uniform(0.2, 0.8) * d;
    double cy = erng.uniform(0.2, 0.8) * h;
    double cx = erng.uniform(0.2, 0.8) * w;
    double rz = erng.uniform(0.06, 0.2) * d;
    double ry = erng.uniform(0.06, 0.2) * h;
    double rx = erng.uniform(0.06, 0.2) * w;
    float intensity = (float)erng.uniform(-0.6, 0.9);
    for (int z = 0; z < d; ++z)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double q = (z - cz) * (z - cz) / (rz * rz) +
                     (y - cy) * (y - cy) / (ry * ry) +
                     (x - cx) * (x - cx) / (rx * rx);
          if (q <= 1.0) v.at(z, y, x) += intensity;
        }
  }

  Rng srng = Rng::stream(spec.seed, 0x5e);
  for (int i = 0; i < spec.n_sheets; ++i) {
    int axis = (int)srng.uniform_int(3);
    int extent = spec.dims[axis];
    int pos = 2 + (int)srng.uniform_int((std::uint64_t)(extent - 4));
    int thick = 1 + (int)srng.uniform_int(2);
    float intensity = (float)srng.uniform(1.2, 1.8);
    for (int z = 0; z < d; ++z)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          int c = axis == 0 ? z : axis == 1 ? y : x;
          if (c >= pos && c < pos + thick) v.at(z, y, x) += intensity;
        }
  }

  if (spec.noise_sigma > 0) {
    Rng nrng = Rng::stream(spec.seed, 0x17);
    for (auto& x : v.data) x += (float)(spec.noise_sigma * nrng.normal());
  }

  v.update_range();
  return v;
}

}  // namespace iqt

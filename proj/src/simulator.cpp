#include "iqt/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "iqt/rng.hpp"

namespace iqt {

namespace {

struct AxisView {
  int extent;            // length along the axis
  std::int64_t stride;   // element stride along the axis
  std::int64_t n_lines;  // number of independent 1D lines
  // base offset of line j
  std::int64_t line_base(int axis, const std::array<int, 3>& dims,
                         std::int64_t j) const {
    // iterate the two non-axis dims in row-major order
    int other[2], oi = 0;
    for (int a = 0; a < 3; ++a)
      if (a != axis) other[oi++] = a;
    std::int64_t strides[3];
    strides[2] = 1;
    strides[1] = dims[2];
    strides[0] = (std::int64_t)dims[1] * dims[2];
    std::int64_t j1 = j / dims[other[1]];
    std::int64_t j2 = j % dims[other[1]];
    return j1 * strides[other[0]] + j2 * strides[other[1]];
  }
};

AxisView axis_view(const std::array<int, 3>& dims, int axis) {
  AxisView av;
  av.extent = dims[axis];
  std::int64_t strides[3];
  strides[2] = 1;
  strides[1] = dims[2];
  strides[0] = (std::int64_t)dims[1] * dims[2];
  av.stride = strides[axis];
  av.n_lines = 1;
  for (int a = 0; a < 3; ++a)
    if (a != axis) av.n_lines *= dims[a];
  return av;
}

void gaussian_blur_axis(Volume& v, int axis, double fwhm) {
  if (fwhm <= 0) return;
  const double sigma = fwhm / 2.3548200450309493;
  int radius = (int)std::ceil(4.0 * sigma);
  if (radius < 1) return;
  std::vector<double> kernel(2 * radius + 1);
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * (i / sigma) * (i / sigma));
    sum += kernel[i + radius];
  }
  for (double& kx : kernel) kx /= sum;

  AxisView av = axis_view(v.dims, axis);
  std::vector<double> line((size_t)av.extent);
  for (std::int64_t j = 0; j < av.n_lines; ++j) {
    std::int64_t base = av.line_base(axis, v.dims, j);
    for (int i = 0; i < av.extent; ++i)
      line[i] = v.data[base + i * av.stride];
    for (int i = 0; i < av.extent; ++i) {
      double acc = 0;
      for (int o = -radius; o <= radius; ++o) {
        int idx = i + o;
        // reflect at the boundaries
        if (idx < 0) idx = -idx - 1;
        if (idx >= av.extent) idx = 2 * av.extent - idx - 1;
        idx = std::clamp(idx, 0, av.extent - 1);
        acc += kernel[o + radius] * line[idx];
      }
      v.data[base + i * av.stride] = (float)acc;
    }
  }
}

// Natural cubic spline through knots at x = i*k, i = 0..n-1, evaluated at
// integers 0..out_extent-1 (boundary polynomials extended past the ends).
void spline_line(const std::vector<double>& knots, int k, int out_extent,
                 std::vector<double>& out) {
  const int n = (int)knots.size();
  out.resize((size_t)out_extent);
  if (n == 1) {
    std::fill(out.begin(), out.end(), knots[0]);
    return;
  }
  // second derivatives M_i, natural ends: M_0 = M_{n-1} = 0
  std::vector<double> m(n, 0.0);
  if (n > 2) {
    const double hgap = (double)k;
    std::vector<double> a(n, 0.0), b(n, 0.0), c(n, 0.0), r(n, 0.0);
    for (int i = 1; i < n - 1; ++i) {
      a[i] = hgap / 6.0;
      b[i] = 2.0 * hgap / 3.0;
      c[i] = hgap / 6.0;
      r[i] = (knots[i + 1] - knots[i]) / hgap - (knots[i] - knots[i - 1]) / hgap;
    }
    // Thomas algorithm on rows 1..n-2
    for (int i = 2; i < n - 1; ++i) {
      double w = a[i] / b[i - 1];
      b[i] -= w * c[i - 1];
      r[i] -= w * r[i - 1];
    }
    for (int i = n - 2; i >= 1; --i)
      m[i] = (r[i] - c[i] * (i + 1 < n - 1 ? m[i + 1] : 0.0)) / b[i];
  }
  const double hgap = (double)k;
  for (int x = 0; x < out_extent; ++x) {
    int i = std::clamp(x / k, 0, n - 2);
    double t = ((double)x - i * hgap) / hgap;  // may be outside [0,1] at ends
    double A = 1.0 - t, B = t;
    out[x] = A * knots[i] + B * knots[i + 1] +
             ((A * A * A - A) * m[i] + (B * B * B - B) * m[i + 1]) *
                 (hgap * hgap) / 6.0;
  }
}

void linear_line(const std::vector<double>& knots, int k, int out_extent,
                 std::vector<double>& out) {
  const int n = (int)knots.size();
  out.resize((size_t)out_extent);
  if (n == 1) {
    std::fill(out.begin(), out.end(), knots[0]);
    return;
  }
  for (int x = 0; x < out_extent; ++x) {
    int i = std::clamp(x / k, 0, n - 2);
    double t = ((double)x - (double)i * k) / (double)k;
    out[x] = (1.0 - t) * knots[i] + t * knots[i + 1];
  }
}

Volume upsample_axis(const Volume& lf, int k, int axis, int out_extent,
                     bool cubic, bool* fell_back) {
  Volume out;
  out.dims = lf.dims;
  out.dims[axis] = out_extent;
  out.spacing = lf.spacing;
  out.data.resize((size_t)out.numel());
  out.lo = lf.lo;
  out.hi = lf.hi;

  AxisView in_av = axis_view(lf.dims, axis);
  AxisView out_av = axis_view(out.dims, axis);
  bool use_cubic = cubic && in_av.extent >= 4;
  if (fell_back) *fell_back = cubic && !use_cubic;

  std::vector<double> knots((size_t)in_av.extent), line;
  for (std::int64_t j = 0; j < in_av.n_lines; ++j) {
    std::int64_t ib = in_av.line_base(axis, lf.dims, j);
    std::int64_t ob = out_av.line_base(axis, out.dims, j);
    for (int i = 0; i < in_av.extent; ++i)
      knots[i] = lf.data[ib + i * in_av.stride];
    if (use_cubic)
      spline_line(knots, k, out_extent, line);
    else
      linear_line(knots, k, out_extent, line);
    for (int i = 0; i < out_extent; ++i)
      out.data[ob + i * out_av.stride] = (float)line[i];
  }
  return out;
}

}  // namespace

Volume subsample_slices(const Volume& v, int k, int slice_axis) {
  if (k < 1 || slice_axis < 0 || slice_axis > 2)
    throw ShapeError("subsample_slices: bad spec");
  if (v.dims[slice_axis] % k != 0)
    throw ShapeError("subsample_slices: factor does not divide extent");
  Volume out;
  out.dims = v.dims;
  out.dims[slice_axis] = v.dims[slice_axis] / k;
  out.spacing = v.spacing;
  out.spacing[slice_axis] *= (float)k;
  out.data.resize((size_t)out.numel());
  out.lo = v.lo;
  out.hi = v.hi;
  AxisView in_av = axis_view(v.dims, slice_axis);
  AxisView out_av = axis_view(out.dims, slice_axis);
  for (std::int64_t j = 0; j < in_av.n_lines; ++j) {
    std::int64_t ib = in_av.line_base(slice_axis, v.dims, j);
    std::int64_t ob = out_av.line_base(slice_axis, out.dims, j);
    for (int i = 0; i < out_av.extent; ++i)
      out.data[ob + i * out_av.stride] = v.data[ib + (std::int64_t)i * k * in_av.stride];
  }
  return out;
}

Volume decimate(const Volume& hf, const DecimationSpec& spec) {
  hf.validate();
  const int axis = spec.slice_axis;
  if (axis < 0 || axis > 2 || spec.factor < 1)
    throw ShapeError("decimate: bad spec");
  if (hf.dims[axis] % spec.factor != 0)
    throw ShapeError("decimate: factor does not divide slice extent");
  if (spec.resolved_fwhm() >= hf.dims[axis])
    throw ShapeError("decimate: blur FWHM exceeds slice extent");

  Volume blurred = hf;
  gaussian_blur_axis(blurred, axis, spec.resolved_fwhm());
  Volume lf = subsample_slices(blurred, spec.factor, axis);
  if (spec.noise_sigma > 0) {
    Rng rng = Rng::stream(spec.seed, 0xdec1);
    for (auto& x : lf.data) x += (float)(spec.noise_sigma * rng.normal());
  }
  Volume out = upsample_axis(lf, spec.factor, axis, hf.dims[axis],
                             /*cubic=*/false, nullptr);
  out.spacing = hf.spacing;  // restored to the HF grid
  float mn = out.lo, mx = out.hi;
  for (float x : out.data) { mn = std::min(mn, x); mx = std::max(mx, x); }
  out.lo = mn;
  out.hi = mx;
  return out;
}

InterpolationResult interpolation_baseline(const Volume& lf_slices_only, int k,
                                           int slice_axis) {
  if (k < 1 || slice_axis < 0 || slice_axis > 2)
    throw ShapeError("interpolation_baseline: bad spec");
  InterpolationResult res;
  if (k == 1) {
    res.volume = lf_slices_only;
    return res;
  }
  int out_extent = lf_slices_only.dims[slice_axis] * k;
  res.volume = upsample_axis(lf_slices_only, k, slice_axis, out_extent,
                             /*cubic=*/true, &res.linear_fallback);
  res.volume.spacing[slice_axis] = lf_slices_only.spacing[slice_axis] / (float)k;
  float mn = res.volume.data.empty() ? 0.f : res.volume.data[0];
  float mx = mn;
  for (float x : res.volume.data) { mn = std::min(mn, x); mx = std::max(mx, x); }
  res.volume.lo = std::min(res.volume.lo, mn);
  res.volume.hi = std::max(res.volume.hi, mx);
  return res;
}

}  // namespace iqt

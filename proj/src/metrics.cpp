#include "iqt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "json.hpp"

namespace iqt {

double psnr(const Volume& pred, const Volume& ref, double range,
            bool* infinite) {
  if (pred.dims != ref.dims) throw ShapeError("psnr: shape mismatch");
  if (range <= 0) throw std::invalid_argument("psnr: range must be positive");
  double mse = 0;
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    double d = (double)pred.data[i] - (double)ref.data[i];
    mse += d * d;
  }
  mse /= (double)pred.numel();
  if (mse == 0.0) {
    if (infinite) *infinite = true;
    return std::numeric_limits<double>::infinity();
  }
  if (infinite) *infinite = false;
  return 10.0 * std::log10(range * range / mse);
}

namespace {

// separable Gaussian filtering with reflect boundary, f64 accumulation
struct VolD {
  std::array<int, 3> dims;
  std::vector<double> data;
  double& at(int z, int y, int x) {
    return data[((std::int64_t)z * dims[1] + y) * dims[2] + x];
  }
  double at(int z, int y, int x) const {
    return data[((std::int64_t)z * dims[1] + y) * dims[2] + x];
  }
};

int reflect(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i = std::abs(i) % period;
  return i < n ? i : period - i;
}

std::vector<double> gaussian_kernel(int window, double sigma) {
  const int r = window / 2;
  std::vector<double> k(window);
  double sum = 0;
  for (int i = -r; i <= r; ++i) {
    k[i + r] = std::exp(-0.5 * (i / sigma) * (i / sigma));
    sum += k[i + r];
  }
  for (double& x : k) x /= sum;
  return k;
}

VolD filter_separable(const VolD& v, const std::vector<double>& k) {
  const int r = (int)k.size() / 2;
  VolD a = v, b = v;
  // axis 0
  for (int z = 0; z < v.dims[0]; ++z)
    for (int y = 0; y < v.dims[1]; ++y)
      for (int x = 0; x < v.dims[2]; ++x) {
        double acc = 0;
        for (int o = -r; o <= r; ++o)
          acc += k[o + r] * v.at(reflect(z + o, v.dims[0]), y, x);
        a.at(z, y, x) = acc;
      }
  // axis 1
  for (int z = 0; z < v.dims[0]; ++z)
    for (int y = 0; y < v.dims[1]; ++y)
      for (int x = 0; x < v.dims[2]; ++x) {
        double acc = 0;
        for (int o = -r; o <= r; ++o)
          acc += k[o + r] * a.at(z, reflect(y + o, v.dims[1]), x);
        b.at(z, y, x) = acc;
      }
  // axis 2
  for (int z = 0; z < v.dims[0]; ++z)
    for (int y = 0; y < v.dims[1]; ++y)
      for (int x = 0; x < v.dims[2]; ++x) {
        double acc = 0;
        for (int o = -r; o <= r; ++o)
          acc += k[o + r] * b.at(z, y, reflect(x + o, v.dims[2]));
        a.at(z, y, x) = acc;
      }
  return a;
}

VolD to_vold(const Volume& v) {
  VolD d;
  d.dims = v.dims;
  d.data.assign(v.data.begin(), v.data.end());
  return d;
}

VolD avg_pool2(const VolD& v) {
  VolD o;
  for (int a = 0; a < 3; ++a) o.dims[a] = v.dims[a] / 2;
  o.data.resize((std::int64_t)o.dims[0] * o.dims[1] * o.dims[2]);
  for (int z = 0; z < o.dims[0]; ++z)
    for (int y = 0; y < o.dims[1]; ++y)
      for (int x = 0; x < o.dims[2]; ++x) {
        double acc = 0;
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
              acc += v.at(2 * z + dz, 2 * y + dy, 2 * x + dx);
        o.at(z, y, x) = acc / 8.0;
      }
  return o;
}

SsimTerms ssim_terms_d(const VolD& xv, const VolD& yv, const SsimOptions& opt) {
  const double c1 = (opt.k1 * opt.range) * (opt.k1 * opt.range);
  const double c2 = (opt.k2 * opt.range) * (opt.k2 * opt.range);
  auto kern = gaussian_kernel(opt.window, opt.window_sigma);

  VolD mx = filter_separable(xv, kern);
  VolD my = filter_separable(yv, kern);
  VolD xx = xv, yy = yv, xy = xv;
  for (size_t i = 0; i < xv.data.size(); ++i) {
    xx.data[i] = xv.data[i] * xv.data[i];
    yy.data[i] = yv.data[i] * yv.data[i];
    xy.data[i] = xv.data[i] * yv.data[i];
  }
  VolD sxx = filter_separable(xx, kern);
  VolD syy = filter_separable(yy, kern);
  VolD sxy = filter_separable(xy, kern);

  double ssim_sum = 0, l_sum = 0, cs_sum = 0;
  for (size_t i = 0; i < xv.data.size(); ++i) {
    double mux = mx.data[i], muy = my.data[i];
    double vx = sxx.data[i] - mux * mux;
    double vy = syy.data[i] - muy * muy;
    double cov = sxy.data[i] - mux * muy;
    double l = (2 * mux * muy + c1) / (mux * mux + muy * muy + c1);
    double cs = (2 * cov + c2) / (vx + vy + c2);
    l_sum += l;
    cs_sum += cs;
    ssim_sum += l * cs;
  }
  double n = (double)xv.data.size();
  return {ssim_sum / n, l_sum / n, cs_sum / n};
}

}  // namespace

SsimTerms ssim_terms(const Volume& pred, const Volume& ref,
                     const SsimOptions& opt) {
  if (pred.dims != ref.dims) throw ShapeError("ssim: shape mismatch");
  return ssim_terms_d(to_vold(pred), to_vold(ref), opt);
}

double mssim(const Volume& pred, const Volume& ref, const SsimOptions& opt,
             bool* single_scale_fallback) {
  if (pred.dims != ref.dims) throw ShapeError("mssim: shape mismatch");
  int min_dim = std::min({pred.dims[0], pred.dims[1], pred.dims[2]});
  int scales = opt.scales;
  if (min_dim < (1 << (scales - 1)) * opt.window) {
    scales = 1;
    if (single_scale_fallback) *single_scale_fallback = true;
  } else if (single_scale_fallback) {
    *single_scale_fallback = false;
  }

  // published MS-SSIM weights, truncated and renormalized to sum 1
  static const double kWeights5[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  std::vector<double> w(kWeights5, kWeights5 + scales);
  double wsum = 0;
  for (double x : w) wsum += x;
  for (double& x : w) x /= wsum;

  VolD x = to_vold(pred), y = to_vold(ref);
  double value = 1.0;
  for (int s = 0; s < scales; ++s) {
    SsimTerms t = ssim_terms_d(x, y, opt);
    double cs = std::max(t.cs, 0.0);
    if (s == scales - 1) {
      double l = std::max(t.luminance, 0.0);
      value *= std::pow(l, w[s]) * std::pow(cs, w[s]);
    } else {
      value *= std::pow(cs, w[s]);
      x = avg_pool2(x);
      y = avg_pool2(y);
    }
  }
  return std::clamp(value, 0.0, 1.0);
}

double seam_score(const Volume& v, const PatchGrid& grid) {
  // boundary planes in source coordinates: m*p - pad_before, m = 1..g-1
  double b_sum = 0, i_sum = 0;
  std::int64_t b_n = 0, i_n = 0;
  for (int axis = 0; axis < 3; ++axis) {
    const int n = v.dims[axis];
    std::vector<bool> is_boundary((size_t)n, false);
    for (int m = 1; m < grid.grid[axis]; ++m) {
      int b = m * grid.patch - grid.pad_before[axis];
      if (b >= 1 && b < n - 1) is_boundary[(size_t)b] = true;
    }
    std::int64_t strides[3] = {(std::int64_t)v.dims[1] * v.dims[2], v.dims[2], 1};
    std::int64_t stride = strides[axis];
    int o0 = axis == 0 ? 1 : 0, o1 = axis == 2 ? 1 : 2;
    for (int j0 = 0; j0 < v.dims[o0]; ++j0)
      for (int j1 = 0; j1 < v.dims[o1]; ++j1) {
        std::int64_t base = j0 * strides[o0] + j1 * strides[o1];
        for (int i = 1; i < n - 1; ++i) {
          double d2 = (double)v.data[base + (i - 1) * stride] -
                      2.0 * (double)v.data[base + i * stride] +
                      (double)v.data[base + (i + 1) * stride];
          if (is_boundary[(size_t)i]) {
            b_sum += std::abs(d2);
            ++b_n;
          } else {
            i_sum += std::abs(d2);
            ++i_n;
          }
        }
      }
  }
  if (b_n == 0 || i_n == 0) return 1.0;
  double b_mean = b_sum / (double)b_n;
  double i_mean = i_sum / (double)i_n;
  if (b_mean < 1e-12 && i_mean < 1e-12) return 1.0;
  if (i_mean < 1e-12) return std::numeric_limits<double>::infinity();
  return b_mean / i_mean;
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  if (psnr_infinite)
    j["psnr_db"] = "inf";
  else
    j["psnr_db"] = psnr_db;
  j["mssim"] = mssim;
  j["mssim_single_scale_fallback"] = mssim_single_scale_fallback;
  j["seam_score"] = seam_score;
  j["lpips"] = nullptr;  // reserved, out of scope
  j["seg_miou"] = nullptr;  // reserved, out of scope
  return j.dump(2);
}

}  // namespace iqt

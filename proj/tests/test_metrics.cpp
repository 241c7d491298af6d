#include <cmath>
#include <vector>

#include "doctest.h"
#include "iqt/metrics.hpp"
#include "iqt/rng.hpp"

using namespace iqt;

namespace {

Volume random_volume(std::array<int, 3> dims, std::uint64_t seed,
                     float scale = 1.f) {
  Volume v;
  v.dims = dims;
  v.data.resize((size_t)v.numel());
  Rng r(seed);
  for (auto& x : v.data) x = scale * (float)std::tanh(r.normal());
  v.update_range();
  return v;
}

// independent direct (non-separable) windowed SSIM used as an oracle for the
// separable implementation
int reflect_idx(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i = std::abs(i) % period;
  return i < n ? i : period - i;
}

SsimTerms direct_ssim(const Volume& a, const Volume& b,
                      const SsimOptions& opt) {
  const int r = opt.window / 2;
  std::vector<double> k1d(opt.window);
  double ksum = 0;
  for (int i = -r; i <= r; ++i) {
    k1d[i + r] = std::exp(-0.5 * (i / opt.window_sigma) * (i / opt.window_sigma));
    ksum += k1d[i + r];
  }
  for (double& x : k1d) x /= ksum;
  const double c1 = (opt.k1 * opt.range) * (opt.k1 * opt.range);
  const double c2 = (opt.k2 * opt.range) * (opt.k2 * opt.range);

  double s_sum = 0, l_sum = 0, cs_sum = 0;
  for (int z = 0; z < a.dims[0]; ++z)
    for (int y = 0; y < a.dims[1]; ++y)
      for (int x = 0; x < a.dims[2]; ++x) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (int oz = -r; oz <= r; ++oz)
          for (int oy = -r; oy <= r; ++oy)
            for (int ox = -r; ox <= r; ++ox) {
              double w = k1d[oz + r] * k1d[oy + r] * k1d[ox + r];
              double av = a.at(reflect_idx(z + oz, a.dims[0]),
                               reflect_idx(y + oy, a.dims[1]),
                               reflect_idx(x + ox, a.dims[2]));
              double bv = b.at(reflect_idx(z + oz, b.dims[0]),
                               reflect_idx(y + oy, b.dims[1]),
                               reflect_idx(x + ox, b.dims[2]));
              mx += w * av;
              my += w * bv;
              sxx += w * av * av;
              syy += w * bv * bv;
              sxy += w * av * bv;
            }
        double vx = sxx - mx * mx, vy = syy - my * my, cov = sxy - mx * my;
        double l = (2 * mx * my + c1) / (mx * mx + my * my + c1);
        double cs = (2 * cov + c2) / (vx + vy + c2);
        l_sum += l;
        cs_sum += cs;
        s_sum += l * cs;
      }
  double n = (double)a.numel();
  return {s_sum / n, l_sum / n, cs_sum / n};
}

}  // namespace

TEST_CASE("psnr matches a hand-computed value") {
  Volume a = Volume::filled({4, 4, 4}, 0.f);
  Volume b = Volume::filled({4, 4, 4}, 0.1f);
  // MSE = 0.01, range 2 -> 10*log10(4/0.01) = 26.0206
  bool inf = true;
  double v = psnr(a, b, 2.0, &inf);
  CHECK_FALSE(inf);
  CHECK(v == doctest::Approx(26.020599913279625).epsilon(1e-6));
}

TEST_CASE("psnr flags identical inputs as infinite") {
  Volume a = random_volume({5, 5, 5}, 1);
  bool inf = false;
  double v = psnr(a, a, 2.0, &inf);
  CHECK(inf);
  CHECK(std::isinf(v));
}

TEST_CASE("psnr errors") {
  Volume a = Volume::filled({2, 2, 2}, 0.f);
  Volume b = Volume::filled({2, 2, 3}, 0.f);
  CHECK_THROWS_AS(psnr(a, b, 2.0), ShapeError);
  CHECK_THROWS_AS(psnr(a, a, 0.0), std::invalid_argument);
}

TEST_CASE("single-scale ssim equals the direct windowed oracle") {
  Volume a = random_volume({14, 13, 12}, 2);
  Volume b = random_volume({14, 13, 12}, 3);
  SsimOptions opt;
  SsimTerms impl = ssim_terms(a, b, opt);
  SsimTerms oracle = direct_ssim(a, b, opt);
  CHECK(impl.ssim == doctest::Approx(oracle.ssim).epsilon(1e-10));
  CHECK(impl.luminance == doctest::Approx(oracle.luminance).epsilon(1e-10));
  CHECK(impl.cs == doctest::Approx(oracle.cs).epsilon(1e-10));
}

TEST_CASE("mssim is 1 for identical volumes and decreases with noise") {
  Volume a = random_volume({48, 48, 48}, 4);
  bool fb = true;
  double self = mssim(a, a, {}, &fb);
  CHECK_FALSE(fb);  // 48 >= 2^(3-1) * 11 = 44, so 3 scales are supported
  CHECK(self == doctest::Approx(1.0).epsilon(1e-9));

  Volume noisy = a;
  Rng r(5);
  for (auto& x : noisy.data) x += 0.2f * (float)r.normal();
  noisy.update_range();
  double v = mssim(noisy, a);
  CHECK(v < 0.95);
  CHECK(v > 0.0);

  Volume noisier = a;
  Rng r2(6);
  for (auto& x : noisier.data) x += 0.5f * (float)r2.normal();
  noisier.update_range();
  CHECK(mssim(noisier, a) < v);
}

TEST_CASE("mssim falls back to single scale on small volumes") {
  Volume a = random_volume({16, 16, 16}, 7);
  Volume b = random_volume({16, 16, 16}, 8);
  bool fb = false;
  double v = mssim(a, b, {}, &fb);
  CHECK(fb);
  // single-scale: mssim == l^w * cs^w with w = 1 using the full product
  SsimTerms t = ssim_terms(a, b);
  double expect = std::max(t.luminance, 0.0) * std::max(t.cs, 0.0);
  CHECK(v == doctest::Approx(std::clamp(expect, 0.0, 1.0)).epsilon(1e-9));
}

TEST_CASE("seam score detects boundary-aligned discontinuities") {
  PatchGrid grid = plan_patch_grid({48, 48, 48}, 16);
  // smooth volume: score close to 1
  Volume smooth;
  smooth.dims = {48, 48, 48};
  smooth.data.resize((size_t)smooth.numel());
  for (int z = 0; z < 48; ++z)
    for (int y = 0; y < 48; ++y)
      for (int x = 0; x < 48; ++x)
        smooth.at(z, y, x) =
            (float)(std::sin(0.2 * z) + std::cos(0.15 * y) + 0.1 * x);
  smooth.update_range();
  double s_smooth = seam_score(smooth, grid);
  CHECK(s_smooth == doctest::Approx(1.0).epsilon(0.5));

  // add jumps exactly at patch boundaries -> score rises well above the same
  // jumps placed off-boundary (translation covariance)
  auto with_jumps = [&](int offset) {
    Volume v = smooth;
    for (int z = 0; z < 48; ++z)
      for (int y = 0; y < 48; ++y)
        for (int x = 0; x < 48; ++x)
          if ((z + offset) % 16 == 0 && z + offset > 0 && z + offset < 48)
            v.at(z, y, x) += 2.f;
    v.update_range();
    return v;
  };
  double on_boundary = seam_score(with_jumps(0), grid);
  double off_boundary = seam_score(with_jumps(5), grid);
  CHECK(on_boundary > 5.0 * off_boundary);
  CHECK(on_boundary > 2.0);
}

TEST_CASE("metrics report serializes with stable keys") {
  MetricsReport r;
  r.psnr_db = 30.5;
  r.mssim = 0.9;
  r.seam_score = 1.1;
  std::string j = r.to_json();
  CHECK(j.find("\"psnr_db\"") != std::string::npos);
  CHECK(j.find("\"mssim\"") != std::string::npos);
  CHECK(j.find("\"seam_score\"") != std::string::npos);
  CHECK(j.find("\"lpips\"") != std::string::npos);
  CHECK(j.find("\"seg_miou\"") != std::string::npos);
  // key order stable: psnr before mssim before seam
  CHECK(j.find("psnr_db") < j.find("\"mssim\""));
  CHECK(j.find("\"mssim\"") < j.find("seam_score"));

  MetricsReport ri;
  ri.psnr_infinite = true;
  CHECK(ri.to_json().find("\"inf\"") != std::string::npos);
}

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "iqt/patching.hpp"
#include "iqt/volume.hpp"

namespace iqt {

struct MetricsReport {
  double psnr_db = 0.0;
  bool psnr_infinite = false;
  double mssim = 0.0;
  bool mssim_single_scale_fallback = false;
  double seam_score = 0.0;
  std::string to_json() const;  // stable key order; reserves lpips/miou
};

// 10*log10(range^2 / MSE); identical inputs are flagged infinite.
double psnr(const Volume& pred, const Volume& ref, double range,
            bool* infinite = nullptr);

struct SsimOptions {
  int scales = 3;
  double range = 2.0;  // volumes normalized to [-1, 1]
  double k1 = 0.01;
  double k2 = 0.03;
  int window = 11;
  double window_sigma = 1.5;
};

// Multi-scale SSIM over 3D volumes: Gaussian-windowed single-scale terms,
// 2x average pooling between scales, published weights truncated and
// renormalized; luminance applied at the coarsest scale only.
double mssim(const Volume& pred, const Volume& ref, const SsimOptions& opt = {},
             bool* single_scale_fallback = nullptr);

// Single-scale SSIM mean plus its separated components.
struct SsimTerms {
  double ssim;       // mean full SSIM
  double luminance;  // mean luminance term
  double cs;         // mean contrast-structure term
};
SsimTerms ssim_terms(const Volume& pred, const Volume& ref,
                     const SsimOptions& opt = {});

// Mean |second difference| across patch boundaries divided by the interior
// statistic; 1.0 means no seam artifact, 0/0 resolves to 1.0.
double seam_score(const Volume& v, const PatchGrid& grid);

}  // namespace iqt

#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "iqt/tensor.hpp"

namespace iqt {

struct ScheduleDomainError : std::domain_error {
  using std::domain_error::domain_error;
};

// Variance-preserving cosine schedule on continuous time t in [0, 1].
struct NoiseSchedule {
  double s_offset = 0.008;
  double clip_alpha_min = 1e-5;
};

struct AlphaSigma {
  double alpha;
  double sigma;
};

struct TransitionParams {
  double alpha_ts;   // alpha_{t|s}
  double sigma2_ts;  // sigma^2_{t|s}
};

struct PosteriorParams {
  double mean_coeff_xt;  // multiplies x_t
  double mean_coeff_x;   // multiplies the clean image x
  double sigma2_q;
};

AlphaSigma alpha_sigma(const NoiseSchedule& sched, double t);
TransitionParams transition(const NoiseSchedule& sched, double s, double t);
PosteriorParams posterior_params(const NoiseSchedule& sched, double s, double t);

// x_t = alpha_t * x + sigma_t * eps, elementwise.
template <class T>
Tensor<T> forward_sample(const Tensor<T>& x, double t, const Tensor<T>& eps,
                         const NoiseSchedule& sched) {
  if (!x.same_shape(eps))
    throw std::invalid_argument("forward_sample: shape mismatch " +
                                shape_str(x.shape) + " vs " +
                                shape_str(eps.shape));
  AlphaSigma as = alpha_sigma(sched, t);
  Tensor<T> out(x.shape);
  for (std::int64_t i = 0; i < x.numel(); ++i)
    out[i] = (T)(as.alpha * (double)x[i] + as.sigma * (double)eps[i]);
  return out;
}

enum class PredKind { Epsilon, X, V };

template <class T>
struct Prediction {
  PredKind kind;
  Tensor<T> tensor;
};

// Exact algebraic conversions among the epsilon / x / v parametrizations at
// fixed (x_t, t).
template <class T>
Prediction<T> convert(const Prediction<T>& pred, PredKind target,
                      const Tensor<T>& x_t, double t,
                      const NoiseSchedule& sched) {
  if (pred.kind == target) return pred;
  AlphaSigma as = alpha_sigma(sched, t);
  const double a = as.alpha, s = as.sigma;
  if (s == 0.0 && (target != PredKind::X || pred.kind != PredKind::X))
    throw ScheduleDomainError("convert: sigma_t = 0, epsilon/v undefined");
  if (!pred.tensor.same_shape(x_t))
    throw std::invalid_argument("convert: shape mismatch");

  // First express as x_hat, then map to the target kind.
  Tensor<T> xh(x_t.shape);
  switch (pred.kind) {
    case PredKind::X:
      xh = pred.tensor;
      break;
    case PredKind::Epsilon:
      for (std::int64_t i = 0; i < xh.numel(); ++i)
        xh[i] = (T)(((double)x_t[i] - s * (double)pred.tensor[i]) / a);
      break;
    case PredKind::V:
      for (std::int64_t i = 0; i < xh.numel(); ++i)
        xh[i] = (T)(a * (double)x_t[i] - s * (double)pred.tensor[i]);
      break;
  }
  Prediction<T> out;
  out.kind = target;
  out.tensor = Tensor<T>(x_t.shape);
  switch (target) {
    case PredKind::X:
      out.tensor = xh;
      break;
    case PredKind::Epsilon:
      for (std::int64_t i = 0; i < xh.numel(); ++i)
        out.tensor[i] = (T)(((double)x_t[i] - a * (double)xh[i]) / s);
      break;
    case PredKind::V: {
      for (std::int64_t i = 0; i < xh.numel(); ++i) {
        double eps = ((double)x_t[i] - a * (double)xh[i]) / s;
        out.tensor[i] = (T)(a * eps - s * (double)xh[i]);
      }
      break;
    }
  }
  return out;
}

PredKind pred_kind_from_string(const std::string& s);
std::string pred_kind_to_string(PredKind k);

}  // namespace iqt

#include "iqt/schedule.hpp"

#include <algorithm>
#include <cmath>

namespace iqt {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

AlphaSigma alpha_sigma(const NoiseSchedule& sched, double t) {
  if (!(t >= 0.0 && t <= 1.0))
    throw ScheduleDomainError("alpha_sigma: t outside [0,1]");
  const double s = sched.s_offset;
  auto f = [&](double u) {
    double c = std::cos((u + s) / (1.0 + s) * kPi / 2.0);
    return c * c;
  };
  double abar = f(t) / f(0.0);
  abar = std::clamp(abar, 0.0, 1.0);
  double alpha = std::sqrt(abar);
  alpha = std::max(alpha, sched.clip_alpha_min);
  double sigma = std::sqrt(std::max(0.0, 1.0 - alpha * alpha));
  return {alpha, sigma};
}

TransitionParams transition(const NoiseSchedule& sched, double s, double t) {
  if (s > t) throw ScheduleDomainError("transition: requires s <= t");
  AlphaSigma as = alpha_sigma(sched, s);
  AlphaSigma at = alpha_sigma(sched, t);
  double alpha_ts = at.alpha / as.alpha;
  double sigma2_ts =
      at.sigma * at.sigma - alpha_ts * alpha_ts * as.sigma * as.sigma;
  if (sigma2_ts < 0.0) sigma2_ts = 0.0;  // clamp tiny negative rounding
  return {alpha_ts, sigma2_ts};
}

PosteriorParams posterior_params(const NoiseSchedule& sched, double s,
                                 double t) {
  if (!(s < t)) throw ScheduleDomainError("posterior_params: requires s < t");
  AlphaSigma as = alpha_sigma(sched, s);
  AlphaSigma at = alpha_sigma(sched, t);
  TransitionParams tr = transition(sched, s, t);
  const double s2t = at.sigma * at.sigma;
  const double s2s = as.sigma * as.sigma;
  PosteriorParams p;
  p.mean_coeff_xt = tr.alpha_ts * s2s / s2t;
  p.mean_coeff_x = as.alpha * tr.sigma2_ts / s2t;
  p.sigma2_q = tr.sigma2_ts * s2s / s2t;
  return p;
}

PredKind pred_kind_from_string(const std::string& s) {
  if (s == "epsilon" || s == "eps") return PredKind::Epsilon;
  if (s == "x") return PredKind::X;
  if (s == "v") return PredKind::V;
  throw std::invalid_argument("unknown parametrization kind: " + s);
}

std::string pred_kind_to_string(PredKind k) {
  switch (k) {
    case PredKind::Epsilon: return "epsilon";
    case PredKind::X: return "x";
    case PredKind::V: return "v";
  }
  return "?";
}

}  // namespace iqt

#include <cmath>

#include "doctest.h"
#include "iqt/rng.hpp"
#include "iqt/schedule.hpp"

using namespace iqt;

namespace {
const NoiseSchedule kSched{};  // s_offset 0.008, clip 1e-5
}

TEST_CASE("cosine schedule matches frozen reference values") {
  // frozen from an independent high-precision evaluation of
  // sqrt(cos^2((t+s)/(1+s) * pi/2) / cos^2(s/(1+s) * pi/2)) at s = 0.008
  AlphaSigma as = alpha_sigma(kSched, 0.5);
  CHECK(as.alpha == doctest::Approx(0.7027400589411691).epsilon(1e-12));
  CHECK(as.sigma == doctest::Approx(0.7114467018402448).epsilon(1e-12));
}

TEST_CASE("schedule endpoints") {
  AlphaSigma a0 = alpha_sigma(kSched, 0.0);
  CHECK(a0.alpha == 1.0);
  CHECK(a0.sigma == 0.0);
  AlphaSigma a1 = alpha_sigma(kSched, 1.0);
  CHECK(a1.alpha == kSched.clip_alpha_min);  // clipped, not zero
  CHECK(a1.sigma <= 1.0);
  CHECK(a1.sigma > 0.999999);
}

TEST_CASE("variance preservation and monotonicity over a fine grid") {
  double prev_alpha = 2.0;
  for (int i = 0; i <= 10000; ++i) {
    double t = (double)i / 10000.0;
    AlphaSigma as = alpha_sigma(kSched, t);
    CHECK(std::abs(as.alpha * as.alpha + as.sigma * as.sigma - 1.0) <= 1e-9);
    CHECK(as.alpha <= prev_alpha + 1e-15);
    prev_alpha = as.alpha;
  }
}

TEST_CASE("schedule domain errors") {
  CHECK_THROWS_AS(alpha_sigma(kSched, -0.001), ScheduleDomainError);
  CHECK_THROWS_AS(alpha_sigma(kSched, 1.001), ScheduleDomainError);
  CHECK_THROWS_AS(alpha_sigma(kSched, std::nan("")), ScheduleDomainError);
  CHECK_THROWS_AS(transition(kSched, 0.7, 0.3), ScheduleDomainError);
  CHECK_THROWS_AS(posterior_params(kSched, 0.5, 0.5), ScheduleDomainError);
}

TEST_CASE("transition matches frozen reference and composes") {
  // frozen: alpha_{0.7|0.3} and sigma^2_{0.7|0.3}
  TransitionParams tr = transition(kSched, 0.3, 0.7);
  CHECK(tr.alpha_ts == doctest::Approx(0.5080602839823467).epsilon(1e-12));
  CHECK(tr.sigma2_ts == doctest::Approx(0.7418747478397772).epsilon(1e-12));

  Rng rng(42);
  for (int i = 0; i < 1000; ++i) {
    double a = rng.uniform(), b = rng.uniform();
    double s = std::min(a, b), t = std::max(a, b);
    TransitionParams p = transition(kSched, s, t);
    AlphaSigma as = alpha_sigma(kSched, s);
    AlphaSigma at = alpha_sigma(kSched, t);
    CHECK(std::abs(p.alpha_ts * as.alpha - at.alpha) <= 1e-9);
    CHECK(p.sigma2_ts >= 0.0);
    // marginal variance composition:
    // sigma_t^2 = alpha_{t|s}^2 sigma_s^2 + sigma_{t|s}^2
    double lhs = p.alpha_ts * p.alpha_ts * as.sigma * as.sigma + p.sigma2_ts;
    CHECK(std::abs(lhs - at.sigma * at.sigma) <= 1e-9);
  }
}

TEST_CASE("posterior matches frozen bivariate conditioning oracle") {
  // frozen from an independent bivariate-normal conditioning computation at
  // s=0.4, t=0.8 (cov([x_s, x_t]) given clean x)
  PosteriorParams p = posterior_params(kSched, 0.4, 0.8);
  CHECK(p.mean_coeff_xt == doctest::Approx(0.1482983516024938).epsilon(1e-12));
  CHECK(p.mean_coeff_x == doctest::Approx(0.7591818642978445).epsilon(1e-12));
  CHECK(p.sigma2_q == doctest::Approx(0.3325976766000326).epsilon(1e-12));
  // the frozen case evaluated at x = 1, x_t = 0.5
  double mean = p.mean_coeff_xt * 0.5 + p.mean_coeff_x * 1.0;
  CHECK(mean == doctest::Approx(0.8333310400990914).epsilon(1e-12));
}

TEST_CASE("forward_sample applies the marginal affinely") {
  Tensor<double> x({4}), eps({4});
  for (int i = 0; i < 4; ++i) {
    x[i] = 0.25 * i - 0.5;
    eps[i] = 1.0 - 0.5 * i;
  }
  Tensor<double> xt = forward_sample(x, 0.5, eps, kSched);
  AlphaSigma as = alpha_sigma(kSched, 0.5);
  for (int i = 0; i < 4; ++i)
    CHECK(xt[i] == doctest::Approx(as.alpha * x[i] + as.sigma * eps[i]));
  Tensor<double> bad({3});
  CHECK_THROWS_AS(forward_sample(x, 0.5, bad, kSched), std::invalid_argument);
}

TEST_CASE("parametrization conversions round-trip within 1e-6") {
  Rng rng(7);
  const PredKind kinds[] = {PredKind::Epsilon, PredKind::X, PredKind::V};
  for (int trial = 0; trial < 20; ++trial) {
    double t = rng.uniform(0.01, 0.99);
    Tensor<double> xt({8}), p0({8});
    for (int i = 0; i < 8; ++i) {
      xt[i] = rng.normal();
      p0[i] = rng.normal();
    }
    for (PredKind a : kinds)
      for (PredKind b : kinds) {
        Prediction<double> pred{a, p0};
        auto fwd = convert(pred, b, xt, t, kSched);
        auto back = convert(fwd, a, xt, t, kSched);
        CHECK(back.kind == a);
        for (int i = 0; i < 8; ++i)
          CHECK(std::abs(back.tensor[i] - p0[i]) <= 1e-6);
      }
  }
}

TEST_CASE("conversion identities against the forward process") {
  // build x_t from known (x, eps); then eps-, x- and v-space values must
  // satisfy their defining identities
  Rng rng(9);
  double t = 0.37;
  AlphaSigma as = alpha_sigma(kSched, t);
  Tensor<double> x({16}), eps({16});
  for (int i = 0; i < 16; ++i) {
    x[i] = rng.normal();
    eps[i] = rng.normal();
  }
  Tensor<double> xt = forward_sample(x, t, eps, kSched);
  Prediction<double> px{PredKind::X, x};
  auto pe = convert(px, PredKind::Epsilon, xt, t, kSched);
  auto pv = convert(px, PredKind::V, xt, t, kSched);
  for (int i = 0; i < 16; ++i) {
    CHECK(pe.tensor[i] == doctest::Approx(eps[i]).epsilon(1e-9));
    // v = alpha * eps - sigma * x
    CHECK(pv.tensor[i] ==
          doctest::Approx(as.alpha * eps[i] - as.sigma * x[i]).epsilon(1e-9));
  }
}

TEST_CASE("convert rejects sigma = 0 targets and shape mismatch") {
  Tensor<double> xt({2}), p({2}), bad({3});
  Prediction<double> pe{PredKind::Epsilon, p};
  CHECK_THROWS_AS(convert(pe, PredKind::X, xt, 0.0, kSched),
                  ScheduleDomainError);
  Prediction<double> pb{PredKind::X, bad};
  CHECK_THROWS_AS(convert(pb, PredKind::Epsilon, xt, 0.5, kSched),
                  std::invalid_argument);
}

TEST_CASE("pred kind string round trip") {
  CHECK(pred_kind_from_string("epsilon") == PredKind::Epsilon);
  CHECK(pred_kind_from_string("eps") == PredKind::Epsilon);
  CHECK(pred_kind_from_string("x") == PredKind::X);
  CHECK(pred_kind_from_string("v") == PredKind::V);
  CHECK(pred_kind_to_string(PredKind::V) == "v");
  CHECK_THROWS_AS(pred_kind_from_string("nope"), std::invalid_argument);
}

// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>

#include "fada/rng.hpp"
#include "fada/schedule.hpp"

using namespace fada;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

// Product over the default 1000 linear betas, from an independent loop.
constexpr double kAlphaBarOneLinear = 4.035829765375676e-05;

}  // namespace

TEST_CASE("alpha_bar endpoints and golden value", "[schedule]") {
  const NoiseSchedule s;
  CHECK(s.alpha_bar(0.0) == 1.0);
  CHECK_THAT(s.alpha_bar(1.0), WithinRel(kAlphaBarOneLinear, 1e-12));
  CHECK(s.alpha_bar(1.0) < 0.01);

  double brute = 1.0;
  for (int i = 0; i < 1000; ++i) brute *= 1.0 - (1e-4 + (0.02 - 1e-4) * i / 999.0);
  CHECK_THAT(s.alpha_bar(1.0), WithinRel(brute, 1e-12));
}

TEST_CASE("alpha_bar interpolates between virtual steps", "[schedule]") {
  const NoiseSchedule s;
  const double a0 = s.alpha_bar(0.5), a1 = s.alpha_bar(0.501);
  CHECK_THAT(s.alpha_bar(0.5005), WithinAbs(0.5 * (a0 + a1), 1e-15));
}

TEST_CASE("alpha_bar is strictly decreasing and variance preserving", "[schedule]") {
  for (ScheduleKind kind : {ScheduleKind::kLinearBeta, ScheduleKind::kCosine}) {
    ScheduleParams p;
    p.kind = kind;
    const NoiseSchedule s(p);
    CHECK(s.alpha_bar(0.0) > 0.999);
    CHECK(s.alpha_bar(1.0) < 0.01);
    CHECK(s.alpha_bar(0.3) > s.alpha_bar(0.7));
    double prev = 2.0;
    for (int i = 0; i <= 1000; ++i) {
      const double t = i / 1000.0;
      const double ab = s.alpha_bar(t);
      REQUIRE(ab < prev);
      prev = ab;
      REQUIRE_THAT(ab + s.sigma(t) * s.sigma(t), WithinAbs(1.0, 1e-12));
    }
  }
}

TEST_CASE("alpha_bar rejects times outside the unit interval", "[schedule]") {
  const NoiseSchedule s;
  CHECK_THROWS_AS(s.alpha_bar(-1e-9), DomainError);
  CHECK_THROWS_AS(s.alpha_bar(1.0 + 1e-9), DomainError);
  CHECK_THROWS_AS(s.alpha_bar(std::nan("")), DomainError);
}

TEST_CASE("schedule parameters are validated", "[schedule]") {
  ScheduleParams p;
  p.beta_max = p.beta_min;
  CHECK_THROWS_AS(NoiseSchedule(p), ConfigError);
  p = {};
  p.n_virtual = 1;
  CHECK_THROWS_AS(NoiseSchedule(p), ConfigError);
  CHECK_THROWS_AS(schedule_kind_from_string("sigmoid"), ConfigError);
}

TEST_CASE("add_noise arithmetic", "[schedule]") {
  const NoiseSchedule s;
  Eigen::Vector2d z0(1, 0), eps(0, 1);
  // find t with alpha_bar(t) = 0.64 by bisection
  double lo = 0, hi = 1;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (s.alpha_bar(mid) > 0.64 ? lo : hi) = mid;
  }
  const Eigen::Vector2d zt = add_noise(s, z0, eps, lo);
  CHECK_THAT(zt(0), WithinAbs(0.8, 1e-9));
  CHECK_THAT(zt(1), WithinAbs(0.6, 1e-9));

  CHECK(add_noise(s, z0, eps, 0.0) == z0);
  const Eigen::Vector2d zero = Eigen::Vector2d::Zero();
  CHECK((add_noise(s, z0, zero, 0.4) - std::sqrt(s.alpha_bar(0.4)) * z0).norm() == 0.0);
  CHECK_THROWS_AS(add_noise(s, Eigen::VectorXd(z0), Eigen::VectorXd::Zero(3), 0.5), ShapeError);
}

TEST_CASE("add_noise preserves expected squared norm", "[schedule]") {
  const NoiseSchedule s;
  Rng rng(7);
  const Eigen::Vector3d z0(1.5, -0.5, 2.0);
  const int n = 20000;
  for (double t : {0.1, 0.5, 0.9}) {
    double sum = 0, sum2 = 0;
    for (int i = 0; i < n; ++i) {
      const Eigen::Vector3d eps(rng.normal(), rng.normal(), rng.normal());
      const double v = add_noise(s, z0, eps, t).squaredNorm();
      sum += v;
      sum2 += v * v;
    }
    const double mean = sum / n;
    const double se = std::sqrt((sum2 / n - mean * mean) / n);
    const double ab = s.alpha_bar(t);
    CHECK(std::abs(mean - (ab * z0.squaredNorm() + (1 - ab) * 3)) < 3 * se);
  }
}

TEST_CASE("window partition boundaries and membership", "[schedule]") {
  const WindowPartition p(4);
  CHECK(p.boundaries() == std::vector<double>{1.0, 0.75, 0.5, 0.25, 0.0});

  Window w = p.window_of(0.9);
  CHECK(w.k == 4);
  CHECK(w.t_start == 1.0);
  CHECK(w.t_end == 0.75);

  w = p.window_of(0.75);
  CHECK(w.k == 3);
  CHECK(w.t_start == 0.75);
  CHECK(w.t_end == 0.5);

  w = p.window_of(0.1);
  CHECK(w.k == 1);
  CHECK(w.t_start == 0.25);
  CHECK(w.t_end == 0.0);

  CHECK(p.window_of(1.0).k == 4);
  CHECK(p.window_of(0.0).k == 1);
  CHECK_THROWS_AS(p.window_of(1.5), DomainError);
  CHECK_THROWS_AS(p.window(0), DomainError);
  CHECK_THROWS_AS(WindowPartition(0), ConfigError);

  // every t on a fine grid lands in exactly one window containing it
  for (int i = 0; i <= 4000; ++i) {
    const double t = i / 4000.0;
    const Window x = p.window_of(t);
    int hits = 0;
    for (int k = 1; k <= 4; ++k) {
      const Window y = p.window(k);
      if ((t > y.t_end && t <= y.t_start) || (t == 0.0 && k == 1)) ++hits;
    }
    REQUIRE(hits == 1);
    REQUIRE((t <= x.t_start && (t > x.t_end || t == 0.0)));
  }
}

TEST_CASE("lambda and eta coefficients", "[schedule]") {
  const WindowCoefficients c = lambda_eta_from_levels(0.25, 0.64);
  CHECK_THAT(c.lambda, WithinAbs(1.6, 1e-15));
  CHECK_THAT(c.eta, WithinAbs(-0.7856406460551019, 1e-12));
  CHECK_THROWS_AS(lambda_eta_from_levels(0.5, 0.5), DomainError);

  const NoiseSchedule s;
  const WindowPartition p(4);
  for (int k = 1; k <= 4; ++k) {
    const auto ck = lambda_eta(s, p, k);
    const Window w = p.window(k);
    CHECK_THAT(ck.lambda * std::sqrt(s.alpha_bar(w.t_start)), WithinAbs(std::sqrt(s.alpha_bar(w.t_end)), 1e-12));
  }
}

TEST_CASE("window reconstruction identity", "[schedule]") {
  const NoiseSchedule s;
  const WindowPartition p(4);
  Rng rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    const int k = 1 + static_cast<int>(rng.below(4));
    const Window w = p.window(k);
    const Eigen::Vector2d z0(rng.normal() * 3, rng.normal() * 3), eps(rng.normal(), rng.normal());
    const Eigen::Vector2d zs = add_noise(s, z0, eps, w.t_start);
    const Eigen::Vector2d ze = add_noise(s, z0, eps, w.t_end);
    const auto c = lambda_eta(s, p, k);
    REQUIRE((c.lambda * zs + c.eta * eps - ze).norm() < 1e-10);
  }
}

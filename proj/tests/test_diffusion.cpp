// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>

#include "fada/diffusion.hpp"
#include "fada/eval.hpp"

using namespace fada;
using Catch::Matchers::WithinAbs;

namespace {

/// Bayes-optimal epsilon for data ~ N(mu, s^2 I).
struct GaussianOracle {
  const NoiseSchedule* schedule;
  Eigen::Vector2d mu;
  double s;
  Mat<double> operator()(const Batch<double>& b) const {
    Mat<double> out(b.z.rows(), b.z.cols());
    for (Eigen::Index c = 0; c < b.z.cols(); ++c) {
      const double ab = schedule->alpha_bar(b.t[c]);
      out.col(c) = (b.z.col(c) - std::sqrt(ab) * mu) * std::sqrt(1 - ab) / (ab * s * s + 1 - ab);
    }
    return out;
  }
};

/// Returns a fixed epsilon per condition kind: (1,0) full, (0,1) ref-only, (0,0) null.
struct BranchStub {
  Mat<double> operator()(const Batch<double>& b) const {
    Mat<double> out = Mat<double>::Zero(2, b.z.cols());
    for (Eigen::Index c = 0; c < b.z.cols(); ++c) {
      if (b.cond[c].a) out(0, c) = 1;
      else if (b.cond[c].r) out(1, c) = 1;
    }
    return out;
  }
};

struct ConstantEps {
  Eigen::Vector2d e;
  Mat<double> operator()(const Batch<double>& b) const { return e.replicate(1, b.z.cols()); }
};

double time_for_alpha_bar(const NoiseSchedule& s, double target) {
  double lo = 0, hi = 1;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (s.alpha_bar(mid) > target ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

Mat<double> standard_normal(Rng& rng, int n) {
  Mat<double> z(2, n);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = rng.normal();
  return z;
}

}  // namespace

TEST_CASE("ddim update arithmetic", "[diffusion]") {
  const Mat<double> z = (Mat<double>(2, 1) << 0.8, 0.6).finished();
  const Mat<double> eps = (Mat<double>(2, 1) << 0.0, 1.0).finished();
  const Mat<double> out = ddim_update<double>(z, eps, 0.64, 1.0);
  CHECK_THAT(out(0, 0), WithinAbs(1.0, 1e-15));
  CHECK_THAT(out(1, 0), WithinAbs(0.0, 1e-15));
  CHECK(ddim_update<double>(z, eps, 0.3, 0.3).isApprox(z, 1e-15));

  const NoiseSchedule s;
  const double t = time_for_alpha_bar(s, 0.64);
  const Mat<double> step = ddim_step<double>(ConstantEps{{0, 1}}, s, z, t, 0.0, {Condition::both(0, 0)},
                                             Guidance::conditional());
  CHECK_THAT(step(0, 0), WithinAbs(1.0, 1e-8));
  CHECK_THAT(step(1, 0), WithinAbs(0.0, 1e-8));
  CHECK_THROWS_AS(ddim_step<double>(ConstantEps{{0, 1}}, s, z, 0.5, 0.5, {Condition::none()}, Guidance::conditional()),
                  ContractError);
  CHECK_THROWS_AS(ddim_step<double>(ConstantEps{{0, 1}}, s, z, 0.5, 0.6, {Condition::none()}, Guidance::conditional()),
                  ContractError);
}

TEST_CASE("multi-cfg combination", "[diffusion]") {
  const Mat<double> z = Mat<double>::Zero(2, 1);
  const Mat<double> e = multi_cfg_predict<double>(BranchStub{}, z, {0.5}, {Condition::both(0.2, 1)}, {{2, 1.5}});
  CHECK(e(0, 0) == 2.0);
  CHECK(e(1, 0) == -0.5);
  const auto at = [&](CfgScales s) {
    return multi_cfg_predict<double>(BranchStub{}, z, {0.5}, {Condition::both(0.2, 1)}, {s});
  };
  CHECK(at({1, 1}) == (Mat<double>(2, 1) << 1, 0).finished());
  CHECK(at({0, 0}) == Mat<double>::Zero(2, 1));
  CHECK(at({0, 1}) == (Mat<double>(2, 1) << 0, 1).finished());
  CHECK_THROWS_AS(multi_cfg_predict<double>(BranchStub{}, z, {0.5}, {Condition::ref_only(1)}, {{1, 1}}),
                  ContractError);
}

TEST_CASE("multi-cfg is affine with coefficients summing to one", "[diffusion]") {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    Mat<double> ea(2, 1), er(2, 1), eb(2, 1);
    for (auto* m : {&ea, &er, &eb}) (*m) << rng.normal(), rng.normal();
    const CfgScales s{rng.uniform(0, 10), rng.uniform(0, 4)};
    const Mat<double> c = Mat<double>::Constant(2, 1, rng.normal());
    // shifting every branch by c shifts the result by c
    const Mat<double> lhs = combine_multi_cfg<double>(ea + c, er + c, eb + c, s);
    CHECK((lhs - combine_multi_cfg<double>(ea, er, eb, s) - c).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("ddim with the analytic oracle transports noise to the target gaussian", "[diffusion]") {
  const NoiseSchedule s;
  const GaussianOracle oracle{&s, {1.5, -0.5}, 0.4};
  Rng rng(7);
  const int n = 10000;
  const Mat<double> z = standard_normal(rng, n);
  const std::vector<Condition> cond(n, Condition::none());

  SECTION("25 steps: marginals pass a KS test") {
    const auto res = ddim_run_grid<double>(oracle, s, z, uniform_time_grid(25), cond, Guidance::conditional());
    for (int d = 0; d < 2; ++d) {
      const Eigen::RowVectorXd row = res.z.row(d);
      CHECK(ks_statistic_normal(std::vector<double>(row.data(), row.data() + n), oracle.mu(d), oracle.s) < 0.05);
    }
  }
  SECTION("fine grid: moments within 3 standard errors") {
    const auto res = ddim_run_grid<double>(oracle, s, z, uniform_time_grid(2000), cond, Guidance::conditional());
    const Eigen::Vector2d mean = res.z.rowwise().mean();
    const Mat<double> centered = res.z.colwise() - mean;
    const Mat<double> cov = centered * centered.transpose() / (n - 1);
    const double s2 = oracle.s * oracle.s;
    for (int d = 0; d < 2; ++d) {
      CHECK(std::abs(mean(d) - oracle.mu(d)) < 3 * oracle.s / std::sqrt(n));
      CHECK(std::abs(cov(d, d) - s2) < 3 * s2 * std::sqrt(2.0 / (n - 1)));
    }
    CHECK(std::abs(cov(0, 1)) < 3 * s2 / std::sqrt(n));

    // the exact flow for a gaussian is affine in the starting noise
    const double ab1 = s.alpha_bar(1.0);
    const double scale = oracle.s / std::sqrt(ab1 * s2 + 1 - ab1);
    const Mat<double> exact = ((z.colwise() - std::sqrt(ab1) * oracle.mu) * scale).colwise() + oracle.mu;
    CHECK((res.z - exact).cwiseAbs().maxCoeff() < 1e-2);
  }
}

TEST_CASE("ddim refinement converges", "[diffusion]") {
  const NoiseSchedule s;
  const GaussianOracle oracle{&s, {1.0, 2.0}, 0.3};
  Rng rng(4);
  const Mat<double> z = standard_normal(rng, 64);
  const std::vector<Condition> cond(64, Condition::none());
  const auto solve = [&](int steps) {
    return ddim_solve<double>(oracle, s, z, 1.0, 0.0, steps, cond, Guidance::conditional()).z;
  };
  const Mat<double> z4 = solve(4), z8 = solve(8), z16 = solve(16);
  CHECK((z16 - z8).norm() < (z8 - z4).norm());
  CHECK(solve(1) == ddim_step<double>(oracle, s, z, 1.0, 0.0, cond, Guidance::conditional()));
}

TEST_CASE("solver traces count function evaluations", "[diffusion]") {
  const NoiseSchedule s;
  const Mat<double> z = Mat<double>::Zero(2, 3);
  const std::vector<Condition> cond(3, Condition::both(0.0, 0));
  auto r = ddim_solve<double>(BranchStub{}, s, z, 0.75, 0.5, 2, cond, Guidance::multi_cfg({6.5, 2.5}));
  CHECK(r.trace.nfe == 6);
  CHECK(r.trace.times == std::vector<double>{0.75, 0.625, 0.5});
  r = ddim_solve<double>(BranchStub{}, s, z, 0.75, 0.5, 5, cond, Guidance::conditional());
  CHECK(r.trace.nfe == 5);
  CHECK_THROWS_AS(ddim_solve<double>(BranchStub{}, s, z, 0.75, 0.5, 0, cond, Guidance::conditional()), ContractError);
}

TEST_CASE("sampling modes report exact NFE", "[diffusion]") {
  const NoiseSchedule s;
  const WindowPartition p(4);
  std::vector<Condition> cond(5, Condition::both(0.3, 2));
  Rng rng(1);
  const auto nfe = [&](SampleMode m) {
    return sample<double>(BranchStub{}, s, p, m, cond, {6.5, 2.0}, rng, 2).nfe_per_sample;
  };
  CHECK(nfe(SampleMode::kTeacher75) == 75);
  CHECK(nfe(SampleMode::kBalanced18) == 18);
  CHECK(nfe(SampleMode::kFast6) == 6);
  CHECK(nfe(SampleMode::kConditional6) == 6);

  const auto empty = sample<double>(BranchStub{}, s, p, SampleMode::kTeacher75, {}, {6.5, 2.5}, rng, 2);
  CHECK(empty.samples.cols() == 0);
  CHECK(empty.nfe_per_sample == 0);
  CHECK(sampling_plan(SampleMode::kBalanced18, p, {1, 1}, {2, 2, 1, 1}).grid ==
        std::vector<double>{1.0, 0.875, 0.75, 0.625, 0.5, 0.25, 0.0});
  CHECK_THROWS_AS(sample_mode_from_string("turbo-2"), ConfigError);
}

TEST_CASE("fast sampling needs a cfg path", "[diffusion]") {
  const NoiseSchedule s;
  const WindowPartition p(4);
  Rng rng(1);
  const Predictor<double> teacher = init_predictor<double>(3, {});
  CHECK_THROWS_AS(sample<double>(teacher, s, p, SampleMode::kFast6, {Condition::both(0, 0)}, {6.5, 2}, rng, 2),
                  CapabilityError);
  const Predictor<double> student = clone_student(teacher, CfgMode::kLayerWithTokens, 5);
  CHECK(sample<double>(student, s, p, SampleMode::kFast6, {Condition::both(0, 0)}, {6.5, 2}, rng, 2).nfe_per_sample ==
        6);
}

TEST_CASE("solver is deterministic and consumes no randomness", "[diffusion]") {
  const NoiseSchedule s;
  const Predictor<double> p = init_predictor<double>(9, {});
  Rng rng(5);
  const Mat<double> z = standard_normal(rng, 16);
  const std::vector<Condition> cond(16, Condition::both(1.0, 3));
  const auto a = ddim_run_grid<double>(p, s, z, uniform_time_grid(10), cond, Guidance::multi_cfg({3, 2}));
  const auto b = ddim_run_grid<double>(p, s, z, uniform_time_grid(10), cond, Guidance::multi_cfg({3, 2}));
  CHECK(a.z == b.z);
  CHECK(a.trace.nfe == 30);
}

TEST_CASE("teacher loss oracles", "[diffusion]") {
  const NoiseSchedule s;
  Rng rng(8);
  const int n = 4000;
  Mat<double> z0(2, n);
  for (Eigen::Index i = 0; i < z0.size(); ++i) z0.data()[i] = rng.normal();
  const std::vector<Condition> cond(n, Condition::both(0.5, 1));
  const TeacherBatch<double> tb = make_teacher_batch<double>(z0, cond, s, rng, CondDropout{});

  const auto exact = [&](const Batch<double>& b) {
    CHECK(b.size() == n);
    return tb.eps;
  };
  CHECK(teacher_loss<double>(exact, tb) == 0.0);

  const auto zero = [](const Batch<double>& b) { return Mat<double>::Zero(2, b.size()); };
  const Eigen::RowVectorXd per = tb.eps.colwise().squaredNorm();
  const double mean = per.mean();
  const double se = std::sqrt((per.array() - mean).square().sum() / (n - 1) / n);
  CHECK(std::abs(teacher_loss<double>(zero, tb) - 2.0) < 3 * se);

  int dropped_a = 0, dropped_both = 0;
  for (const auto& c : tb.input.cond) {
    if (!c.r) ++dropped_both;
    else if (!c.a) ++dropped_a;
  }
  CHECK(std::abs(dropped_a / double(n) - 0.1) < 0.02);
  CHECK(std::abs(dropped_both / double(n) - 0.1) < 0.02);
  CHECK_THROWS_AS(make_teacher_batch<double>(Mat<double>(2, 0), {}, s, rng, CondDropout{}), ContractError);
}

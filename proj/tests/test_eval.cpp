// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>
#include <numbers>

#include "fada/eval.hpp"

using namespace fada;
using Catch::Matchers::WithinAbs;

namespace {

Eigen::MatrixXd normal_matrix(Rng& rng, int rows, int cols, double mu = 0.0, double sd = 1.0) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = mu + sd * rng.normal();
  return m;
}

/// Exact epsilon for a point mass at the noiseless ring point of each condition.
struct RingOracle {
  const NoiseSchedule* schedule;
  const DataSpec* data;
  Mat<double> operator()(const Batch<double>& b) const {
    Mat<double> out(b.z.rows(), b.z.cols());
    for (Eigen::Index c = 0; c < b.z.cols(); ++c) {
      const double ab = schedule->alpha_bar(b.t[c]);
      const Eigen::VectorXd x0 = data->ring_point(b.cond[c].a.value_or(0.0), b.cond[c].r.value_or(0));
      out.col(c) = (b.z.col(c) - std::sqrt(ab) * x0) / std::sqrt(1 - ab);
    }
    return out;
  }
};

}  // namespace

TEST_CASE("energy distance closed forms", "[eval]") {
  Rng rng(1);
  const Eigen::MatrixXd x = normal_matrix(rng, 2, 50);
  CHECK_THAT(energy_distance(x, x), WithinAbs(0.0, 1e-12));

  const Eigen::MatrixXd p = Eigen::MatrixXd::Zero(2, 7);
  const Eigen::MatrixXd q = Eigen::MatrixXd::Constant(2, 5, 1.5);
  CHECK_THAT(energy_distance(p, q), WithinAbs(2 * 1.5 * std::sqrt(2.0), 1e-12));

  const Eigen::MatrixXd y = normal_matrix(rng, 2, 80, 0.3, 1.2);
  CHECK_THAT(energy_distance(x, y), WithinAbs(energy_distance(y, x), 1e-12));
  for (int i = 0; i < 20; ++i)
    CHECK(energy_distance(normal_matrix(rng, 2, 30), normal_matrix(rng, 2, 40, 0.1 * i)) >= 0.0);

  CHECK_THROWS_AS(energy_distance(Eigen::MatrixXd(2, 0), x), ContractError);
  CHECK_THROWS_AS(energy_distance(Eigen::MatrixXd::Zero(3, 4), x), ShapeError);
}

TEST_CASE("energy distance is calibrated on equal gaussians", "[eval][slow]") {
  Rng rng(2);
  CHECK(energy_distance(normal_matrix(rng, 1, 10000), normal_matrix(rng, 1, 10000)) < 0.02);
}

TEST_CASE("ks statistic", "[eval]") {
  Rng rng(3);
  std::vector<double> xs(5000);
  for (auto& x : xs) x = 2.0 + 0.5 * rng.normal();
  CHECK(ks_statistic_normal(xs, 2.0, 0.5) < 0.03);
  CHECK(ks_statistic_normal(xs, 2.5, 0.5) > 0.3);
  CHECK_THAT(ks_statistic_normal({0.0}, 0.0, 1.0), WithinAbs(0.5, 1e-15));
}

TEST_CASE("condition adherence", "[eval]") {
  DataSpec spec;
  spec.sigma_gen = 0.0;
  Rng rng(4);
  std::vector<Condition> cond;
  Eigen::MatrixXd samples(2, 0);
  for (int i = 0; i < 40; ++i) {
    const Condition c = Condition::both(rng.uniform(0, 2 * std::numbers::pi), i % 4);
    const Eigen::MatrixXd g = ground_truth_sampler(spec, *c.a, *c.r, 3, rng);
    samples.conservativeResize(2, samples.cols() + 3);
    samples.rightCols(3) = g;
    for (int j = 0; j < 3; ++j) cond.push_back(c);
  }
  auto res = condition_adherence(spec, samples, cond);
  CHECK_THAT(res.adherence, WithinAbs(0.0, 1e-12));
  CHECK(res.cluster_accuracy == 1.0);

  // a quarter turn maps cluster r onto r + 1 and shifts every angle by pi / 2
  Eigen::Matrix2d rot;
  rot << 0, -1, 1, 0;
  Eigen::MatrixXd rotated = rot * samples;
  std::vector<Condition> rcond;
  for (auto& c : cond) rcond.push_back(Condition::both(wrap_angle(*c.a + 0.3 + std::numbers::pi / 2), (*c.r + 1) % 4));
  std::vector<Condition> shifted;
  for (auto& c : cond) shifted.push_back(Condition::both(wrap_angle(*c.a + 0.3), *c.r));
  CHECK_THAT(condition_adherence(spec, rotated, rcond).adherence,
             WithinAbs(condition_adherence(spec, samples, shifted).adherence, 1e-12));
  CHECK_THAT(condition_adherence(spec, samples, shifted).adherence, WithinAbs(0.3, 1e-12));

  const int n = 20000;
  Eigen::MatrixXd uni(2, n);
  std::vector<Condition> fixed(n, Condition::both(1.0, 2));
  for (int i = 0; i < n; ++i) uni.col(i) = spec.ring_point(rng.uniform(0, 2 * std::numbers::pi), 2);
  const double se = std::numbers::pi / std::sqrt(12.0 * n);
  CHECK(std::abs(condition_adherence(spec, uni, fixed).adherence - std::numbers::pi / 2) < 3 * se);

  CHECK_THROWS_AS(condition_adherence(spec, uni, cond), ShapeError);
  CHECK_THROWS_AS(condition_adherence(spec, uni.leftCols(1), {Condition::ref_only(1)}), ContractError);
}

TEST_CASE("ground truth scores itself near zero", "[eval]") {
  DataSpec data;
  data.sigma_gen = 0.1;
  EvalSpec spec;
  spec.samples_per_condition = 400;
  const auto conds = eval_conditions(data, spec);
  REQUIRE(conds.size() == 8);
  GeneratedSet gen;
  gen.samples.resize(2, 8 * 400);
  Rng rng(77);
  for (int i = 0; i < 8; ++i) {
    gen.samples.middleCols(i * 400, 400) = ground_truth_sampler(data, *conds[i].a, *conds[i].r, 400, rng);
    for (int j = 0; j < 400; ++j) gen.cond.push_back(conds[i]);
  }
  const EvalReport rep = score_generated(gen, data, spec);
  CHECK(rep.energy_distance < 0.02);
  CHECK(rep.cluster_accuracy == 1.0);
  CHECK(rep.adherence < 0.2);
}

TEST_CASE("cfg sweep rows follow the grid", "[eval]") {
  DataSpec data;
  data.sigma_gen = 0.0;
  const NoiseSchedule s;
  const WindowPartition p(4);
  EvalSpec spec;
  spec.n_conditions = 4;
  spec.samples_per_condition = 20;
  const RingOracle oracle{&s, &data};

  const auto one = cfg_sweep<double>(oracle, s, p, SampleMode::kBalanced18, SweepAxis::kAudio, {3.0}, 2.0, data, spec);
  REQUIRE(one.size() == 1);
  const auto single = evaluate<double>(oracle, s, p, SampleMode::kBalanced18, {3.0, 2.0}, data, spec);
  CHECK(one[0].report.energy_distance == single.energy_distance);
  CHECK(one[0].report.adherence == single.adherence);

  const std::vector<double> grid{1, 2, 3.5, 5};
  const auto rows = cfg_sweep<double>(oracle, s, p, SampleMode::kTeacher75, SweepAxis::kRef, grid, {}, data, spec);
  REQUIRE(rows.size() == grid.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].scale == grid[i]);
    CHECK(rows[i].report.scales.cfg_r == grid[i]);
    CHECK(rows[i].report.scales.cfg_a == 6.5);
    CHECK(rows[i].report.nfe == 75);
  }
  const auto exact = evaluate<double>(oracle, s, p, SampleMode::kConditional6, {1, 1}, data, spec);
  CHECK(exact.adherence < 1e-6);
  CHECK(exact.cluster_accuracy == 1.0);
  CHECK(sweep_axis_from_string("audio-analog") == SweepAxis::kAudio);
  CHECK_THROWS_AS(sweep_axis_from_string("tempo"), ConfigError);
}

TEST_CASE("ablation matrix keeps order and records failures", "[eval]") {
  using Cell = std::string;
  const auto name = [](const Cell& c) { return c; };
  CHECK(ablation_matrix<Cell>({}, [](const Cell&) { return EvalReport{}; }, name).empty());
  const auto table = ablation_matrix<Cell>(
      {"x", "boom", "y"},
      [](const Cell& c) {
        if (c == "boom") throw CapabilityError("no cfg path");
        EvalReport r;
        r.energy_distance = c == "x" ? 1.0 : 2.0;
        return r;
      },
      name);
  REQUIRE(table.size() == 3);
  CHECK(table[0].name == "x");
  CHECK(table[1].name == "boom");
  CHECK(table[2].name == "y");
  CHECK(table[0].ok());
  CHECK(!table[1].ok());
  CHECK(table[1].error.find("no cfg path") != std::string::npos);
  CHECK(table[2].energy_distance == 2.0);
}

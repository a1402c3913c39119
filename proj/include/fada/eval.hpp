// SPDX-License-Identifier: Apache-2.0
#pragma once

// Desk-scale evaluation: energy distance (fidelity), condition adherence
// (circular error of the recovered fine attribute), cluster accuracy, CFG
// sweeps and the ablation-matrix runner.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "fada/diffusion.hpp"
#include "fada/errors.hpp"
#include "fada/rng.hpp"
#include "fada/synthdata.hpp"

namespace fada {

namespace detail {

template <typename DX, typename DY>
double mean_pair_distance(const Eigen::MatrixBase<DX>& x, const Eigen::MatrixBase<DY>& y) {
  double total = 0;
  for (Eigen::Index j = 0; j < y.cols(); ++j) {
    double col = 0;
    for (Eigen::Index i = 0; i < x.cols(); ++i) col += (x.col(i) - y.col(j)).norm();
    total += col;
  }
  return total / (static_cast<double>(x.cols()) * static_cast<double>(y.cols()));
}

}  // namespace detail

/// E(X, Y) = 2 E||x - y|| - E||x - x'|| - E||y - y'|| over all pairs
/// (V-statistic), so identical multisets give exactly zero.
inline double energy_distance(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  if (x.cols() == 0 || y.cols() == 0) throw ContractError("energy_distance: empty sample set");
  if (x.rows() != y.rows()) throw ShapeError("energy_distance: dimension mismatch");
  const double xy = detail::mean_pair_distance(x, y);
  const double xx = detail::mean_pair_distance(x, x);
  const double yy = detail::mean_pair_distance(y, y);
  return std::max(0.0, 2.0 * xy - xx - yy);
}

/// Two-sided Kolmogorov-Smirnov statistic of a sample against N(mu, sd^2).
inline double ks_statistic_normal(std::vector<double> xs, double mu, double sd) {
  if (xs.empty()) throw ContractError("ks_statistic_normal: empty sample");
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double cdf = 0.5 * std::erfc(-(xs[i] - mu) / (sd * std::numbers::sqrt2));
    d = std::max({d, cdf - static_cast<double>(i) / n, static_cast<double>(i + 1) / n - cdf});
  }
  return d;
}

struct AdherenceResult {
  double adherence = 0.0;         // mean circular error, radians
  double cluster_accuracy = 0.0;  // fraction whose nearest centre is r
};

/// Assigns each sample to its nearest centre and measures the circular
/// error between the recovered attribute and the requested fine condition.
inline AdherenceResult condition_adherence(const DataSpec& spec, const Eigen::MatrixXd& samples,
                                           const std::vector<Condition>& cond) {
  if (static_cast<Eigen::Index>(cond.size()) != samples.cols())
    throw ShapeError("condition_adherence: condition count mismatch");
  AdherenceResult res;
  if (cond.empty()) return res;
  double err = 0;
  std::int64_t hits = 0;
  for (Eigen::Index c = 0; c < samples.cols(); ++c) {
    if (!cond[c].a || !cond[c].r) throw ContractError("condition_adherence: samples need both conditions");
    const int r_hat = nearest_cluster(spec, samples.col(c));
    if (r_hat == *cond[c].r) ++hits;
    const Eigen::Vector2d off = samples.col(c).head<2>() - spec.center(r_hat);
    const double a_hat = off.squaredNorm() > 0 ? attribute_of(spec, samples.col(c), r_hat) : 0.0;
    err += circular_distance(a_hat, *cond[c].a);
  }
  res.adherence = err / static_cast<double>(samples.cols());
  res.cluster_accuracy = static_cast<double>(hits) / static_cast<double>(samples.cols());
  return res;
}

struct EvalSpec {
  int n_conditions = 8;
  int samples_per_condition = 500;
  std::uint64_t seed = 99;

  void validate() const {
    if (n_conditions < 1 || samples_per_condition < 1) throw ConfigError("eval spec needs positive counts");
  }
};

/// Evaluation conditions: clusters cycled, angles drawn from the eval seed.
inline std::vector<Condition> eval_conditions(const DataSpec& data, const EvalSpec& spec) {
  Rng rng = Rng::stream(spec.seed, 0xec0);
  std::vector<Condition> out;
  for (int i = 0; i < spec.n_conditions; ++i)
    out.push_back(Condition::both(rng.uniform(0.0, 2.0 * std::numbers::pi), i % data.n_clusters));
  return out;
}

struct EvalReport {
  std::string name;
  std::string mode;
  CfgScales scales{};
  double energy_distance = 0.0;
  double adherence = 0.0;
  double cluster_accuracy = 0.0;
  std::int64_t nfe = 0;
  std::string fingerprint;
  std::uint64_t seed = 0;
  std::string error;  // non-empty when the run failed

  bool ok() const { return error.empty(); }
};

/// Generated samples per evaluation condition, laid out condition-major.
struct GeneratedSet {
  Eigen::MatrixXd samples;
  std::vector<Condition> cond;
  std::int64_t nfe_per_sample = 0;
};

template <typename T, typename Model>
GeneratedSet generate_for_eval(const Model& model, const NoiseSchedule& schedule, const WindowPartition& partition,
                               SampleMode mode, const CfgScales& scales, const DataSpec& data, const EvalSpec& spec,
                               const std::vector<int>& window_steps = {}) {
  spec.validate();
  const auto conds = eval_conditions(data, spec);
  std::vector<Condition> all;
  all.reserve(conds.size() * spec.samples_per_condition);
  for (const auto& c : conds)
    for (int i = 0; i < spec.samples_per_condition; ++i) all.push_back(c);
  Rng rng = Rng::stream(spec.seed, 0x5a3);
  auto res = sample<T>(model, schedule, partition, mode, all, scales, rng, data.data_dim, window_steps);
  return {res.samples.template cast<double>(), std::move(all), res.nfe_per_sample};
}

/// Scores a generated set against the aligned ground-truth conditional:
/// energy distance averaged over conditions, adherence and accuracy pooled.
inline EvalReport score_generated(const GeneratedSet& gen, const DataSpec& data, const EvalSpec& spec) {
  EvalReport rep;
  const auto conds = eval_conditions(data, spec);
  const int per = spec.samples_per_condition;
  double ed = 0;
  for (std::size_t i = 0; i < conds.size(); ++i) {
    Rng gt_rng = Rng::stream(spec.seed, 0x6700 + i);
    const Eigen::MatrixXd truth = ground_truth_sampler(data, *conds[i].a, *conds[i].r, per, gt_rng);
    ed += energy_distance(gen.samples.middleCols(static_cast<Eigen::Index>(i) * per, per), truth);
  }
  rep.energy_distance = ed / static_cast<double>(conds.size());
  const auto adh = condition_adherence(data, gen.samples, gen.cond);
  rep.adherence = adh.adherence;
  rep.cluster_accuracy = adh.cluster_accuracy;
  rep.nfe = gen.nfe_per_sample;
  rep.seed = spec.seed;
  return rep;
}

template <typename T, typename Model>
EvalReport evaluate(const Model& model, const NoiseSchedule& schedule, const WindowPartition& partition,
                    SampleMode mode, const CfgScales& scales, const DataSpec& data, const EvalSpec& spec,
                    const std::vector<int>& window_steps = {}) {
  const GeneratedSet gen = generate_for_eval<T>(model, schedule, partition, mode, scales, data, spec, window_steps);
  EvalReport rep = score_generated(gen, data, spec);
  rep.mode = to_string(mode);
  rep.scales = scales;
  return rep;
}

enum class SweepAxis { kAudio, kRef };  // fine-condition scale / coarse-condition scale

inline std::string to_string(SweepAxis a) { return a == SweepAxis::kAudio ? "audio" : "ref"; }

inline SweepAxis sweep_axis_from_string(const std::string& s) {
  if (s == "audio" || s == "audio-analog" || s == "a") return SweepAxis::kAudio;
  if (s == "ref" || s == "ref-analog" || s == "r") return SweepAxis::kRef;
  throw ConfigError("unknown sweep axis '" + s + "'");
}

struct SweepRow {
  double scale = 0.0;
  EvalReport report;
};

/// One evaluation per grid point along `axis`, other scale held at `fixed`.
/// Defaults for the other axis: coarse 2.0 when sweeping the fine scale,
/// fine 6.5 when sweeping the coarse scale.
template <typename T, typename Model>
std::vector<SweepRow> cfg_sweep(const Model& model, const NoiseSchedule& schedule, const WindowPartition& partition,
                                SampleMode mode, SweepAxis axis, const std::vector<double>& grid,
                                std::optional<double> fixed, const DataSpec& data, const EvalSpec& spec,
                                const std::vector<int>& window_steps = {}) {
  const double other = fixed.value_or(axis == SweepAxis::kAudio ? 2.0 : 6.5);
  std::vector<SweepRow> rows;
  for (double g : grid) {
    const CfgScales s = axis == SweepAxis::kAudio ? CfgScales{g, other} : CfgScales{other, g};
    rows.push_back({g, evaluate<T>(model, schedule, partition, mode, s, data, spec, window_steps)});
  }
  return rows;
}

/// Runs each named cell in order; a failing cell is recorded and the matrix
/// continues.
template <typename Cell>
std::vector<EvalReport> ablation_matrix(const std::vector<Cell>& cells,
                                        const std::function<EvalReport(const Cell&)>& run,
                                        const std::function<std::string(const Cell&)>& name_of) {
  std::vector<EvalReport> table;
  table.reserve(cells.size());
  for (const auto& cell : cells) {
    EvalReport rep;
    try {
      rep = run(cell);
    } catch (const std::exception& e) {
      rep = EvalReport{};
      rep.error = e.what();
    }
    rep.name = name_of(cell);
    table.push_back(std::move(rep));
  }
  return table;
}

}  // namespace fada

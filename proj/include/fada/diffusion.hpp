// SPDX-License-Identifier: Apache-2.0
#pragma once

// Teacher objective, the deterministic DDIM solver, multi-CFG prediction and
// the three sampling modes with exact NFE accounting.

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "fada/errors.hpp"
#include "fada/net.hpp"
#include "fada/rng.hpp"
#include "fada/schedule.hpp"

namespace fada {

/// Predictor-like objects: a Predictor<T>, or any callable taking a Batch<T>
/// and returning an epsilon matrix (oracles and stubs in tests).
template <typename T, typename Model>
Mat<T> predict(const Model& model, const Batch<T>& batch) {
  if constexpr (std::is_same_v<Model, Predictor<T>>) {
    return forward_batch(model, batch);
  } else {
    return model(batch);
  }
}

template <typename T, typename Model>
bool model_has_cfg_path(const Model& model) {
  if constexpr (std::is_same_v<Model, Predictor<T>>) {
    return model.has_cfg_path();
  } else {
    return true;
  }
}

struct CondDropout {
  double drop_a = 0.1;     // fine condition removed, coarse kept
  double drop_both = 0.1;  // both removed

  Condition apply(const Condition& c, Rng& rng) const {
    const double u = rng.uniform();
    if (u < drop_both) return Condition::none();
    if (u < drop_both + drop_a) return Condition{std::nullopt, c.r};
    return c;
  }
};

/// Teacher training batch: noisy inputs plus the noise that produced them.
template <typename T>
struct TeacherBatch {
  Batch<T> input;
  Mat<T> eps;
};

/// Draws t ~ U[0,1], eps ~ N(0, I) and applies condition dropout per element.
template <typename T>
TeacherBatch<T> make_teacher_batch(const Mat<T>& z0, const std::vector<Condition>& cond,
                                   const NoiseSchedule& schedule, Rng& rng, const CondDropout& dropout) {
  const Eigen::Index n = z0.cols();
  if (n == 0) throw ContractError("teacher batch must be nonempty");
  if (static_cast<Eigen::Index>(cond.size()) != n) throw ShapeError("teacher batch: condition count mismatch");
  TeacherBatch<T> tb;
  tb.input.z.resize(z0.rows(), n);
  tb.eps.resize(z0.rows(), n);
  tb.input.t.resize(n);
  tb.input.cond.resize(n);
  for (Eigen::Index c = 0; c < n; ++c) {
    const double t = rng.uniform();
    for (Eigen::Index i = 0; i < z0.rows(); ++i) tb.eps(i, c) = static_cast<T>(rng.normal());
    tb.input.t[c] = t;
    tb.input.cond[c] = dropout.apply(cond[c], rng);
    tb.input.z.col(c) = add_noise(schedule, z0.col(c), tb.eps.col(c), t);
  }
  return tb;
}

/// Mean over the batch of ||eps - eps_hat||^2.
template <typename T>
double mean_squared_error(const Mat<T>& target, const Mat<T>& pred) {
  return static_cast<double>((target - pred).colwise().squaredNorm().sum()) / static_cast<double>(target.cols());
}

template <typename T, typename Model>
double teacher_loss(const Model& model, const TeacherBatch<T>& tb) {
  return mean_squared_error<T>(tb.eps, predict<T>(model, tb.input));
}

/// Loss closure for Eq.-1 style training: value and dLoss/dOutput.
template <typename T>
LossResult<T> teacher_loss_closure(const Mat<T>& eps, const Mat<T>& out) {
  LossResult<T> r;
  const double n = static_cast<double>(eps.cols());
  r.loss = mean_squared_error<T>(eps, out);
  r.d_output = (out - eps) * static_cast<T>(2.0 / n);
  return r;
}

/// DDIM (eta = 0) update from a known epsilon estimate.
template <typename T, typename D1, typename D2>
Mat<T> ddim_update(const Eigen::MatrixBase<D1>& z_t, const Eigen::MatrixBase<D2>& eps_hat, double ab_from,
                   double ab_to) {
  const double sf = std::sqrt(ab_from), nf = std::sqrt(1.0 - ab_from);
  const double st = std::sqrt(ab_to), nt = std::sqrt(1.0 - ab_to);
  // x0_hat = (z - nf eps) / sf ; z_to = st x0_hat + nt eps
  return static_cast<T>(st / sf) * z_t + static_cast<T>(nt - st * nf / sf) * eps_hat;
}

enum class GuidanceKind {
  kConditional,  // one pass with the given conditions
  kMultiCfg,     // three passes combined with the multi-CFG rule
  kEmbedded,     // one pass, scales fed to the predictor's own CFG path
};

/// Guidance for a batch of chains; `scales` has one entry per chain or a
/// single entry shared by all.
struct Guidance {
  GuidanceKind kind = GuidanceKind::kConditional;
  std::vector<CfgScales> scales;

  static Guidance conditional() { return {}; }
  static Guidance multi_cfg(CfgScales s) { return {GuidanceKind::kMultiCfg, {s}}; }
  static Guidance embedded(CfgScales s) { return {GuidanceKind::kEmbedded, {s}}; }

  int passes() const { return kind == GuidanceKind::kMultiCfg ? 3 : 1; }

  std::vector<CfgScales> expand(Eigen::Index n) const {
    if (scales.size() == static_cast<std::size_t>(n)) return scales;
    if (scales.size() != 1) throw ShapeError("guidance: scales must have one entry or one per chain");
    return std::vector<CfgScales>(static_cast<std::size_t>(n), scales.front());
  }
};

/// eps_cfg = cfg_a (eps_a - eps_r) + cfg_r (eps_r - eps_b) + eps_b.
template <typename T>
Mat<T> combine_multi_cfg(const Mat<T>& eps_a, const Mat<T>& eps_r, const Mat<T>& eps_b, const CfgScales& s) {
  return static_cast<T>(s.cfg_a) * (eps_a - eps_r) + static_cast<T>(s.cfg_r) * (eps_r - eps_b) + eps_b;
}

/// Batched multi-CFG prediction. All chains must carry both conditions.
/// Counts as three function evaluations per chain.
template <typename T, typename Model>
Mat<T> multi_cfg_predict(const Model& model, const Mat<T>& z, const std::vector<double>& t,
                         const std::vector<Condition>& cond, const std::vector<CfgScales>& scales) {
  const Eigen::Index n = z.cols();
  if (static_cast<Eigen::Index>(cond.size()) != n || static_cast<Eigen::Index>(scales.size()) != n)
    throw ShapeError("multi_cfg_predict: size mismatch");
  Batch<T> b;
  b.z.resize(z.rows(), 3 * n);
  b.z << z, z, z;
  b.t.reserve(3 * n);
  b.cond.reserve(3 * n);
  for (int pass = 0; pass < 3; ++pass) b.t.insert(b.t.end(), t.begin(), t.end());
  for (const auto& c : cond) {
    if (!c.a || !c.r) throw ContractError("multi_cfg_predict: both conditions must be available");
    b.cond.push_back(c);
  }
  for (const auto& c : cond) b.cond.push_back(Condition::ref_only(*c.r));
  for (Eigen::Index i = 0; i < n; ++i) b.cond.push_back(Condition::none());
  const Mat<T> eps = predict<T>(model, b);
  Mat<T> out(z.rows(), n);
  for (Eigen::Index c = 0; c < n; ++c) {
    const CfgScales& s = scales[c];
    out.col(c) = static_cast<T>(s.cfg_a) * (eps.col(c) - eps.col(n + c)) +
                 static_cast<T>(s.cfg_r) * (eps.col(n + c) - eps.col(2 * n + c)) + eps.col(2 * n + c);
  }
  return out;
}

template <typename T, typename Model>
Mat<T> guided_epsilon(const Model& model, const Mat<T>& z, const std::vector<double>& t,
                      const std::vector<Condition>& cond, const Guidance& guidance) {
  switch (guidance.kind) {
    case GuidanceKind::kMultiCfg:
      return multi_cfg_predict<T>(model, z, t, cond, guidance.expand(z.cols()));
    case GuidanceKind::kEmbedded: {
      Batch<T> b{z, t, cond, guidance.expand(z.cols()), std::nullopt};
      return predict<T>(model, b);
    }
    case GuidanceKind::kConditional:
    default: {
      Batch<T> b{z, t, cond, {}, std::nullopt};
      return predict<T>(model, b);
    }
  }
}

/// One deterministic DDIM step per chain, each chain with its own times.
template <typename T, typename Model>
Mat<T> ddim_step(const Model& model, const NoiseSchedule& schedule, const Mat<T>& z_t,
                 const std::vector<double>& t_from, const std::vector<double>& t_to,
                 const std::vector<Condition>& cond, const Guidance& guidance) {
  const Eigen::Index n = z_t.cols();
  if (static_cast<Eigen::Index>(t_from.size()) != n || static_cast<Eigen::Index>(t_to.size()) != n)
    throw ShapeError("ddim_step: time vectors must have one entry per chain");
  for (Eigen::Index c = 0; c < n; ++c) {
    if (!(t_to[c] < t_from[c])) throw ContractError("ddim_step: requires t_to < t_from");
    if (t_to[c] < 0.0 || t_from[c] > 1.0) throw DomainError("ddim_step: times outside [0,1]");
  }
  const Mat<T> eps = guided_epsilon<T>(model, z_t, t_from, cond, guidance);
  Mat<T> out(z_t.rows(), n);
  for (Eigen::Index c = 0; c < n; ++c)
    out.col(c) = ddim_update<T>(z_t.col(c), eps.col(c), schedule.alpha_bar(t_from[c]), schedule.alpha_bar(t_to[c]));
  return out;
}

/// Shared-time convenience overload.
template <typename T, typename Model>
Mat<T> ddim_step(const Model& model, const NoiseSchedule& schedule, const Mat<T>& z_t, double t_from, double t_to,
                 const std::vector<Condition>& cond, const Guidance& guidance) {
  const auto n = static_cast<std::size_t>(z_t.cols());
  return ddim_step<T>(model, schedule, z_t, std::vector<double>(n, t_from), std::vector<double>(n, t_to), cond,
                      guidance);
}

/// Times visited by one chain and the function evaluations it consumed.
struct SolverTrace {
  std::vector<double> times;
  std::int64_t nfe = 0;
};

template <typename T>
struct SolveResult {
  Mat<T> z;
  SolverTrace trace;  // per chain; times are those of chain 0
};

/// Uniform-grid DDIM solve, each chain from its own t_from to t_to.
template <typename T, typename Model>
SolveResult<T> ddim_solve(const Model& model, const NoiseSchedule& schedule, const Mat<T>& z_start,
                          const std::vector<double>& t_from, const std::vector<double>& t_to, int n_steps,
                          const std::vector<Condition>& cond, const Guidance& guidance) {
  if (n_steps < 1) throw ContractError("ddim_solve: n_steps must be >= 1");
  const auto n = static_cast<std::size_t>(z_start.cols());
  SolveResult<T> res;
  res.z = z_start;
  std::vector<double> from(n), to(n);
  const auto grid = [&](std::size_t c, int i) {
    if (i == n_steps) return t_to[c];
    return t_from[c] + (t_to[c] - t_from[c]) * static_cast<double>(i) / static_cast<double>(n_steps);
  };
  if (n > 0) res.trace.times.push_back(t_from[0]);
  for (int i = 0; i < n_steps; ++i) {
    for (std::size_t c = 0; c < n; ++c) {
      from[c] = grid(c, i);
      to[c] = grid(c, i + 1);
    }
    if (n > 0) res.z = ddim_step<T>(model, schedule, res.z, from, to, cond, guidance);
    res.trace.nfe += guidance.passes();
    if (n > 0) res.trace.times.push_back(to[0]);
  }
  return res;
}

template <typename T, typename Model>
SolveResult<T> ddim_solve(const Model& model, const NoiseSchedule& schedule, const Mat<T>& z_start, double t_from,
                          double t_to, int n_steps, const std::vector<Condition>& cond, const Guidance& guidance) {
  const auto n = static_cast<std::size_t>(z_start.cols());
  return ddim_solve<T>(model, schedule, z_start, std::vector<double>(n, t_from), std::vector<double>(n, t_to),
                       n_steps, cond, guidance);
}

/// Runs an arbitrary descending time grid (shared by all chains).
template <typename T, typename Model>
SolveResult<T> ddim_run_grid(const Model& model, const NoiseSchedule& schedule, const Mat<T>& z_start,
                             const std::vector<double>& grid, const std::vector<Condition>& cond,
                             const Guidance& guidance) {
  SolveResult<T> res;
  res.z = z_start;
  res.trace.times = grid;
  for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
    if (z_start.cols() > 0) res.z = ddim_step<T>(model, schedule, res.z, grid[i], grid[i + 1], cond, guidance);
    res.trace.nfe += guidance.passes();
  }
  return res;
}

enum class SampleMode {
  kTeacher75,     // 25 uniform steps, explicit multi-CFG
  kBalanced18,    // window-allocated 6 steps, explicit multi-CFG
  kFast6,         // window-allocated 6 steps, CFG through the predictor's embedding
  kConditional6,  // window-allocated 6 steps, plain conditional pass (no guidance)
};

inline std::string to_string(SampleMode m) {
  switch (m) {
    case SampleMode::kTeacher75: return "teacher-75";
    case SampleMode::kBalanced18: return "balanced-18";
    case SampleMode::kFast6: return "fast-6";
    case SampleMode::kConditional6: return "conditional-6";
  }
  return "?";
}

inline SampleMode sample_mode_from_string(const std::string& s) {
  if (s == "teacher-75") return SampleMode::kTeacher75;
  if (s == "balanced-18") return SampleMode::kBalanced18;
  if (s == "fast-6") return SampleMode::kFast6;
  if (s == "conditional-6") return SampleMode::kConditional6;
  throw ConfigError("unknown sampling mode '" + s + "'");
}

/// Inference step allocation over windows, outermost window (near t = 1)
/// first. The default gives the two outermost windows two steps each.
inline std::vector<int> default_window_steps(int windows) {
  std::vector<int> steps(static_cast<std::size_t>(windows), 1);
  for (int i = 0; i < windows && i < 2; ++i) steps[i] = 2;
  return steps;
}

inline std::vector<double> window_time_grid(const WindowPartition& partition, const std::vector<int>& window_steps) {
  if (static_cast<int>(window_steps.size()) != partition.count())
    throw ConfigError("window step allocation must have one entry per window");
  std::vector<double> grid{1.0};
  for (int k = partition.count(), i = 0; k >= 1; --k, ++i) {
    const Window w = partition.window(k);
    const int s = window_steps[i];
    if (s < 1) throw ConfigError("each window needs at least one inference step");
    for (int j = 1; j <= s; ++j)
      grid.push_back(j == s ? w.t_end : w.t_start + (w.t_end - w.t_start) * j / static_cast<double>(s));
  }
  return grid;
}

inline std::vector<double> uniform_time_grid(int steps) {
  std::vector<double> grid;
  for (int i = 0; i <= steps; ++i) grid.push_back(i == steps ? 0.0 : 1.0 - static_cast<double>(i) / steps);
  return grid;
}

struct SamplingPlan {
  std::vector<double> grid;
  Guidance guidance;
  std::int64_t nfe_per_sample() const {
    return static_cast<std::int64_t>(grid.size() - 1) * guidance.passes();
  }
};

inline SamplingPlan sampling_plan(SampleMode mode, const WindowPartition& partition, const CfgScales& scales,
                                  const std::vector<int>& window_steps) {
  switch (mode) {
    case SampleMode::kTeacher75: return {uniform_time_grid(25), Guidance::multi_cfg(scales)};
    case SampleMode::kBalanced18: return {window_time_grid(partition, window_steps), Guidance::multi_cfg(scales)};
    case SampleMode::kFast6: return {window_time_grid(partition, window_steps), Guidance::embedded(scales)};
    case SampleMode::kConditional6: return {window_time_grid(partition, window_steps), Guidance::conditional()};
  }
  throw ConfigError("unknown sampling mode");
}

template <typename T>
struct SampleResult {
  Mat<T> samples;  // data_dim x n
  std::int64_t nfe_per_sample = 0;
  std::int64_t nfe_total = 0;
  std::vector<double> times;
};

/// Generates one sample per entry of `cond` starting from N(0, I).
template <typename T, typename Model>
SampleResult<T> sample(const Model& model, const NoiseSchedule& schedule, const WindowPartition& partition,
                       SampleMode mode, const std::vector<Condition>& cond, const CfgScales& scales, Rng& rng,
                       int data_dim, const std::vector<int>& window_steps = {}) {
  scales.validate();
  if (mode == SampleMode::kFast6 && !model_has_cfg_path<T>(model))
    throw CapabilityError("fast-6 sampling requires a predictor trained with a CFG embedding path");
  const auto steps = window_steps.empty() ? default_window_steps(partition.count()) : window_steps;
  const SamplingPlan plan = sampling_plan(mode, partition, scales, steps);
  const auto n = static_cast<Eigen::Index>(cond.size());
  Mat<T> z(data_dim, n);
  for (Eigen::Index c = 0; c < n; ++c)
    for (int i = 0; i < data_dim; ++i) z(i, c) = static_cast<T>(rng.normal());
  SampleResult<T> out;
  out.times = plan.grid;
  if (n == 0) {
    out.samples = z;
    return out;
  }
  auto res = ddim_run_grid<T>(model, schedule, z, plan.grid, cond, plan.guidance);
  out.samples = std::move(res.z);
  out.nfe_per_sample = res.trace.nfe;
  out.nfe_total = res.trace.nfe * n;
  return out;
}

}  // namespace fada

// SPDX-License-Identifier: Apache-2.0
#pragma once

// Piecewise rectified-flow window distillation with the mixed
// (teacher + ground-truth) loss, the ratio-adaptive ground-truth weight and
// multi-CFG distillation into the student's guidance path.

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "fada/diffusion.hpp"
#include "fada/errors.hpp"
#include "fada/net.hpp"
#include "fada/rng.hpp"
#include "fada/schedule.hpp"

namespace fada {

enum class WeightKind { kOff, kFixed, kAdaptive };

/// Weight on the ground-truth loss. Adaptive weights follow the ratio
/// R = L_gt / (L_distill + guard): rising as w0 R^s below the peak
/// threshold, falling linearly to zero at the dead threshold, zero beyond.
/// `unlimited` drops both thresholds.
struct WeightMode {
  WeightKind kind = WeightKind::kAdaptive;
  double fixed = 0.0;
  double s = 0.25;
  double w0 = 0.2;
  double r_peak = 30.0;
  double r_dead = 100.0;
  bool unlimited = false;

  static WeightMode off() { return {WeightKind::kOff}; }
  static WeightMode fixed_weight(double w) { return {WeightKind::kFixed, w}; }
  static WeightMode adaptive(double s = 0.25, bool unlimited = false) {
    WeightMode m;
    m.s = s;
    m.unlimited = unlimited;
    return m;
  }

  void validate() const {
    if (kind == WeightKind::kFixed && !(fixed >= 0 && std::isfinite(fixed)))
      throw ConfigError("fixed ground-truth weight must be finite and >= 0");
    if (kind == WeightKind::kAdaptive) {
      if (!(s > 0)) throw ConfigError("adaptive weight exponent s must be > 0");
      if (!(w0 >= 0)) throw ConfigError("adaptive weight W0 must be >= 0");
      if (!(r_peak > 0 && r_peak < r_dead)) throw ConfigError("adaptive weight needs 0 < R_p < R_d");
    }
  }
};

inline std::string to_string(const WeightMode& m) {
  std::ostringstream os;
  switch (m.kind) {
    case WeightKind::kOff: return "off";
    case WeightKind::kFixed: os << "fixed-" << m.fixed; return os.str();
    case WeightKind::kAdaptive: os << (m.unlimited ? "adaptive-unl-" : "adaptive-") << m.s; return os.str();
  }
  return "?";
}

struct DistillConfig {
  int windows = 4;
  WeightMode weight{};
  CfgMode cfg_mode = CfgMode::kLayerWithTokens;
  double cfg_a_min = 1.0, cfg_a_max = 10.0;
  double cfg_r_min = 1.0, cfg_r_max = 4.0;
  int teacher_steps = 12;
  double lr = 1e-3;
  int batch_size = 256;
  double ratio_guard = 1e-8;
  CondDropout dropout{};  // applied only when cfg_mode is none

  void validate() const {
    if (windows < 1) throw ConfigError("distill: windows must be >= 1");
    weight.validate();
    if (!(cfg_a_min <= cfg_a_max && cfg_r_min <= cfg_r_max)) throw ConfigError("distill: empty CFG scale range");
    if (cfg_a_min < 0 || cfg_r_min < 0) throw ConfigError("distill: CFG scales must be >= 0");
    if (teacher_steps < 1) throw ConfigError("distill: teacher_steps must be >= 1");
    if (!(lr > 0)) throw ConfigError("distill: lr must be > 0");
    if (batch_size < 1) throw ConfigError("distill: batch_size must be >= 1");
    if (!(ratio_guard > 0)) throw ConfigError("distill: ratio guard must be > 0");
  }
};

/// Point on the straight line through (t_k, z_start) and (t_{k-1}, z_end).
template <typename T, typename D1, typename D2>
Mat<T> interpolate_latent(const Eigen::MatrixBase<D1>& z_start, const Eigen::MatrixBase<D2>& z_end, double t_k,
                          double t_km1, double t) {
  if (!(t_km1 < t_k)) throw ContractError("interpolate_latent: window must satisfy t_{k-1} < t_k");
  if (!(t >= t_km1 && t <= t_k)) throw ContractError("interpolate_latent: t outside window");
  if (t == t_k) return z_start;
  if (t == t_km1) return z_end;
  const T frac = static_cast<T>((t - t_k) / (t_km1 - t_k));
  return z_start + frac * (z_end - z_start);
}

/// eps_hat = (z_end - lambda z_start) / eta.
template <typename T, typename D1, typename D2>
Mat<T> target_noise(const Eigen::MatrixBase<D1>& z_start, const Eigen::MatrixBase<D2>& z_end,
                    const WindowCoefficients& c) {
  if (!(std::abs(c.eta) >= kDegenerateEta)) throw DomainError("target_noise: degenerate window (|eta| < 1e-12)");
  return (z_end - static_cast<T>(c.lambda) * z_start) / static_cast<T>(c.eta);
}

/// One batch of sampled windows with teacher and ground-truth twins.
template <typename T>
struct WindowBatch {
  std::vector<int> k;
  std::vector<double> t;
  std::vector<Condition> cond;
  std::vector<CfgScales> scales;  // empty when cfg_mode is none
  Mat<T> eps;                     // drawn noise
  Mat<T> z_start;                 // z_{t_k}
  Mat<T> teacher_end;             // z_hat_{t_{k-1}}
  Mat<T> gt_end;                  // z_{t_{k-1}} on the same noise
  Mat<T> z_hat_t, z_star_t;       // interpolants
  Mat<T> eps_hat, eps_star;       // target noises
  std::int64_t teacher_nfe = 0;   // summed over the batch

  Eigen::Index size() const { return z_start.cols(); }
};

/// Samples windows, times, noise and (for CFG modes) guidance scales, runs
/// the frozen teacher across each window and builds both target pairs.
template <typename T, typename Model>
WindowBatch<T> build_window_batch(const Model& teacher, const NoiseSchedule& schedule,
                                  const WindowPartition& partition, const Mat<T>& z0,
                                  const std::vector<Condition>& cond, const DistillConfig& cfg, Rng& rng) {
  const Eigen::Index n = z0.cols();
  const Eigen::Index d = z0.rows();
  if (static_cast<Eigen::Index>(cond.size()) != n) throw ShapeError("build_window_batch: condition count mismatch");
  const int K = partition.count();
  std::vector<WindowCoefficients> coef(static_cast<std::size_t>(K) + 1);
  for (int k = 1; k <= K; ++k) coef[k] = lambda_eta(schedule, partition, k);

  WindowBatch<T> wb;
  wb.k.resize(n);
  wb.t.resize(n);
  wb.cond.resize(n);
  wb.eps.resize(d, n);
  wb.z_start.resize(d, n);
  wb.gt_end.resize(d, n);
  std::vector<double> t_from(n), t_to(n);
  const bool guided = cfg.cfg_mode != CfgMode::kNone;
  if (guided) wb.scales.resize(n);
  for (Eigen::Index c = 0; c < n; ++c) {
    const int k = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(K)));
    const Window w = partition.window(k);
    const double t = w.t_start - rng.uniform() * (w.t_start - w.t_end);
    for (Eigen::Index i = 0; i < d; ++i) wb.eps(i, c) = static_cast<T>(rng.normal());
    wb.k[c] = k;
    wb.t[c] = t;
    t_from[c] = w.t_start;
    t_to[c] = w.t_end;
    if (guided) {
      wb.cond[c] = cond[c];
      wb.scales[c] = {rng.uniform(cfg.cfg_a_min, cfg.cfg_a_max), rng.uniform(cfg.cfg_r_min, cfg.cfg_r_max)};
    } else {
      wb.cond[c] = cfg.dropout.apply(cond[c], rng);
    }
    wb.z_start.col(c) = add_noise(schedule, z0.col(c), wb.eps.col(c), w.t_start);
    wb.gt_end.col(c) = add_noise(schedule, z0.col(c), wb.eps.col(c), w.t_end);
  }

  Guidance guidance = guided ? Guidance{GuidanceKind::kMultiCfg, wb.scales} : Guidance::conditional();
  auto solved = ddim_solve<T>(teacher, schedule, wb.z_start, t_from, t_to, cfg.teacher_steps, wb.cond, guidance);
  wb.teacher_end = std::move(solved.z);
  wb.teacher_nfe = solved.trace.nfe * n;

  wb.z_hat_t.resize(d, n);
  wb.z_star_t.resize(d, n);
  wb.eps_hat.resize(d, n);
  wb.eps_star.resize(d, n);
  for (Eigen::Index c = 0; c < n; ++c) {
    const int k = wb.k[c];
    wb.z_hat_t.col(c) = interpolate_latent<T>(wb.z_start.col(c), wb.teacher_end.col(c), t_from[c], t_to[c], wb.t[c]);
    wb.z_star_t.col(c) = interpolate_latent<T>(wb.z_start.col(c), wb.gt_end.col(c), t_from[c], t_to[c], wb.t[c]);
    wb.eps_hat.col(c) = target_noise<T>(wb.z_start.col(c), wb.teacher_end.col(c), coef[k]);
    wb.eps_star.col(c) = target_noise<T>(wb.z_start.col(c), wb.gt_end.col(c), coef[k]);
    if constexpr (std::is_same_v<T, double>) {
      assert((wb.eps_star.col(c) - wb.eps.col(c)).norm() <= 1e-8 * (1.0 + wb.eps.col(c).norm()));
    }
  }
  return wb;
}

/// Student input batch for one of the two interpolants.
/// The ground-truth endpoint is a conditional sample, so its twin is always
/// evaluated at unit scales (Emb_cfg = gamma_a).
template <typename T>
std::vector<CfgScales> student_scales(const WindowBatch<T>& wb, bool ground_truth) {
  if (!ground_truth || wb.scales.empty()) return wb.scales;
  return std::vector<CfgScales>(wb.scales.size(), CfgScales{1.0, 1.0});
}

template <typename T>
Batch<T> student_batch(const WindowBatch<T>& wb, bool ground_truth) {
  return Batch<T>{ground_truth ? wb.z_star_t : wb.z_hat_t, wb.t, wb.cond, student_scales(wb, ground_truth),
                  std::nullopt};
}

struct PerSampleLoss {
  std::vector<double> per_sample;
  double mean = 0.0;
};

template <typename T>
PerSampleLoss per_sample_squared_error(const Mat<T>& target, const Mat<T>& pred) {
  PerSampleLoss out;
  const auto sq = (target - pred).colwise().squaredNorm();
  out.per_sample.resize(static_cast<std::size_t>(sq.size()));
  double total = 0;
  for (Eigen::Index c = 0; c < sq.size(); ++c) {
    out.per_sample[c] = static_cast<double>(sq(c));
    total += out.per_sample[c];
  }
  out.mean = sq.size() ? total / static_cast<double>(sq.size()) : 0.0;
  return out;
}

/// Teacher-target loss: ||eps_hat - eps_stu(z_hat_t, t, c)||^2 per sample.
template <typename T, typename Model>
PerSampleLoss distill_loss(const Model& student, const WindowBatch<T>& wb) {
  return per_sample_squared_error<T>(wb.eps_hat, predict<T>(student, student_batch(wb, false)));
}

/// Ground-truth loss: ||eps_star - eps_stu(z_star_t, t, c)||^2 per sample.
template <typename T, typename Model>
PerSampleLoss gt_loss(const Model& student, const WindowBatch<T>& wb) {
  return per_sample_squared_error<T>(wb.eps_star, predict<T>(student, student_batch(wb, true)));
}

/// Weight as a function of the loss ratio.
inline double weight_from_ratio(double ratio, const WeightMode& mode) {
  if (ratio < 0 || std::isnan(ratio)) throw ContractError("weight_from_ratio: ratio must be >= 0");
  switch (mode.kind) {
    case WeightKind::kOff: return 0.0;
    case WeightKind::kFixed: return mode.fixed;
    case WeightKind::kAdaptive: break;
  }
  if (mode.unlimited || ratio < mode.r_peak) return mode.w0 * std::pow(ratio, mode.s);
  if (ratio < mode.r_dead)
    return mode.w0 * std::pow(mode.r_peak, mode.s) * (mode.r_dead - ratio) / (mode.r_dead - mode.r_peak);
  return 0.0;
}

/// Weight for one sample from its two losses; the ratio carries no gradient.
inline double adaptive_weight(double l_gt, double l_distill, const WeightMode& mode, double guard = 1e-8) {
  if (l_gt < 0 || l_distill < 0) throw ContractError("adaptive_weight: losses must be non-negative");
  switch (mode.kind) {
    case WeightKind::kOff: return 0.0;
    case WeightKind::kFixed: return mode.fixed;
    case WeightKind::kAdaptive: break;
  }
  const double ratio = l_gt / (l_distill + guard);
  return weight_from_ratio(ratio, mode);
}

/// Mean over the batch of L_distill_i + W_i L_gt_i.
inline double total_loss(const std::vector<double>& l_distill, const std::vector<double>& l_gt,
                         const std::vector<double>& weights) {
  if (l_distill.size() != l_gt.size() || l_gt.size() != weights.size())
    throw ShapeError("total_loss: batch indices misaligned");
  if (l_distill.empty()) return 0.0;
  double total = 0;
  for (std::size_t i = 0; i < l_distill.size(); ++i) total += l_distill[i] + weights[i] * l_gt[i];
  return total / static_cast<double>(l_distill.size());
}

/// Value and student gradients of the mixed loss. The weights are computed
/// from the current losses and then held fixed in the reverse pass.
template <typename T>
struct MixedLossResult {
  PerSampleLoss distill;
  PerSampleLoss gt;
  std::vector<double> ratio;
  std::vector<double> weight;
  double total = 0.0;
  Gradients<T> grads;
};

template <typename T>
MixedLossResult<T> mixed_loss_and_grad(const Predictor<T>& student, const WindowBatch<T>& wb,
                                       const WeightMode& mode, double guard,
                                       const std::vector<double>* weight_override = nullptr) {
  const Eigen::Index n = wb.size();
  const Eigen::Index d = wb.z_start.rows();
  Batch<T> joint;
  joint.z.resize(d, 2 * n);
  joint.z << wb.z_hat_t, wb.z_star_t;
  joint.t = wb.t;
  joint.t.insert(joint.t.end(), wb.t.begin(), wb.t.end());
  joint.cond = wb.cond;
  joint.cond.insert(joint.cond.end(), wb.cond.begin(), wb.cond.end());
  if (!wb.scales.empty()) {
    joint.scales = wb.scales;
    const auto unit = student_scales(wb, true);
    joint.scales.insert(joint.scales.end(), unit.begin(), unit.end());
  }

  MixedLossResult<T> res;
  ForwardCache<T> cache;
  forward_batch(student, joint, &cache);
  const Mat<T>& out = cache.output;
  res.distill = per_sample_squared_error<T>(wb.eps_hat, out.leftCols(n));
  res.gt = per_sample_squared_error<T>(wb.eps_star, out.rightCols(n));
  res.ratio.resize(n);
  res.weight.resize(n);
  for (Eigen::Index c = 0; c < n; ++c) {
    res.ratio[c] = res.gt.per_sample[c] / (res.distill.per_sample[c] + guard);
    res.weight[c] = weight_override ? (*weight_override)[c]
                                    : adaptive_weight(res.gt.per_sample[c], res.distill.per_sample[c], mode, guard);
  }
  res.total = total_loss(res.distill.per_sample, res.gt.per_sample, res.weight);
  if (!std::isfinite(res.total)) {
    std::ostringstream diag;
    diag << "{\"loss_distill\":" << res.distill.mean << ",\"loss_gt\":" << res.gt.mean << ",\"batch\":" << n << "}";
    throw TrainingError("non-finite distillation loss", diag.str());
  }

  Mat<T> d_out(d, 2 * n);
  const T inv = static_cast<T>(2.0 / static_cast<double>(n));
  d_out.leftCols(n) = (out.leftCols(n) - wb.eps_hat) * inv;
  for (Eigen::Index c = 0; c < n; ++c)
    d_out.col(n + c) = (out.col(n + c) - wb.eps_star.col(c)) * (inv * static_cast<T>(res.weight[c]));
  res.grads = student.zero_gradients();
  backward_batch(student, joint, cache, d_out, res.grads);
  return res;
}

struct StepTelemetry {
  std::int64_t step = 0;
  double loss_total = 0, loss_distill = 0, loss_gt = 0;
  double ratio_mean = 0, ratio_median = 0;
  std::array<std::int64_t, 4> ratio_hist{};  // [0,1) [1,R_p) [R_p,R_d) [R_d,inf)
  double weight_mean = 0;
  std::int64_t teacher_nfe = 0;
  double cfg_a_mean = 0, cfg_r_mean = 0;     // sampled teacher scales (0 when unguided)

  bool operator==(const StepTelemetry&) const = default;
};

/// One optimiser step of window distillation. `teacher` is read-only.
template <typename T, typename Model>
StepTelemetry distill_train_step(Predictor<T>& student, AdamState<T>& opt, const Model& teacher,
                                 const NoiseSchedule& schedule, const WindowPartition& partition, const Mat<T>& z0,
                                 const std::vector<Condition>& cond, const DistillConfig& cfg, Rng& rng) {
  if (student.cfg_mode() != cfg.cfg_mode)
    throw ConfigError("distill_train_step: student cfg_mode does not match config");
  const WindowBatch<T> wb = build_window_batch<T>(teacher, schedule, partition, z0, cond, cfg, rng);
  MixedLossResult<T> res = mixed_loss_and_grad(student, wb, cfg.weight, cfg.ratio_guard);
  adam_step(student, res.grads, opt, cfg.lr);

  StepTelemetry tel;
  tel.step = opt.step;
  tel.loss_total = res.total;
  tel.loss_distill = res.distill.mean;
  tel.loss_gt = res.gt.mean;
  const auto n = res.ratio.size();
  std::vector<double> sorted = res.ratio;
  std::sort(sorted.begin(), sorted.end());
  double rsum = 0, wsum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    rsum += res.ratio[i];
    wsum += res.weight[i];
    const double r = res.ratio[i];
    const int bin = r < 1.0 ? 0 : r < cfg.weight.r_peak ? 1 : r < cfg.weight.r_dead ? 2 : 3;
    ++tel.ratio_hist[bin];
  }
  tel.ratio_mean = n ? rsum / n : 0;
  tel.ratio_median = n ? (n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2])) : 0;
  tel.weight_mean = n ? wsum / n : 0;
  tel.teacher_nfe = wb.teacher_nfe;
  if (!wb.scales.empty()) {
    for (const auto& s : wb.scales) {
      tel.cfg_a_mean += s.cfg_a;
      tel.cfg_r_mean += s.cfg_r;
    }
    tel.cfg_a_mean /= static_cast<double>(wb.scales.size());
    tel.cfg_r_mean /= static_cast<double>(wb.scales.size());
  }
  return tel;
}

}  // namespace fada

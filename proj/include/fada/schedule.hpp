// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "fada/errors.hpp"

namespace fada {

enum class ScheduleKind { kLinearBeta, kCosine };

inline std::string to_string(ScheduleKind kind) {
  return kind == ScheduleKind::kLinearBeta ? "linear-beta" : "cosine";
}

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "linear-beta") return ScheduleKind::kLinearBeta;
  if (s == "cosine") return ScheduleKind::kCosine;
  throw ConfigError("unknown schedule kind '" + s + "'");
}

struct ScheduleParams {
  ScheduleKind kind = ScheduleKind::kLinearBeta;
  int n_virtual = 1000;
  double beta_min = 1e-4;
  double beta_max = 0.02;
};

/// Continuous-time variance-preserving schedule on t in [0, 1].
///
/// The linear-beta kind tabulates the cumulative product of (1 - beta_i)
/// over n_virtual virtual steps; index 0 is the clean signal and index
/// n_virtual the last step. Continuous t maps to the fractional index
/// t * n_virtual and is linearly interpolated between neighbours.
///
/// The cosine kind uses the squared-cosine curve rescaled so that
/// alpha_bar(1) equals a small positive floor, keeping alpha_bar strictly
/// decreasing and strictly positive.
class NoiseSchedule {
 public:
  static constexpr double kCosineOffset = 0.008;
  static constexpr double kCosineFloor = 1e-4;

  NoiseSchedule() : NoiseSchedule(ScheduleParams{}) {}

  explicit NoiseSchedule(const ScheduleParams& params) : params_(params) {
    if (params.n_virtual < 2) throw ConfigError("schedule n_virtual must be >= 2");
    if (params.kind == ScheduleKind::kLinearBeta) {
      if (!(params.beta_min > 0.0 && params.beta_max > params.beta_min && params.beta_max < 1.0))
        throw ConfigError("schedule betas must satisfy 0 < beta_min < beta_max < 1");
      table_.resize(static_cast<std::size_t>(params.n_virtual) + 1);
      table_[0] = 1.0;
      const double span = params.beta_max - params.beta_min;
      for (int i = 1; i <= params.n_virtual; ++i) {
        const double beta = params.beta_min + span * static_cast<double>(i - 1) /
                                                      static_cast<double>(params.n_virtual - 1);
        table_[i] = table_[i - 1] * (1.0 - beta);
      }
    }
  }

  const ScheduleParams& params() const noexcept { return params_; }

  double alpha_bar(double t) const {
    if (!(t >= 0.0 && t <= 1.0)) throw DomainError("alpha_bar: t outside [0,1]");
    if (params_.kind == ScheduleKind::kCosine) {
      const auto f = [](double u) {
        const double c = std::cos((u + kCosineOffset) / (1.0 + kCosineOffset) * std::numbers::pi / 2.0);
        return c * c;
      };
      return kCosineFloor + (1.0 - kCosineFloor) * (f(t) - f(1.0)) / (f(0.0) - f(1.0));
    }
    const double pos = t * params_.n_virtual;
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    if (lo >= static_cast<std::size_t>(params_.n_virtual)) return table_.back();
    const double frac = pos - static_cast<double>(lo);
    return table_[lo] + frac * (table_[lo + 1] - table_[lo]);
  }

  double sigma(double t) const { return std::sqrt(1.0 - alpha_bar(t)); }

 private:
  ScheduleParams params_;
  std::vector<double> table_;
};

/// z_t = sqrt(alpha_bar(t)) z0 + sqrt(1 - alpha_bar(t)) eps.
template <typename Derived1, typename Derived2>
auto add_noise(const NoiseSchedule& schedule, const Eigen::MatrixBase<Derived1>& z0,
               const Eigen::MatrixBase<Derived2>& eps, double t) {
  using Scalar = typename Derived1::Scalar;
  if (z0.rows() != eps.rows() || z0.cols() != eps.cols())
    throw ShapeError("add_noise: z0 and eps dimensions differ");
  const double ab = schedule.alpha_bar(t);
  using Plain = Eigen::Matrix<Scalar, Derived1::RowsAtCompileTime, Derived1::ColsAtCompileTime>;
  Plain out = static_cast<Scalar>(std::sqrt(ab)) * z0 + static_cast<Scalar>(std::sqrt(1.0 - ab)) * eps;
  return out;
}

struct Window {
  int k = 0;           // 1..K
  double t_start = 0;  // t_k (larger time)
  double t_end = 0;    // t_{k-1}
};

/// K equal windows with boundaries t_k = k/K. Window k covers
/// (t_{k-1}, t_k]: it contains its larger endpoint, and t = 0 is assigned to
/// window 1.
class WindowPartition {
 public:
  explicit WindowPartition(int windows = 4) : windows_(windows) {
    if (windows < 1) throw ConfigError("window count must be >= 1");
  }

  int count() const noexcept { return windows_; }

  double boundary(int k) const {
    if (k < 0 || k > windows_) throw DomainError("window boundary index out of range");
    return static_cast<double>(k) / static_cast<double>(windows_);
  }

  /// Boundaries in descending order [t_K = 1, ..., t_0 = 0].
  std::vector<double> boundaries() const {
    std::vector<double> b;
    for (int k = windows_; k >= 0; --k) b.push_back(boundary(k));
    return b;
  }

  Window window(int k) const {
    if (k < 1 || k > windows_) throw DomainError("window index out of range");
    return {k, boundary(k), boundary(k - 1)};
  }

  Window window_of(double t) const {
    if (!(t >= 0.0 && t <= 1.0)) throw DomainError("window_of: t outside [0,1]");
    int k = static_cast<int>(std::ceil(t * windows_));
    if (k < 1) k = 1;
    if (k > windows_) k = windows_;
    return window(k);
  }

 private:
  int windows_;
};

struct WindowCoefficients {
  double lambda = 0;
  double eta = 0;
};

constexpr double kDegenerateEta = 1e-12;

/// lambda and eta from the two cumulative signal levels of a window.
inline WindowCoefficients lambda_eta_from_levels(double alpha_bar_start, double alpha_bar_end) {
  const double lambda = std::sqrt(alpha_bar_end) / std::sqrt(alpha_bar_start);
  const double eta = std::sqrt(1.0 - alpha_bar_end) - std::sqrt(1.0 - alpha_bar_start) * lambda;
  if (!(std::abs(eta) >= kDegenerateEta)) throw DomainError("degenerate window: |eta| < 1e-12");
  return {lambda, eta};
}

inline WindowCoefficients lambda_eta(const NoiseSchedule& schedule, const WindowPartition& partition,
                                     int k) {
  const Window w = partition.window(k);
  return lambda_eta_from_levels(schedule.alpha_bar(w.t_start), schedule.alpha_bar(w.t_end));
}

}  // namespace fada

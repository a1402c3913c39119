// SPDX-License-Identifier: Apache-2.0
#pragma once

// Quality-tiered synthetic conditional data on a ring of clusters.
//
// The coarse condition r picks one of n_clusters centres placed on a
// circle; the fine condition a is an angle that places the point on a small
// ring of radius radius(r) around that centre. Tier A is strictly aligned.
// The B-only tier uses the same construction with doubled noise and, with
// probability misalign_rate, a condition label that no longer matches the
// point.

#include <Eigen/Core>
#include <cmath>
#include <algorithm>
#include <cstdint>
#include <limits>
#include <string>
#include <numbers>
#include <vector>

#include "fada/errors.hpp"
#include "fada/net.hpp"
#include "fada/rng.hpp"

namespace fada {

enum class Tier { kA, kBOnly };

inline std::string to_string(Tier t) { return t == Tier::kA ? "A" : "B"; }

struct DataSpec {
  int n_a = 2000;
  int n_b = 10000;
  int data_dim = 2;
  int n_clusters = 4;
  double center_radius = 4.0;
  std::vector<double> radii{1.0, 1.0, 1.0, 1.0};
  double sigma_gen = 0.6;
  double misalign_rate = 0.3;
  double misalign_magnitude = std::numbers::pi;  // half-width of the label perturbation
  double b_noise_factor = 2.0;
  std::uint64_t seed = 1234;

  void validate() const {
    if (!(n_b > n_a && n_a >= 0)) throw ConfigError("data spec requires n_B > n_A >= 0");
    if (data_dim < 2) throw ConfigError("data spec requires data_dim >= 2");
    if (n_clusters < 1) throw ConfigError("data spec requires at least one cluster");
    if (static_cast<int>(radii.size()) != n_clusters) throw ConfigError("data spec needs one radius per cluster");
    for (double r : radii)
      if (!(r > 0)) throw ConfigError("cluster radii must be positive");
    if (!(misalign_rate >= 0 && misalign_rate <= 1)) throw ConfigError("misalignment rate must be in [0,1]");
    if (!(sigma_gen >= 0) || !(b_noise_factor >= 0) || !(center_radius >= 0) || !(misalign_magnitude >= 0))
      throw ConfigError("data spec noise and geometry parameters must be non-negative");
  }

  Eigen::Vector2d center(int r) const {
    const double ang = 2.0 * std::numbers::pi * r / n_clusters + std::numbers::pi / 4.0;
    return {center_radius * std::cos(ang), center_radius * std::sin(ang)};
  }

  double radius(int r) const { return radii.at(static_cast<std::size_t>(r)); }

  double min_center_distance() const {
    double best = std::numeric_limits<double>::infinity();
    for (int i = 0; i < n_clusters; ++i)
      for (int j = i + 1; j < n_clusters; ++j) best = std::min(best, (center(i) - center(j)).norm());
    return best;
  }

  Eigen::VectorXd ring_point(double a, int r) const {
    Eigen::VectorXd z = Eigen::VectorXd::Zero(data_dim);
    z.head<2>() = center(r) + radius(r) * Eigen::Vector2d(std::cos(a), std::sin(a));
    return z;
  }
};

struct LabeledSample {
  Eigen::VectorXd z0;
  double a = 0.0;
  int r = 0;
  Tier tier = Tier::kA;
  bool misaligned = false;  // generator bookkeeping; not serialised

  Condition condition() const { return Condition::both(a, r); }
};

struct TieredDataset {
  std::vector<LabeledSample> a;  // tier A only
  std::vector<LabeledSample> b;  // A followed by the B-only samples
};

inline double wrap_angle(double x) {
  double y = std::fmod(x, 2.0 * std::numbers::pi);
  if (y < 0) y += 2.0 * std::numbers::pi;
  return y;
}

/// Shortest angular distance, in [0, pi].
inline double circular_distance(double x, double y) { return std::abs(std::atan2(std::sin(x - y), std::cos(x - y))); }

namespace detail {

inline LabeledSample draw_sample(const DataSpec& spec, std::uint64_t index, Tier tier) {
  Rng rng = Rng::stream(spec.seed, index);
  LabeledSample s;
  s.tier = tier;
  s.r = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.n_clusters)));
  const double true_a = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double noise = spec.sigma_gen * (tier == Tier::kA ? 1.0 : spec.b_noise_factor);
  s.z0 = spec.ring_point(true_a, s.r);
  for (int i = 0; i < spec.data_dim; ++i) s.z0(i) += noise * rng.normal();
  s.a = true_a;
  if (tier == Tier::kBOnly) {
    const double u = rng.uniform();
    const double shift = rng.uniform(-spec.misalign_magnitude, spec.misalign_magnitude);
    if (u < spec.misalign_rate) {
      s.a = wrap_angle(true_a + shift);
      s.misaligned = true;
    }
  }
  return s;
}

}  // namespace detail

/// Deterministic in spec.seed; sample i always comes from stream i.
inline TieredDataset gen_dataset(const DataSpec& spec) {
  spec.validate();
  TieredDataset out;
  out.a.reserve(spec.n_a);
  out.b.reserve(spec.n_b);
  for (int i = 0; i < spec.n_a; ++i) out.a.push_back(detail::draw_sample(spec, static_cast<std::uint64_t>(i), Tier::kA));
  out.b = out.a;
  for (int i = spec.n_a; i < spec.n_b; ++i)
    out.b.push_back(detail::draw_sample(spec, static_cast<std::uint64_t>(i), Tier::kBOnly));
  return out;
}

/// Exact aligned conditional used to build tier A.
inline Eigen::MatrixXd ground_truth_sampler(const DataSpec& spec, double a, int r, int n, Rng& rng) {
  if (r < 0 || r >= spec.n_clusters) throw DomainError("ground_truth_sampler: cluster out of range");
  if (n < 0) throw DomainError("ground_truth_sampler: negative sample count");
  const Eigen::VectorXd mean = spec.ring_point(a, r);
  Eigen::MatrixXd out(spec.data_dim, n);
  for (int c = 0; c < n; ++c)
    for (int i = 0; i < spec.data_dim; ++i) out(i, c) = mean(i) + spec.sigma_gen * rng.normal();
  return out;
}

/// Recovered fine attribute of a point relative to cluster r, in [0, 2 pi).
template <typename Derived>
double attribute_of(const DataSpec& spec, const Eigen::MatrixBase<Derived>& z0, int r) {
  const Eigen::Vector2d c = spec.center(r);
  const Eigen::Vector2d off = Eigen::Vector2d(static_cast<double>(z0(0)), static_cast<double>(z0(1))) - c;
  // Tolerance absorbs rounding differences in recomputed centres.
  if (off.norm() <= 1e-12 * (1.0 + c.norm())) throw DomainError("attribute_of: point at cluster centre has no angle");
  return wrap_angle(std::atan2(off.y(), off.x()));
}

template <typename Derived>
int nearest_cluster(const DataSpec& spec, const Eigen::MatrixBase<Derived>& z0) {
  const Eigen::Vector2d p(static_cast<double>(z0(0)), static_cast<double>(z0(1)));
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int r = 0; r < spec.n_clusters; ++r) {
    const double d = (p - spec.center(r)).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = r;
    }
  }
  return best;
}

/// Packs samples into a data matrix and parallel condition list.
template <typename T>
void to_training_arrays(const std::vector<LabeledSample>& data, Mat<T>& z0, std::vector<Condition>& cond) {
  if (data.empty()) {
    z0.resize(0, 0);
    cond.clear();
    return;
  }
  z0.resize(data.front().z0.size(), static_cast<Eigen::Index>(data.size()));
  cond.resize(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    z0.col(static_cast<Eigen::Index>(i)) = data[i].z0.cast<T>();
    cond[i] = data[i].condition();
  }
}

}  // namespace fada

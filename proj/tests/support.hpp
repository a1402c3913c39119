// SPDX-License-Identifier: Apache-2.0
#pragma once

// Helpers shared by the unit tests and the acceptance driver.

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "fada/net.hpp"
#include "fada/rng.hpp"

namespace fada::testing {

/// A predictor with every parameter group populated, including nonzero
/// CFG injection weights so that token and embedding gradients flow.
inline Predictor<double> perturbed_predictor(CfgMode mode, std::uint64_t seed, const NetDims& dims = {}) {
  Predictor<double> p = init_predictor<double>(seed, dims, mode);
  Rng rng = Rng::stream(seed, 0xbeef);
  for (std::size_t i = 0; i < p.param_count(); ++i) {
    const ParamGroup g = p.param_info()[i].group;
    const double sd = g == ParamGroup::kCfgLayer ? 0.05 : g == ParamGroup::kMlp ? 0.0 : 0.3;
    auto& m = p.param(i);
    for (Eigen::Index j = 0; j < m.size(); ++j) m.data()[j] += sd * rng.normal();
  }
  return p;
}

/// Micro-batch mixing full, reference-only and null conditions.
inline Batch<double> micro_batch(const Predictor<double>& p, std::uint64_t seed, int n = 6) {
  Rng rng = Rng::stream(seed, 0xba7c);
  Batch<double> b;
  b.z.resize(p.dims().data_dim, n);
  for (Eigen::Index i = 0; i < b.z.size(); ++i) b.z.data()[i] = 2.0 * rng.normal();
  for (int c = 0; c < n; ++c) {
    b.t.push_back(rng.uniform(0.05, 0.95));
    const int r = static_cast<int>(rng.below(static_cast<std::uint64_t>(p.dims().n_clusters)));
    const double a = rng.uniform(-3.0, 3.0);
    b.cond.push_back(c % 3 == 0 ? Condition::both(a, r) : c % 3 == 1 ? Condition::ref_only(r) : Condition::none());
    if (p.has_cfg_path()) b.scales.push_back({rng.uniform(1.0, 10.0), rng.uniform(1.0, 4.0)});
  }
  return b;
}

/// Scalar test loss with a non-trivial output gradient.
struct ProbeLoss {
  Mat<double> weights;
  LossResult<double> operator()(const Mat<double>& out) const {
    LossResult<double> r;
    r.loss = (weights.array() * out.array()).sum() + 0.5 * out.squaredNorm();
    r.d_output = weights + out;
    return r;
  }
};

struct GroupError {
  double max_relative = 0.0;
  int checked = 0;
};

/// Central finite differences against the analytic gradient on up to
/// `per_tensor` entries of every parameter tensor, grouped by ParamGroup.
/// Relative error per entry is |a - f| / max(|a| + |f|, floor).
inline std::map<ParamGroup, GroupError> gradient_check(Predictor<double> p, const Batch<double>& batch,
                                                       int per_tensor = 24, double h = 1e-5,
                                                       double floor = 1e-6) {
  Rng rng(99);
  ProbeLoss loss{Mat<double>(p.dims().data_dim, batch.size())};
  for (Eigen::Index i = 0; i < loss.weights.size(); ++i) loss.weights.data()[i] = rng.normal();
  const auto eval = [&](const Predictor<double>& q) { return loss(forward_batch(q, batch)).loss; };
  const Gradients<double> g = grad<double>(p, batch, loss);
  std::map<ParamGroup, GroupError> out;
  for (std::size_t i = 0; i < p.param_count(); ++i) {
    auto& m = p.param(i);
    const Eigen::Index count = std::min<Eigen::Index>(m.size(), per_tensor);
    auto& ge = out[p.param_info()[i].group];
    for (Eigen::Index s = 0; s < count; ++s) {
      const Eigen::Index j = count == m.size() ? s : static_cast<Eigen::Index>(rng.below(m.size()));
      const double orig = m.data()[j];
      m.data()[j] = orig + h;
      const double lp = eval(p);
      m.data()[j] = orig - h;
      const double lm = eval(p);
      m.data()[j] = orig;
      const double fd = (lp - lm) / (2 * h);
      const double an = g[i].data()[j];
      ge.max_relative = std::max(ge.max_relative, std::abs(an - fd) / std::max(std::abs(an) + std::abs(fd), floor));
      ++ge.checked;
    }
  }
  return out;
}

}  // namespace fada::testing

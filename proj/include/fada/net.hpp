// SPDX-License-Identifier: Apache-2.0
#pragma once

// Epsilon-prediction MLP with dual-condition embeddings, learned null
// conditions, learnable CFG tokens and a zero-initialised FiLM injection
// layer. Forward and backward passes are batched column-wise (one sample per
// column) so training and sampling run as dense matrix products.

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fada/errors.hpp"
#include "fada/rng.hpp"

namespace fada {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

enum class CfgMode { kNone, kScalarEmbed, kLayer, kLayerWithTokens };

inline std::string to_string(CfgMode m) {
  switch (m) {
    case CfgMode::kNone: return "none";
    case CfgMode::kScalarEmbed: return "scalar-embed";
    case CfgMode::kLayer: return "layer";
    case CfgMode::kLayerWithTokens: return "layer-with-tokens";
  }
  return "none";
}

inline CfgMode cfg_mode_from_string(const std::string& s) {
  if (s == "none") return CfgMode::kNone;
  if (s == "scalar-embed") return CfgMode::kScalarEmbed;
  if (s == "layer") return CfgMode::kLayer;
  if (s == "layer-with-tokens") return CfgMode::kLayerWithTokens;
  throw ConfigError("unknown cfg_mode '" + s + "'");
}

struct NetDims {
  int data_dim = 2;
  int time_emb_dim = 16;
  int cond_emb_dim = 16;
  int hidden_width = 128;
  int hidden_layers = 3;
  int cfg_emb_dim = 32;
  int n_clusters = 4;
  int fourier_freqs = 4;  // per scale, for the plain (token-free) CFG embedding

  void validate() const {
    if (data_dim < 1 || time_emb_dim < 2 || time_emb_dim % 2 != 0 || cond_emb_dim < 1 ||
        hidden_width < 1 || hidden_layers < 1 || cfg_emb_dim < 1 || n_clusters < 1 || fourier_freqs < 1)
      throw ConfigError("invalid network dimensions");
  }
  int input_dim() const { return data_dim + time_emb_dim + cond_emb_dim; }
  bool operator==(const NetDims&) const = default;
};

/// Guidance scales for the fine (a) and coarse (r) condition.
struct CfgScales {
  double cfg_a = 1.0;
  double cfg_r = 1.0;

  bool operator==(const CfgScales&) const = default;

  void validate() const {
    if (!std::isfinite(cfg_a) || !std::isfinite(cfg_r)) throw DomainError("CFG scales must be finite");
    if (cfg_a < 0 || cfg_r < 0) throw DomainError("CFG scales must be >= 0");
  }
};

/// Fine condition a (an angle, embedded through (sin a, cos a)) and coarse
/// condition r (cluster id). Legal states: both present, r only, neither.
struct Condition {
  std::optional<double> a;
  std::optional<int> r;

  static Condition both(double a, int r) { return {a, r}; }
  static Condition ref_only(int r) { return {std::nullopt, r}; }
  static Condition none() { return {}; }

  bool operator==(const Condition&) const = default;

  void validate() const {
    if (a && !r) throw ContractError("illegal condition state: fine condition present without coarse");
  }
};

/// Column-wise batch fed to the predictor.
///
/// When `emb` is set it is injected as-is through the CFG layer. Otherwise,
/// when `scales` is non-empty, the predictor builds its own guidance
/// conditioning from the scales according to its CfgMode. Predictors without
/// a CFG path ignore both.
template <typename T>
struct Batch {
  Mat<T> z;
  std::vector<double> t;
  std::vector<Condition> cond;
  std::vector<CfgScales> scales;
  std::optional<Mat<T>> emb;

  Eigen::Index size() const { return z.cols(); }
};

template <typename T>
struct LossResult {
  double loss = 0.0;
  Mat<T> d_output;
};

/// Named parameter groups, used by gradient checks and diagnostics.
enum class ParamGroup { kMlp, kCondEmbed, kNull, kCfgTokens, kCfgLayer, kCfgScalar, kCfgPlain };

inline std::string to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::kMlp: return "mlp";
    case ParamGroup::kCondEmbed: return "cond_embed";
    case ParamGroup::kNull: return "null";
    case ParamGroup::kCfgTokens: return "cfg_tokens";
    case ParamGroup::kCfgLayer: return "cfg_layer";
    case ParamGroup::kCfgScalar: return "cfg_scalar";
    case ParamGroup::kCfgPlain: return "cfg_plain";
  }
  return "?";
}

struct ParamInfo {
  std::string name;
  ParamGroup group;
  int rows;
  int cols;
};

template <typename T>
using Gradients = std::vector<Mat<T>>;

namespace detail {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Angular frequencies of the sinusoidal time features, geometric in [1, 100].
inline double time_frequency(int j, int half) {
  if (half == 1) return 1.0;
  return std::exp(std::log(100.0) * static_cast<double>(j) / static_cast<double>(half - 1));
}

}  // namespace detail

/// The epsilon-prediction network. Teachers have cfg_mode == kNone (no CFG
/// parameters); students carry the parameters their cfg_mode needs.
template <typename T = double>
class Predictor {
 public:
  Predictor() = default;

  Predictor(const NetDims& dims, CfgMode mode) : dims_(dims), mode_(mode) {
    dims.validate();
    build_layout();
    params_.resize(info_.size());
    for (std::size_t i = 0; i < info_.size(); ++i) params_[i] = Mat<T>::Zero(info_[i].rows, info_[i].cols);
  }

  const NetDims& dims() const noexcept { return dims_; }
  CfgMode cfg_mode() const noexcept { return mode_; }
  bool has_cfg_layer() const { return mode_ == CfgMode::kLayer || mode_ == CfgMode::kLayerWithTokens; }
  bool has_tokens() const { return mode_ == CfgMode::kLayerWithTokens; }
  bool has_cfg_path() const { return mode_ != CfgMode::kNone; }

  std::size_t param_count() const { return params_.size(); }
  const std::vector<ParamInfo>& param_info() const { return info_; }
  const Mat<T>& param(std::size_t i) const { return params_[i]; }
  Mat<T>& param(std::size_t i) { return params_[i]; }
  std::vector<Mat<T>>& params() { return params_; }
  const std::vector<Mat<T>>& params() const { return params_; }

  std::optional<std::size_t> find(const std::string& name) const {
    for (std::size_t i = 0; i < info_.size(); ++i)
      if (info_[i].name == name) return i;
    return std::nullopt;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.size());
    return n;
  }

  // Layout indices.
  std::size_t w(int layer) const { return idx_hidden_w_[layer]; }
  std::size_t b(int layer) const { return idx_hidden_b_[layer]; }
  std::size_t w_out() const { return idx_out_; }
  std::size_t a_embed_w() const { return idx_a_w_; }
  std::size_t a_embed_b() const { return idx_a_b_; }
  std::size_t r_embed() const { return idx_r_; }
  std::size_t null_a() const { return idx_null_a_; }
  std::size_t null_r() const { return idx_null_r_; }
  std::size_t gamma_a() const { return idx_gamma_a_; }
  std::size_t gamma_r() const { return idx_gamma_r_; }
  std::size_t gamma_b() const { return idx_gamma_b_; }
  std::size_t film_scale(int layer) const { return idx_film_s_[layer]; }
  std::size_t film_shift(int layer) const { return idx_film_b_[layer]; }
  std::size_t scalar_time() const { return idx_scalar_; }
  std::size_t plain_w() const { return idx_plain_w_; }
  std::size_t plain_b() const { return idx_plain_b_; }

  friend bool operator==(const Predictor& x, const Predictor& y) {
    if (!(x.dims_ == y.dims_) || x.mode_ != y.mode_ || x.params_.size() != y.params_.size()) return false;
    for (std::size_t i = 0; i < x.params_.size(); ++i)
      if (x.params_[i] != y.params_[i]) return false;
    return true;
  }

  /// FNV-1a over the raw parameter bytes; used for freeze checks.
  std::uint64_t checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : params_) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(p.data());
      for (std::size_t i = 0; i < static_cast<std::size_t>(p.size()) * sizeof(T); ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
      }
    }
    return h;
  }

  template <typename U>
  Predictor<U> cast() const {
    Predictor<U> out(dims_, mode_);
    for (std::size_t i = 0; i < params_.size(); ++i) out.param(i) = params_[i].template cast<U>();
    return out;
  }

  Gradients<T> zero_gradients() const {
    Gradients<T> g(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) g[i] = Mat<T>::Zero(params_[i].rows(), params_[i].cols());
    return g;
  }

 private:
  std::size_t add(std::string name, ParamGroup g, int rows, int cols) {
    info_.push_back({std::move(name), g, rows, cols});
    return info_.size() - 1;
  }

  void build_layout() {
    const auto& d = dims_;
    constexpr std::size_t kAbsent = static_cast<std::size_t>(-1);
    int in = d.input_dim();
    for (int l = 0; l < d.hidden_layers; ++l) {
      idx_hidden_w_.push_back(add("mlp.w" + std::to_string(l), ParamGroup::kMlp, d.hidden_width, in));
      idx_hidden_b_.push_back(add("mlp.b" + std::to_string(l), ParamGroup::kMlp, d.hidden_width, 1));
      in = d.hidden_width;
    }
    idx_out_ = add("mlp.w_out", ParamGroup::kMlp, d.data_dim, d.hidden_width);
    idx_a_w_ = add("cond.a_w", ParamGroup::kCondEmbed, d.cond_emb_dim, 2);
    idx_a_b_ = add("cond.a_b", ParamGroup::kCondEmbed, d.cond_emb_dim, 1);
    idx_r_ = add("cond.r_table", ParamGroup::kCondEmbed, d.cond_emb_dim, d.n_clusters);
    idx_null_a_ = add("null.a", ParamGroup::kNull, d.cond_emb_dim, 1);
    idx_null_r_ = add("null.r", ParamGroup::kNull, d.cond_emb_dim, 1);
    idx_gamma_a_ = idx_gamma_r_ = idx_gamma_b_ = idx_scalar_ = idx_plain_w_ = idx_plain_b_ = kAbsent;
    if (mode_ == CfgMode::kLayerWithTokens) {
      idx_gamma_a_ = add("cfg.gamma_a", ParamGroup::kCfgTokens, d.cfg_emb_dim, 1);
      idx_gamma_r_ = add("cfg.gamma_r", ParamGroup::kCfgTokens, d.cfg_emb_dim, 1);
      idx_gamma_b_ = add("cfg.gamma_b", ParamGroup::kCfgTokens, d.cfg_emb_dim, 1);
    }
    if (mode_ == CfgMode::kLayer) {
      idx_plain_w_ = add("cfg.plain_w", ParamGroup::kCfgPlain, d.cfg_emb_dim, 4 * d.fourier_freqs);
      idx_plain_b_ = add("cfg.plain_b", ParamGroup::kCfgPlain, d.cfg_emb_dim, 1);
    }
    if (has_cfg_layer()) {
      for (int l = 0; l < d.hidden_layers; ++l) {
        idx_film_s_.push_back(add("cfg.film_scale" + std::to_string(l), ParamGroup::kCfgLayer, d.hidden_width, d.cfg_emb_dim));
        idx_film_b_.push_back(add("cfg.film_shift" + std::to_string(l), ParamGroup::kCfgLayer, d.hidden_width, d.cfg_emb_dim));
      }
    }
    if (mode_ == CfgMode::kScalarEmbed)
      idx_scalar_ = add("cfg.scalar_time", ParamGroup::kCfgScalar, d.time_emb_dim, 2);
  }

  NetDims dims_{};
  CfgMode mode_ = CfgMode::kNone;
  std::vector<ParamInfo> info_;
  std::vector<Mat<T>> params_;
  std::vector<std::size_t> idx_hidden_w_, idx_hidden_b_, idx_film_s_, idx_film_b_;
  std::size_t idx_out_ = 0, idx_a_w_ = 0, idx_a_b_ = 0, idx_r_ = 0, idx_null_a_ = 0, idx_null_r_ = 0;
  std::size_t idx_gamma_a_ = 0, idx_gamma_r_ = 0, idx_gamma_b_ = 0, idx_scalar_ = 0, idx_plain_w_ = 0,
              idx_plain_b_ = 0;
};

namespace detail {

template <typename T>
void fill_normal(Mat<T>& m, Rng& rng, double stddev) {
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = static_cast<T>(stddev * rng.normal());
}

template <typename T>
void init_cfg_params(Predictor<T>& p, Rng& rng) {
  const auto& d = p.dims();
  if (p.has_tokens()) {
    fill_normal(p.param(p.gamma_a()), rng, 0.02);
    fill_normal(p.param(p.gamma_r()), rng, 0.02);
    fill_normal(p.param(p.gamma_b()), rng, 0.02);
  }
  if (p.cfg_mode() == CfgMode::kLayer) {
    fill_normal(p.param(p.plain_w()), rng, 1.0 / std::sqrt(4.0 * d.fourier_freqs));
  }
  // film layers and the scalar time embedding stay exactly zero
}

}  // namespace detail

/// Deterministic initialisation: He-normal hidden layers, zero biases,
/// zero null vectors and a zero CFG injection block.
template <typename T = double>
Predictor<T> init_predictor(std::uint64_t seed, const NetDims& dims, CfgMode mode = CfgMode::kNone) {
  Predictor<T> p(dims, mode);
  Rng rng = Rng::stream(seed, 0x1417);
  int in = dims.input_dim();
  for (int l = 0; l < dims.hidden_layers; ++l) {
    detail::fill_normal(p.param(p.w(l)), rng, std::sqrt(2.0 / in));
    in = dims.hidden_width;
  }
  detail::fill_normal(p.param(p.w_out()), rng, std::sqrt(1.0 / dims.hidden_width));
  detail::fill_normal(p.param(p.a_embed_w()), rng, 1.0);
  detail::fill_normal(p.param(p.r_embed()), rng, 1.0);
  detail::init_cfg_params(p, rng);
  return p;
}

/// A student that mirrors `teacher` exactly and adds fresh CFG parameters
/// for `mode`. With the injection block at zero it reproduces the teacher.
template <typename T>
Predictor<T> clone_student(const Predictor<T>& teacher, CfgMode mode, std::uint64_t seed) {
  if (teacher.cfg_mode() != CfgMode::kNone) throw ContractError("clone_student: teacher must have no CFG path");
  Predictor<T> s(teacher.dims(), mode);
  for (std::size_t i = 0; i < teacher.param_count(); ++i) s.param(i) = teacher.param(i);
  Rng rng = Rng::stream(seed, 0x57d);
  detail::init_cfg_params(s, rng);
  return s;
}

/// Emb_cfg = cfg_a (gamma_a - gamma_r) + cfg_r (gamma_r - gamma_b) + gamma_b.
template <typename T>
Mat<T> cfg_embedding(const Mat<T>& gamma_a, const Mat<T>& gamma_r, const Mat<T>& gamma_b, const CfgScales& s) {
  if (!std::isfinite(s.cfg_a) || !std::isfinite(s.cfg_r)) throw DomainError("cfg_embedding: non-finite scales");
  const T ca = static_cast<T>(s.cfg_a);
  const T cr = static_cast<T>(s.cfg_r);
  return ca * (gamma_a - gamma_r) + cr * (gamma_r - gamma_b) + gamma_b;
}

template <typename T>
Mat<T> cfg_embedding(const Predictor<T>& p, const CfgScales& s) {
  if (!p.has_tokens()) throw CapabilityError("cfg_embedding: predictor has no CFG tokens");
  return cfg_embedding(p.param(p.gamma_a()), p.param(p.gamma_r()), p.param(p.gamma_b()), s);
}

/// Sinusoidal time features, one column per time.
template <typename T>
Mat<T> time_features(const std::vector<double>& t, int dim) {
  const int half = dim / 2;
  Mat<T> out(dim, static_cast<Eigen::Index>(t.size()));
  for (std::size_t c = 0; c < t.size(); ++c) {
    for (int j = 0; j < half; ++j) {
      const double w = detail::time_frequency(j, half);
      out(j, c) = static_cast<T>(std::sin(w * t[c]));
      out(half + j, c) = static_cast<T>(std::cos(w * t[c]));
    }
  }
  return out;
}

/// Fourier features of (cfg_a, cfg_r) for the plain CFG embedding.
template <typename T>
Mat<T> scale_features(const std::vector<CfgScales>& scales, int freqs) {
  Mat<T> out(4 * freqs, static_cast<Eigen::Index>(scales.size()));
  for (std::size_t c = 0; c < scales.size(); ++c) {
    for (int j = 0; j < freqs; ++j) {
      const double w = std::ldexp(0.1, j);  // 0.1, 0.2, 0.4, ...
      out(4 * j + 0, c) = static_cast<T>(std::sin(w * scales[c].cfg_a));
      out(4 * j + 1, c) = static_cast<T>(std::cos(w * scales[c].cfg_a));
      out(4 * j + 2, c) = static_cast<T>(std::sin(w * scales[c].cfg_r));
      out(4 * j + 3, c) = static_cast<T>(std::cos(w * scales[c].cfg_r));
    }
  }
  return out;
}

/// Intermediate values kept by the forward pass for backpropagation.
template <typename T>
struct ForwardCache {
  Mat<T> input;                    // (data + time + cond) x B
  std::vector<Mat<T>> pre;         // pre-activation before FiLM
  std::vector<Mat<T>> mod;         // after FiLM (equals pre when no injection)
  std::vector<Mat<T>> act;         // SiLU(mod)
  std::optional<Mat<T>> emb;       // injected embedding
  bool emb_from_scales = false;
  Mat<T> scale_feats;              // plain-embedding features
  Mat<T> output;
};

namespace detail {

template <typename T>
void check_batch(const Predictor<T>& p, const Batch<T>& batch) {
  const auto n = batch.z.cols();
  if (batch.z.rows() != p.dims().data_dim) throw ShapeError("forward: z dimension does not match data_dim");
  if (static_cast<Eigen::Index>(batch.t.size()) != n || static_cast<Eigen::Index>(batch.cond.size()) != n)
    throw ShapeError("forward: batch field sizes disagree");
  if (!batch.scales.empty() && static_cast<Eigen::Index>(batch.scales.size()) != n)
    throw ShapeError("forward: scales size disagrees with batch");
  if (batch.emb && (batch.emb->rows() != p.dims().cfg_emb_dim || batch.emb->cols() != n))
    throw ShapeError("forward: embedding shape mismatch");
  for (double t : batch.t)
    if (!(t >= 0.0 && t <= 1.0)) throw DomainError("forward: t outside [0,1]");
  for (const auto& c : batch.cond) {
    c.validate();
    if (c.r && (*c.r < 0 || *c.r >= p.dims().n_clusters)) throw DomainError("forward: cluster id out of range");
  }
}

}  // namespace detail

/// Batched forward pass; fills `cache` when non-null.
template <typename T>
Mat<T> forward_batch(const Predictor<T>& p, const Batch<T>& batch, ForwardCache<T>* cache = nullptr) {
  detail::check_batch(p, batch);
  const auto& d = p.dims();
  const Eigen::Index n = batch.z.cols();

  Mat<T> temb = time_features<T>(batch.t, d.time_emb_dim);
  if (p.cfg_mode() == CfgMode::kScalarEmbed && !batch.scales.empty()) {
    Mat<T> raw(2, n);
    for (Eigen::Index c = 0; c < n; ++c) {
      raw(0, c) = static_cast<T>(batch.scales[c].cfg_a);
      raw(1, c) = static_cast<T>(batch.scales[c].cfg_r);
    }
    temb.noalias() += p.param(p.scalar_time()) * raw;
  }

  Mat<T> cemb(d.cond_emb_dim, n);
  const auto& a_w = p.param(p.a_embed_w());
  const auto& a_b = p.param(p.a_embed_b());
  const auto& r_tab = p.param(p.r_embed());
  for (Eigen::Index c = 0; c < n; ++c) {
    const auto& cond = batch.cond[c];
    if (cond.a) {
      cemb.col(c) = a_w.col(0) * static_cast<T>(std::sin(*cond.a)) + a_w.col(1) * static_cast<T>(std::cos(*cond.a)) +
                    a_b.col(0);
    } else {
      cemb.col(c) = p.param(p.null_a()).col(0);
    }
    if (cond.r) {
      cemb.col(c) += r_tab.col(*cond.r);
    } else {
      cemb.col(c) += p.param(p.null_r()).col(0);
    }
  }

  Mat<T> x(d.input_dim(), n);
  x.topRows(d.data_dim) = batch.z;
  x.middleRows(d.data_dim, d.time_emb_dim) = temb;
  x.bottomRows(d.cond_emb_dim) = cemb;

  std::optional<Mat<T>> emb;
  bool emb_from_scales = false;
  Mat<T> feats;
  if (p.has_cfg_layer()) {
    if (batch.emb) {
      emb = *batch.emb;
    } else if (!batch.scales.empty()) {
      emb_from_scales = true;
      if (p.has_tokens()) {
        const auto& ga = p.param(p.gamma_a());
        const auto& gr = p.param(p.gamma_r());
        const auto& gb = p.param(p.gamma_b());
        Mat<T> e(d.cfg_emb_dim, n);
        for (Eigen::Index c = 0; c < n; ++c) e.col(c) = cfg_embedding(ga, gr, gb, batch.scales[c]).col(0);
        emb = std::move(e);
      } else {
        feats = scale_features<T>(batch.scales, d.fourier_freqs);
        Mat<T> e = p.param(p.plain_w()) * feats;
        e.colwise() += p.param(p.plain_b()).col(0);
        emb = std::move(e);
      }
    }
  }

  if (cache) {
    cache->pre.clear();
    cache->mod.clear();
    cache->act.clear();
  }
  const Mat<T>* h = &x;
  Mat<T> current;
  for (int l = 0; l < d.hidden_layers; ++l) {
    Mat<T> pre = p.param(p.w(l)) * (*h);
    pre.colwise() += p.param(p.b(l)).col(0);
    Mat<T> mod;
    if (emb) {
      const Mat<T> scale = p.param(p.film_scale(l)) * (*emb);
      const Mat<T> shift = p.param(p.film_shift(l)) * (*emb);
      mod = pre.array() * (scale.array() + T(1)) + shift.array();
    } else {
      mod = pre;
    }
    Mat<T> act = mod.unaryExpr([](T v) { return static_cast<T>(v / (T(1) + std::exp(-v))); });
    if (cache) {
      cache->pre.push_back(std::move(pre));
      cache->mod.push_back(mod);
      cache->act.push_back(act);
      h = &cache->act.back();
    } else {
      current = std::move(act);
      h = &current;
    }
  }
  Mat<T> out = p.param(p.w_out()) * (*h);
  if (cache) {
    cache->input = std::move(x);
    cache->emb = std::move(emb);
    cache->emb_from_scales = emb_from_scales;
    cache->scale_feats = std::move(feats);
    cache->output = out;
  }
  return out;
}

/// Single-sample forward: returns epsilon-hat in data space.
template <typename T>
Mat<T> forward(const Predictor<T>& p, const Mat<T>& z_t, double t, const Condition& cond,
               const std::optional<Mat<T>>& emb = std::nullopt) {
  Batch<T> b;
  b.z = z_t;
  b.t = {t};
  b.cond = {cond};
  b.emb = emb;
  return forward_batch(p, b);
}

/// Reverse pass given dLoss/dOutput; accumulates into `g`.
template <typename T>
void backward_batch(const Predictor<T>& p, const Batch<T>& batch, const ForwardCache<T>& cache,
                    const Mat<T>& d_out, Gradients<T>& g) {
  const auto& d = p.dims();
  const Eigen::Index n = batch.z.cols();
  const int L = d.hidden_layers;

  g[p.w_out()].noalias() += d_out * cache.act[L - 1].transpose();
  Mat<T> dh = p.param(p.w_out()).transpose() * d_out;
  Mat<T> d_emb;
  if (cache.emb) d_emb = Mat<T>::Zero(d.cfg_emb_dim, n);

  Mat<T> dx;
  for (int l = L - 1; l >= 0; --l) {
    const Mat<T>& mod = cache.mod[l];
    Mat<T> dmod = dh.binaryExpr(mod, [](T upstream, T v) {
      const T s = static_cast<T>(T(1) / (T(1) + std::exp(-v)));
      return upstream * s * (T(1) + v * (T(1) - s));
    });
    Mat<T> dpre;
    if (cache.emb) {
      const Mat<T>& e = *cache.emb;
      const Mat<T> scale = p.param(p.film_scale(l)) * e;
      const Mat<T> dscale = dmod.cwiseProduct(cache.pre[l]);
      g[p.film_scale(l)].noalias() += dscale * e.transpose();
      g[p.film_shift(l)].noalias() += dmod * e.transpose();
      d_emb.noalias() += p.param(p.film_scale(l)).transpose() * dscale;
      d_emb.noalias() += p.param(p.film_shift(l)).transpose() * dmod;
      dpre = dmod.array() * (scale.array() + T(1));
    } else {
      dpre = std::move(dmod);
    }
    const Mat<T>& input = l == 0 ? cache.input : cache.act[l - 1];
    g[p.w(l)].noalias() += dpre * input.transpose();
    g[p.b(l)].noalias() += dpre.rowwise().sum();
    if (l > 0) {
      dh = p.param(p.w(l)).transpose() * dpre;
    } else {
      dx = p.param(p.w(0)).transpose() * dpre;
    }
  }

  const Mat<T> dtemb = dx.middleRows(d.data_dim, d.time_emb_dim);
  const Mat<T> dcemb = dx.bottomRows(d.cond_emb_dim);
  if (p.cfg_mode() == CfgMode::kScalarEmbed && !batch.scales.empty()) {
    Mat<T> raw(2, n);
    for (Eigen::Index c = 0; c < n; ++c) {
      raw(0, c) = static_cast<T>(batch.scales[c].cfg_a);
      raw(1, c) = static_cast<T>(batch.scales[c].cfg_r);
    }
    g[p.scalar_time()].noalias() += dtemb * raw.transpose();
  }
  for (Eigen::Index c = 0; c < n; ++c) {
    const auto& cond = batch.cond[c];
    if (cond.a) {
      g[p.a_embed_w()].col(0) += dcemb.col(c) * static_cast<T>(std::sin(*cond.a));
      g[p.a_embed_w()].col(1) += dcemb.col(c) * static_cast<T>(std::cos(*cond.a));
      g[p.a_embed_b()].col(0) += dcemb.col(c);
    } else {
      g[p.null_a()].col(0) += dcemb.col(c);
    }
    if (cond.r) {
      g[p.r_embed()].col(*cond.r) += dcemb.col(c);
    } else {
      g[p.null_r()].col(0) += dcemb.col(c);
    }
  }

  if (cache.emb && cache.emb_from_scales) {
    if (p.has_tokens()) {
      for (Eigen::Index c = 0; c < n; ++c) {
        const T ca = static_cast<T>(batch.scales[c].cfg_a);
        const T cr = static_cast<T>(batch.scales[c].cfg_r);
        g[p.gamma_a()].col(0) += ca * d_emb.col(c);
        g[p.gamma_r()].col(0) += (cr - ca) * d_emb.col(c);
        g[p.gamma_b()].col(0) += (T(1) - cr) * d_emb.col(c);
      }
    } else {
      g[p.plain_w()].noalias() += d_emb * cache.scale_feats.transpose();
      g[p.plain_b()].noalias() += d_emb.rowwise().sum();
    }
  }
}

/// Reverse-mode gradient of a scalar loss of the predictor output.
template <typename T>
Gradients<T> grad(const Predictor<T>& p, const Batch<T>& batch,
                  const std::function<LossResult<T>(const Mat<T>&)>& loss_closure, double* loss_out = nullptr) {
  ForwardCache<T> cache;
  forward_batch(p, batch, &cache);
  LossResult<T> lr = loss_closure(cache.output);
  if (!std::isfinite(lr.loss)) {
    std::ostringstream diag;
    diag << "loss=" << lr.loss << " batch=" << batch.size() << " output_norm=" << cache.output.norm();
    throw TrainingError("non-finite loss during gradient computation", diag.str());
  }
  if (loss_out) *loss_out = lr.loss;
  Gradients<T> g = p.zero_gradients();
  backward_batch(p, batch, cache, lr.d_output, g);
  return g;
}

/// Adam optimiser state (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
template <typename T>
struct AdamState {
  std::vector<Mat<T>> m;
  std::vector<Mat<T>> v;
  std::int64_t step = 0;
  bool empty() const { return m.empty(); }
};

template <typename T>
void adam_step(Predictor<T>& p, const Gradients<T>& g, AdamState<T>& state, double lr) {
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  if (g.size() != p.param_count()) throw ShapeError("adam_step: gradient count mismatch");
  if (state.empty()) {
    state.m = p.zero_gradients();
    state.v = p.zero_gradients();
    state.step = 0;
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < g.size(); ++i) {
    auto m = state.m[i].array();
    auto v = state.v[i].array();
    const auto gi = g[i].array();
    m = T(kBeta1) * m + T(1 - kBeta1) * gi;
    v = T(kBeta2) * v + T(1 - kBeta2) * gi * gi;
    p.param(i).array() -= T(lr) * (m / T(bc1)) / ((v / T(bc2)).sqrt() + T(kEps));
  }
}

}  // namespace fada

// SPDX-License-Identifier: Apache-2.0
#pragma once

// Training loops and experiment cells shared by the command-line tool and
// the acceptance suite.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "fada/config.hpp"
#include "fada/diffusion.hpp"
#include "fada/distill.hpp"
#include "fada/eval.hpp"
#include "fada/net.hpp"
#include "fada/rng.hpp"
#include "fada/schedule.hpp"
#include "fada/synthdata.hpp"

namespace fada {

/// Cosine decay from lr to lr * final_fraction over `total` steps.
inline double cosine_lr(double lr, double final_fraction, std::int64_t step, std::int64_t total) {
  if (total <= 1) return lr;
  const double progress = static_cast<double>(step) / static_cast<double>(total - 1);
  return lr * (final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

inline std::uint64_t teacher_init_seed(const RunConfig& c) { return mix64(c.seed ^ 0x7eac4e12ULL); }
inline std::uint64_t student_init_seed(const RunConfig& c) {
  return mix64(c.seed ^ 0x57d0e17ULL ^ mix64(c.distill.student_seed_offset));
}

/// Draws a minibatch (with replacement) from `data`.
template <typename T>
void draw_minibatch(const Mat<T>& all_z, const std::vector<Condition>& all_cond, int batch, Rng& rng, Mat<T>& z,
                    std::vector<Condition>& cond) {
  const auto n = static_cast<std::uint64_t>(all_z.cols());
  if (n == 0) throw ContractError("cannot draw a minibatch from an empty dataset");
  z.resize(all_z.rows(), batch);
  cond.resize(static_cast<std::size_t>(batch));
  for (int i = 0; i < batch; ++i) {
    const auto j = static_cast<Eigen::Index>(rng.below(n));
    z.col(i) = all_z.col(j);
    cond[i] = all_cond[j];
  }
}

struct LossPoint {
  std::int64_t step;
  double loss;
};

template <typename T>
struct TeacherResult {
  Predictor<T> model;
  std::vector<LossPoint> loss_curve;  // every step
};

/// Trains the epsilon-prediction teacher on `data` with condition dropout.
template <typename T>
TeacherResult<T> train_teacher(const RunConfig& cfg, const std::vector<LabeledSample>& data) {
  TeacherResult<T> res;
  res.model = init_predictor<T>(teacher_init_seed(cfg), cfg.model, CfgMode::kNone);
  if (cfg.teacher.steps == 0) return res;
  const NoiseSchedule schedule(cfg.schedule);
  Mat<T> all_z;
  std::vector<Condition> all_cond;
  to_training_arrays(data, all_z, all_cond);
  Rng rng = Rng::stream(cfg.seed, 0x7ea);
  AdamState<T> opt;
  Mat<T> z;
  std::vector<Condition> cond;
  for (int step = 0; step < cfg.teacher.steps; ++step) {
    draw_minibatch(all_z, all_cond, cfg.teacher.batch_size, rng, z, cond);
    const TeacherBatch<T> tb = make_teacher_batch<T>(z, cond, schedule, rng, cfg.teacher.dropout);
    double loss = 0;
    const auto g = grad<T>(
        res.model, tb.input, [&](const Mat<T>& out) { return teacher_loss_closure<T>(tb.eps, out); }, &loss);
    adam_step(res.model, g, opt, cosine_lr(cfg.teacher.lr, cfg.teacher.lr_final_fraction, step, cfg.teacher.steps));
    res.loss_curve.push_back({step, loss});
  }
  return res;
}

/// Resumable distillation state.
template <typename T>
struct DistillRun {
  Predictor<T> student;
  AdamState<T> opt;
  Rng rng;
  std::int64_t step = 0;
};

template <typename T>
DistillRun<T> start_distill(const RunConfig& cfg, const Predictor<T>& teacher) {
  DistillRun<T> run;
  run.student = clone_student(teacher, cfg.distill.core.cfg_mode, student_init_seed(cfg));
  run.rng = Rng::stream(cfg.seed, 0xd157);
  return run;
}

/// Advances `run` to `until_step` (or cfg.distill.steps). Calls `on_step`
/// after every step and `on_checkpoint` every checkpoint_every steps.
template <typename T, typename Model>
void run_distill(DistillRun<T>& run, const Model& teacher, const RunConfig& cfg,
                 const std::vector<LabeledSample>& data, std::optional<std::int64_t> until_step = std::nullopt,
                 const std::function<void(const StepTelemetry&)>& on_step = {},
                 const std::function<void(const DistillRun<T>&)>& on_checkpoint = {}) {
  const NoiseSchedule schedule(cfg.schedule);
  const WindowPartition partition(cfg.distill.core.windows);
  Mat<T> all_z;
  std::vector<Condition> all_cond;
  to_training_arrays(data, all_z, all_cond);
  const std::int64_t total = cfg.distill.steps;
  const std::int64_t stop = std::min<std::int64_t>(until_step.value_or(total), total);
  DistillConfig step_cfg = cfg.distill.core;
  Mat<T> z;
  std::vector<Condition> cond;
  while (run.step < stop) {
    step_cfg.lr = cosine_lr(cfg.distill.core.lr, cfg.distill.lr_final_fraction, run.step, total);
    draw_minibatch(all_z, all_cond, step_cfg.batch_size, run.rng, z, cond);
    StepTelemetry tel = distill_train_step<T>(run.student, run.opt, teacher, schedule, partition, z, cond, step_cfg,
                                              run.rng);
    ++run.step;
    tel.step = run.step;
    if (on_step) on_step(tel);
    if (on_checkpoint && cfg.distill.checkpoint_every > 0 && run.step % cfg.distill.checkpoint_every == 0)
      on_checkpoint(run);
  }
}

/// The sampling mode matching a model's role and CFG capability.
inline SampleMode default_eval_mode(bool is_teacher, CfgMode mode) {
  if (is_teacher) return SampleMode::kTeacher75;
  return mode == CfgMode::kNone ? SampleMode::kBalanced18 : SampleMode::kFast6;
}

inline CfgScales default_scales(const RunConfig& cfg, SampleMode mode) {
  switch (mode) {
    case SampleMode::kTeacher75: return cfg.eval.teacher_scales;
    case SampleMode::kBalanced18: return cfg.eval.balanced_scales;
    case SampleMode::kFast6: return cfg.eval.fast_scales;
    case SampleMode::kConditional6: return cfg.eval.fast_scales;
  }
  return cfg.eval.balanced_scales;
}

template <typename T>
EvalReport evaluate_model(const RunConfig& cfg, const Predictor<T>& model, SampleMode mode,
                          std::optional<CfgScales> scales = std::nullopt) {
  const NoiseSchedule schedule(cfg.schedule);
  const WindowPartition partition(cfg.distill.core.windows);
  return evaluate<T>(model, schedule, partition, mode, scales.value_or(default_scales(cfg, mode)), cfg.data,
                     cfg.eval.spec, cfg.distill.window_steps);
}

/// One row of an ablation matrix.
struct AblationCell {
  std::string name;
  bool teacher_only = false;
  Tier teacher_tier = Tier::kA;
  Tier distill_tier = Tier::kBOnly;  // kBOnly means the full dataset B
  WeightMode weight{};
  CfgMode cfg_mode = CfgMode::kNone;
  SampleMode eval_mode = SampleMode::kBalanced18;
};

/// Named cells covering the basic-distillation, mixed-loss and CFG ablations.
inline std::vector<AblationCell> builtin_ablation_cells() {
  std::vector<AblationCell> cells;
  cells.push_back({"Teacher-A", true, Tier::kA, Tier::kA, {}, CfgMode::kNone, SampleMode::kTeacher75});
  cells.push_back({"Teacher-B", true, Tier::kBOnly, Tier::kA, {}, CfgMode::kNone, SampleMode::kTeacher75});
  cells.push_back({"PeRFlow", false, Tier::kA, Tier::kA, WeightMode::off(), CfgMode::kNone, SampleMode::kBalanced18});
  cells.push_back({"Fixed-0", false, Tier::kA, Tier::kBOnly, WeightMode::fixed_weight(0.0), CfgMode::kNone,
                   SampleMode::kBalanced18});
  cells.push_back({"Fixed-0.2", false, Tier::kA, Tier::kBOnly, WeightMode::fixed_weight(0.2), CfgMode::kNone,
                   SampleMode::kBalanced18});
  cells.push_back({"Fixed-1.0", false, Tier::kA, Tier::kBOnly, WeightMode::fixed_weight(1.0), CfgMode::kNone,
                   SampleMode::kBalanced18});
  cells.push_back({"Adaptive-unl-0.5", false, Tier::kA, Tier::kBOnly, WeightMode::adaptive(0.5, true),
                   CfgMode::kNone, SampleMode::kBalanced18});
  cells.push_back({"Adaptive-unl-0.25", false, Tier::kA, Tier::kBOnly, WeightMode::adaptive(0.25, true),
                   CfgMode::kNone, SampleMode::kBalanced18});
  cells.push_back({"Adaptive-0.5", false, Tier::kA, Tier::kBOnly, WeightMode::adaptive(0.5), CfgMode::kNone,
                   SampleMode::kBalanced18});
  cells.push_back({"Adaptive-0.25", false, Tier::kA, Tier::kBOnly, WeightMode::adaptive(0.25), CfgMode::kNone,
                   SampleMode::kBalanced18});
  cells.push_back({"cfg-none", false, Tier::kA, Tier::kBOnly, WeightMode::adaptive(0.25), CfgMode::kNone,
                   SampleMode::kConditional6});
  cells.push_back({"cfg-scalar-embed", false, Tier::kA, Tier::kBOnly, WeightMode::adaptive(0.25),
                   CfgMode::kScalarEmbed, SampleMode::kFast6});
  cells.push_back({"cfg-layer", false, Tier::kA, Tier::kBOnly, WeightMode::adaptive(0.25), CfgMode::kLayer,
                   SampleMode::kFast6});
  cells.push_back({"cfg-layer-with-tokens", false, Tier::kA, Tier::kBOnly, WeightMode::adaptive(0.25),
                   CfgMode::kLayerWithTokens, SampleMode::kFast6});
  return cells;
}

inline std::optional<AblationCell> find_builtin_cell(const std::string& name) {
  for (const auto& c : builtin_ablation_cells())
    if (c.name == name) return c;
  return std::nullopt;
}

/// Config for distilling a cell's student.
inline RunConfig cell_config(const RunConfig& base, const AblationCell& cell) {
  RunConfig c = base;
  c.teacher.data_tier = cell.teacher_tier;
  c.distill.core.weight = cell.weight;
  c.distill.core.cfg_mode = cell.cfg_mode;
  return c;
}

/// Trains teachers on demand (cached per tier) and students per cell.
template <typename T>
class AblationRunner {
 public:
  AblationRunner(RunConfig base, TieredDataset data) : base_(std::move(base)), data_(std::move(data)) {}

  const Predictor<T>& teacher(Tier tier) {
    auto it = teachers_.find(tier);
    if (it == teachers_.end()) {
      RunConfig c = base_;
      c.teacher.data_tier = tier;
      it = teachers_.emplace(tier, train_teacher<T>(c, tier == Tier::kA ? data_.a : data_.b).model).first;
    }
    return it->second;
  }

  void set_teacher(Tier tier, Predictor<T> model) { teachers_.insert_or_assign(tier, std::move(model)); }

  Predictor<T> train_student(const AblationCell& cell) {
    const RunConfig c = cell_config(base_, cell);
    const Predictor<T>& t = teacher(cell.teacher_tier);
    DistillRun<T> run = start_distill<T>(c, t);
    run_distill<T>(run, t, c, cell.distill_tier == Tier::kA ? data_.a : data_.b);
    return std::move(run.student);
  }

  EvalReport run(const AblationCell& cell) {
    const RunConfig c = cell_config(base_, cell);
    EvalReport rep;
    if (cell.teacher_only) {
      rep = evaluate_model<T>(c, teacher(cell.teacher_tier), cell.eval_mode);
      rep.fingerprint = fingerprint(c, Stage::kTeacher);
    } else {
      const Predictor<T> s = train_student(cell);
      rep = evaluate_model<T>(c, s, cell.eval_mode);
      rep.fingerprint = fingerprint(c, Stage::kStudent);
    }
    rep.name = cell.name;
    return rep;
  }

  std::vector<EvalReport> run_all(const std::vector<AblationCell>& cells) {
    return ablation_matrix<AblationCell>(
        cells, [this](const AblationCell& c) { return run(c); }, [](const AblationCell& c) { return c.name; });
  }

  const TieredDataset& data() const { return data_; }
  const RunConfig& config() const { return base_; }

 private:
  RunConfig base_;
  TieredDataset data_;
  std::map<Tier, Predictor<T>> teachers_;
};

}  // namespace fada

// SPDX-License-Identifier: Apache-2.0
#pragma once

// Run configuration: JSON (de)serialisation, dotted-key overrides and
// content fingerprints per pipeline stage.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "fada/diffusion.hpp"
#include "fada/distill.hpp"
#include "fada/errors.hpp"
#include "fada/eval.hpp"
#include "fada/net.hpp"
#include "fada/schedule.hpp"
#include "fada/synthdata.hpp"

namespace fada {

using json = nlohmann::json;

struct TeacherConfig {
  int steps = 4000;
  int batch_size = 256;
  double lr = 2e-3;
  double lr_final_fraction = 0.05;  // cosine decay floor, as a fraction of lr
  CondDropout dropout{};
  Tier data_tier = Tier::kA;
  int log_every = 50;
};

struct DistillRunConfig {
  DistillConfig core{};
  int steps = 3000;
  double lr_final_fraction = 0.05;
  int checkpoint_every = 500;
  std::vector<int> window_steps{2, 2, 1, 1};
  std::uint64_t student_seed_offset = 0;
};

struct EvalRunConfig {
  EvalSpec spec{};
  CfgScales teacher_scales{6.5, 2.5};
  CfgScales balanced_scales{6.5, 2.5};
  CfgScales fast_scales{6.5, 2.0};
  std::vector<double> audio_grid{1.0, 2.0, 3.5, 5.0, 6.5, 8.0, 10.0};
  std::vector<double> ref_grid{1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0};
};

struct RunConfig {
  ScheduleParams schedule{};
  DataSpec data{};
  NetDims model{};
  TeacherConfig teacher{};
  DistillRunConfig distill{};
  EvalRunConfig eval{};
  std::uint64_t seed = 0;
  int precision = 64;
  std::string output_dir = "runs/default";

  void validate() const {
    NoiseSchedule check(schedule);
    (void)check;
    data.validate();
    model.validate();
    if (model.data_dim != data.data_dim) throw ConfigError("model.data_dim must equal data.data_dim");
    if (model.n_clusters != data.n_clusters) throw ConfigError("model.n_clusters must equal data.n_clusters");
    if (teacher.steps < 0 || teacher.batch_size < 1 || !(teacher.lr > 0))
      throw ConfigError("teacher: steps >= 0, batch_size >= 1, lr > 0 required");
    distill.core.validate();
    if (distill.steps < 0) throw ConfigError("distill.steps must be >= 0");
    if (static_cast<int>(distill.window_steps.size()) != distill.core.windows)
      throw ConfigError("distill.window_steps needs one entry per window");
    eval.spec.validate();
    eval.teacher_scales.validate();
    eval.balanced_scales.validate();
    eval.fast_scales.validate();
    if (precision != 32 && precision != 64) throw ConfigError("precision must be 32 or 64");
  }
};

// ---- JSON mapping ---------------------------------------------------------

inline void to_json(json& j, const CfgScales& s) { j = json{{"cfg_a", s.cfg_a}, {"cfg_r", s.cfg_r}}; }
inline void from_json(const json& j, CfgScales& s) {
  s.cfg_a = j.at("cfg_a").get<double>();
  s.cfg_r = j.at("cfg_r").get<double>();
}

inline void to_json(json& j, const ScheduleParams& p) {
  j = json{{"kind", to_string(p.kind)}, {"n_virtual", p.n_virtual}, {"beta_min", p.beta_min}, {"beta_max", p.beta_max}};
}
inline void from_json(const json& j, ScheduleParams& p) {
  p.kind = schedule_kind_from_string(j.at("kind").get<std::string>());
  p.n_virtual = j.at("n_virtual").get<int>();
  p.beta_min = j.at("beta_min").get<double>();
  p.beta_max = j.at("beta_max").get<double>();
}

inline void to_json(json& j, const DataSpec& d) {
  j = json{{"n_a", d.n_a},
           {"n_b", d.n_b},
           {"data_dim", d.data_dim},
           {"n_clusters", d.n_clusters},
           {"center_radius", d.center_radius},
           {"radii", d.radii},
           {"sigma_gen", d.sigma_gen},
           {"misalign_rate", d.misalign_rate},
           {"misalign_magnitude", d.misalign_magnitude},
           {"b_noise_factor", d.b_noise_factor},
           {"seed", d.seed}};
}
inline void from_json(const json& j, DataSpec& d) {
  d.n_a = j.at("n_a").get<int>();
  d.n_b = j.at("n_b").get<int>();
  d.data_dim = j.at("data_dim").get<int>();
  d.n_clusters = j.at("n_clusters").get<int>();
  d.center_radius = j.at("center_radius").get<double>();
  d.radii = j.at("radii").get<std::vector<double>>();
  d.sigma_gen = j.at("sigma_gen").get<double>();
  d.misalign_rate = j.at("misalign_rate").get<double>();
  d.misalign_magnitude = j.at("misalign_magnitude").get<double>();
  d.b_noise_factor = j.at("b_noise_factor").get<double>();
  d.seed = j.at("seed").get<std::uint64_t>();
}

inline void to_json(json& j, const NetDims& d) {
  j = json{{"data_dim", d.data_dim},         {"time_emb_dim", d.time_emb_dim}, {"cond_emb_dim", d.cond_emb_dim},
           {"hidden_width", d.hidden_width}, {"hidden_layers", d.hidden_layers}, {"cfg_emb_dim", d.cfg_emb_dim},
           {"n_clusters", d.n_clusters},     {"fourier_freqs", d.fourier_freqs}};
}
inline void from_json(const json& j, NetDims& d) {
  d.data_dim = j.at("data_dim").get<int>();
  d.time_emb_dim = j.at("time_emb_dim").get<int>();
  d.cond_emb_dim = j.at("cond_emb_dim").get<int>();
  d.hidden_width = j.at("hidden_width").get<int>();
  d.hidden_layers = j.at("hidden_layers").get<int>();
  d.cfg_emb_dim = j.at("cfg_emb_dim").get<int>();
  d.n_clusters = j.at("n_clusters").get<int>();
  d.fourier_freqs = j.at("fourier_freqs").get<int>();
}

inline Tier tier_from_string(const std::string& s) {
  if (s == "A") return Tier::kA;
  if (s == "B") return Tier::kBOnly;
  throw ConfigError("data tier must be 'A' or 'B', got '" + s + "'");
}

inline void to_json(json& j, const TeacherConfig& t) {
  j = json{{"steps", t.steps},
           {"batch_size", t.batch_size},
           {"lr", t.lr},
           {"lr_final_fraction", t.lr_final_fraction},
           {"drop_a", t.dropout.drop_a},
           {"drop_both", t.dropout.drop_both},
           {"data_tier", to_string(t.data_tier)},
           {"log_every", t.log_every}};
}
inline void from_json(const json& j, TeacherConfig& t) {
  t.steps = j.at("steps").get<int>();
  t.batch_size = j.at("batch_size").get<int>();
  t.lr = j.at("lr").get<double>();
  t.lr_final_fraction = j.at("lr_final_fraction").get<double>();
  t.dropout.drop_a = j.at("drop_a").get<double>();
  t.dropout.drop_both = j.at("drop_both").get<double>();
  t.data_tier = tier_from_string(j.at("data_tier").get<std::string>());
  t.log_every = j.at("log_every").get<int>();
}

inline std::string weight_kind_name(WeightKind k) {
  return k == WeightKind::kOff ? "off" : k == WeightKind::kFixed ? "fixed" : "adaptive";
}

inline void to_json(json& j, const DistillRunConfig& d) {
  const auto& c = d.core;
  j = json{{"windows", c.windows},
           {"weight_mode", weight_kind_name(c.weight.kind)},
           {"fixed_weight", c.weight.fixed},
           {"s", c.weight.s},
           {"w0", c.weight.w0},
           {"r_peak", c.weight.r_peak},
           {"r_dead", c.weight.r_dead},
           {"unlimited", c.weight.unlimited},
           {"cfg_mode", to_string(c.cfg_mode)},
           {"cfg_a_range", {c.cfg_a_min, c.cfg_a_max}},
           {"cfg_r_range", {c.cfg_r_min, c.cfg_r_max}},
           {"teacher_steps", c.teacher_steps},
           {"lr", c.lr},
           {"batch_size", c.batch_size},
           {"ratio_guard", c.ratio_guard},
           {"drop_a", c.dropout.drop_a},
           {"drop_both", c.dropout.drop_both},
           {"steps", d.steps},
           {"lr_final_fraction", d.lr_final_fraction},
           {"checkpoint_every", d.checkpoint_every},
           {"window_steps", d.window_steps},
           {"student_seed_offset", d.student_seed_offset}};
}
inline void from_json(const json& j, DistillRunConfig& d) {
  auto& c = d.core;
  c.windows = j.at("windows").get<int>();
  const auto kind = j.at("weight_mode").get<std::string>();
  if (kind == "off") c.weight.kind = WeightKind::kOff;
  else if (kind == "fixed") c.weight.kind = WeightKind::kFixed;
  else if (kind == "adaptive") c.weight.kind = WeightKind::kAdaptive;
  else throw ConfigError("unknown weight_mode '" + kind + "'");
  c.weight.fixed = j.at("fixed_weight").get<double>();
  c.weight.s = j.at("s").get<double>();
  c.weight.w0 = j.at("w0").get<double>();
  c.weight.r_peak = j.at("r_peak").get<double>();
  c.weight.r_dead = j.at("r_dead").get<double>();
  c.weight.unlimited = j.at("unlimited").get<bool>();
  c.cfg_mode = cfg_mode_from_string(j.at("cfg_mode").get<std::string>());
  const auto ar = j.at("cfg_a_range").get<std::vector<double>>();
  const auto rr = j.at("cfg_r_range").get<std::vector<double>>();
  if (ar.size() != 2 || rr.size() != 2) throw ConfigError("cfg ranges must be [lo, hi]");
  c.cfg_a_min = ar[0];
  c.cfg_a_max = ar[1];
  c.cfg_r_min = rr[0];
  c.cfg_r_max = rr[1];
  c.teacher_steps = j.at("teacher_steps").get<int>();
  c.lr = j.at("lr").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.ratio_guard = j.at("ratio_guard").get<double>();
  c.dropout.drop_a = j.at("drop_a").get<double>();
  c.dropout.drop_both = j.at("drop_both").get<double>();
  d.steps = j.at("steps").get<int>();
  d.lr_final_fraction = j.at("lr_final_fraction").get<double>();
  d.checkpoint_every = j.at("checkpoint_every").get<int>();
  d.window_steps = j.at("window_steps").get<std::vector<int>>();
  d.student_seed_offset = j.at("student_seed_offset").get<std::uint64_t>();
}

inline void to_json(json& j, const EvalRunConfig& e) {
  j = json{{"n_conditions", e.spec.n_conditions},
           {"samples_per_condition", e.spec.samples_per_condition},
           {"seed", e.spec.seed},
           {"teacher_scales", e.teacher_scales},
           {"balanced_scales", e.balanced_scales},
           {"fast_scales", e.fast_scales},
           {"audio_grid", e.audio_grid},
           {"ref_grid", e.ref_grid}};
}
inline void from_json(const json& j, EvalRunConfig& e) {
  e.spec.n_conditions = j.at("n_conditions").get<int>();
  e.spec.samples_per_condition = j.at("samples_per_condition").get<int>();
  e.spec.seed = j.at("seed").get<std::uint64_t>();
  e.teacher_scales = j.at("teacher_scales").get<CfgScales>();
  e.balanced_scales = j.at("balanced_scales").get<CfgScales>();
  e.fast_scales = j.at("fast_scales").get<CfgScales>();
  e.audio_grid = j.at("audio_grid").get<std::vector<double>>();
  e.ref_grid = j.at("ref_grid").get<std::vector<double>>();
}

inline void to_json(json& j, const RunConfig& c) {
  j = json{{"schedule", c.schedule}, {"data", c.data},         {"model", c.model},
           {"teacher", c.teacher},   {"distill", c.distill},   {"eval", c.eval},
           {"seed", c.seed},         {"precision", c.precision}, {"output_dir", c.output_dir}};
}
inline void from_json(const json& j, RunConfig& c) {
  c.schedule = j.at("schedule").get<ScheduleParams>();
  c.data = j.at("data").get<DataSpec>();
  c.model = j.at("model").get<NetDims>();
  c.teacher = j.at("teacher").get<TeacherConfig>();
  c.distill = j.at("distill").get<DistillRunConfig>();
  c.eval = j.at("eval").get<EvalRunConfig>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.precision = j.at("precision").get<int>();
  c.output_dir = j.at("output_dir").get<std::string>();
}

// ---- overrides ------------------------------------------------------------

/// Applies "a.b.c=value" to a JSON document. The value is parsed as JSON
/// when possible and taken as a string otherwise. Unknown keys are errors.
inline void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must be key=value: '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json* node = &doc;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (!node->is_object() || !node->contains(parts[i]))
      throw ConfigError("override: unknown key '" + key + "'");
    node = &(*node)[parts[i]];
  }
  *node = value;
}

inline RunConfig config_from_json(const json& doc) {
  RunConfig c;
  try {
    c = doc.get<RunConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

/// Reads a config file layered over the defaults: keys absent from the file
/// keep their default values.
inline json merge_over_defaults(const json& file_doc) {
  json base = RunConfig{};
  base.merge_patch(file_doc);
  return base;
}

inline RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  json doc = RunConfig{};
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path + "'");
    json file_doc;
    try {
      file_doc = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config '" + path + "' does not parse: " + e.what());
    }
    if (!file_doc.is_object()) throw ConfigError("config '" + path + "' must be a JSON object");
    doc = merge_over_defaults(file_doc);
  }
  for (const auto& o : overrides) apply_override(doc, o);
  return config_from_json(doc);
}

// ---- fingerprints ---------------------------------------------------------

inline std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

enum class Stage { kData, kTeacher, kStudent, kEval };

/// Content hash of the config sections an artifact of `stage` depends on.
/// nlohmann::json objects are key-sorted, so the dump is canonical.
inline std::string fingerprint(const RunConfig& c, Stage stage) {
  json doc = c;
  json part;
  part["data"] = doc["data"];
  if (stage != Stage::kData) {
    part["schedule"] = doc["schedule"];
    part["model"] = doc["model"];
    part["teacher"] = doc["teacher"];
    part["seed"] = doc["seed"];
    part["precision"] = doc["precision"];
  }
  if (stage == Stage::kStudent || stage == Stage::kEval) part["distill"] = doc["distill"];
  if (stage == Stage::kEval) part["eval"] = doc["eval"];
  return hex64(fnv1a64(part.dump()));
}

}  // namespace fada

// SPDX-License-Identifier: Apache-2.0
#pragma once

// Persistence: versioned JSON checkpoints, dataset and sample CSVs, step
// telemetry lines and the run summary.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fada/config.hpp"
#include "fada/distill.hpp"
#include "fada/errors.hpp"
#include "fada/eval.hpp"
#include "fada/net.hpp"
#include "fada/synthdata.hpp"

namespace fada {

inline constexpr const char* kCheckpointFormat = "fada-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory '" + path.parent_path().string() + "': " + ec.message());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline json load_json_file(const std::filesystem::path& path) {
  try {
    return json::parse(read_text_file(path));
  } catch (const json::parse_error& e) {
    throw IoError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

// ---- checkpoints ----------------------------------------------------------

template <typename T>
json matrices_to_json(const std::vector<Mat<T>>& mats, const std::vector<ParamInfo>& info) {
  json arr = json::array();
  for (std::size_t i = 0; i < mats.size(); ++i) {
    std::vector<double> values(static_cast<std::size_t>(mats[i].size()));
    for (Eigen::Index k = 0; k < mats[i].size(); ++k) values[k] = static_cast<double>(mats[i].data()[k]);
    arr.push_back({{"name", info[i].name}, {"shape", {mats[i].rows(), mats[i].cols()}}, {"values", values}});
  }
  return arr;
}

template <typename T>
std::vector<Mat<T>> matrices_from_json(const json& arr, const std::vector<ParamInfo>& info) {
  if (!arr.is_array() || arr.size() != info.size()) throw IoError("checkpoint: tensor list does not match layout");
  std::vector<Mat<T>> out(info.size());
  for (std::size_t i = 0; i < info.size(); ++i) {
    const auto& t = arr[i];
    if (t.at("name").get<std::string>() != info[i].name) throw IoError("checkpoint: unexpected tensor " + t.at("name").get<std::string>());
    const auto shape = t.at("shape").get<std::vector<int>>();
    if (shape.size() != 2 || shape[0] != info[i].rows || shape[1] != info[i].cols)
      throw IoError("checkpoint: shape mismatch for " + info[i].name);
    const auto values = t.at("values").get<std::vector<double>>();
    if (values.size() != static_cast<std::size_t>(info[i].rows) * info[i].cols)
      throw IoError("checkpoint: value count mismatch for " + info[i].name);
    out[i].resize(info[i].rows, info[i].cols);
    for (std::size_t k = 0; k < values.size(); ++k) out[i].data()[k] = static_cast<T>(values[k]);
  }
  return out;
}

/// Extra state carried by training checkpoints so runs can resume exactly.
template <typename T>
struct TrainingState {
  AdamState<T> optimizer;
  std::string rng_state;
  std::int64_t step = 0;
};

template <typename T>
struct Checkpoint {
  std::string role;  // "teacher" or "student"
  std::string fingerprint;
  Predictor<T> predictor;
  std::optional<TrainingState<T>> training;
};

template <typename T>
std::string checkpoint_to_string(const Checkpoint<T>& ck) {
  const auto& p = ck.predictor;
  json doc;
  doc["format"] = kCheckpointFormat;
  doc["version"] = kCheckpointVersion;
  doc["role"] = ck.role;
  doc["fingerprint"] = ck.fingerprint;
  doc["dims"] = p.dims();
  doc["cfg_mode"] = to_string(p.cfg_mode());
  doc["tensors"] = matrices_to_json(p.params(), p.param_info());
  if (ck.training) {
    const auto& tr = *ck.training;
    json st;
    st["step"] = tr.step;
    st["rng"] = tr.rng_state;
    st["adam_step"] = tr.optimizer.step;
    if (!tr.optimizer.empty()) {
      st["adam_m"] = matrices_to_json(tr.optimizer.m, p.param_info());
      st["adam_v"] = matrices_to_json(tr.optimizer.v, p.param_info());
    }
    doc["training"] = st;
  }
  return doc.dump(1) + "\n";
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ck) {
  write_text_file(path, checkpoint_to_string(ck));
}

/// Loads a checkpoint; refuses it when `expected_fingerprint` is given and
/// differs from the stored one.
template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path,
                              const std::optional<std::string>& expected_fingerprint = std::nullopt) {
  const json doc = load_json_file(path);
  try {
    if (doc.at("format").get<std::string>() != kCheckpointFormat) throw IoError("not a checkpoint: " + path.string());
    if (doc.at("version").get<int>() != kCheckpointVersion) throw IoError("unsupported checkpoint version");
    Checkpoint<T> ck;
    ck.role = doc.at("role").get<std::string>();
    ck.fingerprint = doc.at("fingerprint").get<std::string>();
    if (expected_fingerprint && *expected_fingerprint != ck.fingerprint)
      throw FingerprintError("checkpoint '" + path.string() + "' has fingerprint " + ck.fingerprint +
                             ", current config expects " + *expected_fingerprint);
    const NetDims dims = doc.at("dims").get<NetDims>();
    ck.predictor = Predictor<T>(dims, cfg_mode_from_string(doc.at("cfg_mode").get<std::string>()));
    ck.predictor.params() = matrices_from_json<T>(doc.at("tensors"), ck.predictor.param_info());
    if (doc.contains("training")) {
      const auto& st = doc["training"];
      TrainingState<T> tr;
      tr.step = st.at("step").get<std::int64_t>();
      tr.rng_state = st.at("rng").get<std::string>();
      tr.optimizer.step = st.at("adam_step").get<std::int64_t>();
      if (st.contains("adam_m")) {
        tr.optimizer.m = matrices_from_json<T>(st.at("adam_m"), ck.predictor.param_info());
        tr.optimizer.v = matrices_from_json<T>(st.at("adam_v"), ck.predictor.param_info());
      }
      ck.training = std::move(tr);
    }
    return ck;
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint '" + path.string() + "': " + e.what());
  }
}

// ---- datasets -------------------------------------------------------------

inline std::string dataset_csv(const std::vector<LabeledSample>& data, int dim) {
  std::ostringstream os;
  for (int i = 0; i < dim; ++i) os << "z_" << i << ',';
  os << "a,r,tier\n";
  for (const auto& s : data) {
    for (int i = 0; i < dim; ++i) os << format_double(s.z0(i)) << ',';
    os << format_double(s.a) << ',' << s.r << ',' << to_string(s.tier) << '\n';
  }
  return os.str();
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::vector<LabeledSample> read_dataset_csv(const std::filesystem::path& path) {
  std::istringstream in(read_text_file(path));
  std::string line;
  if (!std::getline(in, line)) throw IoError("dataset '" + path.string() + "' is empty");
  const auto header = split_csv_line(line);
  if (header.size() < 4 || header[header.size() - 3] != "a" || header[header.size() - 1] != "tier")
    throw IoError("dataset '" + path.string() + "' has an unexpected header");
  const int dim = static_cast<int>(header.size()) - 3;
  std::vector<LabeledSample> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (static_cast<int>(cells.size()) != dim + 3)
      throw IoError(path.string() + ":" + std::to_string(line_no) + ": wrong column count");
    LabeledSample s;
    s.z0.resize(dim);
    try {
      for (int i = 0; i < dim; ++i) s.z0(i) = std::stod(cells[i]);
      s.a = std::stod(cells[dim]);
      s.r = std::stoi(cells[dim + 1]);
    } catch (const std::exception&) {
      throw IoError(path.string() + ":" + std::to_string(line_no) + ": unparsable number");
    }
    s.tier = cells[dim + 2] == "A" ? Tier::kA : Tier::kBOnly;
    out.push_back(std::move(s));
  }
  return out;
}

// ---- samples, telemetry, summaries ----------------------------------------

inline std::string samples_csv(const Eigen::MatrixXd& samples, const std::vector<Condition>& cond,
                               const std::string& mode, std::int64_t nfe) {
  std::ostringstream os;
  os << "sample_id";
  for (Eigen::Index i = 0; i < samples.rows(); ++i) os << ",dim_" << i;
  os << ",a,r,mode,nfe\n";
  for (Eigen::Index c = 0; c < samples.cols(); ++c) {
    os << c;
    for (Eigen::Index i = 0; i < samples.rows(); ++i) os << ',' << format_double(samples(i, c));
    os << ',' << (cond[c].a ? format_double(*cond[c].a) : "") << ',' << (cond[c].r ? std::to_string(*cond[c].r) : "")
       << ',' << mode << ',' << nfe << '\n';
  }
  return os.str();
}

inline json to_json_value(const StepTelemetry& t) {
  return json{{"step", t.step},
              {"loss_total", t.loss_total},
              {"loss_distill", t.loss_distill},
              {"loss_gt", t.loss_gt},
              {"ratio_mean", t.ratio_mean},
              {"ratio_median", t.ratio_median},
              {"ratio_hist", t.ratio_hist},
              {"weight_mean", t.weight_mean},
              {"teacher_nfe", t.teacher_nfe},
              {"cfg_a_mean", t.cfg_a_mean},
              {"cfg_r_mean", t.cfg_r_mean}};
}

inline json to_json_value(const EvalReport& r) {
  json j{{"name", r.name},
         {"mode", r.mode},
         {"cfg_a", r.scales.cfg_a},
         {"cfg_r", r.scales.cfg_r},
         {"energy_distance", r.energy_distance},
         {"adherence", r.adherence},
         {"cluster_accuracy", r.cluster_accuracy},
         {"nfe", r.nfe},
         {"fingerprint", r.fingerprint},
         {"seed", r.seed}};
  if (!r.ok()) j["error"] = r.error;
  return j;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "scale,cfg_a,cfg_r,energy_distance,adherence,cluster_accuracy,nfe\n";
  for (const auto& r : rows)
    os << format_double(r.scale) << ',' << format_double(r.report.scales.cfg_a) << ','
       << format_double(r.report.scales.cfg_r) << ',' << format_double(r.report.energy_distance) << ','
       << format_double(r.report.adherence) << ',' << format_double(r.report.cluster_accuracy) << ',' << r.report.nfe
       << '\n';
  return os.str();
}

inline std::string ablation_csv(const std::vector<EvalReport>& table) {
  std::ostringstream os;
  os << "config,mode,cfg_a,cfg_r,energy_distance,adherence,cluster_accuracy,nfe,fingerprint,status\n";
  for (const auto& r : table)
    os << r.name << ',' << r.mode << ',' << format_double(r.scales.cfg_a) << ',' << format_double(r.scales.cfg_r)
       << ',' << format_double(r.energy_distance) << ',' << format_double(r.adherence) << ','
       << format_double(r.cluster_accuracy) << ',' << r.nfe << ',' << r.fingerprint << ','
       << (r.ok() ? "ok" : "failed") << '\n';
  return os.str();
}

/// Merges `section` under `key` into <dir>/run_summary.json.
inline void update_run_summary(const std::filesystem::path& dir, const std::string& key, const json& section) {
  const auto path = dir / "run_summary.json";
  json doc = json::object();
  if (std::filesystem::exists(path)) {
    try {
      doc = load_json_file(path);
    } catch (const IoError&) {
      doc = json::object();
    }
  }
  doc[key] = section;
  write_text_file(path, doc.dump(2) + "\n");
}

}  // namespace fada

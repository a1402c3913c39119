// SPDX-License-Identifier: Apache-2.0
//
// fada: command-line front end for the distillation lab.
//
//   fada gen-data       write tiered datasets
//   fada train-teacher  train the multi-step teacher
//   fada distill        window-distil a student from the teacher
//   fada sample         dump generated samples
//   fada eval           score a checkpoint
//   fada sweep-cfg      evaluate along one guidance axis
//   fada ablate         train and evaluate a list of ablation cells

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fada/fada.hpp"

namespace fs = std::filesystem;
using namespace fada;

namespace {

struct GlobalOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  std::string out_dir;
  bool fp32 = false;
};

struct CommandOptions {
  std::string data_tier;
  std::string teacher_path;
  std::string checkpoint_path;
  std::string name;
  std::string mode;
  std::string axis = "audio";
  std::vector<double> grid;
  std::optional<double> fixed;
  std::optional<double> cfg_a, cfg_r;
  std::optional<double> cond_a;
  std::optional<int> cond_r;
  int n = 1000;
  bool resume = false;
  std::vector<std::string> cells;
};

RunConfig resolve_config(const GlobalOptions& g) {
  std::vector<std::string> ov = g.overrides;
  if (g.seed) ov.push_back("seed=" + std::to_string(*g.seed));
  if (g.fp32) ov.push_back("precision=32");
  return load_config(g.config_path, ov);
}

fs::path resolve_out_dir(const GlobalOptions& g, const RunConfig& cfg) {
  if (!g.out_dir.empty()) return g.out_dir;
  if (const char* root = std::getenv("FADA_OUTPUT_ROOT"); root && *root) return fs::path(root) / cfg.output_dir;
  return cfg.output_dir;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory '" + dir.string() + "'");
  const fs::path probe = dir / ".write_probe";
  std::ofstream out(probe);
  if (!out) throw IoError("output directory '" + dir.string() + "' is not writable");
  out.close();
  fs::remove(probe, ec);
}

std::vector<LabeledSample> load_tier(const fs::path& dir, const RunConfig& cfg, Tier tier) {
  const json spec = load_json_file(dir / "data_spec.json");
  const std::string expected = fingerprint(cfg, Stage::kData);
  if (spec.at("fingerprint").get<std::string>() != expected)
    throw FingerprintError("dataset in '" + dir.string() + "' was generated under fingerprint " +
                           spec.at("fingerprint").get<std::string>() + ", current config expects " + expected);
  return read_dataset_csv(dir / (tier == Tier::kA ? "data_A.csv" : "data_B.csv"));
}

std::optional<CfgScales> scales_from(const CommandOptions& o, const CfgScales& fallback) {
  if (!o.cfg_a && !o.cfg_r) return std::nullopt;
  return CfgScales{o.cfg_a.value_or(fallback.cfg_a), o.cfg_r.value_or(fallback.cfg_r)};
}

std::string expected_fingerprint(const RunConfig& cfg, const std::string& role) {
  return fingerprint(cfg, role == "teacher" ? Stage::kTeacher : Stage::kStudent);
}

template <typename T>
Checkpoint<T> load_model(const RunConfig& cfg, const fs::path& path) {
  const json peek = load_json_file(path);
  const std::string role = peek.value("role", std::string("student"));
  return load_checkpoint<T>(path, expected_fingerprint(cfg, role));
}

SampleMode pick_mode(const CommandOptions& o, const std::string& role, CfgMode mode) {
  if (!o.mode.empty()) return sample_mode_from_string(o.mode);
  return default_eval_mode(role == "teacher", mode);
}

// ---- commands --------------------------------------------------------------

json cmd_gen_data(const RunConfig& cfg, const fs::path& dir) {
  const TieredDataset ds = gen_dataset(cfg.data);
  write_text_file(dir / "data_A.csv", dataset_csv(ds.a, cfg.data.data_dim));
  write_text_file(dir / "data_B.csv", dataset_csv(ds.b, cfg.data.data_dim));
  json spec{{"data", cfg.data}, {"fingerprint", fingerprint(cfg, Stage::kData)}};
  write_text_file(dir / "data_spec.json", spec.dump(2) + "\n");
  std::cout << "tier A: " << ds.a.size() << " samples\n"
            << "tier B: " << ds.b.size() << " samples (" << ds.b.size() - ds.a.size() << " B-only)\n";
  return {{"n_A", ds.a.size()}, {"n_B", ds.b.size()}, {"fingerprint", spec["fingerprint"]}};
}

template <typename T>
json cmd_train_teacher(RunConfig cfg, const fs::path& dir, const CommandOptions& o) {
  if (!o.data_tier.empty()) cfg.teacher.data_tier = tier_from_string(o.data_tier);
  const auto data = load_tier(dir, cfg, cfg.teacher.data_tier);
  const auto t0 = std::chrono::steady_clock::now();
  TeacherResult<T> res = train_teacher<T>(cfg, data);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::ostringstream curve;
  curve << "step,loss\n";
  for (const auto& p : res.loss_curve) {
    if (!std::isfinite(p.loss)) throw TrainingError("teacher loss diverged", "step " + std::to_string(p.step));
    curve << p.step << ',' << format_double(p.loss) << '\n';
  }
  write_text_file(dir / "teacher_loss.csv", curve.str());
  const std::string fp = fingerprint(cfg, Stage::kTeacher);
  const fs::path out = dir / (o.name.empty() ? "teacher.ckpt.json" : o.name + ".ckpt.json");
  save_checkpoint(out, Checkpoint<T>{"teacher", fp, res.model, std::nullopt});
  const double last = res.loss_curve.empty() ? 0.0 : res.loss_curve.back().loss;
  std::cout << "teacher trained on tier " << to_string(cfg.teacher.data_tier) << ": " << cfg.teacher.steps
            << " steps, final loss " << last << " (" << secs << " s) -> " << out.string() << "\n";
  return {{"checkpoint", out.string()}, {"fingerprint", fp}, {"final_loss", last},
          {"data_tier", to_string(cfg.teacher.data_tier)}, {"seconds", secs}};
}

template <typename T>
json cmd_distill(RunConfig cfg, const fs::path& dir, const CommandOptions& o) {
  const fs::path teacher_path = o.teacher_path.empty() ? dir / "teacher.ckpt.json" : fs::path(o.teacher_path);
  const Checkpoint<T> teacher = load_checkpoint<T>(teacher_path, fingerprint(cfg, Stage::kTeacher));
  const Tier tier = o.data_tier.empty() ? Tier::kBOnly : tier_from_string(o.data_tier);
  const auto data = load_tier(dir, cfg, tier);
  const std::string name = o.name.empty() ? "student" : o.name;
  const fs::path ckpt_path = dir / (name + ".ckpt.json");
  const fs::path tel_path = dir / (name + "_telemetry.jsonl");
  const std::string fp = fingerprint(cfg, Stage::kStudent);

  DistillRun<T> run = start_distill<T>(cfg, teacher.predictor);
  std::vector<std::string> tel_lines;
  if (o.resume && fs::exists(ckpt_path)) {
    Checkpoint<T> ck = load_checkpoint<T>(ckpt_path, fp);
    if (!ck.training) throw IoError("checkpoint '" + ckpt_path.string() + "' carries no training state");
    run.student = std::move(ck.predictor);
    run.opt = std::move(ck.training->optimizer);
    run.rng.deserialize(ck.training->rng_state);
    run.step = ck.training->step;
    if (fs::exists(tel_path)) {
      std::istringstream in(read_text_file(tel_path));
      std::string line;
      while (std::getline(in, line) && static_cast<std::int64_t>(tel_lines.size()) < run.step)
        tel_lines.push_back(line);
    }
    std::cout << "resuming " << name << " at step " << run.step << "\n";
  }
  const auto save = [&](const DistillRun<T>& r) {
    save_checkpoint(ckpt_path, Checkpoint<T>{"student", fp, r.student, TrainingState<T>{r.opt, r.rng.serialize(), r.step}});
    std::string text;
    for (const auto& l : tel_lines) text += l + "\n";
    write_text_file(tel_path, text);
  };
  run_distill<T>(
      run, teacher.predictor, cfg, data, std::nullopt,
      [&](const StepTelemetry& t) { tel_lines.push_back(to_json_value(t).dump()); },
      [&](const DistillRun<T>& r) { save(r); });
  save(run);
  std::cout << "student '" << name << "' (" << to_string(cfg.distill.core.cfg_mode) << ", "
            << to_string(cfg.distill.core.weight) << ") distilled for " << run.step << " steps -> "
            << ckpt_path.string() << "\n";
  return {{"checkpoint", ckpt_path.string()}, {"fingerprint", fp}, {"steps", run.step},
          {"cfg_mode", to_string(cfg.distill.core.cfg_mode)}, {"weight_mode", to_string(cfg.distill.core.weight)}};
}

template <typename T>
json cmd_sample(const RunConfig& cfg, const fs::path& dir, const CommandOptions& o) {
  const fs::path path = o.checkpoint_path.empty() ? dir / "student.ckpt.json" : fs::path(o.checkpoint_path);
  const Checkpoint<T> ck = load_model<T>(cfg, path);
  const SampleMode mode = pick_mode(o, ck.role, ck.predictor.cfg_mode());
  const CfgScales scales = scales_from(o, default_scales(cfg, mode)).value_or(default_scales(cfg, mode));
  std::vector<Condition> cond;
  if (o.cond_r) {
    cond.assign(static_cast<std::size_t>(o.n),
                o.cond_a ? Condition::both(*o.cond_a, *o.cond_r) : Condition::ref_only(*o.cond_r));
  } else {
    const auto base = eval_conditions(cfg.data, cfg.eval.spec);
    for (int i = 0; i < o.n; ++i) cond.push_back(base[static_cast<std::size_t>(i) % base.size()]);
  }
  Rng rng = Rng::stream(cfg.seed, 0x5a3e);
  const NoiseSchedule schedule(cfg.schedule);
  const WindowPartition partition(cfg.distill.core.windows);
  const auto res = sample<T>(ck.predictor, schedule, partition, mode, cond, scales, rng, cfg.data.data_dim,
                             cfg.distill.window_steps);
  const fs::path out = dir / ("samples_" + to_string(mode) + ".csv");
  write_text_file(out, samples_csv(res.samples.template cast<double>(), cond, to_string(mode), res.nfe_per_sample));
  std::cout << o.n << " samples (" << to_string(mode) << ", NFE " << res.nfe_per_sample << ") -> " << out.string()
            << "\n";
  return {{"file", out.string()}, {"mode", to_string(mode)}, {"nfe", res.nfe_per_sample}, {"n", o.n}};
}

template <typename T>
json cmd_eval(const RunConfig& cfg, const fs::path& dir, const CommandOptions& o) {
  const fs::path path = o.checkpoint_path.empty() ? dir / "student.ckpt.json" : fs::path(o.checkpoint_path);
  const Checkpoint<T> ck = load_model<T>(cfg, path);
  const SampleMode mode = pick_mode(o, ck.role, ck.predictor.cfg_mode());
  EvalReport rep = evaluate_model<T>(cfg, ck.predictor, mode, scales_from(o, default_scales(cfg, mode)));
  rep.name = o.name.empty() ? path.stem().stem().string() : o.name;
  rep.fingerprint = ck.fingerprint;
  const json j = to_json_value(rep);
  write_text_file(dir / ("eval_" + rep.name + "_" + rep.mode + ".json"), j.dump(2) + "\n");
  std::cout << rep.name << " [" << rep.mode << "] energy_distance=" << rep.energy_distance
            << " adherence=" << rep.adherence << " cluster_accuracy=" << rep.cluster_accuracy << " NFE=" << rep.nfe
            << "\n";
  return j;
}

template <typename T>
json cmd_sweep(const RunConfig& cfg, const fs::path& dir, const CommandOptions& o) {
  const fs::path path = o.checkpoint_path.empty() ? dir / "student.ckpt.json" : fs::path(o.checkpoint_path);
  const Checkpoint<T> ck = load_model<T>(cfg, path);
  const SampleMode mode = pick_mode(o, ck.role, ck.predictor.cfg_mode());
  const SweepAxis axis = sweep_axis_from_string(o.axis);
  const std::vector<double> grid =
      !o.grid.empty() ? o.grid : (axis == SweepAxis::kAudio ? cfg.eval.audio_grid : cfg.eval.ref_grid);
  const NoiseSchedule schedule(cfg.schedule);
  const WindowPartition partition(cfg.distill.core.windows);
  const auto rows = cfg_sweep<T>(ck.predictor, schedule, partition, mode, axis, grid, o.fixed, cfg.data,
                                 cfg.eval.spec, cfg.distill.window_steps);
  const fs::path out = dir / ("sweep_" + to_string(axis) + ".csv");
  write_text_file(out, sweep_csv(rows));
  json arr = json::array();
  for (const auto& r : rows) arr.push_back(to_json_value(r.report));
  std::cout << rows.size() << " sweep points (" << to_string(axis) << ", " << to_string(mode) << ") -> "
            << out.string() << "\n";
  return {{"file", out.string()}, {"axis", to_string(axis)}, {"rows", arr}};
}

template <typename T>
json cmd_ablate(const RunConfig& cfg, const fs::path& dir, const CommandOptions& o) {
  std::vector<AblationCell> cells;
  if (o.cells.empty()) {
    cells = builtin_ablation_cells();
  } else {
    for (const auto& n : o.cells) {
      auto c = find_builtin_cell(n);
      if (!c) throw ConfigError("unknown ablation cell '" + n + "'");
      cells.push_back(*c);
    }
  }
  TieredDataset data;
  data.a = load_tier(dir, cfg, Tier::kA);
  data.b = load_tier(dir, cfg, Tier::kBOnly);
  AblationRunner<T> runner(cfg, std::move(data));
  const auto table = runner.run_all(cells);
  write_text_file(dir / "ablation.csv", ablation_csv(table));
  json arr = json::array();
  for (const auto& r : table) {
    arr.push_back(to_json_value(r));
    std::cout << r.name << ": " << (r.ok() ? "" : "FAILED " + r.error + " ") << "ED=" << r.energy_distance
              << " adherence=" << r.adherence << " NFE=" << r.nfe << "\n";
  }
  write_text_file(dir / "ablation.json", arr.dump(2) + "\n");
  return {{"file", (dir / "ablation.csv").string()}, {"reports", arr}};
}

template <typename T>
json dispatch(const std::string& cmd, const RunConfig& cfg, const fs::path& dir, const CommandOptions& o) {
  if (cmd == "train-teacher") return cmd_train_teacher<T>(cfg, dir, o);
  if (cmd == "distill") return cmd_distill<T>(cfg, dir, o);
  if (cmd == "sample") return cmd_sample<T>(cfg, dir, o);
  if (cmd == "eval") return cmd_eval<T>(cfg, dir, o);
  if (cmd == "sweep-cfg") return cmd_sweep<T>(cfg, dir, o);
  if (cmd == "ablate") return cmd_ablate<T>(cfg, dir, o);
  throw ConfigError("unknown command " + cmd);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fada: distillation lab for multi-CFG diffusion students"};
  app.require_subcommand(0, 1);
  GlobalOptions g;
  CommandOptions o;
  bool print_config = false;
  app.add_option("--config", g.config_path, "Run-config JSON (keys omitted keep their defaults)");
  app.add_option("--seed", g.seed, "Master seed");
  app.add_option("--override", g.overrides, "Config override key=value (dotted path), repeatable");
  app.add_option("--out", g.out_dir, "Output directory (default: $FADA_OUTPUT_ROOT/<output_dir>)");
  app.add_flag("--fp32", g.fp32, "Run in 32-bit floats");
  app.add_flag("--print-config", print_config, "Print the resolved config and exit");

  auto* gen = app.add_subcommand("gen-data", "Generate tier A and tier B datasets");
  auto* tea = app.add_subcommand("train-teacher", "Train the teacher (tier A by default)");
  tea->add_option("--data-tier", o.data_tier, "A or B")->check(CLI::IsMember({"A", "B"}));
  tea->add_option("--name", o.name, "Checkpoint stem (default teacher)");
  auto* dis = app.add_subcommand("distill", "Distil a student from the teacher");
  dis->add_option("--teacher", o.teacher_path, "Teacher checkpoint");
  dis->add_option("--data-tier", o.data_tier, "A or B (default B)")->check(CLI::IsMember({"A", "B"}));
  dis->add_option("--name", o.name, "Checkpoint stem (default student)");
  dis->add_flag("--resume", o.resume, "Continue from the student checkpoint");
  auto* smp = app.add_subcommand("sample", "Generate samples from a checkpoint");
  auto* evl = app.add_subcommand("eval", "Evaluate a checkpoint");
  auto* swp = app.add_subcommand("sweep-cfg", "Sweep one guidance scale");
  for (auto* sc : {smp, evl, swp}) {
    sc->add_option("--checkpoint", o.checkpoint_path, "Checkpoint (default student.ckpt.json)");
    sc->add_option("--mode", o.mode, "teacher-75, balanced-18, fast-6 or conditional-6");
  }
  for (auto* sc : {smp, evl}) {
    sc->add_option("--cfg-a", o.cfg_a, "Fine-condition guidance scale");
    sc->add_option("--cfg-r", o.cfg_r, "Coarse-condition guidance scale");
  }
  evl->add_option("--name", o.name, "Report name");
  smp->add_option("-n,--n", o.n, "Number of samples")->check(CLI::NonNegativeNumber);
  smp->add_option("--a", o.cond_a, "Fine condition (angle, radians)");
  smp->add_option("--r", o.cond_r, "Coarse condition (cluster id)");
  swp->add_option("--axis", o.axis, "audio (fine scale) or ref (coarse scale)");
  swp->add_option("--grid", o.grid, "Scale values")->delimiter(',');
  swp->add_option("--fixed", o.fixed, "Value of the other scale");
  auto* abl = app.add_subcommand("ablate", "Train and evaluate ablation cells");
  abl->add_option("--cells", o.cells, "Cell names (default: all built-in cells)")->delimiter(',');

  for (auto* sc : {gen, tea, dis, smp, evl, swp, abl}) sc->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  std::string cmd = "none";
  for (auto* sc : app.get_subcommands()) cmd = sc->get_name();

  RunConfig cfg;
  try {
    cfg = resolve_config(g);
  } catch (const Error& e) {
    std::cerr << "fada: " << e.what() << "\n";
    return 2;
  }
  if (print_config || cmd == "none") {
    std::cout << json(cfg).dump(2) << "\n";
    return 0;
  }

  fs::path dir;
  try {
    dir = resolve_out_dir(g, cfg);
    ensure_dir(dir);
  } catch (const Error& e) {
    std::cerr << "fada: " << e.what() << "\n";
    return 3;
  }

  json summary{{"command", cmd}, {"config", cfg}, {"config_fingerprint", fingerprint(cfg, Stage::kEval)}};
  int rc = 0;
  try {
    json result;
    if (cmd == "gen-data") {
      result = cmd_gen_data(cfg, dir);
    } else if (cfg.precision == 32) {
      result = dispatch<float>(cmd, cfg, dir, o);
    } else {
      result = dispatch<double>(cmd, cfg, dir, o);
    }
    summary["status"] = "ok";
    summary["result"] = result;
  } catch (const TrainingError& e) {
    std::cerr << "fada " << cmd << ": " << e.what() << "\n  diagnostics: " << e.diagnostics() << "\n";
    summary["status"] = "error";
    summary["error"] = e.what();
    summary["diagnostics"] = e.diagnostics();
    rc = 4;
  } catch (const std::exception& e) {
    std::cerr << "fada " << cmd << ": " << e.what() << "\n";
    summary["status"] = "error";
    summary["error"] = e.what();
    rc = 1;
  }
  try {
    update_run_summary(dir, cmd, summary);
  } catch (const std::exception& e) {
    std::cerr << "fada: could not write run summary: " << e.what() << "\n";
    if (rc == 0) rc = 3;
  }
  return rc;
}

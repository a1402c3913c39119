// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "fada/io.hpp"

namespace fs = std::filesystem;
using fada::json;

namespace {

const std::string kTiny =
    " --override data.n_a=120 --override data.n_b=300 --override model.hidden_width=16"
    " --override model.hidden_layers=2 --override teacher.steps=30 --override teacher.batch_size=32"
    " --override distill.steps=8 --override distill.batch_size=16 --override distill.checkpoint_every=4"
    " --override eval.n_conditions=2 --override eval.samples_per_condition=20";

struct Sandbox {
  fs::path dir;
  Sandbox() {
    dir = fs::temp_directory_path() / ("fada_cli_" + std::to_string(std::random_device{}()));
    fs::create_directories(dir);
  }
  ~Sandbox() {
    std::error_code ec;
    fs::remove_all(dir, ec);
  }

  /// Runs the CLI and returns its exit code; output goes to a log file.
  int run(const std::string& args, const std::string& extra = kTiny) const {
    const std::string cmd = std::string("\"") + FADA_CLI_PATH + "\" " + args + " --out \"" + dir.string() + "\"" +
                            extra + " >> \"" + (dir / "log.txt").string() + "\" 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  json summary() const { return fada::load_json_file(dir / "run_summary.json"); }
  std::string log() const { return fada::read_text_file(dir / "log.txt"); }
};

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

}  // namespace

TEST_CASE("cli pipeline end to end", "[cli]") {
  Sandbox sb;
  REQUIRE(sb.run("gen-data") == 0);
  CHECK(fs::exists(sb.dir / "data_A.csv"));
  CHECK(line_count(sb.dir / "data_A.csv") == 121);
  CHECK(line_count(sb.dir / "data_B.csv") == 301);

  REQUIRE(sb.run("train-teacher") == 0);
  CHECK(fs::exists(sb.dir / "teacher.ckpt.json"));
  CHECK(line_count(sb.dir / "teacher_loss.csv") > 1);

  REQUIRE(sb.run("distill") == 0);
  CHECK(fs::exists(sb.dir / "student.ckpt.json"));
  CHECK(line_count(sb.dir / "student_telemetry.jsonl") == 8);
  const json first = json::parse(fada::read_text_file(sb.dir / "student_telemetry.jsonl").substr(
      0, fada::read_text_file(sb.dir / "student_telemetry.jsonl").find('\n')));
  CHECK(first.contains("ratio_hist"));
  CHECK(first["teacher_nfe"].get<int>() > 0);

  const std::string before = fada::read_text_file(sb.dir / "student.ckpt.json");
  REQUIRE(sb.run("distill --resume") == 0);
  CHECK(fada::read_text_file(sb.dir / "student.ckpt.json") == before);

  REQUIRE(sb.run("sample --mode fast-6 -n 7 --a 0.5 --r 1") == 0);
  CHECK(line_count(sb.dir / "samples_fast-6.csv") == 8);
  const std::string csv = fada::read_text_file(sb.dir / "samples_fast-6.csv");
  CHECK(csv.find("sample_id,dim_0,dim_1,a,r,mode,nfe") == 0);
  CHECK(csv.find(",fast-6,6\n") != std::string::npos);

  REQUIRE(sb.run("eval --mode balanced-18") == 0);
  const json rep = fada::load_json_file(sb.dir / "eval_student_balanced-18.json");
  CHECK(rep["nfe"] == 18);
  CHECK(rep["energy_distance"].get<double>() >= 0.0);

  REQUIRE(sb.run("sweep-cfg --axis audio --grid 1,3.5,6.5 --mode fast-6") == 0);
  CHECK(line_count(sb.dir / "sweep_audio.csv") == 4);

  // the teacher has no CFG embedding path
  CHECK(sb.run("sample --mode fast-6 --checkpoint \"" + (sb.dir / "teacher.ckpt.json").string() + "\"") == 1);
  CHECK(sb.summary()["sample"]["status"] == "error");
  CHECK(sb.log().find("CFG") != std::string::npos);

  REQUIRE(sb.run("ablate --cells Teacher-A,PeRFlow") == 0);
  CHECK(line_count(sb.dir / "ablation.csv") == 3);

  const json s = sb.summary();
  for (const char* key : {"gen-data", "train-teacher", "distill", "eval", "sweep-cfg", "ablate"})
    CHECK(s[key]["status"] == "ok");
}

TEST_CASE("cli refuses stale artifacts", "[cli]") {
  Sandbox sb;
  REQUIRE(sb.run("gen-data") == 0);
  REQUIRE(sb.run("train-teacher") == 0);
  // a different teacher config no longer matches the stored checkpoint
  CHECK(sb.run("distill", kTiny + " --override teacher.lr=0.01") == 1);
  CHECK(sb.log().find("fingerprint") != std::string::npos);
  // a different data seed no longer matches the generated dataset
  CHECK(sb.run("train-teacher", kTiny + " --override data.seed=7") == 1);
  CHECK(sb.summary()["train-teacher"]["status"] == "error");
}

TEST_CASE("cli configuration and output errors", "[cli]") {
  Sandbox sb;
  CHECK(sb.run("gen-data", kTiny + " --override distill.core.teacher_steps=6") == 2);
  CHECK(sb.run("gen-data", kTiny + " --override precision=16") == 2);
  CHECK(sb.run("--print-config") == 0);
  CHECK(sb.log().find("\"teacher_steps\"") != std::string::npos);

  fs::create_directories(sb.dir / "ro");
  fs::permissions(sb.dir / "ro", fs::perms::owner_read | fs::perms::owner_exec);
  const bool enforced = [&] {
    std::ofstream probe(sb.dir / "ro" / "probe");
    return !probe;
  }();
  if (enforced) {
    const std::string cmd = std::string("\"") + FADA_CLI_PATH + "\" gen-data --out \"" +
                            (sb.dir / "ro" / "sub").string() + "\"" + kTiny + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    CHECK(WEXITSTATUS(status) == 3);
  }
  fs::permissions(sb.dir / "ro", fs::perms::owner_all);
}

TEST_CASE("cli runs in single precision", "[cli]") {
  Sandbox sb;
  REQUIRE(sb.run("gen-data") == 0);
  REQUIRE(sb.run("train-teacher --fp32") == 0);
  REQUIRE(sb.run("distill --fp32") == 0);
  REQUIRE(sb.run("eval --fp32 --mode fast-6") == 0);
  CHECK(sb.summary()["eval"]["config"]["precision"] == 32);
}

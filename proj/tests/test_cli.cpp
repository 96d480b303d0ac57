#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"

#include "dap/commands.hpp"
#include "dap/params.hpp"

using namespace dap;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dap_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run_cli(const std::string& args, std::string* out = nullptr) {
  const fs::path log = fs::temp_directory_path() / "dap_test_cli_stdout.txt";
  const std::string cmd = std::string(DAP_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  if (out) {
    std::ifstream in(log);
    *out = std::string((std::istreambuf_iterator<char>(in)), {});
  }
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), {});
}

// Small models and short runs so the whole pipeline takes seconds.
const char* kTiny =
    "--denoiser.token_dim 16 --denoiser.num_layers 1 --denoiser.num_heads 2 --denoiser.time_embed_dim 16 "
    "--corr.token_dim 16 --corr.num_blocks 1 --corr.gva_groups 4 --train.steps 800 --train.afford_steps 300 --train.lr 3e-3";

}  // namespace

TEST_CASE("config keys, nesting and errors") {
  RunConfig cfg;
  cfg.set("schedule.T", "50");
  cfg.set("task", "cabinet");
  CHECK(cfg.schedule.T == 50);
  CHECK(cfg.task == TaskKind::cabinet);
  cfg.apply(nlohmann::json::parse(R"({"infer": {"K": 3}, "corr.gamma": 1.5, "paths": {"reports": "r"}})"));
  CHECK(cfg.infer.K == 3);
  CHECK(cfg.corr.gamma == 1.5);
  CHECK(cfg.paths.reports == "r");
  CHECK_THROWS_AS(cfg.set("schedule.TT", "1"), ConfigError);
  CHECK_THROWS_AS(cfg.set("schedule.T", "ten"), ConfigError);
  CHECK_THROWS_AS(cfg.set("paths.dataset", ""), ConfigError);
  cfg.set("corr.gva_groups", "7");
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  const auto j = RunConfig{}.to_json();
  CHECK(j.at("schedule.T") == 100);
  CHECK(j.at("infer.K") == 8);
  CHECK(j.at("task").is_null());
}

TEST_CASE("dataset records round-trip and malformed lines are located") {
  const fs::path dir = scratch("dataset");
  const DatasetSummary s = gen_dataset(TaskKind::shelf, 2, 2, 5, dir / "a.jsonl");
  CHECK(s.records == 4);
  CHECK(s.affordance_positive_fraction > 0.0);
  CHECK(s.correspondence_positive_fraction > 0.0);
  const auto recs = read_dataset(dir / "a.jsonl");
  REQUIRE(recs.size() == 4);
  CHECK(recs[0].slot_count == 4);
  CHECK(recs[0].demo.mode_id.has_value());
  write_dataset(dir / "b.jsonl", recs);
  CHECK(slurp(dir / "a.jsonl") == slurp(dir / "b.jsonl"));

  gen_dataset(TaskKind::shelf, 2, 2, 5, dir / "c.jsonl", LabelConfig{}, 3);
  CHECK(slurp(dir / "a.jsonl") == slurp(dir / "c.jsonl"));

  std::ofstream(dir / "bad.jsonl") << slurp(dir / "a.jsonl") << "{\"container\": 3}\n";
  try {
    read_dataset(dir / "bad.jsonl");
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find(":5") != std::string::npos);
  }
  std::ofstream(dir / "empty.jsonl") << "";
  CHECK_THROWS_AS(read_dataset(dir / "empty.jsonl"), FormatError);
  CHECK_THROWS_AS(read_dataset(dir / "missing.jsonl"), IoError);
}

TEST_CASE("exit codes follow the error class") {
  CHECK(exit_code_for(UsageError("x")) == 1);
  CHECK(exit_code_for(ConfigError("x")) == 2);
  CHECK(exit_code_for(FormatError("x")) == 2);
  CHECK(exit_code_for(IoError("x")) == 2);
  CHECK(exit_code_for(NumericError("x")) == 3);
  CHECK(exit_code_for(ConvergenceError("x")) == 3);
  CHECK(exit_code_for(NoCandidatesError("x")) == 3);
}

TEST_CASE("cli usage and data errors") {
  const fs::path dir = scratch("usage");
  std::string out;
  CHECK(run_cli("", &out) == 1);
  CHECK(run_cli("gen-data --out " + dir.string(), &out) == 1);
  CHECK(out.find("--task") != std::string::npos);
  CHECK(run_cli("gen-data --task shelf --no.such.key 3 --out " + dir.string()) == 1);
  CHECK(run_cli("gen-data --task drawer --out " + dir.string()) == 2);
  CHECK(run_cli("train-afford --out " + dir.string(), &out) == 2);
  CHECK(out.find("dataset.jsonl") != std::string::npos);
  CHECK(run_cli("eval --task shelf --out " + dir.string()) == 2);
  CHECK(run_cli("gen-data --task shelf --config " + (dir / "none.json").string()) == 2);

  std::ofstream(dir / "blocker") << "x";
  CHECK(run_cli("gen-data --task shelf --scenes 1 --demos 1 --out " + (dir / "blocker").string(), &out) == 2);
  CHECK(out.find("blocker") != std::string::npos);
}

TEST_CASE("cli pipeline: gen-data, training, eval, infer and determinism") {
  const fs::path dir = scratch("pipeline");
  const std::string base = " --seed 3 --out " + dir.string() + " ";
  std::string out;

  // The file sets the scene count; the dedicated flag wins over it.
  std::ofstream(dir / "cfg.json") << R"({"data.scenes": 9, "data.demos": 2})";
  REQUIRE(run_cli("gen-data --task shelf --scenes 3 --config " + (dir / "cfg.json").string() + base, &out) == 0);
  const auto summary = nlohmann::json::parse(out);
  CHECK(summary.at("records") == 6);

  REQUIRE(run_cli("train-afford " + std::string(kTiny) + base, &out) == 0);
  REQUIRE(run_cli("train-corr " + std::string(kTiny) + base, &out) == 0);
  REQUIRE(run_cli("train-cap " + std::string(kTiny) + base, &out) == 0);
  const std::string afford1 = slurp(dir / "checkpoints" / "afford.ckpt");
  const std::string corr1 = slurp(dir / "checkpoints" / "corr.ckpt");

  std::ifstream log(dir / "reports" / "train_afford.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.contains("step"));
    CHECK(j.contains("loss"));
    CHECK(j.contains("wall_ms"));
    ++lines;
  }
  CHECK(lines == 3);

  const std::string eval_args = "eval --task shelf --episodes 2 --infer.K 2 " + std::string(kTiny) + base;
  REQUIRE(run_cli(eval_args, &out) == 0);
  const std::string report1 = slurp(dir / "reports" / "eval_dap.json");
  const auto report = nlohmann::json::parse(report1);
  for (const char* key : {"success_rate", "mode_histogram", "modes_covered", "mean_pos_error", "multi_slot_fraction",
                          "config", "episodes_detail"}) {
    CHECK(report.contains(key));
  }
  CHECK(report.at("config").at("train.afford_steps") == 300);
  CHECK(report.at("episodes_detail").size() == 2);
  REQUIRE(run_cli("eval --mode cap --task shelf --episodes 2 " + std::string(kTiny) + base) == 0);
  CHECK(nlohmann::json::parse(slurp(dir / "reports" / "eval_cap.json")).at("K") == 1);

  // Second run with the same config and seed: bitwise identical artifacts.
  REQUIRE(run_cli("train-afford " + std::string(kTiny) + base) == 0);
  REQUIRE(run_cli("train-corr " + std::string(kTiny) + base) == 0);
  CHECK(slurp(dir / "checkpoints" / "afford.ckpt") == afford1);
  CHECK(slurp(dir / "checkpoints" / "corr.ckpt") == corr1);
  REQUIRE(run_cli(eval_args) == 0);
  CHECK(slurp(dir / "reports" / "eval_dap.json") == report1);

  const std::string infer_args = "infer --scene " + (dir / "dataset.jsonl").string() +
                                 " --record 1 --infer.K 2 --export-trajectory " + std::string(kTiny) + base;
  const int code = run_cli(infer_args, &out);
  REQUIRE((code == 0 || code == 3));
  if (code == 0) {
    const auto j = nlohmann::json::parse(out);
    REQUIRE(j.at("rotation").size() == 9);
    Mat3 r;
    for (int i = 0; i < 9; ++i) r(i / 3, i % 3) = j.at("rotation")[static_cast<size_t>(i)].get<double>();
    CHECK((r * r.transpose() - Mat3::Identity()).norm() < 1e-9);
    CHECK(r.determinant() == doctest::Approx(1.0));
    CHECK(j.at("translation").size() == 3);
    CHECK(j.contains("collisions"));
    CHECK(j.contains("rank_size"));
    int plys = 0;
    for (const auto& e : fs::directory_iterator(dir / "trajectory")) plys += e.path().extension() == ".ply";
    CHECK(plys == 101);
    CHECK(fs::exists(dir / "trajectory" / "afford_t100.ply"));
    CHECK(fs::exists(dir / "trajectory" / "afford_t000.ply"));
    std::string again;
    REQUIRE(run_cli(infer_args, &again) == 0);
    CHECK(again == out);
  } else {
    CHECK(out.find("no-candidates") != std::string::npos);
  }
}

TEST_CASE("non-converging training exits 3 after writing its checkpoint") {
  const fs::path dir = scratch("converge");
  const std::string base = " --seed 1 --out " + dir.string() + " ";
  REQUIRE(run_cli("gen-data --task cabinet --scenes 1 --demos 1" + base) == 0);
  CHECK(run_cli("train-afford --train.afford_steps 2 --denoiser.token_dim 16 --denoiser.num_layers 1" + base) == 3);
  CHECK(fs::exists(dir / "checkpoints" / "afford.ckpt"));
}

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "json.hpp"

#include "dap/afford.hpp"
#include "dap/corr.hpp"
#include "dap/env.hpp"

namespace dap {

// The T = 1000 DDPM range rescaled by 1000 / T so that alpha_bar_T ~ 2e-5
// and S(T) is close to the N(0, I) the sampler starts from.
struct ScheduleConfig {
  int T = 100;
  double beta_start = 1e-3;
  double beta_end = 0.2;
};

struct TrainConfig {
  int steps = 3000;         // train-corr and train-cap
  int afford_steps = 40000;  // train-afford
  double lr = 1e-3;      // peak; cosine-decayed to 5% over the run
  int batch = 1;         // demonstrations per optimizer step
  int eval_every = 100;  // log interval
};

struct InferConfig {
  int K = 8;
  double collision_margin = 0.005;
};

struct DataConfig {
  int scenes = 200;
  int demos = 1;
};

struct EvalConfig {
  int episodes = 50;
};

struct PathsConfig {
  std::string dataset = "dataset.jsonl";
  std::string checkpoints = "checkpoints";
  std::string reports = "reports";
};

struct RunConfig {
  std::optional<TaskKind> task;
  std::uint64_t seed = 0;
  LabelConfig label;
  ScheduleConfig schedule;
  DenoiserConfig denoiser;
  CorrConfig corr;
  TrainConfig train;
  InferConfig infer;
  DataConfig data;
  EvalConfig eval;
  PathsConfig paths;

  // Throws ConfigError naming the offending key.
  void validate() const;

  // Sets one dotted key from its textual value; throws ConfigError on
  // unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  // Applies a JSON object, flat ("schedule.T": 100) or nested
  // ({"schedule": {"T": 100}}).
  void apply(const nlohmann::json& j);

  // Flat dotted view of every key, for echoing into reports.
  nlohmann::ordered_json to_json() const;
};

RunConfig load_config(const std::filesystem::path& path);

// Resolves a configured path against the output directory unless absolute.
std::filesystem::path resolve(const std::filesystem::path& out_dir, const std::string& p);

}  // namespace dap

#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include "json.hpp"

#include "dap/config.hpp"
#include "dap/dataset.hpp"

namespace dap {

// Process exit codes shared by every subcommand.
enum ExitCode : int { exit_ok = 0, exit_usage = 1, exit_data = 2, exit_numeric = 3 };

// Maps an exception escaping a command to its exit code.
int exit_code_for(const std::exception& e);

enum class TrainTarget { afford, cap, corr };
enum class EvalMode { dap, cap };

std::string to_string(TrainTarget t);
std::string to_string(EvalMode m);

struct Workspace {
  std::filesystem::path out_dir;
  std::filesystem::path dataset;
  std::filesystem::path checkpoints;
  std::filesystem::path reports;

  std::filesystem::path checkpoint(TrainTarget t) const;
  std::filesystem::path train_log(TrainTarget t) const;
  std::filesystem::path eval_report(EvalMode m) const;
};

Workspace make_workspace(const RunConfig& cfg, const std::filesystem::path& out_dir);

// Writes the dataset and returns the one-line JSON summary.
nlohmann::ordered_json cmd_gen_data(const RunConfig& cfg, const Workspace& ws, int threads);

struct TrainResult {
  double initial_loss = 0.0;  // mean over the first 100 steps
  double final_loss = 0.0;    // mean over the last 100 steps
  bool converged = false;
  std::filesystem::path checkpoint;
};

// Trains one model on the workspace dataset, writes its checkpoint and a
// JSON-lines log. Throws ConvergenceError (after writing both) when the
// convergence gate fails and NumericError on a non-finite loss.
TrainResult cmd_train(const RunConfig& cfg, TrainTarget which, const Workspace& ws);

// Runs held-out episodes and writes the report; returns it as well.
nlohmann::ordered_json cmd_eval(const RunConfig& cfg, EvalMode mode, const Workspace& ws, int threads);

// Runs inference on record `record` of a dataset-format scene file and
// returns the best-candidate JSON. With export_trajectory the T + 1
// affordance snapshots of the winning sample go to out_dir/trajectory.
nlohmann::ordered_json cmd_infer(const RunConfig& cfg, const Workspace& ws, const std::filesystem::path& scene_file,
                                 int record, bool export_trajectory, int threads);

// Number of slots whose ground-truth region has at least half of its points
// scored >= 0, and the index of the one with the largest such fraction.
struct SlotCoverage {
  int covered = 0;
  std::optional<int> dominant;
};
SlotCoverage slot_coverage(const SceneSpec& scene, const AffordanceField& scores, const LabelConfig& labels);

}  // namespace dap

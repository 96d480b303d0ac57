#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dap/commands.hpp"
#include "dap/parallel.hpp"

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::optional<std::string> task;
  std::optional<int> scenes;
  std::optional<int> demos;
  std::optional<int> episodes;
  std::string mode = "dap";
  std::string scene;
  int record = 0;
  bool export_trajectory = false;
  int threads = 0;
};

// Unrecognised "--key value" / "--key=value" pairs become dotted config
// overrides.
std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& a = extras[i];
    if (a.rfind("--", 0) != 0 || a.size() == 2) throw dap::UsageError("unexpected argument '" + a + "'");
    const std::string body = a.substr(2);
    const auto eq = body.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(body.substr(0, eq), body.substr(eq + 1));
    } else {
      if (i + 1 >= extras.size()) throw dap::UsageError("missing value for '" + a + "'");
      out.emplace_back(body, extras[++i]);
    }
  }
  return out;
}

// Defaults < config file < dotted overrides < dedicated flags.
dap::RunConfig build_config(const Options& o, const std::vector<std::string>& extras) {
  dap::RunConfig cfg = o.config.empty() ? dap::RunConfig{} : dap::load_config(o.config);
  for (const auto& [key, value] : parse_overrides(extras)) {
    try {
      cfg.set(key, value);
    } catch (const dap::ConfigError& e) {
      throw dap::UsageError(e.what());
    }
  }
  if (o.seed) cfg.seed = *o.seed;
  if (o.task) cfg.task = dap::parse_task_kind(*o.task);
  if (o.scenes) cfg.data.scenes = *o.scenes;
  if (o.demos) cfg.data.demos = *o.demos;
  if (o.episodes) cfg.eval.episodes = *o.episodes;
  cfg.validate();
  return cfg;
}

CLI::App* add_command(CLI::App& app, const std::string& name, const std::string& help, Options& o) {
  CLI::App* sub = app.add_subcommand(name, help);
  sub->allow_extras();
  sub->add_option("--config", o.config, "JSON config file (flat dotted keys or nested objects)");
  sub->add_option("--seed", o.seed, "Master seed");
  sub->add_option("--out", o.out, "Output directory")->capture_default_str();
  sub->add_option("--task", o.task, "shelf or cabinet");
  sub->add_option("--threads", o.threads, "Worker count (default: DAP_THREADS or all cores)");
  return sub;
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  CLI::App app{"Diffusion-based affordance prediction for object storage"};
  app.require_subcommand(1);

  CLI::App* gen = add_command(app, "gen-data", "Generate a JSON-lines demonstration dataset", o);
  gen->add_option("--scenes", o.scenes, "Number of procedural scenes");
  gen->add_option("--demos", o.demos, "Demonstrations per scene");
  CLI::App* train_afford = add_command(app, "train-afford", "Train the diffusion affordance model", o);
  CLI::App* train_cap = add_command(app, "train-cap", "Train the classification affordance ablation", o);
  CLI::App* train_corr = add_command(app, "train-corr", "Train the correspondence model", o);
  CLI::App* eval = add_command(app, "eval", "Evaluate on held-out scenes", o);
  eval->add_option("--mode", o.mode, "dap or cap")->check(CLI::IsMember({"dap", "cap"}))->capture_default_str();
  eval->add_option("--episodes", o.episodes, "Held-out episodes");
  CLI::App* infer = add_command(app, "infer", "Predict a storage pose for one dataset record", o);
  infer->add_option("--scene", o.scene, "Dataset-format JSON-lines file")->required();
  infer->add_option("--record", o.record, "Record index in the scene file")->capture_default_str();
  infer->add_flag("--export-trajectory", o.export_trajectory, "Write T + 1 affordance PLY snapshots");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? dap::exit_ok : dap::exit_usage;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    const dap::RunConfig cfg = build_config(o, sub->remaining());
    const dap::Workspace ws = dap::make_workspace(cfg, o.out);
    const int threads = o.threads > 0 ? o.threads : dap::default_thread_count();

    if (sub == gen) {
      std::cout << dap::cmd_gen_data(cfg, ws, threads).dump() << '\n';
    } else if (sub == train_afford || sub == train_cap || sub == train_corr) {
      const dap::TrainTarget which = sub == train_afford ? dap::TrainTarget::afford
                                     : sub == train_cap  ? dap::TrainTarget::cap
                                                         : dap::TrainTarget::corr;
      const dap::TrainResult r = dap::cmd_train(cfg, which, ws);
      nlohmann::ordered_json j;
      j["target"] = dap::to_string(which);
      j["initial_loss"] = r.initial_loss;
      j["final_loss"] = r.final_loss;
      j["checkpoint"] = r.checkpoint.string();
      std::cout << j.dump() << '\n';
    } else if (sub == eval) {
      if (!cfg.task) throw dap::UsageError("eval needs --task shelf|cabinet");
      const dap::EvalMode mode = o.mode == "cap" ? dap::EvalMode::cap : dap::EvalMode::dap;
      const auto report = dap::cmd_eval(cfg, mode, ws, threads);
      nlohmann::ordered_json j;
      for (const char* key : {"mode", "task", "episodes", "success_rate", "modes_covered", "mean_pos_error",
                              "mean_rot_error", "multi_slot_fraction"}) {
        j[key] = report[key];
      }
      j["report"] = ws.eval_report(mode).string();
      std::cout << j.dump() << '\n';
    } else if (sub == infer) {
      std::cout << dap::cmd_infer(cfg, ws, o.scene, o.record, o.export_trajectory, threads).dump() << '\n';
    }
    return dap::exit_ok;
  } catch (const dap::Error& e) {
    std::cerr << "dap: " << e.kind() << " error: " << e.what() << '\n';
    return dap::exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "dap: error: " << e.what() << '\n';
    return dap::exit_code_for(e);
  }
}

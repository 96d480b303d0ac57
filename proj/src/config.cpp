#include "dap/config.hpp"

#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <vector>

namespace dap {

namespace {

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<nlohmann::ordered_json(const RunConfig&)> get;
};

std::string trim_quotes(const std::string& v) {
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
  return v;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  std::istringstream is(trim_quotes(text));
  T v{};
  is >> v;
  if (!is || !(is >> std::ws).eof()) throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  return v;
}

template <typename Group, typename T>
Field member(Group RunConfig::*group, T Group::*field, const std::string& key) {
  return Field{[group, field, key](RunConfig& c, const std::string& v) {
                 (c.*group).*field = parse_number<T>(key, v);
               },
               [group, field](const RunConfig& c) { return nlohmann::ordered_json((c.*group).*field); }};
}

template <typename Group>
Field text(Group RunConfig::*group, std::string Group::*field, const std::string& key) {
  return Field{[group, field, key](RunConfig& c, const std::string& v) {
                 if (v.empty()) throw ConfigError("config key '" + key + "' must not be empty");
                 (c.*group).*field = trim_quotes(v);
               },
               [group, field](const RunConfig& c) { return nlohmann::ordered_json((c.*group).*field); }};
}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = [] {
    std::vector<std::pair<std::string, Field>> t;
    t.emplace_back("task", Field{[](RunConfig& c, const std::string& v) { c.task = parse_task_kind(trim_quotes(v)); },
                                 [](const RunConfig& c) {
                                   return c.task ? nlohmann::ordered_json(to_string(*c.task)) : nlohmann::ordered_json();
                                 }});
    t.emplace_back("seed", Field{[](RunConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>("seed", v); },
                                 [](const RunConfig& c) { return nlohmann::ordered_json(c.seed); }});
    const auto add = [&t](const std::string& key, Field f) { t.emplace_back(key, std::move(f)); };
    add("label.eps_place", member(&RunConfig::label, &LabelConfig::eps_place, "label.eps_place"));
    add("label.eps_corr", member(&RunConfig::label, &LabelConfig::eps_corr, "label.eps_corr"));
    add("label.crop_scale_min", member(&RunConfig::label, &LabelConfig::crop_scale_min, "label.crop_scale_min"));
    add("label.crop_scale_max", member(&RunConfig::label, &LabelConfig::crop_scale_max, "label.crop_scale_max"));
    add("schedule.T", member(&RunConfig::schedule, &ScheduleConfig::T, "schedule.T"));
    add("schedule.beta_start", member(&RunConfig::schedule, &ScheduleConfig::beta_start, "schedule.beta_start"));
    add("schedule.beta_end", member(&RunConfig::schedule, &ScheduleConfig::beta_end, "schedule.beta_end"));
    add("denoiser.token_dim", member(&RunConfig::denoiser, &DenoiserConfig::token_dim, "denoiser.token_dim"));
    add("denoiser.num_layers", member(&RunConfig::denoiser, &DenoiserConfig::num_layers, "denoiser.num_layers"));
    add("denoiser.num_heads", member(&RunConfig::denoiser, &DenoiserConfig::num_heads, "denoiser.num_heads"));
    add("denoiser.fourier_freqs", member(&RunConfig::denoiser, &DenoiserConfig::fourier_freqs, "denoiser.fourier_freqs"));
    add("denoiser.encoder_k", member(&RunConfig::denoiser, &DenoiserConfig::encoder_k, "denoiser.encoder_k"));
    add("denoiser.time_embed_dim",
        member(&RunConfig::denoiser, &DenoiserConfig::time_embed_dim, "denoiser.time_embed_dim"));
    add("corr.token_dim", member(&RunConfig::corr, &CorrConfig::token_dim, "corr.token_dim"));
    add("corr.num_blocks", member(&RunConfig::corr, &CorrConfig::num_blocks, "corr.num_blocks"));
    add("corr.gva_k", member(&RunConfig::corr, &CorrConfig::gva_k, "corr.gva_k"));
    add("corr.gva_groups", member(&RunConfig::corr, &CorrConfig::gva_groups, "corr.gva_groups"));
    add("corr.encoder_k", member(&RunConfig::corr, &CorrConfig::encoder_k, "corr.encoder_k"));
    add("corr.gamma", member(&RunConfig::corr, &CorrConfig::gamma, "corr.gamma"));
    add("corr.match_threshold", member(&RunConfig::corr, &CorrConfig::match_threshold, "corr.match_threshold"));
    add("train.steps", member(&RunConfig::train, &TrainConfig::steps, "train.steps"));
    add("train.afford_steps", member(&RunConfig::train, &TrainConfig::afford_steps, "train.afford_steps"));
    add("train.lr", member(&RunConfig::train, &TrainConfig::lr, "train.lr"));
    add("train.batch", member(&RunConfig::train, &TrainConfig::batch, "train.batch"));
    add("train.eval_every", member(&RunConfig::train, &TrainConfig::eval_every, "train.eval_every"));
    add("infer.K", member(&RunConfig::infer, &InferConfig::K, "infer.K"));
    add("infer.collision_margin", member(&RunConfig::infer, &InferConfig::collision_margin, "infer.collision_margin"));
    add("data.scenes", member(&RunConfig::data, &DataConfig::scenes, "data.scenes"));
    add("data.demos", member(&RunConfig::data, &DataConfig::demos, "data.demos"));
    add("eval.episodes", member(&RunConfig::eval, &EvalConfig::episodes, "eval.episodes"));
    add("paths.dataset", text(&RunConfig::paths, &PathsConfig::dataset, "paths.dataset"));
    add("paths.checkpoints", text(&RunConfig::paths, &PathsConfig::checkpoints, "paths.checkpoints"));
    add("paths.reports", text(&RunConfig::paths, &PathsConfig::reports, "paths.reports"));
    return t;
  }();
  return table;
}

const Field& field(const std::string& key) {
  for (const auto& [k, f] : fields()) {
    if (k == key) return f;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

void flatten(const nlohmann::json& j, const std::string& prefix, std::vector<std::pair<std::string, nlohmann::json>>& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object()) flatten(*it, key, out);
    else out.emplace_back(key, *it);
  }
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) { field(key).set(*this, value); }

void RunConfig::apply(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  std::vector<std::pair<std::string, nlohmann::json>> flat;
  flatten(j, "", flat);
  for (const auto& [key, v] : flat) {
    if (v.is_string()) set(key, v.get<std::string>());
    else if (v.is_number_unsigned()) set(key, std::to_string(v.get<std::uint64_t>()));
    else if (v.is_number_integer()) set(key, std::to_string(v.get<std::int64_t>()));
    else if (v.is_number_float()) {
      std::ostringstream os;
      os.precision(17);
      os << v.get<double>();
      set(key, os.str());
    } else {
      throw ConfigError("config key '" + key + "' has an unsupported value " + v.dump());
    }
  }
}

nlohmann::ordered_json RunConfig::to_json() const {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [k, f] : fields()) j[k] = f.get(*this);
  return j;
}

void RunConfig::validate() const {
  try {
    label.validate();
    denoiser.validate();
    corr.validate();
    make_schedule(schedule.T, schedule.beta_start, schedule.beta_end);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  if (train.steps < 1) throw ConfigError("train.steps must be >= 1");
  if (train.afford_steps < 1) throw ConfigError("train.afford_steps must be >= 1");
  if (!(train.lr > 0.0)) throw ConfigError("train.lr must be > 0");
  if (train.batch < 1) throw ConfigError("train.batch must be >= 1");
  if (train.eval_every < 1) throw ConfigError("train.eval_every must be >= 1");
  if (infer.K < 1) throw ConfigError("infer.K must be >= 1");
  if (infer.collision_margin < 0.0) throw ConfigError("infer.collision_margin must be >= 0");
  if (data.scenes < 1 || data.demos < 1) throw ConfigError("data.scenes and data.demos must be >= 1");
  if (eval.episodes < 1) throw ConfigError("eval.episodes must be >= 1");
  if (paths.dataset.empty() || paths.checkpoints.empty() || paths.reports.empty()) {
    throw ConfigError("paths must be nonempty");
  }
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  RunConfig cfg;
  cfg.apply(j);
  return cfg;
}

std::filesystem::path resolve(const std::filesystem::path& out_dir, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : out_dir / path;
}

}  // namespace dap

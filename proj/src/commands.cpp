#include "dap/commands.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <mutex>
#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "dap/params.hpp"
#include "dap/parallel.hpp"
#include "dap/ply.hpp"
#include "dap/pose.hpp"
#include "dap/rng.hpp"

namespace dap {

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e)) return exit_usage;
  if (dynamic_cast<const NumericError*>(&e) || dynamic_cast<const ConvergenceError*>(&e) ||
      dynamic_cast<const NoCandidatesError*>(&e)) {
    return exit_numeric;
  }
  return exit_data;
}

std::string to_string(TrainTarget t) {
  switch (t) {
    case TrainTarget::afford: return "afford";
    case TrainTarget::cap: return "cap";
    case TrainTarget::corr: return "corr";
  }
  return "?";
}

std::string to_string(EvalMode m) { return m == EvalMode::dap ? "dap" : "cap"; }

std::filesystem::path Workspace::checkpoint(TrainTarget t) const { return checkpoints / (to_string(t) + ".ckpt"); }
std::filesystem::path Workspace::train_log(TrainTarget t) const {
  return reports / ("train_" + to_string(t) + ".jsonl");
}
std::filesystem::path Workspace::eval_report(EvalMode m) const { return reports / ("eval_" + to_string(m) + ".json"); }

Workspace make_workspace(const RunConfig& cfg, const std::filesystem::path& out_dir) {
  Workspace ws;
  ws.out_dir = out_dir;
  ws.dataset = resolve(out_dir, cfg.paths.dataset);
  ws.checkpoints = resolve(out_dir, cfg.paths.checkpoints);
  ws.reports = resolve(out_dir, cfg.paths.reports);
  return ws;
}

namespace {

// Tensor buffers of a few hundred KB are allocated and freed every step.
// Above glibc's default mmap threshold each one costs a mmap, page faults
// and a munmap, which was about a third of a training step.
void keep_buffers_on_heap() {
#ifdef __GLIBC__
  static std::once_flag once;
  std::call_once(once, [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
  });
#endif
}

void ensure_dir(const std::filesystem::path& dir) {
  if (dir.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw IoError("cannot create directory '" + dir.string() + "': " + (ec ? ec.message() : "not a directory"));
  }
}

std::ofstream open_out(const std::filesystem::path& path) {
  ensure_dir(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  return out;
}

NoiseSchedule schedule_of(const RunConfig& cfg) {
  return make_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end);
}

std::uint64_t init_seed(const RunConfig& cfg, TrainTarget t) {
  return mix_seed(cfg.seed, 0xA000 + static_cast<std::uint64_t>(t));
}

AffordanceMode mode_of(TrainTarget t) {
  return t == TrainTarget::cap ? AffordanceMode::classification : AffordanceMode::diffusion;
}

Meta checkpoint_meta(const RunConfig& cfg, TrainTarget which, TaskKind kind) {
  return {{"target", to_string(which)}, {"task", to_string(kind)}, {"config", cfg.to_json().dump()}};
}

Checkpoint read_checkpoint(const std::filesystem::path& path, TrainTarget expected) {
  if (!std::filesystem::exists(path)) throw IoError("missing checkpoint '" + path.string() + "'");
  Checkpoint ck = load_checkpoint(path);
  const auto it = ck.meta.find("target");
  if (it == ck.meta.end() || it->second != to_string(expected)) {
    throw FormatError("checkpoint '" + path.string() + "' does not hold a " + to_string(expected) + " model");
  }
  return ck;
}

AffordanceModel load_afford(const RunConfig& cfg, const Workspace& ws, TrainTarget which, TaskKind* kind) {
  const Checkpoint ck = read_checkpoint(ws.checkpoint(which), which);
  AffordanceModel model(cfg.denoiser, init_seed(cfg, which), mode_of(which));
  model.params().assign(ck.params);
  if (kind) *kind = parse_task_kind(ck.meta.at("task"));
  return model;
}

CorrModel load_corr(const RunConfig& cfg, const Workspace& ws) {
  const Checkpoint ck = read_checkpoint(ws.checkpoint(TrainTarget::corr), TrainTarget::corr);
  CorrModel model(cfg.corr, init_seed(cfg, TrainTarget::corr));
  model.params().assign(ck.params);
  return model;
}

double mean_of(const std::vector<double>& v, std::size_t begin, std::size_t end) {
  return std::accumulate(v.begin() + static_cast<std::ptrdiff_t>(begin), v.begin() + static_cast<std::ptrdiff_t>(end),
                         0.0) /
         static_cast<double>(end - begin);
}

Eigen::VectorXd normal_vector(Rng& rng, Eigen::Index n) {
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = rng.normal();
  return v;
}

// One optimisation target: returns the loss of one randomly drawn example.
using ExampleLoss = std::function<Tensor(Rng&)>;

}  // namespace

nlohmann::ordered_json cmd_gen_data(const RunConfig& cfg, const Workspace& ws, int threads) {
  if (!cfg.task) throw UsageError("gen-data needs --task shelf|cabinet");
  cfg.validate();
  ensure_dir(ws.dataset.parent_path());
  const DatasetSummary s =
      gen_dataset(*cfg.task, cfg.data.scenes, cfg.data.demos, cfg.seed, ws.dataset, cfg.label, threads);
  nlohmann::ordered_json j;
  j["task"] = to_string(*cfg.task);
  j["records"] = s.records;
  j["affordance_positive_fraction"] = s.affordance_positive_fraction;
  j["correspondence_positive_fraction"] = s.correspondence_positive_fraction;
  j["path"] = ws.dataset.string();
  return j;
}

TrainResult cmd_train(const RunConfig& cfg, TrainTarget which, const Workspace& ws) {
  keep_buffers_on_heap();
  cfg.validate();
  if (!std::filesystem::exists(ws.dataset)) throw IoError("missing dataset '" + ws.dataset.string() + "'");
  const std::vector<DatasetRecord> records = read_dataset(ws.dataset);
  const TaskKind kind = records.front().kind;
  for (const auto& r : records) {
    if (r.kind != kind) throw FormatError("dataset mixes task kinds");
  }
  if (cfg.task && *cfg.task != kind) {
    throw ConfigError("dataset holds " + to_string(kind) + " records but the task is " + to_string(*cfg.task));
  }
  const NoiseSchedule sched = schedule_of(cfg);
  const int n_records = static_cast<int>(records.size());

  std::optional<AffordanceModel> afford;
  std::optional<CorrModel> corr;
  ParamStore* params = nullptr;
  ExampleLoss example;

  std::vector<AffordanceModel::Inputs> inputs;
  std::vector<AffordanceField> labels;
  if (which == TrainTarget::corr) {
    corr.emplace(cfg.corr, init_seed(cfg, which));
    params = &corr->params();
    const int min_crop = std::max(cfg.corr.gva_k, cfg.corr.encoder_k);
    example = [&, min_crop](Rng& rng) {
      for (int attempt = 0; attempt < 64; ++attempt) {
        const DatasetRecord& rec = records[static_cast<std::size_t>(rng.uniform_int(0, n_records - 1))];
        std::vector<int> idx;
        try {
          idx = sample_demo_crop_indices(rec.demo.container, rec.demo.object, rec.demo.goal, cfg.label, rng.next());
        } catch (const DegenerateDemoError&) {
          continue;
        }
        if (static_cast<int>(idx.size()) < min_crop) continue;
        const PointCloud crop = select(rec.demo.container, std::span<const int>(idx));
        const CorrespondenceMatrix label = label_correspondence(crop, rec.demo.object, rec.demo.goal, cfg.label);
        return focal_loss(corr->forward(crop, rec.demo.object), label, cfg.corr.gamma);
      }
      throw FormatError("train-corr: no usable demonstration crop in 64 draws");
    };
  } else {
    afford.emplace(cfg.denoiser, init_seed(cfg, which), mode_of(which));
    params = &afford->params();
    for (const auto& rec : records) {
      inputs.push_back(afford->prepare(rec.demo.container));
      labels.push_back(label_affordance(rec.demo, cfg.label));
    }
    if (which == TrainTarget::afford) {
      example = [&](Rng& rng) {
        const auto i = static_cast<std::size_t>(rng.uniform_int(0, n_records - 1));
        const int t = rng.uniform_int(1, sched.T);
        const Eigen::VectorXd eps = normal_vector(rng, labels[i].size());
        return ddpm_loss(afford->trainable_predictor(inputs[i]), labels[i], t, eps, sched);
      };
    } else {
      example = [&](Rng& rng) {
        const auto i = static_cast<std::size_t>(rng.uniform_int(0, n_records - 1));
        return cap_loss(*afford, inputs[i], labels[i]);
      };
    }
  }

  ensure_dir(ws.checkpoints);
  std::ofstream log = open_out(ws.train_log(which));
  AdamConfig adam;
  adam.lr = cfg.train.lr;
  AdamState state(*params, adam);
  Rng rng(mix_seed(cfg.seed, 0xB000 + static_cast<std::uint64_t>(which)));

  const int steps = which == TrainTarget::afford ? cfg.train.afford_steps : cfg.train.steps;
  std::vector<double> losses;
  losses.reserve(static_cast<std::size_t>(steps));
  const auto start = std::chrono::steady_clock::now();
  std::size_t logged = 0;
  for (int step = 1; step <= steps; ++step) {
    const double progress = static_cast<double>(step - 1) / std::max(1, steps - 1);
    state.config.lr = cfg.train.lr * (0.05 + 0.95 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
    Tensor loss = scale(example(rng), 1.0 / cfg.train.batch);
    for (int b = 1; b < cfg.train.batch; ++b) loss = add(loss, scale(example(rng), 1.0 / cfg.train.batch));
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw NumericError("train-" + to_string(which) + ": non-finite loss at step " + std::to_string(step));
    }
    backward(loss, *params);
    adam_step(*params, state);
    losses.push_back(value);
    if (step % cfg.train.eval_every == 0 || step == steps) {
      const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start);
      nlohmann::ordered_json line;
      line["step"] = step;
      line["loss"] = mean_of(losses, logged, losses.size());
      line["wall_ms"] = ms.count();
      log << line.dump() << '\n';
      log.flush();
      logged = losses.size();
    }
  }

  TrainResult result;
  const std::size_t window = std::min<std::size_t>(100, losses.size());
  result.initial_loss = mean_of(losses, 0, window);
  result.final_loss = mean_of(losses, losses.size() - window, losses.size());
  // The classification ablation keeps an irreducible multi-modal floor, so
  // it only has to improve on its start.
  result.converged = which == TrainTarget::cap ? result.final_loss < result.initial_loss
                                               : result.final_loss <= 0.5 * result.initial_loss;
  result.checkpoint = ws.checkpoint(which);

  Meta meta = checkpoint_meta(cfg, which, kind);
  meta["steps"] = std::to_string(steps);
  save_checkpoint(result.checkpoint, *params, meta);
  if (!result.converged) {
    throw ConvergenceError("train-" + to_string(which) + " did not converge: final loss " +
                           std::to_string(result.final_loss) + " vs initial " + std::to_string(result.initial_loss));
  }
  return result;
}

SlotCoverage slot_coverage(const SceneSpec& scene, const AffordanceField& scores, const LabelConfig& labels) {
  SlotCoverage cov;
  double best = -1.0;
  for (int k = 0; k < scene.slot_count; ++k) {
    const Demonstration d{scene.container, scene.object_template, scene.slot_poses[static_cast<std::size_t>(k)], k};
    const AffordanceField region = label_affordance(d, labels);
    int total = 0, marked = 0;
    for (Eigen::Index i = 0; i < region.size(); ++i) {
      if (region(i) > 0.0) {
        ++total;
        if (scores(i) >= 0.0) ++marked;
      }
    }
    const double frac = total ? static_cast<double>(marked) / total : 0.0;
    if (frac >= 0.5) {
      ++cov.covered;
      if (frac > best) {
        best = frac;
        cov.dominant = k;
      }
    }
  }
  return cov;
}

namespace {

struct EpisodeRecord {
  EpisodeResult result;
  bool has_pose = false;
  int slots_marked = 0;
  int candidates = 0;
  std::string failure;
};

}  // namespace

nlohmann::ordered_json cmd_eval(const RunConfig& cfg, EvalMode mode, const Workspace& ws, int threads) {
  keep_buffers_on_heap();
  cfg.validate();
  const TrainTarget afford_target = mode == EvalMode::dap ? TrainTarget::afford : TrainTarget::cap;
  TaskKind trained_kind{};
  const AffordanceModel afford = load_afford(cfg, ws, afford_target, &trained_kind);
  const CorrModel corr = load_corr(cfg, ws);
  const TaskKind kind = cfg.task.value_or(trained_kind);
  const NoiseSchedule sched = schedule_of(cfg);

  const int episodes = cfg.eval.episodes;
  std::vector<EpisodeRecord> out(static_cast<std::size_t>(episodes));
  int max_slots = 0;
  std::vector<int> slot_counts(static_cast<std::size_t>(episodes));

  parallel_for(episodes, threads, [&](int e) {
    const std::uint64_t seed = heldout_seed(cfg.seed, e);
    const SceneSpec scene = gen_scene(kind, seed);
    const PointCloud object = sample_demonstration(scene, mix_seed(seed, 0xE0)).demo.object;
    EpisodeRecord& rec = out[static_cast<std::size_t>(e)];
    slot_counts[static_cast<std::size_t>(e)] = scene.slot_count;

    InferenceOptions opts;
    opts.K = mode == EvalMode::dap ? cfg.infer.K : 1;
    opts.collision_margin = cfg.infer.collision_margin;
    opts.match_threshold = cfg.corr.match_threshold;
    opts.min_crop_points = std::max(cfg.corr.gva_k, cfg.corr.encoder_k);

    std::vector<AffordanceField> fields(static_cast<std::size_t>(opts.K));
    AffordanceSampler sampler;
    if (mode == EvalMode::dap) {
      const NoisePredictor predictor = afford.frozen_predictor(scene.container);
      sampler = [&fields, predictor, &sched, seed](const PointCloud& pc, std::uint64_t s) {
        AffordanceField f = sample_affordance(predictor, static_cast<int>(pc.size()), sched, s, false).clamped;
        fields[static_cast<std::size_t>(s - seed)] = f;
        return f;
      };
    } else {
      const AffordanceField scores = cap_predict(afford, scene.container);
      sampler = [&fields, scores](const PointCloud&, std::uint64_t) {
        fields[0] = scores;
        return scores;
      };
    }
    const CorrPredictor corr_fn = [&corr](const PointCloud& crop, const PointCloud& obj) {
      return corr.predict(crop, obj);
    };
    try {
      const InferenceResult res = infer_storage_pose(sampler, corr_fn, scene.container, object, opts, seed);
      rec.result = evaluate_placement(scene, res.best.transform, object);
      rec.has_pose = true;
      rec.candidates = static_cast<int>(res.ranked.size());
    } catch (const NoCandidatesError& err) {
      rec.failure = err.what();
    }
    rec.slots_marked = slot_coverage(scene, fields[0], cfg.label).covered;
  });
  for (int c : slot_counts) max_slots = std::max(max_slots, c);

  int successes = 0, with_pose = 0, multi = 0, single = 0;
  double pos_sum = 0.0, rot_sum = 0.0;
  std::vector<int> histogram(static_cast<std::size_t>(max_slots), 0);
  nlohmann::ordered_json detail = nlohmann::ordered_json::array();
  for (int e = 0; e < episodes; ++e) {
    const EpisodeRecord& rec = out[static_cast<std::size_t>(e)];
    if (rec.result.success) ++successes;
    if (rec.slots_marked >= 2) ++multi;
    if (rec.slots_marked == 1) ++single;
    if (rec.has_pose) {
      ++with_pose;
      pos_sum += rec.result.pos_error;
      rot_sum += rec.result.rot_error;
    }
    if (rec.result.matched_mode) ++histogram[static_cast<std::size_t>(*rec.result.matched_mode)];
    nlohmann::ordered_json d;
    d["episode"] = e;
    d["success"] = rec.result.success;
    d["matched_mode"] =
        rec.result.matched_mode ? nlohmann::ordered_json(*rec.result.matched_mode) : nlohmann::ordered_json();
    if (rec.has_pose) {
      d["pos_error"] = rec.result.pos_error;
      d["rot_error"] = rec.result.rot_error;
      d["collision_points"] = rec.result.collision_points;
      d["candidates"] = rec.candidates;
    } else {
      d["failure"] = rec.failure;
    }
    d["slots_marked"] = rec.slots_marked;
    detail.push_back(d);
  }

  nlohmann::ordered_json report;
  report["mode"] = to_string(mode);
  report["task"] = to_string(kind);
  report["episodes"] = episodes;
  report["K"] = mode == EvalMode::dap ? cfg.infer.K : 1;
  report["successes"] = successes;
  report["success_rate"] = static_cast<double>(successes) / episodes;
  report["episodes_without_candidate"] = episodes - with_pose;
  report["mode_histogram"] = histogram;
  report["modes_covered"] = std::count_if(histogram.begin(), histogram.end(), [](int c) { return c > 0; });
  report["mean_pos_error"] = with_pose ? nlohmann::ordered_json(pos_sum / with_pose) : nlohmann::ordered_json();
  report["mean_rot_error"] = with_pose ? nlohmann::ordered_json(rot_sum / with_pose) : nlohmann::ordered_json();
  report["multi_slot_fraction"] = static_cast<double>(multi) / episodes;
  report["single_slot_fraction"] = static_cast<double>(single) / episodes;
  report["success_criterion"] =
      "geometric proxy: nearest slot within pos_tol and rot_tol (modulo object symmetry) and no container point "
      "strictly inside the placed object's bounding box";
  report["config"] = cfg.to_json();
  report["episodes_detail"] = detail;

  std::ofstream f = open_out(ws.eval_report(mode));
  f << report.dump(2) << '\n';
  if (!f) throw IoError("failed writing '" + ws.eval_report(mode).string() + "'");
  return report;
}

nlohmann::ordered_json cmd_infer(const RunConfig& cfg, const Workspace& ws, const std::filesystem::path& scene_file,
                                 int record, bool export_trajectory, int threads) {
  keep_buffers_on_heap();
  cfg.validate();
  const AffordanceModel afford = load_afford(cfg, ws, TrainTarget::afford, nullptr);
  const CorrModel corr = load_corr(cfg, ws);
  const std::vector<DatasetRecord> records = read_dataset(scene_file);
  if (record < 0 || record >= static_cast<int>(records.size())) {
    throw ConfigError("scene file has " + std::to_string(records.size()) + " records, asked for #" +
                      std::to_string(record));
  }
  const DatasetRecord& rec = records[static_cast<std::size_t>(record)];
  const NoiseSchedule sched = schedule_of(cfg);

  InferenceOptions opts;
  opts.K = cfg.infer.K;
  opts.collision_margin = cfg.infer.collision_margin;
  opts.match_threshold = cfg.corr.match_threshold;
  opts.min_crop_points = std::max(cfg.corr.gva_k, cfg.corr.encoder_k);
  opts.threads = threads;
  const InferenceResult res = infer_storage_pose(afford, corr, rec.demo.container, rec.demo.object, sched, opts, cfg.seed);

  nlohmann::ordered_json j;
  nlohmann::ordered_json rot = nlohmann::ordered_json::array();
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) rot.push_back(res.best.transform.rotation(r, c));
  }
  const Vec3& t = res.best.transform.translation;
  j["rotation"] = rot;
  j["translation"] = {t(0), t(1), t(2)};
  j["collisions"] = res.best.collision_count;
  j["rank_size"] = res.ranked.size();
  j["match_count"] = res.best.match_count;
  j["sample_index"] = res.best.sample_index;
  nlohmann::ordered_json failures = nlohmann::ordered_json::array();
  for (const auto& f : res.failures) failures.push_back({{"sample_index", f.sample_index}, {"kind", f.kind}});
  j["failures"] = failures;

  if (export_trajectory) {
    const auto dir = ws.out_dir / "trajectory";
    ensure_dir(dir);
    const AffordanceSample sample =
        sample_affordance(afford.frozen_predictor(rec.demo.container), static_cast<int>(rec.demo.container.size()),
                          sched, cfg.seed + static_cast<std::uint64_t>(res.best.sample_index), true);
    PointCloud pc = rec.demo.container;
    for (std::size_t i = 0; i < sample.trajectory.size(); ++i) {
      const int step = sched.T - static_cast<int>(i);
      char name[32];
      std::snprintf(name, sizeof name, "afford_t%03d.ply", step);
      pc.scores = sample.trajectory[i];
      write_ply(dir / name, pc, PlyFormat::binary_little_endian);
    }
    j["trajectory_dir"] = dir.string();
    j["trajectory_files"] = sample.trajectory.size();
  }
  return j;
}

}  // namespace dap

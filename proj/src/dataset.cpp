#include "dap/dataset.hpp"

#include <fstream>

#include "dap/parallel.hpp"
#include "dap/rng.hpp"

namespace dap {

namespace {

nlohmann::ordered_json rows_to_json(const Points3& m) {
  nlohmann::ordered_json a = nlohmann::ordered_json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) a.push_back({m(i, 0), m(i, 1), m(i, 2)});
  return a;
}

Points3 rows_from_json(const nlohmann::json& a, const char* what) {
  if (!a.is_array()) throw FormatError(std::string("dataset: '") + what + "' must be an array");
  Points3 m(static_cast<Eigen::Index>(a.size()), 3);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& row = a[i];
    if (!row.is_array() || row.size() != 3) throw FormatError(std::string("dataset: '") + what + "' rows need 3 numbers");
    for (int c = 0; c < 3; ++c) {
      if (!row[static_cast<std::size_t>(c)].is_number()) throw FormatError(std::string("dataset: non-numeric ") + what);
      m(static_cast<Eigen::Index>(i), c) = row[static_cast<std::size_t>(c)].get<double>();
    }
  }
  return m;
}

const nlohmann::json& require(const nlohmann::json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) throw FormatError(std::string("dataset: missing field '") + key + "'");
  return j.at(key);
}

std::vector<double> numbers(const nlohmann::json& a, std::size_t n, const char* what) {
  if (!a.is_array() || a.size() != n) {
    throw FormatError(std::string("dataset: '") + what + "' needs " + std::to_string(n) + " numbers");
  }
  std::vector<double> v;
  for (const auto& x : a) {
    if (!x.is_number()) throw FormatError(std::string("dataset: non-numeric ") + what);
    v.push_back(x.get<double>());
  }
  return v;
}

}  // namespace

nlohmann::ordered_json cloud_to_json(const PointCloud& pc) {
  return {{"positions", rows_to_json(pc.positions)}, {"normals", rows_to_json(pc.normals)}};
}

PointCloud cloud_from_json(const nlohmann::json& j) {
  PointCloud pc(rows_from_json(require(j, "positions"), "positions"), rows_from_json(require(j, "normals"), "normals"));
  try {
    pc.validate(1e-6);
  } catch (const ShapeError& e) {
    throw FormatError(std::string("dataset: ") + e.what());
  }
  return pc;
}

nlohmann::ordered_json record_to_json(const DatasetRecord& rec) {
  nlohmann::ordered_json j;
  j["container"] = cloud_to_json(rec.demo.container);
  j["object"] = cloud_to_json(rec.demo.object);
  nlohmann::ordered_json rot = nlohmann::ordered_json::array();
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) rot.push_back(rec.demo.goal.rotation(r, c));
  }
  const Vec3& t = rec.demo.goal.translation;
  j["goal"] = {{"rotation", rot}, {"translation", {t(0), t(1), t(2)}}};
  j["mode_id"] = rec.demo.mode_id ? nlohmann::ordered_json(*rec.demo.mode_id) : nlohmann::ordered_json();
  j["scene_meta"] = {{"kind", to_string(rec.kind)}, {"slot_count", rec.slot_count}};
  return j;
}

DatasetRecord record_from_json(const nlohmann::json& j) {
  DatasetRecord rec;
  rec.demo.container = cloud_from_json(require(j, "container"));
  rec.demo.object = cloud_from_json(require(j, "object"));
  const auto& goal = require(j, "goal");
  const auto r = numbers(require(goal, "rotation"), 9, "goal.rotation");
  const auto t = numbers(require(goal, "translation"), 3, "goal.translation");
  for (int i = 0; i < 9; ++i) rec.demo.goal.rotation(i / 3, i % 3) = r[static_cast<std::size_t>(i)];
  rec.demo.goal.translation = Vec3(t[0], t[1], t[2]);
  if (!rec.demo.goal.is_valid(1e-6)) throw FormatError("dataset: goal is not a rigid transform");
  const auto& mode = require(j, "mode_id");
  if (!mode.is_null()) {
    if (!mode.is_number_integer()) throw FormatError("dataset: mode_id must be an integer or null");
    rec.demo.mode_id = mode.get<int>();
  }
  const auto& meta = require(j, "scene_meta");
  const auto& kind = require(meta, "kind");
  if (!kind.is_string()) throw FormatError("dataset: scene_meta.kind must be a string");
  try {
    rec.kind = parse_task_kind(kind.get<std::string>());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("dataset: ") + e.what());
  }
  const auto& slots = require(meta, "slot_count");
  if (!slots.is_number_integer()) throw FormatError("dataset: scene_meta.slot_count must be an integer");
  rec.slot_count = slots.get<int>();
  return rec;
}

void write_dataset(const std::filesystem::path& path, const std::vector<DatasetRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  for (const auto& rec : records) out << record_to_json(rec).dump() << '\n';
  out.flush();
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

std::vector<DatasetRecord> read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset '" + path.string() + "'");
  std::vector<DatasetRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      records.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (records.empty()) throw FormatError("dataset '" + path.string() + "' has no records");
  return records;
}

std::uint64_t scene_seed(std::uint64_t seed, int scene_index) {
  return mix_seed(seed, 0x5CE0000ull + static_cast<std::uint64_t>(scene_index));
}

std::uint64_t demo_seed(std::uint64_t seed, int scene_index, int demo_index) {
  return mix_seed(scene_seed(seed, scene_index), 0xDE300ull + static_cast<std::uint64_t>(demo_index));
}

std::uint64_t heldout_seed(std::uint64_t seed, int episode) {
  return seed + 10000 + static_cast<std::uint64_t>(episode);
}

DatasetSummary gen_dataset(TaskKind kind, int n_scenes, int demos_per_scene, std::uint64_t seed,
                           const std::filesystem::path& out_path, const LabelConfig& labels, int threads) {
  if (n_scenes < 1 || demos_per_scene < 1) throw ConfigError("gen_dataset: need at least one scene and one demo");
  labels.validate();
  const auto n = static_cast<std::size_t>(n_scenes) * static_cast<std::size_t>(demos_per_scene);
  std::vector<DatasetRecord> records(n);
  std::vector<double> aff_pos(n), aff_total(n), corr_pos(n), corr_total(n);
  parallel_for(n_scenes, threads, [&](int s) {
    const SceneSpec scene = gen_scene(kind, scene_seed(seed, s));
    for (int d = 0; d < demos_per_scene; ++d) {
      const std::size_t i = static_cast<std::size_t>(s) * static_cast<std::size_t>(demos_per_scene) +
                            static_cast<std::size_t>(d);
      const std::uint64_t ds = demo_seed(seed, s, d);
      DatasetRecord& rec = records[i];
      rec.demo = sample_demonstration(scene, ds).demo;
      rec.kind = kind;
      rec.slot_count = scene.slot_count;
      const AffordanceField aff = label_affordance(rec.demo, labels);
      aff_pos[i] = static_cast<double>((aff.array() > 0.0).count());
      aff_total[i] = static_cast<double>(aff.size());
      const PointCloud crop = sample_demo_crop(rec.demo.container, rec.demo.object, rec.demo.goal, labels, ds);
      const CorrespondenceMatrix c = label_correspondence(crop, rec.demo.object, rec.demo.goal, labels);
      corr_pos[i] = c.sum();
      corr_total[i] = static_cast<double>(c.size());
    }
  });
  write_dataset(out_path, records);

  DatasetSummary summary;
  summary.records = n;
  double ap = 0, at = 0, cp = 0, ct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ap += aff_pos[i];
    at += aff_total[i];
    cp += corr_pos[i];
    ct += corr_total[i];
  }
  summary.affordance_positive_fraction = ap / at;
  summary.correspondence_positive_fraction = cp / ct;
  return summary;
}

}  // namespace dap

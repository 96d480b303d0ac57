#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "dap/env.hpp"

namespace dap {

// One demonstration as stored on disk (one JSON line each).
struct DatasetRecord {
  Demonstration demo;
  TaskKind kind = TaskKind::shelf;
  int slot_count = 0;
};

nlohmann::ordered_json cloud_to_json(const PointCloud& pc);
PointCloud cloud_from_json(const nlohmann::json& j);  // throws FormatError

nlohmann::ordered_json record_to_json(const DatasetRecord& rec);
DatasetRecord record_from_json(const nlohmann::json& j);  // throws FormatError

void write_dataset(const std::filesystem::path& path, const std::vector<DatasetRecord>& records);
std::vector<DatasetRecord> read_dataset(const std::filesystem::path& path);

struct DatasetSummary {
  std::size_t records = 0;
  double affordance_positive_fraction = 0.0;
  double correspondence_positive_fraction = 0.0;  // over demo crops
};

// Seeds of the procedural draws; training scenes are mixed from the run
// seed, held-out scenes use seed + 10000 + episode.
std::uint64_t scene_seed(std::uint64_t seed, int scene_index);
std::uint64_t demo_seed(std::uint64_t seed, int scene_index, int demo_index);
std::uint64_t heldout_seed(std::uint64_t seed, int episode);

// n_scenes x demos_per_scene demonstrations, written to out_path in scene
// then demo order. The result depends only on the arguments.
DatasetSummary gen_dataset(TaskKind kind, int n_scenes, int demos_per_scene, std::uint64_t seed,
                           const std::filesystem::path& out_path, const LabelConfig& labels = {}, int threads = 1);

}  // namespace dap

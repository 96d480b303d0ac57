#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dap/labeling.hpp"

namespace dap {

enum class TaskKind { shelf, cabinet };

std::string to_string(TaskKind kind);
TaskKind parse_task_kind(const std::string& s);  // throws ConfigError

// Rotations that map the object template onto itself.
enum class Symmetry {
  box,       // the three half-turns about the body axes
  cylinder,  // any rotation about the body z axis, plus the flip
};

struct Tolerances {
  double pos_tol = 0.02;
  double rot_tol = 0.2;
};

struct SceneSpec {
  TaskKind kind = TaskKind::shelf;
  int slot_count = 0;
  std::vector<RigidTransform> slot_poses;  // template frame -> world, one per goal mode
  PointCloud container;                    // superpoints
  PointCloud object_template;              // superpoints of a shape centred at the origin
  Tolerances tolerances;
  Symmetry symmetry = Symmetry::box;
  int raw_container_points = 0;  // before clustering

  // Throws ConfigError when a structural invariant is broken.
  void validate() const;
};

struct ShelfParams {
  int slot_count = 4;
  double slot_gap = 0.11;        // mean inner width of a slot
  double jitter = 0.01;          // each gap is drawn from slot_gap +- jitter
  double min_clearance = 0.04;   // required gap minus object width
  Vec3 book_size{0.06, 0.14, 0.18};
  double hover = 0.015;    // book bottom above the base at a slot pose
  double back_gap = 0.02;  // book back face to the back panel
  int raw_points = 2400;
  double container_voxel = 0.05;
  double object_voxel = 0.03;
  int object_raw_points = 1200;
};

struct CabinetParams {
  int levels = 2;
  int stands_per_level = 2;
  double inner_width = 0.40;
  double inner_depth = 0.16;
  double clear_height = 0.16;
  double stand_jitter = 0.02;
  double radius = 0.035;
  double height = 0.13;
  double hover = 0.015;
  double back_gap = 0.02;
  int raw_points = 2400;
  double container_voxel = 0.05;
  double object_voxel = 0.03;
  int object_raw_points = 1200;
};

SceneSpec gen_shelf_scene(std::uint64_t seed, const ShelfParams& params = {});
SceneSpec gen_cabinet_scene(std::uint64_t seed, const CabinetParams& params = {});
SceneSpec gen_scene(TaskKind kind, std::uint64_t seed);

struct DemoParams {
  // Goal jitter as a fraction of the admissible bound (pos_tol / 2 and
  // rot_tol / 2). Zero reproduces the slot pose exactly.
  double jitter_fraction = 0.5;
  // Yaw range of the object's initial pose.
  double init_yaw = 0.7853981633974483;
};

// Demonstration over a scene plus the initial object pose it was built from.
struct DemoSample {
  Demonstration demo;
  RigidTransform initial;  // template frame -> object cloud frame
  int slot = 0;
};

// Picks a slot uniformly, jitters its pose (horizontal offset and yaw only)
// and places the object template at a random initial pose. For the
// cylinder the recorded goal is the yaw-free equivalent, so the object is
// only translated.
DemoSample sample_demonstration(const SceneSpec& scene, std::uint64_t seed, const DemoParams& params = {});

struct EpisodeResult {
  bool success = false;
  std::optional<int> matched_mode;
  int collision_points = 0;
  double pos_error = 0.0;
  double rot_error = 0.0;
};

// Geodesic distance between two rotations, modulo the symmetry group.
double rotation_error(const Mat3& a, const Mat3& b, Symmetry symmetry);

// `object` is the cloud that `predicted` maps (the template at some initial
// pose). The nearest slot by translation is compared against the effective
// template pose; success also needs zero container points strictly inside
// the placed object's bounding box.
EpisodeResult evaluate_placement(const SceneSpec& scene, const RigidTransform& predicted, const PointCloud& object);

}  // namespace dap

#include "dap/env.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dap/pose.hpp"
#include "dap/rng.hpp"

namespace dap {

std::string to_string(TaskKind kind) { return kind == TaskKind::shelf ? "shelf" : "cabinet"; }

TaskKind parse_task_kind(const std::string& s) {
  if (s == "shelf") return TaskKind::shelf;
  if (s == "cabinet") return TaskKind::cabinet;
  throw ConfigError("unknown task '" + s + "' (expected shelf or cabinet)");
}

void SceneSpec::validate() const {
  if (slot_count < 2) throw ConfigError("scene needs at least 2 slots");
  if (static_cast<int>(slot_poses.size()) != slot_count) throw ConfigError("scene slot pose count mismatch");
  for (size_t i = 0; i < slot_poses.size(); ++i) {
    if (!slot_poses[i].is_valid()) throw ConfigError("scene slot pose is not rigid");
    for (size_t j = i + 1; j < slot_poses.size(); ++j) {
      if ((slot_poses[i].translation - slot_poses[j].translation).norm() <= 2.0 * tolerances.pos_tol) {
        throw ConfigError("scene slots " + std::to_string(i) + " and " + std::to_string(j) + " are too close");
      }
    }
  }
  if (raw_container_points < 400) throw ConfigError("scene container has fewer than 400 raw points");
  container.validate(1e-6);
  object_template.validate(1e-6);
}

namespace {

constexpr double kThickness = 0.02;

Mat3 rot_z(double a) { return Eigen::AngleAxisd(a, Vec3::UnitZ()).toRotationMatrix(); }

struct Part {
  Vec3 lo, hi;
};

struct Sampler {
  std::vector<Vec3> p, n;
  void add(const Vec3& pos, const Vec3& nrm) {
    p.push_back(pos);
    n.push_back(nrm);
  }
  PointCloud cloud() const {
    PointCloud pc;
    pc.positions.resize(static_cast<Eigen::Index>(p.size()), 3);
    pc.normals.resize(static_cast<Eigen::Index>(n.size()), 3);
    for (size_t i = 0; i < p.size(); ++i) {
      pc.positions.row(static_cast<Eigen::Index>(i)) = p[i].transpose();
      pc.normals.row(static_cast<Eigen::Index>(i)) = n[i].transpose();
    }
    return pc;
  }
};

bool inside_other(const std::vector<Part>& parts, size_t self, const Vec3& q) {
  constexpr double tol = 1e-9;
  for (size_t i = 0; i < parts.size(); ++i) {
    if (i == self) continue;
    if ((q.array() > parts[i].lo.array() - tol).all() && (q.array() < parts[i].hi.array() + tol).all()) return true;
  }
  return false;
}

PointCloud concat(const std::vector<PointCloud>& clouds) {
  Eigen::Index n = 0;
  for (const auto& c : clouds) n += c.size();
  PointCloud out;
  out.positions.resize(n, 3);
  out.normals.resize(n, 3);
  Eigen::Index r = 0;
  for (const auto& c : clouds) {
    out.positions.middleRows(r, c.size()) = c.positions;
    out.normals.middleRows(r, c.size()) = c.normals;
    r += c.size();
  }
  return out;
}

// Uniform samples on the union surface of the parts, one cloud per face.
// Outer faces are sampled only when they look to the front or up.
std::vector<PointCloud> sample_parts(const std::vector<Part>& parts, int total, Rng& rng, bool all_faces = false) {
  Vec3 lo = parts.front().lo, hi = parts.front().hi;
  for (const auto& p : parts) {
    lo = lo.cwiseMin(p.lo);
    hi = hi.cwiseMax(p.hi);
  }
  struct Face {
    size_t part;
    int axis;
    int side;
    double area;
  };
  std::vector<Face> faces;
  double area_sum = 0.0;
  for (size_t i = 0; i < parts.size(); ++i) {
    const Vec3 ext = parts[i].hi - parts[i].lo;
    for (int axis = 0; axis < 3; ++axis) {
      for (int side = -1; side <= 1; side += 2) {
        const double coord = side > 0 ? parts[i].hi(axis) : parts[i].lo(axis);
        const bool outer = side > 0 ? coord >= hi(axis) - 1e-12 : coord <= lo(axis) + 1e-12;
        const bool visible = (axis == 1 && side < 0) || (axis == 2 && side > 0);
        if (outer && !visible && !all_faces) continue;
        const double area = ext((axis + 1) % 3) * ext((axis + 2) % 3);
        faces.push_back({i, axis, side, area});
        area_sum += area;
      }
    }
  }
  std::vector<PointCloud> out;
  for (const auto& f : faces) {
    const int count = static_cast<int>(std::lround(total * f.area / area_sum));
    const Part& part = parts[f.part];
    Vec3 normal = Vec3::Zero();
    normal(f.axis) = f.side;
    Sampler s;
    for (int c = 0; c < count; ++c) {
      Vec3 q;
      for (int a = 0; a < 3; ++a) q(a) = rng.uniform(part.lo(a), part.hi(a));
      q(f.axis) = f.side > 0 ? part.hi(f.axis) : part.lo(f.axis);
      if (!inside_other(parts, f.part, q)) s.add(q, normal);
    }
    if (!s.p.empty()) out.push_back(s.cloud());
  }
  return out;
}

std::vector<PointCloud> sample_box(const Vec3& size, int total, Rng& rng) {
  const Vec3 h = size / 2.0;
  return sample_parts({Part{-h, h}}, total, rng, true);
}

std::vector<PointCloud> sample_cylinder(double radius, double height, int total, Rng& rng) {
  const double side = 2.0 * std::numbers::pi * radius * height;
  const double cap = std::numbers::pi * radius * radius;
  const double area = side + 2.0 * cap;
  std::vector<PointCloud> out;
  Sampler s;
  const int n_side = static_cast<int>(std::lround(total * side / area));
  const int n_cap = static_cast<int>(std::lround(total * cap / area));
  for (int i = 0; i < n_side; ++i) {
    const double a = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double z = rng.uniform(-height / 2.0, height / 2.0);
    s.add(Vec3(radius * std::cos(a), radius * std::sin(a), z), Vec3(std::cos(a), std::sin(a), 0.0));
  }
  out.push_back(s.cloud());
  for (int sign = -1; sign <= 1; sign += 2) {
    Sampler c;
    for (int i = 0; i < n_cap; ++i) {
      const double a = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double r = radius * std::sqrt(rng.uniform());
      c.add(Vec3(r * std::cos(a), r * std::sin(a), sign * height / 2.0), Vec3(0.0, 0.0, sign));
    }
    out.push_back(c.cloud());
  }
  return out;
}

// Superpoints never straddle two surfaces: each sampled surface patch is
// voxel-clustered on its own and the results are concatenated.
PointCloud cluster_surfaces(const std::vector<PointCloud>& surfaces, double voxel, int* raw_count = nullptr) {
  std::vector<PointCloud> clustered;
  int raw = 0;
  for (const auto& s : surfaces) {
    raw += static_cast<int>(s.size());
    clustered.push_back(superpoint_cluster(s, voxel));
  }
  if (raw_count) *raw_count = raw;
  return concat(clustered);
}

}  // namespace

SceneSpec gen_shelf_scene(std::uint64_t seed, const ShelfParams& params) {
  if (params.slot_count < 2) throw ConfigError("shelf: slot_count must be >= 2");
  if (params.jitter < 0.0 || params.slot_gap - params.jitter < params.book_size(0) + params.min_clearance) {
    throw ConfigError("shelf: slot_gap - jitter must leave min_clearance around the book");
  }
  Rng rng(mix_seed(seed, 1));
  const int S = params.slot_count;
  std::vector<double> gaps;
  for (int i = 0; i < S; ++i) gaps.push_back(params.slot_gap + rng.uniform(-params.jitter, params.jitter));
  double width = (S + 1) * kThickness;
  for (double g : gaps) width += g;

  const double zb = -0.15;
  const double front = -0.10, back = 0.10;
  std::vector<Part> parts;
  parts.push_back({Vec3(-width / 2, front, zb - kThickness), Vec3(width / 2, back + kThickness, zb)});
  parts.push_back({Vec3(-width / 2, back, zb), Vec3(width / 2, back + kThickness, zb + 0.20)});

  SceneSpec scene;
  scene.kind = TaskKind::shelf;
  scene.slot_count = S;
  scene.symmetry = Symmetry::box;
  const Vec3 book = params.book_size;
  double x = -width / 2;
  for (int i = 0; i <= S; ++i) {
    parts.push_back({Vec3(x, front, zb), Vec3(x + kThickness, back, zb + 0.14)});
    x += kThickness;
    if (i == S) break;
    RigidTransform slot;
    slot.translation = Vec3(x + gaps[static_cast<size_t>(i)] / 2, back - params.back_gap - book(1) / 2, zb + params.hover + book(2) / 2);
    scene.slot_poses.push_back(slot);
    x += gaps[static_cast<size_t>(i)];
  }

  scene.container =
      cluster_surfaces(sample_parts(parts, params.raw_points, rng), params.container_voxel, &scene.raw_container_points);
  scene.object_template = cluster_surfaces(sample_box(book, params.object_raw_points, rng), params.object_voxel);
  scene.validate();
  return scene;
}

SceneSpec gen_cabinet_scene(std::uint64_t seed, const CabinetParams& params) {
  if (params.levels < 1 || params.stands_per_level < 1 || params.levels * params.stands_per_level < 2) {
    throw ConfigError("cabinet: need at least 2 stand positions");
  }
  if (params.clear_height < params.height + 0.02 || params.inner_depth < 2.0 * params.radius + 0.02) {
    throw ConfigError("cabinet: the cylinder does not fit a level");
  }
  const double pitch = params.inner_width / params.stands_per_level;
  if (pitch - 2.0 * params.stand_jitter < 2.0 * params.radius + 0.04) {
    throw ConfigError("cabinet: stand positions overlap");
  }
  Rng rng(mix_seed(seed, 2));
  const double w = params.inner_width / 2;
  const double front = -params.inner_depth / 2, back = params.inner_depth / 2;
  const double z0 = -0.19;
  const double top = z0 + params.levels * (params.clear_height + kThickness);

  std::vector<Part> parts;
  for (int l = 0; l <= params.levels; ++l) {
    const double z = z0 + l * (params.clear_height + kThickness);
    parts.push_back({Vec3(-w - kThickness, front, z - kThickness), Vec3(w + kThickness, back + kThickness, z)});
  }
  parts.push_back({Vec3(-w - kThickness, front, z0), Vec3(-w, back + kThickness, top - kThickness)});
  parts.push_back({Vec3(w, front, z0), Vec3(w + kThickness, back + kThickness, top - kThickness)});
  parts.push_back({Vec3(-w, back, z0), Vec3(w, back + kThickness, top - kThickness)});

  SceneSpec scene;
  scene.kind = TaskKind::cabinet;
  scene.slot_count = params.levels * params.stands_per_level;
  scene.symmetry = Symmetry::cylinder;
  for (int l = 0; l < params.levels; ++l) {
    const double floor_z = z0 + l * (params.clear_height + kThickness);
    for (int j = 0; j < params.stands_per_level; ++j) {
      RigidTransform slot;
      slot.translation = Vec3(-w + (j + 0.5) * pitch + rng.uniform(-params.stand_jitter, params.stand_jitter),
                              back - params.back_gap - params.radius, floor_z + params.hover + params.height / 2);
      scene.slot_poses.push_back(slot);
    }
  }
  scene.container =
      cluster_surfaces(sample_parts(parts, params.raw_points, rng), params.container_voxel, &scene.raw_container_points);
  scene.object_template =
      cluster_surfaces(sample_cylinder(params.radius, params.height, params.object_raw_points, rng), params.object_voxel);
  scene.validate();
  return scene;
}

SceneSpec gen_scene(TaskKind kind, std::uint64_t seed) {
  return kind == TaskKind::shelf ? gen_shelf_scene(seed) : gen_cabinet_scene(seed);
}

DemoSample sample_demonstration(const SceneSpec& scene, std::uint64_t seed, const DemoParams& params) {
  Rng rng(mix_seed(seed, 3));
  DemoSample out;
  out.slot = rng.uniform_int(0, scene.slot_count - 1);
  const RigidTransform& slot = scene.slot_poses[static_cast<size_t>(out.slot)];

  const double r = params.jitter_fraction * scene.tolerances.pos_tol / 2 * std::sqrt(rng.uniform());
  const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double yaw = params.jitter_fraction * scene.tolerances.rot_tol / 2 * rng.uniform(-1.0, 1.0);

  const double init_yaw = rng.uniform(-params.init_yaw, params.init_yaw);
  out.initial.rotation = rot_z(init_yaw);
  out.initial.translation = Vec3(rng.uniform(-0.1, 0.1), rng.uniform(-0.45, -0.35), rng.uniform(-0.05, 0.05));

  RigidTransform placed;  // template frame -> world at the goal
  placed.translation = slot.translation + Vec3(r * std::cos(phi), r * std::sin(phi), 0.0);
  if (scene.symmetry == Symmetry::cylinder) {
    placed.rotation = slot.rotation * out.initial.rotation;
  } else {
    placed.rotation = rot_z(yaw) * slot.rotation;
  }

  out.demo.container = scene.container;
  out.demo.object = apply_transform(scene.object_template, out.initial);
  out.demo.goal = compose(placed, invert(out.initial));
  out.demo.mode_id = out.slot;
  return out;
}

double rotation_error(const Mat3& a, const Mat3& b, Symmetry symmetry) {
  const auto angle = [](const Mat3& r) { return std::acos(std::clamp((r.trace() - 1.0) / 2.0, -1.0, 1.0)); };
  if (symmetry == Symmetry::cylinder) {
    const double c = std::clamp((a * Vec3::UnitZ()).dot(b * Vec3::UnitZ()), -1.0, 1.0);
    const double theta = std::acos(c);
    return std::min(theta, std::numbers::pi - theta);
  }
  const Mat3 rel = a.transpose() * b;
  double best = angle(rel);
  for (int axis = 0; axis < 3; ++axis) {
    const Mat3 flip = Eigen::AngleAxisd(std::numbers::pi, Vec3::Unit(axis)).toRotationMatrix();
    best = std::min(best, angle(rel * flip));
  }
  return best;
}

EpisodeResult evaluate_placement(const SceneSpec& scene, const RigidTransform& predicted, const PointCloud& object) {
  if (object.size() != scene.object_template.size()) {
    throw ShapeError("evaluate_placement: object cloud does not come from the scene template");
  }
  const RigidTransform initial = arun_solve<double>(scene.object_template.positions, object.positions);
  const RigidTransform effective = compose(predicted, initial);

  size_t nearest = 0;
  double best = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < scene.slot_poses.size(); ++i) {
    const double d = (effective.translation - scene.slot_poses[i].translation).norm();
    if (d < best) {
      best = d;
      nearest = i;
    }
  }
  EpisodeResult res;
  res.pos_error = best;
  res.rot_error = rotation_error(effective.rotation, scene.slot_poses[nearest].rotation, scene.symmetry);
  res.collision_points = collision_count(scene.container, apply_transform(object, predicted), 0.0);
  if (res.pos_error < scene.tolerances.pos_tol && res.rot_error < scene.tolerances.rot_tol) {
    res.matched_mode = static_cast<int>(nearest);
  }
  res.success = res.matched_mode.has_value() && res.collision_points == 0;
  return res;
}

}  // namespace dap

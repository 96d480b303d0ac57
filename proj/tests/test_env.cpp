#include <numbers>

#include "doctest.h"

#include "dap/env.hpp"
#include "dap/pose.hpp"

using namespace dap;

namespace {

Mat3 rot(const Vec3& axis, double angle) { return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix(); }

}  // namespace

TEST_CASE("generated scenes are valid and reproducible") {
  for (TaskKind kind : {TaskKind::shelf, TaskKind::cabinet}) {
    for (std::uint64_t seed : {1u, 2u, 99u}) {
      const SceneSpec s = gen_scene(kind, seed);
      s.validate();
      CHECK(s.kind == kind);
      CHECK(s.slot_count == 4);
      CHECK(s.container.size() > 50);
      CHECK(s.object_template.centroid().norm() < 5e-3);
      CHECK(s.symmetry == (kind == TaskKind::shelf ? Symmetry::box : Symmetry::cylinder));
      const SceneSpec again = gen_scene(kind, seed);
      CHECK(again.container.positions == s.container.positions);
    }
    CHECK(gen_scene(kind, 1).container.positions != gen_scene(kind, 2).container.positions);
  }
}

TEST_CASE("infeasible shelf layouts are rejected") {
  ShelfParams p;
  p.slot_gap = 0.08;
  CHECK_THROWS_AS(gen_shelf_scene(1, p), ConfigError);
}

TEST_CASE("task kind names") {
  CHECK(parse_task_kind("cabinet") == TaskKind::cabinet);
  CHECK(to_string(TaskKind::shelf) == "shelf");
  CHECK_THROWS_AS(parse_task_kind("drawer"), ConfigError);
}

TEST_CASE("every demonstration goal is a successful placement") {
  for (TaskKind kind : {TaskKind::shelf, TaskKind::cabinet}) {
    for (int i = 0; i < 12; ++i) {
      const SceneSpec s = gen_scene(kind, 40 + i);
      const DemoSample d = sample_demonstration(s, 7 + i);
      CHECK(d.demo.mode_id == d.slot);
      const EpisodeResult r = evaluate_placement(s, d.demo.goal, d.demo.object);
      CHECK(r.success);
      CHECK(r.matched_mode == d.slot);
      CHECK(r.pos_error <= 0.5 * s.tolerances.pos_tol + 1e-9);
      CHECK(r.rot_error <= 0.5 * s.tolerances.rot_tol + 1e-9);
    }
  }
}

TEST_CASE("slots are all reachable from demonstrations") {
  const SceneSpec s = gen_scene(TaskKind::shelf, 5);
  std::vector<int> hits(4, 0);
  for (int i = 0; i < 60; ++i) ++hits[static_cast<size_t>(sample_demonstration(s, i).slot)];
  for (int h : hits) CHECK(h > 0);
}

TEST_CASE("a placement left at the start pose fails") {
  const SceneSpec s = gen_scene(TaskKind::cabinet, 3);
  const DemoSample d = sample_demonstration(s, 4);
  const EpisodeResult r = evaluate_placement(s, RigidTransform::identity(), d.demo.object);
  CHECK_FALSE(r.success);
  CHECK_FALSE(r.matched_mode.has_value());
}

TEST_CASE("a placement inside a divider collides") {
  const SceneSpec s = gen_scene(TaskKind::shelf, 3);
  const DemoSample d = sample_demonstration(s, 4);
  // Midway between two neighbouring slots the book overlaps the divider.
  RigidTransform between = s.slot_poses[0];
  between.translation = 0.5 * (s.slot_poses[0].translation + s.slot_poses[1].translation);
  const RigidTransform predicted = compose(between, invert(d.initial));
  const EpisodeResult r = evaluate_placement(s, predicted, d.demo.object);
  CHECK(r.collision_points > 0);
  CHECK_FALSE(r.success);
}

TEST_CASE("rotation error respects object symmetry") {
  const Mat3 a = rot(Vec3(0.3, 1, -0.2), 0.7);
  CHECK(rotation_error(a, a, Symmetry::box) < 1e-7);
  CHECK(rotation_error(a * rot(Vec3::UnitX(), std::numbers::pi), a, Symmetry::box) < 1e-7);
  CHECK(rotation_error(a * rot(Vec3::UnitZ(), std::numbers::pi), a, Symmetry::box) < 1e-7);
  CHECK(rotation_error(a * rot(Vec3::UnitZ(), 0.1), a, Symmetry::box) == doctest::Approx(0.1));
  CHECK(rotation_error(a * rot(Vec3::UnitZ(), std::numbers::pi / 2), a, Symmetry::box) ==
        doctest::Approx(std::numbers::pi / 2));

  CHECK(rotation_error(a * rot(Vec3::UnitZ(), 1.3), a, Symmetry::cylinder) < 1e-7);
  CHECK(rotation_error(a * rot(Vec3::UnitX(), std::numbers::pi), a, Symmetry::cylinder) < 1e-7);
  CHECK(rotation_error(a * rot(Vec3::UnitX(), 0.15), a, Symmetry::cylinder) == doctest::Approx(0.15));
}

TEST_CASE("scene validation catches broken invariants") {
  SceneSpec s = gen_scene(TaskKind::shelf, 1);
  SceneSpec bad = s;
  bad.slot_poses.pop_back();
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = s;
  bad.slot_poses[1] = bad.slot_poses[0];
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

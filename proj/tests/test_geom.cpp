#include <algorithm>
#include <filesystem>
#include <numeric>

#include "doctest.h"

#include "dap/geom.hpp"
#include "dap/ply.hpp"
#include "support.hpp"

using namespace dap;
using dap::testing::random_cloud;
using dap::testing::random_transform;

namespace {

// Brute force: full sort of (distance, index) pairs.
std::vector<int> knn_oracle(const Points3& key, const Vec3& q, int k) {
  std::vector<int> idx(static_cast<size_t>(key.rows()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return (key.row(a).transpose() - q).squaredNorm() < (key.row(b).transpose() - q).squaredNorm();
  });
  idx.resize(static_cast<size_t>(k));
  return idx;
}

}  // namespace

TEST_CASE("knn matches a full sort") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = rng.uniform_int(5, 60);
    const int k = rng.uniform_int(1, n);
    const PointCloud key = random_cloud(rng, n);
    const PointCloud query = random_cloud(rng, 7);
    const KnnIndices nn = knn_indices(query, key, k);
    for (int i = 0; i < 7; ++i) {
      const auto want = knn_oracle(key.positions, query.position(i), k);
      for (int c = 0; c < k; ++c) CHECK(nn(i, c) == want[static_cast<size_t>(c)]);
    }
  }
}

TEST_CASE("knn breaks distance ties toward the lower index") {
  Points3 key(4, 3);
  key << 1, 0, 0, -1, 0, 0, 0, 1, 0, 0, 0, 5;
  Points3 q = Points3::Zero(1, 3);
  const KnnIndices nn = knn_indices(q, key, 3);
  CHECK(nn(0, 0) == 0);
  CHECK(nn(0, 1) == 1);
  CHECK(nn(0, 2) == 2);
  CHECK_THROWS_AS(knn_indices(q, key, 5), SizeError);
  CHECK_THROWS_AS(knn_indices(q, key, 0), SizeError);
}

TEST_CASE("transforms compose and invert") {
  Rng rng(3);
  const RigidTransform a = random_transform(rng), b = random_transform(rng);
  const Vec3 p(0.3, -0.2, 0.9);
  CHECK((compose(a, b) * p - a * (b * p)).norm() < 1e-12);
  CHECK((invert(a) * (a * p) - p).norm() < 1e-12);

  const PointCloud pc = random_cloud(rng, 20);
  const PointCloud moved = apply_transform(pc, a);
  moved.validate();
  CHECK((moved.position(4) - a * pc.position(4)).norm() < 1e-12);
  CHECK((moved.normal(4) - a.rotation * pc.normal(4)).norm() < 1e-12);
}

TEST_CASE("min_distances and aabb") {
  Points3 a(2, 3), b(3, 3);
  a << 0, 0, 0, 2, 0, 0;
  b << 1, 0, 0, 5, 5, 5, 2, 0, 0.5;
  const Eigen::VectorXd d = min_distances(a, b);
  CHECK(d(0) == doctest::Approx(1.0));
  CHECK(d(1) == doctest::Approx(0.5));
  const Aabb box = aabb_of(b, 0.1);
  CHECK(box.min.x() == doctest::Approx(0.9));
  CHECK(box.max.z() == doctest::Approx(5.1));
  CHECK_THROWS_AS(aabb_of(Points3(0, 3)), SizeError);
}

TEST_CASE("point cloud validation") {
  Rng rng(5);
  PointCloud pc = random_cloud(rng, 4);
  pc.validate();
  pc.normals(1, 0) += 0.1;
  CHECK_THROWS_AS(pc.validate(), ShapeError);
  pc = random_cloud(rng, 4);
  pc.scores = Eigen::VectorXd::Zero(3);
  CHECK_THROWS_AS(pc.validate(), ShapeError);
}

TEST_CASE("superpoints average each voxel") {
  Rng rng(9);
  const PointCloud pc = random_cloud(rng, 500);
  const double voxel = 0.4;
  const PointCloud sp = superpoint_cluster(pc, voxel);
  sp.validate();
  CHECK(sp.size() < pc.size());

  // Oracle: group by floored voxel key, average positions.
  std::map<std::array<long, 3>, std::pair<Vec3, int>> groups;
  for (Eigen::Index i = 0; i < pc.size(); ++i) {
    std::array<long, 3> key{};
    for (int a = 0; a < 3; ++a) key[a] = static_cast<long>(std::floor(pc.positions(i, a) / voxel));
    auto& g = groups[key];
    if (g.second == 0) g.first.setZero();
    g.first += pc.position(i);
    ++g.second;
  }
  REQUIRE(static_cast<Eigen::Index>(groups.size()) == sp.size());
  Eigen::Index r = 0;
  for (const auto& [key, g] : groups) {
    CHECK((sp.position(r) - g.first / g.second).norm() < 1e-12);
    ++r;
  }
  CHECK_THROWS_AS(superpoint_cluster(pc, 0.0), ConfigError);
  CHECK_THROWS_AS(superpoint_cluster(PointCloud{}, 0.1), SizeError);
}

TEST_CASE("superpoint of opposing normals keeps a unit normal") {
  Points3 p(2, 3), n(2, 3);
  p << 0.01, 0.01, 0.01, 0.02, 0.02, 0.02;
  n << 0, 0, 1, 0, 0, -1;
  const PointCloud sp = superpoint_cluster(PointCloud(p, n), 1.0);
  REQUIRE(sp.size() == 1);
  CHECK(sp.normal(0).norm() == doctest::Approx(1.0));
}

TEST_CASE("select keeps order and scores") {
  Rng rng(2);
  PointCloud pc = random_cloud(rng, 6);
  pc.scores = Eigen::VectorXd::LinSpaced(6, 0, 5);
  const std::vector<int> idx{4, 1};
  const PointCloud s = select(pc, std::span<const int>(idx));
  CHECK(s.size() == 2);
  CHECK((*s.scores)(0) == 4.0);
  CHECK(s.position(1) == pc.position(1));
}

TEST_CASE("ply round trip") {
  Rng rng(4);
  PointCloud pc = random_cloud(rng, 30);
  pc.scores = Eigen::VectorXd::Random(30);
  const auto dir = std::filesystem::temp_directory_path() / "dap_test_geom";
  std::filesystem::create_directories(dir);
  for (PlyFormat f : {PlyFormat::ascii, PlyFormat::binary_little_endian}) {
    const auto path = dir / (f == PlyFormat::ascii ? "a.ply" : "b.ply");
    write_ply(path, pc, f);
    const PointCloud back = read_ply(path);
    REQUIRE(back.size() == pc.size());
    REQUIRE(back.scores.has_value());
    const double tol = f == PlyFormat::ascii ? 1e-9 : 0.0;
    CHECK((back.positions - pc.positions).cwiseAbs().maxCoeff() <= tol);
    CHECK((*back.scores - *pc.scores).cwiseAbs().maxCoeff() <= tol);
  }
  CHECK_THROWS(read_ply(dir / "missing.ply"));
  std::filesystem::remove_all(dir);
}

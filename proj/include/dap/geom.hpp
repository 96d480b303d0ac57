#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <utility>
#include <vector>

#include "dap/errors.hpp"

namespace dap {

template <typename Scalar>
using Vec3T = Eigen::Matrix<Scalar, 3, 1>;
template <typename Scalar>
using Mat3T = Eigen::Matrix<Scalar, 3, 3>;
// N x 3, one point per row.
template <typename Scalar>
using Points3T = Eigen::Matrix<Scalar, Eigen::Dynamic, 3, Eigen::RowMajor>;
template <typename Scalar>
using VectorXT = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// Row i holds the k neighbour indices of query point i, nearest first.
using KnnIndices = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
struct PointCloudT {
  Points3T<Scalar> positions;
  Points3T<Scalar> normals;
  std::optional<VectorXT<Scalar>> scores;

  PointCloudT() = default;
  PointCloudT(Points3T<Scalar> p, Points3T<Scalar> n) : positions(std::move(p)), normals(std::move(n)) {}

  Eigen::Index size() const { return positions.rows(); }
  bool empty() const { return positions.rows() == 0; }

  Vec3T<Scalar> position(Eigen::Index i) const { return positions.row(i).transpose(); }
  Vec3T<Scalar> normal(Eigen::Index i) const { return normals.row(i).transpose(); }

  // Throws ShapeError when the container invariants are broken.
  void validate(Scalar normal_tol = Scalar(1e-6)) const {
    if (positions.rows() != normals.rows()) {
      std::ostringstream os;
      os << "point cloud has " << positions.rows() << " positions but " << normals.rows() << " normals";
      throw ShapeError(os.str());
    }
    if (scores && scores->size() != positions.rows()) {
      std::ostringstream os;
      os << "point cloud has " << positions.rows() << " points but " << scores->size() << " scores";
      throw ShapeError(os.str());
    }
    if (!positions.allFinite() || !normals.allFinite()) throw ShapeError("point cloud contains non-finite values");
    for (Eigen::Index i = 0; i < normals.rows(); ++i) {
      if (std::abs(normals.row(i).norm() - Scalar(1)) > normal_tol) {
        std::ostringstream os;
        os << "normal " << i << " is not unit length (norm " << normals.row(i).norm() << ")";
        throw ShapeError(os.str());
      }
    }
  }

  Vec3T<Scalar> centroid() const { return positions.colwise().mean().transpose(); }
};

template <typename Scalar>
struct RigidTransformT {
  Mat3T<Scalar> rotation = Mat3T<Scalar>::Identity();
  Vec3T<Scalar> translation = Vec3T<Scalar>::Zero();

  static RigidTransformT identity() { return {}; }
  static RigidTransformT from_translation(const Vec3T<Scalar>& t) { return {Mat3T<Scalar>::Identity(), t}; }

  Vec3T<Scalar> operator*(const Vec3T<Scalar>& p) const { return rotation * p + translation; }

  bool is_valid(Scalar tol = Scalar(1e-9)) const {
    const Scalar ortho = (rotation.transpose() * rotation - Mat3T<Scalar>::Identity()).norm();
    return rotation.allFinite() && translation.allFinite() && ortho <= tol &&
           std::abs(rotation.determinant() - Scalar(1)) <= tol;
  }
};

template <typename Scalar>
struct AabbT {
  Vec3T<Scalar> min;
  Vec3T<Scalar> max;

  Vec3T<Scalar> center() const { return (min + max) / Scalar(2); }
  Vec3T<Scalar> half_extents() const { return (max - min) / Scalar(2); }

  bool contains(const Vec3T<Scalar>& p) const {
    return (p.array() >= min.array()).all() && (p.array() <= max.array()).all();
  }
  bool contains_strictly(const Vec3T<Scalar>& p) const {
    return (p.array() > min.array()).all() && (p.array() < max.array()).all();
  }
};

using Vec3 = Vec3T<double>;
using Mat3 = Mat3T<double>;
using Points3 = Points3T<double>;
using PointCloud = PointCloudT<double>;
using RigidTransform = RigidTransformT<double>;
using Aabb = AabbT<double>;

// v' = R v + t, n' = R n. Scores are carried over unchanged.
template <typename Scalar>
PointCloudT<Scalar> apply_transform(const PointCloudT<Scalar>& pc, const RigidTransformT<Scalar>& t) {
  PointCloudT<Scalar> out;
  out.positions = (pc.positions * t.rotation.transpose()).rowwise() + t.translation.transpose();
  out.normals = pc.normals * t.rotation.transpose();
  out.scores = pc.scores;
  return out;
}

// Applying compose(a, b) equals applying b first, then a.
template <typename Scalar>
RigidTransformT<Scalar> compose(const RigidTransformT<Scalar>& a, const RigidTransformT<Scalar>& b) {
  return {a.rotation * b.rotation, a.rotation * b.translation + a.translation};
}

template <typename Scalar>
RigidTransformT<Scalar> invert(const RigidTransformT<Scalar>& t) {
  const Mat3T<Scalar> rt = t.rotation.transpose();
  return {rt, -(rt * t.translation)};
}

// Exact k-nearest neighbours by Euclidean distance, ascending, ties to the
// lower key index.
template <typename Scalar>
KnnIndices knn_indices(const Points3T<Scalar>& query, const Points3T<Scalar>& key, int k) {
  if (k <= 0) throw SizeError("knn: k must be positive");
  if (key.rows() < k) {
    std::ostringstream os;
    os << "knn: requested k=" << k << " but key cloud has " << key.rows() << " points";
    throw SizeError(os.str());
  }
  const Eigen::Index nk = key.rows();
  KnnIndices out(query.rows(), k);
  std::vector<std::pair<Scalar, int>> dist(static_cast<size_t>(nk));
  for (Eigen::Index i = 0; i < query.rows(); ++i) {
    for (Eigen::Index j = 0; j < nk; ++j) {
      dist[static_cast<size_t>(j)] = {(key.row(j) - query.row(i)).squaredNorm(), static_cast<int>(j)};
    }
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    for (int c = 0; c < k; ++c) out(i, c) = dist[static_cast<size_t>(c)].second;
  }
  return out;
}

template <typename Scalar>
KnnIndices knn_indices(const PointCloudT<Scalar>& query, const PointCloudT<Scalar>& key, int k) {
  return knn_indices(query.positions, key.positions, k);
}

// Element i is the distance from a_i to its nearest point in b.
template <typename Scalar>
VectorXT<Scalar> min_distances(const Points3T<Scalar>& a, const Points3T<Scalar>& b) {
  if (b.rows() == 0) throw SizeError("min_distances: reference cloud is empty");
  VectorXT<Scalar> out(a.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    out(i) = std::sqrt((b.rowwise() - a.row(i)).rowwise().squaredNorm().minCoeff());
  }
  return out;
}

template <typename Scalar>
VectorXT<Scalar> min_distances(const PointCloudT<Scalar>& a, const PointCloudT<Scalar>& b) {
  return min_distances(a.positions, b.positions);
}

template <typename Scalar>
AabbT<Scalar> aabb_of(const Points3T<Scalar>& p, Scalar margin = Scalar(0)) {
  if (p.rows() == 0) throw SizeError("aabb_of: empty point set");
  AabbT<Scalar> box;
  box.min = p.colwise().minCoeff().transpose().array() - margin;
  box.max = p.colwise().maxCoeff().transpose().array() + margin;
  return box;
}

template <typename Scalar>
AabbT<Scalar> aabb_of(const PointCloudT<Scalar>& pc, Scalar margin = Scalar(0)) {
  return aabb_of(pc.positions, margin);
}

// Rows of `pc` selected by `indices`, in the given order.
template <typename Scalar>
PointCloudT<Scalar> select(const PointCloudT<Scalar>& pc, std::span<const int> indices) {
  PointCloudT<Scalar> out;
  const auto n = static_cast<Eigen::Index>(indices.size());
  out.positions.resize(n, 3);
  out.normals.resize(n, 3);
  if (pc.scores) out.scores = VectorXT<Scalar>(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const int i = indices[static_cast<size_t>(r)];
    out.positions.row(r) = pc.positions.row(i);
    out.normals.row(r) = pc.normals.row(i);
    if (pc.scores) (*out.scores)(r) = (*pc.scores)(i);
  }
  return out;
}

// Voxel-grid superpoints: one point per occupied voxel carrying the mean
// position and the re-normalised mean normal, ordered by voxel key.
template <typename Scalar>
PointCloudT<Scalar> superpoint_cluster(const PointCloudT<Scalar>& pc, Scalar voxel_size) {
  if (pc.empty()) throw SizeError("superpoint_cluster: empty cloud");
  if (!(voxel_size > Scalar(0)) || !std::isfinite(static_cast<double>(voxel_size))) {
    throw ConfigError("superpoint_cluster: voxel size must be finite and positive");
  }
  struct Bucket {
    Vec3T<Scalar> pos = Vec3T<Scalar>::Zero();
    Vec3T<Scalar> nrm = Vec3T<Scalar>::Zero();
    Vec3T<Scalar> first_normal;
    int count = 0;
  };
  std::map<std::array<std::int64_t, 3>, Bucket> buckets;
  for (Eigen::Index i = 0; i < pc.size(); ++i) {
    std::array<std::int64_t, 3> key{};
    for (int a = 0; a < 3; ++a) {
      key[static_cast<size_t>(a)] = static_cast<std::int64_t>(std::floor(pc.positions(i, a) / voxel_size));
    }
    Bucket& b = buckets[key];
    if (b.count == 0) b.first_normal = pc.normal(i);
    b.pos += pc.position(i);
    b.nrm += pc.normal(i);
    ++b.count;
  }
  PointCloudT<Scalar> out;
  out.positions.resize(static_cast<Eigen::Index>(buckets.size()), 3);
  out.normals.resize(static_cast<Eigen::Index>(buckets.size()), 3);
  Eigen::Index r = 0;
  for (const auto& [key, b] : buckets) {
    out.positions.row(r) = (b.pos / Scalar(b.count)).transpose();
    const Vec3T<Scalar> mean_n = b.nrm / Scalar(b.count);
    const Scalar norm = mean_n.norm();
    const Vec3T<Scalar> n = norm < Scalar(1e-8) ? b.first_normal : Vec3T<Scalar>(mean_n / norm);
    out.normals.row(r) = n.transpose();
    ++r;
  }
  return out;
}

}  // namespace dap

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dap/afford.hpp"
#include "dap/corr.hpp"

namespace dap {

// Weighted least-squares rigid alignment (Arun / Kabsch): the (R, t)
// minimising sum_i w_i |R src_i + t - dst_i|^2, reflection-corrected so that
// det(R) = +1.
template <typename Scalar>
RigidTransformT<Scalar> arun_solve(const Points3T<Scalar>& src, const Points3T<Scalar>& dst,
                                   const VectorXT<Scalar>& weights) {
  if (src.rows() != dst.rows() || src.rows() != weights.size()) {
    throw ShapeError("arun_solve: src, dst and weights must have equal length");
  }
  if (src.rows() < 3) throw InsufficientMatchesError("arun_solve needs at least 3 pairs, got " + std::to_string(src.rows()));
  if ((weights.array() <= Scalar(0)).any() || !weights.allFinite()) {
    throw ConfigError("arun_solve: weights must be positive and finite");
  }

  const Scalar wsum = weights.sum();
  const Vec3T<Scalar> cs = (src.transpose() * weights) / wsum;
  const Vec3T<Scalar> cd = (dst.transpose() * weights) / wsum;
  const Points3T<Scalar> s = src.rowwise() - cs.transpose();
  const Points3T<Scalar> d = dst.rowwise() - cd.transpose();
  const Mat3T<Scalar> h = s.transpose() * weights.asDiagonal() * d;

  Eigen::JacobiSVD<Mat3T<Scalar>> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const auto sv = svd.singularValues();
  if (!(sv(0) > Scalar(0)) || sv(1) <= sv(0) * Scalar(1e-10)) {
    throw DegenerateGeometryError("arun_solve: correspondences are collinear or coincident");
  }
  const Mat3T<Scalar> u = svd.matrixU();
  const Mat3T<Scalar> v = svd.matrixV();
  Mat3T<Scalar> fix = Mat3T<Scalar>::Identity();
  fix(2, 2) = (v * u.transpose()).determinant() < Scalar(0) ? Scalar(-1) : Scalar(1);

  RigidTransformT<Scalar> out;
  out.rotation = v * fix * u.transpose();
  out.translation = cd - out.rotation * cs;
  return out;
}

template <typename Scalar>
RigidTransformT<Scalar> arun_solve(const Points3T<Scalar>& src, const Points3T<Scalar>& dst) {
  return arun_solve<Scalar>(src, dst, VectorXT<Scalar>::Ones(src.rows()));
}

// Weighted sum of squared alignment residuals.
template <typename Scalar>
Scalar alignment_residual(const Points3T<Scalar>& src, const Points3T<Scalar>& dst, const VectorXT<Scalar>& weights,
                          const RigidTransformT<Scalar>& t) {
  const Points3T<Scalar> moved = (src * t.rotation.transpose()).rowwise() + t.translation.transpose();
  return ((moved - dst).rowwise().squaredNorm().array() * weights.array()).sum();
}

// Container points strictly inside the object's bounding box grown by margin.
int collision_count(const PointCloud& cropped_container, const PointCloud& placed_object, double margin);

struct Candidate {
  RigidTransform transform;
  int collision_count = 0;
  int match_count = 0;
  int crop_size = 0;
  int sample_index = 0;
};

// Fewest collisions first, then more matches, then input order.
std::vector<Candidate> rank_candidates(const std::vector<Candidate>& cands);
std::vector<int> rank_order(const std::vector<Candidate>& cands);

struct CandidateFailure {
  int sample_index = 0;
  std::string kind;
  std::string message;
};

struct InferenceResult {
  Candidate best;
  std::vector<Candidate> ranked;
  std::vector<CandidateFailure> failures;
};

struct InferenceOptions {
  int K = 8;
  double collision_margin = 0.005;
  double match_threshold = 0.5;
  int min_crop_points = 8;  // smaller crops fail as insufficient matches
  int threads = 1;
};

// Draws one affordance field for the container (seeded).
using AffordanceSampler = std::function<AffordanceField(const PointCloud& container, std::uint64_t seed)>;
// Correspondence probabilities between a crop and the object.
using CorrPredictor = std::function<CorrespondenceMatrix(const PointCloud& crop, const PointCloud& object)>;

// Builds one candidate: sample -> crop -> correspondences -> matches -> Arun ->
// collision count against the crop.
Candidate build_candidate(const AffordanceSampler& sampler, const CorrPredictor& corr, const PointCloud& container,
                          const PointCloud& object, const InferenceOptions& opts, std::uint64_t seed, int index);

// Builds K candidates with seeds seed + k, skips those failing with an
// empty crop, too few matches or degenerate geometry, and ranks the rest.
// Throws NoCandidatesError listing per-candidate failures when none survive.
InferenceResult infer_storage_pose(const AffordanceSampler& sampler, const CorrPredictor& corr,
                                   const PointCloud& container, const PointCloud& object, const InferenceOptions& opts,
                                   std::uint64_t seed);

InferenceResult infer_storage_pose(const AffordanceModel& afford, const CorrModel& corr, const PointCloud& container,
                                   const PointCloud& object, const NoiseSchedule& sched, const InferenceOptions& opts,
                                   std::uint64_t seed);

}  // namespace dap

#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "dap/geom.hpp"

namespace dap {

// Per-point score over a container cloud: the diffusion state. Ground-truth
// labels are exactly -1 or +1.
using AffordanceField = Eigen::VectorXd;

// N_O x N_C; labels in {0, 1}, predictions in (0, 1).
using CorrespondenceMatrix = Eigen::MatrixXd;

struct Demonstration {
  PointCloud container;
  PointCloud object;
  RigidTransform goal;  // T_WO: maps the object cloud onto its stored pose
  std::optional<int> mode_id;
};

struct LabelConfig {
  double eps_place = 0.04;
  double eps_corr = 0.04;
  double crop_scale_min = 1.5;
  double crop_scale_max = 2.5;

  void validate() const;
};

// +1 for container points closer than eps_place to the object at its goal
// pose, -1 elsewhere.
AffordanceField label_affordance(const Demonstration& demo, const LabelConfig& cfg);

// C(i, j) = 1 iff transformed object point i lies within eps_corr of
// container point j.
CorrespondenceMatrix label_correspondence(const PointCloud& cropped_container, const PointCloud& object,
                                          const RigidTransform& goal, const LabelConfig& cfg);

// Indices of the container points inside a randomly scaled copy of the goal
// object's bounding box. The box keeps the centre of the unscaled one.
std::vector<int> sample_demo_crop_indices(const PointCloud& container, const PointCloud& object,
                                          const RigidTransform& goal, const LabelConfig& cfg, std::uint64_t seed);

PointCloud sample_demo_crop(const PointCloud& container, const PointCloud& object, const RigidTransform& goal,
                            const LabelConfig& cfg, std::uint64_t seed);

// Indices of points with score >= 0, in input order. Throws EmptyCropError
// when nothing survives.
std::vector<int> crop_indices_by_scores(const AffordanceField& scores);

PointCloud crop_by_scores(const PointCloud& container, const AffordanceField& scores);

}  // namespace dap

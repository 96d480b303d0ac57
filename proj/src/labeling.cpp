#include "dap/labeling.hpp"

#include <cmath>
#include <string>

#include "dap/rng.hpp"

namespace dap {

void LabelConfig::validate() const {
  if (!(eps_place > 0.0) || !(eps_corr > 0.0)) throw ConfigError("label: eps_place and eps_corr must be positive");
  if (!(crop_scale_min >= 1.0) || !(crop_scale_max >= crop_scale_min)) {
    throw ConfigError("label: crop scales must satisfy 1 <= min <= max");
  }
}

AffordanceField label_affordance(const Demonstration& demo, const LabelConfig& cfg) {
  const PointCloud placed = apply_transform(demo.object, demo.goal);
  const Eigen::VectorXd d = min_distances(demo.container, placed);
  return (d.array() < cfg.eps_place).select(Eigen::VectorXd::Ones(d.size()), -Eigen::VectorXd::Ones(d.size()));
}

CorrespondenceMatrix label_correspondence(const PointCloud& cropped_container, const PointCloud& object,
                                          const RigidTransform& goal, const LabelConfig& cfg) {
  const PointCloud placed = apply_transform(object, goal);
  CorrespondenceMatrix c = CorrespondenceMatrix::Zero(placed.size(), cropped_container.size());
  for (Eigen::Index i = 0; i < placed.size(); ++i) {
    for (Eigen::Index j = 0; j < cropped_container.size(); ++j) {
      if ((placed.positions.row(i) - cropped_container.positions.row(j)).norm() < cfg.eps_corr) c(i, j) = 1.0;
    }
  }
  return c;
}

std::vector<int> sample_demo_crop_indices(const PointCloud& container, const PointCloud& object,
                                          const RigidTransform& goal, const LabelConfig& cfg, std::uint64_t seed) {
  constexpr int kMinPoints = 8;
  constexpr int kRetries = 5;
  const Aabb box = aabb_of(apply_transform(object, goal));
  const Vec3 center = box.center();
  const Vec3 half = box.half_extents();

  Rng rng(seed);
  Vec3 scale;
  for (int a = 0; a < 3; ++a) scale(a) = rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max);

  for (int attempt = 0; attempt <= kRetries; ++attempt) {
    const Aabb crop{center - half.cwiseProduct(scale), center + half.cwiseProduct(scale)};
    std::vector<int> idx;
    for (Eigen::Index j = 0; j < container.size(); ++j) {
      if (crop.contains(container.position(j))) idx.push_back(static_cast<int>(j));
    }
    if (static_cast<int>(idx.size()) >= kMinPoints) return idx;
    scale *= 1.5;
  }
  throw DegenerateDemoError("demo crop holds fewer than 8 container points after " + std::to_string(kRetries) +
                            " enlargements");
}

PointCloud sample_demo_crop(const PointCloud& container, const PointCloud& object, const RigidTransform& goal,
                            const LabelConfig& cfg, std::uint64_t seed) {
  const auto idx = sample_demo_crop_indices(container, object, goal, cfg, seed);
  return select(container, std::span<const int>(idx));
}

std::vector<int> crop_indices_by_scores(const AffordanceField& scores) {
  std::vector<int> idx;
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    if (scores(i) >= 0.0) idx.push_back(static_cast<int>(i));
  }
  if (idx.empty()) throw EmptyCropError("no container point has a non-negative affordance score");
  return idx;
}

PointCloud crop_by_scores(const PointCloud& container, const AffordanceField& scores) {
  if (scores.size() != container.size()) {
    throw ShapeError("crop_by_scores: " + std::to_string(scores.size()) + " scores for " +
                     std::to_string(container.size()) + " points");
  }
  const auto idx = crop_indices_by_scores(scores);
  return select(container, std::span<const int>(idx));
}

}  // namespace dap

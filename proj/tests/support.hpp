#pragma once

#include <cmath>

#include "dap/geom.hpp"
#include "dap/rng.hpp"

namespace dap::testing {

inline Mat3 random_rotation(Rng& rng) {
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  return q.normalized().toRotationMatrix();
}

inline RigidTransform random_transform(Rng& rng, double spread = 1.0) {
  return {random_rotation(rng), Vec3(rng.uniform(-spread, spread), rng.uniform(-spread, spread),
                                     rng.uniform(-spread, spread))};
}

inline PointCloud random_cloud(Rng& rng, int n, double extent = 1.0) {
  PointCloud pc;
  pc.positions.resize(n, 3);
  pc.normals.resize(n, 3);
  for (int i = 0; i < n; ++i) {
    Vec3 nrm(rng.normal(), rng.normal(), rng.normal());
    pc.normals.row(i) = nrm.normalized().transpose();
    for (int a = 0; a < 3; ++a) pc.positions(i, a) = rng.uniform(-extent, extent);
  }
  return pc;
}

}  // namespace dap::testing

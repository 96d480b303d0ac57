#pragma once

#include <string>
#include <vector>

#include "dap/geom.hpp"
#include "dap/params.hpp"
#include "dap/rng.hpp"

namespace dap {

enum class Init { xavier, zero };

// y = x W + b with W [in, out] and b [1, out].
struct Linear {
  Tensor weight;
  Tensor bias;

  Tensor operator()(const Tensor& x) const { return add(matmul(x, weight), bias); }
};

// Weights uniform in +-sqrt(6 / (in + out)) or all zero; bias zero.
Linear make_linear(ParamStore& store, const std::string& name, int in, int out, Rng& rng, Init init = Init::xavier);

// Per axis a and frequency k: [sin(2^k pi a), cos(2^k pi a)]. Output is
// N x 6 * num_freqs.
RowMatrix fourier_embed(const Points3& positions, int num_freqs);

// Standard transformer timestep features, [1, dim].
RowMatrix timestep_embed(double t, int dim);

// Geometry-only inputs of the point encoder; constant per cloud, so callers
// build it once and reuse it across forward passes.
struct EncoderInput {
  Tensor features;          // [N, 6] position and normal
  std::vector<int> knn;     // N * k flattened neighbour indices, nearest first
  int k = 0;
  int n = 0;
};

// Positions are shifted by `origin` before entering the encoder.
EncoderInput make_encoder_input(const PointCloud& pc, int k, const Vec3& origin = Vec3::Zero());

// Shared two-layer MLP on [position, normal], max-pooled over each point's
// k nearest neighbours, concatenated with the point's own output and
// projected to token_dim. Permutation-equivariant over points.
class PointEncoder {
 public:
  PointEncoder() = default;
  PointEncoder(ParamStore& store, const std::string& prefix, int hidden, int token_dim, Rng& rng);

  Tensor operator()(const EncoderInput& in) const;

 private:
  Linear mlp1_, mlp2_, proj_;
};

}  // namespace dap

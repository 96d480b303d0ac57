#include "dap/nn.hpp"

#include <cmath>
#include <numbers>

namespace dap {

Linear make_linear(ParamStore& store, const std::string& name, int in, int out, Rng& rng, Init init) {
  Tensor w(Shape{in, out});
  if (init == Init::xavier) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    for (double& v : w.mutable_data()) v = rng.uniform(-bound, bound);
  }
  Linear lin;
  lin.weight = store.add(name + ".w", w);
  lin.bias = store.add(name + ".b", Tensor(Shape{1, out}));
  return lin;
}

RowMatrix fourier_embed(const Points3& positions, int num_freqs) {
  if (num_freqs < 1) throw ConfigError("fourier_embed: num_freqs must be >= 1");
  RowMatrix out(positions.rows(), 6 * num_freqs);
  for (Eigen::Index i = 0; i < positions.rows(); ++i) {
    for (int a = 0; a < 3; ++a) {
      for (int k = 0; k < num_freqs; ++k) {
        const double arg = std::ldexp(1.0, k) * std::numbers::pi * positions(i, a);
        const int col = 2 * (a * num_freqs + k);
        out(i, col) = std::sin(arg);
        out(i, col + 1) = std::cos(arg);
      }
    }
  }
  return out;
}

RowMatrix timestep_embed(double t, int dim) {
  const int half = dim / 2;
  RowMatrix out = RowMatrix::Zero(1, dim);
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    out(0, i) = std::sin(t * freq);
    out(0, half + i) = std::cos(t * freq);
  }
  return out;
}

EncoderInput make_encoder_input(const PointCloud& pc, int k, const Vec3& origin) {
  if (pc.size() < k) {
    throw SizeError("encoder needs at least k=" + std::to_string(k) + " points, got " + std::to_string(pc.size()));
  }
  EncoderInput in;
  in.k = k;
  in.n = static_cast<int>(pc.size());
  RowMatrix f(pc.size(), 6);
  f.leftCols(3) = pc.positions.rowwise() - origin.transpose();
  f.rightCols(3) = pc.normals;
  in.features = Tensor::from_matrix(f);
  const KnnIndices nn = knn_indices(pc.positions, pc.positions, k);
  in.knn.assign(nn.data(), nn.data() + nn.size());
  return in;
}

PointEncoder::PointEncoder(ParamStore& store, const std::string& prefix, int hidden, int token_dim, Rng& rng)
    : mlp1_(make_linear(store, prefix + ".mlp1", 6, hidden, rng)),
      mlp2_(make_linear(store, prefix + ".mlp2", hidden, hidden, rng)),
      proj_(make_linear(store, prefix + ".proj", 2 * hidden, token_dim, rng)) {}

Tensor PointEncoder::operator()(const EncoderInput& in) const {
  const Tensor m = mlp2_(silu(mlp1_(in.features)));
  const Tensor pooled = max_pool_groups(gather_rows(m, in.knn), in.k);
  return proj_(concat_cols({m, pooled}));
}

}  // namespace dap

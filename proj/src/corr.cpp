#include "dap/corr.hpp"

#include <cmath>
#include <string>

namespace dap {

void CorrConfig::validate() const {
  if (token_dim <= 0 || num_blocks <= 0 || gva_k <= 0 || gva_groups <= 0 || encoder_k <= 0) {
    throw ConfigError("corr: all sizes must be positive");
  }
  if (token_dim % gva_groups != 0) throw ConfigError("corr: token_dim must be divisible by gva_groups");
  if (gamma < 0.0) throw ConfigError("corr: gamma must be >= 0");
  if (!(match_threshold > 0.0 && match_threshold < 1.0)) throw ConfigError("corr: match_threshold must be in (0, 1)");
}

GvaLayer::GvaLayer(ParamStore& store, const std::string& prefix, int dim, int groups, Rng& rng)
    : dim_(dim),
      groups_(groups),
      q_(make_linear(store, prefix + ".q", dim, dim, rng)),
      k_(make_linear(store, prefix + ".k", dim, dim, rng)),
      v_(make_linear(store, prefix + ".v", dim, dim, rng)),
      pos1_(make_linear(store, prefix + ".pos1", 3, dim, rng)),
      pos2_(make_linear(store, prefix + ".pos2", dim, dim, rng)),
      weight1_(make_linear(store, prefix + ".w1", dim, groups, rng)),
      weight2_(make_linear(store, prefix + ".w2", groups, groups, rng)) {}

Tensor GvaLayer::operator()(const Tensor& query_tokens, const Tensor& key_tokens, const Tensor& key_values,
                            const Points3& query_positions, const Points3& key_positions, int k) const {
  if (query_tokens.cols() != dim_ || key_tokens.cols() != dim_ || key_values.cols() != dim_) {
    throw ShapeError("gva: token width mismatch (" + shape_str(query_tokens.shape()) + ", " +
                     shape_str(key_tokens.shape()) + ", " + shape_str(key_values.shape()) + ")");
  }
  if (query_tokens.rows() != query_positions.rows() || key_tokens.rows() != key_positions.rows() ||
      key_values.rows() != key_positions.rows()) {
    throw ShapeError("gva: token rows do not match positions");
  }
  const KnnIndices nn = knn_indices(query_positions, key_positions, k);
  const int nq = static_cast<int>(query_positions.rows());

  std::vector<int> self_rows(static_cast<size_t>(nq) * k);
  std::vector<int> key_rows(nn.data(), nn.data() + nn.size());
  RowMatrix dpos(static_cast<Eigen::Index>(nq) * k, 3);
  for (int i = 0; i < nq; ++i) {
    for (int j = 0; j < k; ++j) {
      const int r = i * k + j;
      self_rows[static_cast<size_t>(r)] = i;
      dpos.row(r) = query_positions.row(i) - key_positions.row(nn(i, j));
    }
  }

  const Tensor q = gather_rows(q_(query_tokens), self_rows);
  const Tensor kk = gather_rows(k_(key_tokens), key_rows);
  const Tensor v = gather_rows(v_(key_values), std::move(key_rows));
  const Tensor pe = pos2_(silu(pos1_(Tensor::from_matrix(dpos))));
  const Tensor logits = weight2_(silu(weight1_(add(sub(q, kk), pe))));
  const Tensor attended = grouped_weighted_sum(group_softmax(logits, k), v, k);
  return layer_norm(add(query_tokens, attended));
}

Tensor gva_attention(const GvaLayer& layer, const Tensor& query_tokens, const Tensor& key_tokens,
                     const Tensor& key_values, const Points3& query_positions, const Points3& key_positions, int k) {
  return layer(query_tokens, key_tokens, key_values, query_positions, key_positions, k);
}

CorrModel::CorrModel(const CorrConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const int d = cfg_.token_dim;
  encoder_ = PointEncoder(params_, "enc", d, d, rng);
  for (int b = 0; b < cfg_.num_blocks; ++b) {
    const std::string p = "block" + std::to_string(b);
    blocks_.push_back({GvaLayer(params_, p + ".obj_self", d, cfg_.gva_groups, rng),
                       GvaLayer(params_, p + ".obj_cross", d, cfg_.gva_groups, rng),
                       GvaLayer(params_, p + ".cont_cross", d, cfg_.gva_groups, rng)});
  }
  object_head_ = make_linear(params_, "head.obj", d, d, rng);
  container_head_ = make_linear(params_, "head.cont", d, d, rng);
}

Tensor CorrModel::forward(const PointCloud& cropped_container, const PointCloud& object) const {
  if (cropped_container.empty() || object.empty()) throw SizeError("corr: empty input cloud");
  const Vec3 oc = object.centroid();
  const Vec3 cc = cropped_container.centroid();
  const Points3 opos = object.positions.rowwise() - oc.transpose();
  const Points3 cpos = cropped_container.positions.rowwise() - cc.transpose();

  Tensor obj = encoder_(make_encoder_input(object, cfg_.encoder_k, oc));
  Tensor cont = encoder_(make_encoder_input(cropped_container, cfg_.encoder_k, cc));
  for (const auto& b : blocks_) {
    obj = b.object_self(obj, obj, obj, opos, opos, cfg_.gva_k);
    obj = b.object_cross(obj, cont, cont, opos, cpos, cfg_.gva_k);
    cont = b.container_cross(cont, obj, obj, cpos, opos, cfg_.gva_k);
  }
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg_.token_dim));
  return sigmoid(scale(matmul_nt(object_head_(obj), container_head_(cont)), inv_sqrt));
}

CorrespondenceMatrix CorrModel::predict(const PointCloud& cropped_container, const PointCloud& object) const {
  NoGradGuard no_grad;
  const Tensor p = forward(cropped_container, object);
  return p.matrix();
}

Tensor focal_loss(const Tensor& pred, const CorrespondenceMatrix& label, double gamma) {
  if (pred.rows() != label.rows() || pred.cols() != label.cols()) {
    throw ShapeError("focal_loss: prediction " + shape_str(pred.shape()) + " vs label [" +
                     std::to_string(label.rows()) + ", " + std::to_string(label.cols()) + "]");
  }
  const RowMatrix y = label;
  const Tensor yt = Tensor::from_matrix(y);
  const Tensor not_y = Tensor::from_matrix((1.0 - y.array()).matrix());
  const Tensor p = clamp(pred, 1e-7, 1.0 - 1e-7);
  const Tensor q = add_scalar(neg(p), 1.0);
  const Tensor pos = mul(mul(pow_scalar(q, gamma), log(p)), yt);
  const Tensor negv = mul(mul(pow_scalar(p, gamma), log(q)), not_y);
  return neg(mean(add(pos, negv)));
}

MatchSet extract_matches(const CorrespondenceMatrix& pred, const PointCloud& object, const PointCloud& container,
                         const CorrConfig& cfg) {
  if (pred.rows() != object.size() || pred.cols() != container.size()) {
    throw ShapeError("extract_matches: matrix shape does not match the clouds");
  }
  MatchSet matches;
  for (Eigen::Index i = 0; i < pred.rows(); ++i) {
    Eigen::Index j = 0;
    const double best = pred.row(i).maxCoeff(&j);
    if (best >= cfg.match_threshold) {
      matches.push_back({static_cast<int>(i), static_cast<int>(j), best});
    }
  }
  if (matches.size() < 3) {
    throw InsufficientMatchesError("only " + std::to_string(matches.size()) + " correspondences reach threshold " +
                                   std::to_string(cfg.match_threshold));
  }
  return matches;
}

}  // namespace dap

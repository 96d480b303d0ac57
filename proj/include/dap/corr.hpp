#pragma once

#include <cstdint>
#include <vector>

#include "dap/labeling.hpp"
#include "dap/nn.hpp"

namespace dap {

struct CorrConfig {
  int token_dim = 64;
  int num_blocks = 2;
  int gva_k = 8;
  int gva_groups = 8;
  int encoder_k = 8;
  double gamma = 2.0;
  double match_threshold = 0.5;

  void validate() const;
};

struct Match {
  int object_index = 0;
  int container_index = 0;
  double weight = 0.0;
};
using MatchSet = std::vector<Match>;

// KNN grouped vector attention (query <- key). Each query attends to its k
// nearest key points; per neighbour the relation q - k + pe(dp) is mapped to
// one logit per channel group, softmaxed over the neighbours, and the
// weighted values are summed group by group. The result is added to the
// query tokens and layer-normalised.
class GvaLayer {
 public:
  GvaLayer() = default;
  GvaLayer(ParamStore& store, const std::string& prefix, int dim, int groups, Rng& rng);

  Tensor operator()(const Tensor& query_tokens, const Tensor& key_tokens, const Tensor& key_values,
                    const Points3& query_positions, const Points3& key_positions, int k) const;

  int groups() const { return groups_; }

 private:
  int dim_ = 0;
  int groups_ = 0;
  Linear q_, k_, v_;
  Linear pos1_, pos2_;
  Linear weight1_, weight2_;
};

// Free-function form of GvaLayer::operator().
Tensor gva_attention(const GvaLayer& layer, const Tensor& query_tokens, const Tensor& key_tokens,
                     const Tensor& key_values, const Points3& query_positions, const Points3& key_positions, int k);

// Predicts C_phi between an object cloud (rows) and a cropped container
// region (columns). Each cloud is centred on its own centroid first.
class CorrModel {
 public:
  CorrModel(const CorrConfig& cfg, std::uint64_t seed);

  // [N_O, N_C] probabilities in (0, 1), recorded for backward when enabled.
  Tensor forward(const PointCloud& cropped_container, const PointCloud& object) const;
  // No-grad evaluation.
  CorrespondenceMatrix predict(const PointCloud& cropped_container, const PointCloud& object) const;

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const CorrConfig& config() const { return cfg_; }

 private:
  struct Block {
    GvaLayer object_self;
    GvaLayer object_cross;
    GvaLayer container_cross;
  };

  CorrConfig cfg_;
  ParamStore params_;
  PointEncoder encoder_;
  std::vector<Block> blocks_;
  Linear object_head_, container_head_;
};

// Two-sided binary focal loss, averaged over all entries, with predictions
// clamped to [1e-7, 1 - 1e-7]. gamma = 0 gives binary cross-entropy.
Tensor focal_loss(const Tensor& pred, const CorrespondenceMatrix& label, double gamma);

// Row-wise argmax kept when its probability reaches the match threshold.
// Throws InsufficientMatchesError below three pairs.
MatchSet extract_matches(const CorrespondenceMatrix& pred, const PointCloud& object, const PointCloud& container,
                         const CorrConfig& cfg);

}  // namespace dap

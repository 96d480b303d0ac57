#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "dap/labeling.hpp"
#include "dap/nn.hpp"

namespace dap {

// Linear-beta DDPM schedule. Index t runs 1..T; arrays are stored at t - 1.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  std::vector<double> sigma;  // sigma_t^2 = beta_t

  double beta_at(int t) const { return beta[static_cast<size_t>(t - 1)]; }
  double alpha_at(int t) const { return alpha[static_cast<size_t>(t - 1)]; }
  double alpha_bar_at(int t) const { return alpha_bar[static_cast<size_t>(t - 1)]; }
  double sigma_at(int t) const { return sigma[static_cast<size_t>(t - 1)]; }
};

NoiseSchedule make_schedule(int T, double beta_start, double beta_end);

// S(t) = sqrt(abar_t) S(0) + sqrt(1 - abar_t) eps
AffordanceField q_sample(const AffordanceField& s0, int t, const Eigen::VectorXd& eps, const NoiseSchedule& sched);

// Maps a noisy field ([N, 1]) and step t to predicted noise ([N, 1]).
using NoisePredictor = std::function<Tensor(const Tensor& s_t, int t)>;

// mean((eps - eps_theta(S(t), t))^2) with S(t) = q_sample(s0, t, eps).
Tensor ddpm_loss(const NoisePredictor& model, const AffordanceField& s0, int t, const Eigen::VectorXd& eps,
                 const NoiseSchedule& sched);

// One ancestral step: S(t-1) = (S(t) - (1 - a_t) / sqrt(1 - abar_t) eps_theta) / sqrt(a_t) + sigma_t z.
// The noise term is dropped at t = 1 whatever `z` holds.
AffordanceField reverse_step(const NoisePredictor& model, const AffordanceField& s_t, int t, const Eigen::VectorXd& z,
                             const NoiseSchedule& sched);

struct AffordanceSample {
  AffordanceField raw;      // S(0)
  AffordanceField clamped;  // S(0) clipped to [-1, 1], used for cropping
  std::vector<AffordanceField> trajectory;  // S(T), S(T-1), ..., S(0) when recorded
};

// Starts from S(T) ~ N(0, I) and runs reverse_step for t = T..1. Throws
// NumericError if the state stops being finite.
AffordanceSample sample_affordance(const NoisePredictor& model, int n_points, const NoiseSchedule& sched,
                                   std::uint64_t seed, bool record_trajectory);

struct DenoiserConfig {
  int token_dim = 64;
  int num_layers = 3;
  int num_heads = 4;
  int fourier_freqs = 6;
  int encoder_k = 8;
  int time_embed_dim = 64;

  void validate() const;
};

enum class AffordanceMode { diffusion, classification };

// Point-DiT noise predictor over container superpoints. In classification
// mode the same network is used with t = 0 and a zero score channel, and the
// head output is read as a logit.
class AffordanceModel {
 public:
  AffordanceModel(const DenoiserConfig& cfg, std::uint64_t seed, AffordanceMode mode = AffordanceMode::diffusion);

  // Geometry-only inputs, reusable across steps and training iterations.
  struct Inputs {
    EncoderInput encoder;
    Tensor fourier;  // [N, 6 * fourier_freqs]
    int n = 0;
  };
  Inputs prepare(const PointCloud& container) const;

  // Encoder features and per-layer positional tokens for one cloud.
  struct Context {
    Tensor features;
    std::vector<Tensor> positional;
    int n = 0;
  };
  Context encode(const Inputs& in) const;

  // [N, 1] head output for the given noisy scores ([N, 1]) and step.
  Tensor predict(const Context& ctx, const Tensor& scores, int t) const;

  Tensor encoder_features(const PointCloud& pc) const { return encode(prepare(pc)).features; }

  // Predictor that re-encodes the cloud inside the recorded graph; use for
  // training losses.
  NoisePredictor trainable_predictor(const Inputs& in) const;
  // Predictor over a cached no-grad encoding; use for sampling.
  NoisePredictor frozen_predictor(const PointCloud& container) const;

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const DenoiserConfig& config() const { return cfg_; }
  AffordanceMode mode() const { return mode_; }

 private:
  struct Block {
    Linear positional;
    Linear modulation;  // time token -> 6 * d
    Linear qkv;
    Linear attn_out;
    Linear mlp1;
    Linear mlp2;
  };

  Tensor attention(const Block& b, const Tensor& h) const;

  DenoiserConfig cfg_;
  AffordanceMode mode_;
  ParamStore params_;
  PointEncoder encoder_;
  Linear token_in_;
  Linear time1_, time2_;
  std::vector<Block> blocks_;
  Linear final_modulation_;
  Linear head_;
};

// Class-balanced binary cross-entropy of the classification head against
// (label + 1) / 2; positives and negatives carry equal total weight.
Tensor cap_loss(const AffordanceModel& model, const AffordanceModel::Inputs& in, const AffordanceField& labels);
Tensor cap_loss(const AffordanceModel& model, const PointCloud& container, const AffordanceField& labels);

// One forward pass; returns 2 * sigmoid(logit) - 1 per point.
AffordanceField cap_predict(const AffordanceModel& model, const PointCloud& container);

}  // namespace dap

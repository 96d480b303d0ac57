#include "dap/afford.hpp"

#include <cmath>
#include <string>

namespace dap {

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw ConfigError("schedule: T must be >= 1");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
    throw ConfigError("schedule: need 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.T = T;
  double running = 1.0;
  for (int i = 0; i < T; ++i) {
    const double b = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (T - 1);
    s.beta.push_back(b);
    s.alpha.push_back(1.0 - b);
    running *= 1.0 - b;
    s.alpha_bar.push_back(running);
    s.sigma.push_back(std::sqrt(b));
  }
  return s;
}

namespace {

void check_step(int t, const NoiseSchedule& sched) {
  if (t < 1 || t > sched.T) {
    throw ConfigError("diffusion step " + std::to_string(t) + " outside 1.." + std::to_string(sched.T));
  }
}

}  // namespace

AffordanceField q_sample(const AffordanceField& s0, int t, const Eigen::VectorXd& eps, const NoiseSchedule& sched) {
  check_step(t, sched);
  if (eps.size() != s0.size()) {
    throw ShapeError("q_sample: noise has " + std::to_string(eps.size()) + " entries for " + std::to_string(s0.size()) +
                     " scores");
  }
  const double ab = sched.alpha_bar_at(t);
  return std::sqrt(ab) * s0 + std::sqrt(1.0 - ab) * eps;
}

Tensor ddpm_loss(const NoisePredictor& model, const AffordanceField& s0, int t, const Eigen::VectorXd& eps,
                 const NoiseSchedule& sched) {
  const AffordanceField s_t = q_sample(s0, t, eps, sched);
  const Tensor pred = model(Tensor::column(s_t), t);
  if (pred.numel() != static_cast<std::size_t>(s0.size())) {
    throw ShapeError("ddpm_loss: prediction shape " + shape_str(pred.shape()) + " for " + std::to_string(s0.size()) +
                     " scores");
  }
  const Tensor diff = sub(pred, Tensor::column(eps));
  return mean(mul(diff, diff));
}

AffordanceField reverse_step(const NoisePredictor& model, const AffordanceField& s_t, int t, const Eigen::VectorXd& z,
                             const NoiseSchedule& sched) {
  check_step(t, sched);
  if (z.size() != s_t.size()) throw ShapeError("reverse_step: noise length does not match the field");
  const Tensor pred = model(Tensor::column(s_t), t);
  if (pred.numel() != static_cast<std::size_t>(s_t.size())) {
    throw ShapeError("reverse_step: prediction shape " + shape_str(pred.shape()));
  }
  const Eigen::Map<const Eigen::VectorXd> eps_hat(pred.data().data(), s_t.size());
  const double a = sched.alpha_at(t);
  const double ab = sched.alpha_bar_at(t);
  AffordanceField out = (s_t - ((1.0 - a) / std::sqrt(1.0 - ab)) * eps_hat) / std::sqrt(a);
  if (t > 1) out += sched.sigma_at(t) * z;
  return out;
}

AffordanceSample sample_affordance(const NoisePredictor& model, int n_points, const NoiseSchedule& sched,
                                   std::uint64_t seed, bool record_trajectory) {
  if (n_points <= 0) throw SizeError("sample_affordance: empty container");
  Rng rng(seed);
  AffordanceField s(n_points);
  for (int i = 0; i < n_points; ++i) s(i) = rng.normal();

  AffordanceSample out;
  if (record_trajectory) out.trajectory.push_back(s);
  Eigen::VectorXd z(n_points);
  for (int t = sched.T; t >= 1; --t) {
    if (t > 1) {
      for (int i = 0; i < n_points; ++i) z(i) = rng.normal();
    } else {
      z.setZero();
    }
    s = reverse_step(model, s, t, z, sched);
    if (!s.allFinite()) throw NumericError("affordance sampling diverged at step " + std::to_string(t));
    if (record_trajectory) out.trajectory.push_back(s);
  }
  out.raw = s;
  out.clamped = s.cwiseMax(-1.0).cwiseMin(1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Point-DiT

void DenoiserConfig::validate() const {
  if (token_dim <= 0 || num_layers <= 0 || num_heads <= 0 || fourier_freqs <= 0 || encoder_k <= 0 ||
      time_embed_dim <= 0) {
    throw ConfigError("denoiser: all sizes must be positive");
  }
  if (token_dim % num_heads != 0) throw ConfigError("denoiser: token_dim must be divisible by num_heads");
  if (time_embed_dim % 2 != 0) throw ConfigError("denoiser: time_embed_dim must be even");
}

AffordanceModel::AffordanceModel(const DenoiserConfig& cfg, std::uint64_t seed, AffordanceMode mode)
    : cfg_(cfg), mode_(mode) {
  cfg_.validate();
  Rng rng(seed);
  const int d = cfg_.token_dim;
  encoder_ = PointEncoder(params_, "enc", d, d, rng);
  token_in_ = make_linear(params_, "token_in", d + 1, d, rng);
  time1_ = make_linear(params_, "time1", cfg_.time_embed_dim, d, rng);
  time2_ = make_linear(params_, "time2", d, d, rng);
  for (int l = 0; l < cfg_.num_layers; ++l) {
    const std::string p = "block" + std::to_string(l);
    Block b;
    b.positional = make_linear(params_, p + ".pos", 6 * cfg_.fourier_freqs, d, rng);
    b.modulation = make_linear(params_, p + ".ada", d, 6 * d, rng, Init::zero);
    b.qkv = make_linear(params_, p + ".qkv", d, 3 * d, rng);
    b.attn_out = make_linear(params_, p + ".attn_out", d, d, rng);
    b.mlp1 = make_linear(params_, p + ".mlp1", d, 4 * d, rng);
    b.mlp2 = make_linear(params_, p + ".mlp2", 4 * d, d, rng);
    blocks_.push_back(b);
  }
  final_modulation_ = make_linear(params_, "final.ada", d, 2 * d, rng, Init::zero);
  head_ = make_linear(params_, "final.head", d, 1, rng, Init::zero);
}

AffordanceModel::Inputs AffordanceModel::prepare(const PointCloud& container) const {
  Inputs in;
  in.encoder = make_encoder_input(container, cfg_.encoder_k);
  in.fourier = Tensor::from_matrix(fourier_embed(container.positions, cfg_.fourier_freqs));
  in.n = static_cast<int>(container.size());
  return in;
}

AffordanceModel::Context AffordanceModel::encode(const Inputs& in) const {
  Context ctx;
  ctx.features = encoder_(in.encoder);
  for (const auto& b : blocks_) ctx.positional.push_back(b.positional(in.fourier));
  ctx.n = in.n;
  return ctx;
}

namespace {

// x * (1 + scale) + shift with [1, d] modulation rows.
Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale_row) {
  return add(mul(x, add_scalar(scale_row, 1.0)), shift);
}

}  // namespace

Tensor AffordanceModel::attention(const Block& b, const Tensor& h) const {
  return b.attn_out(multi_head_attention(b.qkv(h), cfg_.num_heads));
}

Tensor AffordanceModel::predict(const Context& ctx, const Tensor& scores, int t) const {
  if (scores.rows() != ctx.n || scores.cols() != 1) {
    throw ShapeError("denoiser: scores " + shape_str(scores.shape()) + " for " + std::to_string(ctx.n) + " points");
  }
  const int d = cfg_.token_dim;
  Tensor x = token_in_(concat_cols({ctx.features, scores}));
  const Tensor time_token = time2_(silu(time1_(Tensor::from_matrix(timestep_embed(t, cfg_.time_embed_dim)))));
  const Tensor cond = silu(time_token);

  for (size_t l = 0; l < blocks_.size(); ++l) {
    const Block& b = blocks_[l];
    x = add(x, ctx.positional[l]);
    const Tensor mod = b.modulation(cond);
    const Tensor h1 = modulate(layer_norm(x), slice_cols(mod, 0, d), slice_cols(mod, d, d));
    x = add(x, mul(attention(b, h1), slice_cols(mod, 2 * d, d)));
    const Tensor h2 = modulate(layer_norm(x), slice_cols(mod, 3 * d, d), slice_cols(mod, 4 * d, d));
    x = add(x, mul(b.mlp2(silu(b.mlp1(h2))), slice_cols(mod, 5 * d, d)));
  }
  const Tensor fmod = final_modulation_(cond);
  return head_(modulate(layer_norm(x), slice_cols(fmod, 0, d), slice_cols(fmod, d, d)));
}

NoisePredictor AffordanceModel::trainable_predictor(const Inputs& in) const {
  return [this, in](const Tensor& s_t, int t) { return predict(encode(in), s_t, t); };
}

NoisePredictor AffordanceModel::frozen_predictor(const PointCloud& container) const {
  Context ctx;
  {
    NoGradGuard no_grad;
    ctx = encode(prepare(container));
  }
  return [this, ctx](const Tensor& s_t, int t) {
    NoGradGuard no_grad;
    return predict(ctx, s_t, t);
  };
}

// ---------------------------------------------------------------------------
// Classification ablation

Tensor cap_loss(const AffordanceModel& model, const AffordanceModel::Inputs& in, const AffordanceField& labels) {
  if (labels.size() != in.n) throw ShapeError("cap_loss: label count does not match the container");
  const Tensor logits = model.predict(model.encode(in), Tensor(Shape{in.n, 1}), 0);

  const Eigen::Index n_pos = (labels.array() > 0.0).count();
  const Eigen::Index n_neg = labels.size() - n_pos;
  Eigen::VectorXd y(labels.size()), w(labels.size());
  for (Eigen::Index i = 0; i < labels.size(); ++i) {
    y(i) = labels(i) > 0.0 ? 1.0 : 0.0;
    if (n_pos == 0 || n_neg == 0) w(i) = 1.0 / static_cast<double>(labels.size());
    else w(i) = y(i) > 0.0 ? 0.5 / static_cast<double>(n_pos) : 0.5 / static_cast<double>(n_neg);
  }
  // softplus(z) - y z is the stable form of -[y log s(z) + (1 - y) log(1 - s(z))]
  const Tensor per_point = sub(softplus(logits), mul(logits, Tensor::column(y)));
  return sum(mul(per_point, Tensor::column(w)));
}

Tensor cap_loss(const AffordanceModel& model, const PointCloud& container, const AffordanceField& labels) {
  return cap_loss(model, model.prepare(container), labels);
}

AffordanceField cap_predict(const AffordanceModel& model, const PointCloud& container) {
  NoGradGuard no_grad;
  const auto in = model.prepare(container);
  const Tensor logits = model.predict(model.encode(in), Tensor(Shape{in.n, 1}), 0);
  const Tensor p = sigmoid(logits);
  return 2.0 * Eigen::Map<const Eigen::VectorXd>(p.data().data(), in.n).array() - 1.0;
}

}  // namespace dap

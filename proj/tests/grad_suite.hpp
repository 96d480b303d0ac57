#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dap/afford.hpp"
#include "dap/corr.hpp"
#include "dap/rng.hpp"
#include "dap/tensor.hpp"

namespace dap::testing {

// One randomly shaped finite-difference check per call.
struct GradCase {
  std::string name;
  std::function<GradCheckReport(Rng&, double h, double tol)> run;
};

inline Tensor random_tensor(Rng& rng, int r, int c, double lo = -1.0, double hi = 1.0) {
  RowMatrix m(r, c);
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) m(i, j) = rng.uniform(lo, hi);
  }
  return Tensor::from_matrix(m);
}

// Random linear read-out so that every output entry reaches the loss.
inline Tensor readout(const Tensor& y, const Tensor& w) { return sum(mul(y, w)); }

inline GradCheckReport check_unary(Rng& rng, int r, int c, double lo, double hi, double h, double tol,
                                   const std::function<Tensor(const Tensor&)>& op) {
  const Tensor x = random_tensor(rng, r, c, lo, hi);
  const Tensor probe = op(x.detach());
  const Tensor w = random_tensor(rng, probe.rows(), probe.cols());
  return grad_check([&](const Tensor& v) { return readout(op(v), w); }, x, h, tol);
}

// Checks both operands of a binary op; reports the worse of the two.
inline GradCheckReport check_binary(Rng& rng, const Tensor& a, const Tensor& b, double h, double tol,
                                    const std::function<Tensor(const Tensor&, const Tensor&)>& op) {
  const Tensor probe = op(a.detach(), b.detach());
  const Tensor w = random_tensor(rng, probe.rows(), probe.cols());
  const auto ra = grad_check([&](const Tensor& v) { return readout(op(v, b), w); }, a, h, tol);
  const auto rb = grad_check([&](const Tensor& v) { return readout(op(a, v), w); }, b, h, tol);
  GradCheckReport out;
  out.max_rel_err = std::max(ra.max_rel_err, rb.max_rel_err);
  out.pass = ra.pass && rb.pass;
  return out;
}

inline int dim(Rng& rng, int lo = 1, int hi = 6) { return rng.uniform_int(lo, hi); }

inline std::vector<GradCase> grad_cases() {
  using Op2 = std::function<Tensor(const Tensor&, const Tensor&)>;
  std::vector<GradCase> cases;
  auto elementwise = [&](const std::string& name, Op2 op) {
    cases.push_back({name, [op](Rng& rng, double h, double tol) {
                       const int r = dim(rng), c = dim(rng);
                       const int mode = rng.uniform_int(0, 2);  // same shape, row broadcast, scalar
                       const Tensor a = random_tensor(rng, r, c);
                       const Tensor b = mode == 0   ? random_tensor(rng, r, c)
                                        : mode == 1 ? random_tensor(rng, 1, c)
                                                    : random_tensor(rng, 1, 1);
                       return check_binary(rng, a, b, h, tol, op);
                     }});
  };
  elementwise("add", [](const Tensor& a, const Tensor& b) { return add(a, b); });
  elementwise("sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); });
  elementwise("mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); });

  auto unary = [&](const std::string& name, double lo, double hi, std::function<Tensor(const Tensor&)> op,
                   int min_cols = 1) {
    cases.push_back({name, [=](Rng& rng, double h, double tol) {
                       return check_unary(rng, dim(rng), dim(rng, min_cols), lo, hi, h, tol, op);
                     }});
  };
  unary("scale", -1, 1, [](const Tensor& x) { return scale(x, -1.7); });
  unary("add_scalar", -1, 1, [](const Tensor& x) { return add_scalar(x, 0.3); });
  unary("neg", -1, 1, [](const Tensor& x) { return neg(x); });
  unary("transpose", -1, 1, [](const Tensor& x) { return transpose(x); });
  unary("softmax", -2, 2, [](const Tensor& x) { return softmax(x); });
  unary("layer_norm", -2, 2, [](const Tensor& x) { return layer_norm(x); }, 2);
  unary("silu", -3, 3, [](const Tensor& x) { return silu(x); });
  unary("tanh", -2, 2, [](const Tensor& x) { return tanh(x); });
  unary("sigmoid", -4, 4, [](const Tensor& x) { return sigmoid(x); });
  unary("log", 0.2, 2.0, [](const Tensor& x) { return log(x); });
  unary("softplus", -3, 3, [](const Tensor& x) { return softplus(x); });
  unary("pow_scalar", 0.3, 2.0, [](const Tensor& x) { return pow_scalar(x, 2.5); });
  unary("sum", -1, 1, [](const Tensor& x) { return sum(x); });
  unary("mean", -1, 1, [](const Tensor& x) { return mean(x); });

  cases.push_back({"clamp", [](Rng& rng, double h, double tol) {
                     // Keep every entry clear of the kinks.
                     const int r = dim(rng), c = dim(rng);
                     RowMatrix m(r, c);
                     for (int i = 0; i < r; ++i) {
                       for (int j = 0; j < c; ++j) {
                         double v = rng.uniform(-1, 1);
                         while (std::abs(std::abs(v) - 0.5) < 0.01) v = rng.uniform(-1, 1);
                         m(i, j) = v;
                       }
                     }
                     const Tensor w = random_tensor(rng, r, c);
                     return grad_check([&](const Tensor& v) { return readout(clamp(v, -0.5, 0.5), w); },
                                       Tensor::from_matrix(m), h, tol);
                   }});
  cases.push_back({"matmul", [](Rng& rng, double h, double tol) {
                     const int m = dim(rng), k = dim(rng), n = dim(rng);
                     return check_binary(rng, random_tensor(rng, m, k), random_tensor(rng, k, n), h, tol,
                                         [](const Tensor& a, const Tensor& b) { return matmul(a, b); });
                   }});
  cases.push_back({"matmul_nt", [](Rng& rng, double h, double tol) {
                     const int m = dim(rng), k = dim(rng), n = dim(rng);
                     return check_binary(rng, random_tensor(rng, m, k), random_tensor(rng, n, k), h, tol,
                                         [](const Tensor& a, const Tensor& b) { return matmul_nt(a, b); });
                   }});
  cases.push_back({"multi_head_attention", [](Rng& rng, double h, double tol) {
                     const int heads = rng.uniform_int(1, 3);
                     const int dh = dim(rng, 1, 4);
                     return check_unary(rng, dim(rng), 3 * heads * dh, -1.5, 1.5, h, tol,
                                        [=](const Tensor& x) { return multi_head_attention(x, heads); });
                   }});
  cases.push_back({"concat_cols", [](Rng& rng, double h, double tol) {
                     const int r = dim(rng);
                     return check_binary(rng, random_tensor(rng, r, dim(rng)), random_tensor(rng, r, dim(rng)), h, tol,
                                         [](const Tensor& a, const Tensor& b) { return concat_cols({a, b, a}); });
                   }});
  cases.push_back({"slice_cols", [](Rng& rng, double h, double tol) {
                     const int c = dim(rng, 2, 7);
                     const int start = rng.uniform_int(0, c - 1);
                     const int len = rng.uniform_int(1, c - start);
                     return check_unary(rng, dim(rng), c, -1, 1, h, tol,
                                        [=](const Tensor& x) { return slice_cols(x, start, len); });
                   }});
  cases.push_back({"gather_rows", [](Rng& rng, double h, double tol) {
                     const int r = dim(rng);
                     std::vector<int> idx(static_cast<size_t>(dim(rng, 1, 10)));
                     for (int& i : idx) i = rng.uniform_int(0, r - 1);
                     return check_unary(rng, r, dim(rng), -1, 1, h, tol,
                                        [=](const Tensor& x) { return gather_rows(x, idx); });
                   }});
  cases.push_back({"broadcast_rows", [](Rng& rng, double h, double tol) {
                     const int n = dim(rng);
                     return check_unary(rng, 1, dim(rng), -1, 1, h, tol,
                                        [=](const Tensor& x) { return broadcast_rows(x, n); });
                   }});
  cases.push_back({"reshape", [](Rng& rng, double h, double tol) {
                     const int r = dim(rng), c = dim(rng);
                     return check_unary(rng, r, c, -1, 1, h, tol,
                                        [=](const Tensor& x) { return reshape(x, {c, r}); });
                   }});
  cases.push_back({"max_pool_groups", [](Rng& rng, double h, double tol) {
                     const int n = dim(rng, 1, 4), k = dim(rng, 1, 4);
                     return check_unary(rng, n * k, dim(rng), -1, 1, h, tol,
                                        [=](const Tensor& x) { return max_pool_groups(x, k); });
                   }});
  cases.push_back({"group_softmax", [](Rng& rng, double h, double tol) {
                     const int n = dim(rng, 1, 4), k = dim(rng, 1, 4);
                     return check_unary(rng, n * k, dim(rng), -2, 2, h, tol,
                                        [=](const Tensor& x) { return group_softmax(x, k); });
                   }});
  cases.push_back({"grouped_weighted_sum", [](Rng& rng, double h, double tol) {
                     const int n = dim(rng, 1, 4), k = dim(rng, 1, 4), g = dim(rng, 1, 3), per = dim(rng, 1, 3);
                     return check_binary(rng, random_tensor(rng, n * k, g), random_tensor(rng, n * k, g * per), h, tol,
                                         [=](const Tensor& w, const Tensor& v) { return grouped_weighted_sum(w, v, k); });
                   }});

  // The two training objectives, differentiated through their inputs.
  cases.push_back({"ddpm_loss", [](Rng& rng, double h, double tol) {
                     static const NoiseSchedule sched = make_schedule(100, 1e-4, 0.02);
                     const int n = dim(rng, 2, 12);
                     Eigen::VectorXd s0(n), eps(n);
                     for (int i = 0; i < n; ++i) {
                       s0(i) = rng.uniform() < 0.3 ? 1.0 : -1.0;
                       eps(i) = rng.normal();
                     }
                     const int t = rng.uniform_int(1, sched.T);
                     const Tensor w = random_tensor(rng, 1, 1);
                     const Tensor b = random_tensor(rng, n, 1);
                     // eps_theta(s_t) = tanh(s_t * w + b): a tiny stand-in network.
                     return check_binary(rng, w, b, h, tol, [&](const Tensor& wv, const Tensor& bv) {
                       const NoisePredictor model = [&](const Tensor& st, int) { return tanh(add(mul(st, wv), bv)); };
                       return ddpm_loss(model, s0, t, eps, sched);
                     });
                   }});
  cases.push_back({"focal_loss", [](Rng& rng, double h, double tol) {
                     const int r = dim(rng), c = dim(rng);
                     CorrespondenceMatrix label(r, c);
                     for (int i = 0; i < r; ++i) {
                       for (int j = 0; j < c; ++j) label(i, j) = rng.uniform() < 0.3 ? 1.0 : 0.0;
                     }
                     const double gamma = rng.uniform(0.0, 3.0);
                     const Tensor x = random_tensor(rng, r, c, -3, 3);
                     return grad_check([&](const Tensor& v) { return focal_loss(sigmoid(v), label, gamma); }, x, h, tol);
                   }});
  return cases;
}

}  // namespace dap::testing

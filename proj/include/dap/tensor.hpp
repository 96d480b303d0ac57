#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dap/errors.hpp"

namespace dap {

using Shape = std::vector<int>;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
// Storage aligned like Eigen's own allocations. Vectorised reductions peel
// a scalar head up to the first aligned element, so a malloc-dependent
// offset would change the summation order between runs.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

std::string shape_str(const Shape& s);

namespace detail {
struct Node;
}

// Dense row-major array of doubles with an optional reverse-mode graph.
//
// A Tensor is a handle: copies share storage. Every op returns a fresh node
// whose parents are kept alive by the result, so a graph lives as long as
// its loss handle. For rank >= 2 the leading axes are flattened into rows
// and the last axis is the column axis; a scalar has shape {}.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor from_matrix(const Eigen::Ref<const RowMatrix>& m);
  // n x 1 column from a vector.
  static Tensor column(const Eigen::Ref<const Eigen::VectorXd>& v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  std::size_t numel() const;
  int rows() const;
  int cols() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();  // allocates a zero buffer on first use
  void zero_grad();

  Eigen::Map<const RowMatrix> matrix() const;
  Eigen::Map<RowMatrix> mutable_matrix();
  Eigen::Map<const RowMatrix> grad_matrix() const;
  double item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  // Same values, no graph.
  Tensor detach() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {
struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  double* grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad.data();
  }
};
}  // namespace detail

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

// Elementwise binary ops. `b` may match `a`, be a single row broadcast over
// the rows of `a`, or be a scalar.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor neg(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);
// a * b^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, int start, int len);
Tensor gather_rows(const Tensor& a, std::vector<int> index);
// [1, d] -> [n, d]
Tensor broadcast_rows(const Tensor& a, int n);
Tensor reshape(const Tensor& a, Shape shape);

Tensor softmax(const Tensor& a);
// Self-attention over the rows of a packed [N, 3d] tensor holding q, k and v.
// Each of the `heads` heads uses a contiguous d / heads column slice of q, k
// and v; scores are scaled by 1 / sqrt(d / heads). Returns [N, d].
Tensor multi_head_attention(const Tensor& qkv, int heads);
// Normalises each row to zero mean and unit variance; no affine part.
Tensor layer_norm(const Tensor& a, double eps = 1e-5);
Tensor silu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor log(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor pow_scalar(const Tensor& a, double p);
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Rows are grouped in consecutive runs of k. [N*k, d] -> [N, d] columnwise max.
Tensor max_pool_groups(const Tensor& a, int k);
// Softmax over each run of k rows, independently per column.
Tensor group_softmax(const Tensor& logits, int k);
// out[n, c] = sum_j w[n*k + j, c / (C / G)] * v[n*k + j, c] for w [N*k, G], v [N*k, C].
Tensor grouped_weighted_sum(const Tensor& w, const Tensor& v, int k);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// Reverse pass from a scalar. Gradients accumulate into leaves that require
// them; intermediate gradients are reset first, so running backward twice on
// one graph adds exactly twice the gradient to each leaf.
void backward(const Tensor& loss);

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
};

// Central-difference check of d f / d x. Relative error per entry uses
// max(|analytic|, |numeric|, 1e-8) as the denominator.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h, double tol);

}  // namespace dap

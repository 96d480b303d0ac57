#include "dap/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace dap {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;
using MapC = Eigen::Map<const RowMatrix>;
using MapM = Eigen::Map<RowMatrix>;

namespace {

thread_local bool g_grad_enabled = true;

std::size_t product(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

int rows_of(const Shape& s) {
  if (s.size() <= 1) return 1;
  int r = 1;
  for (size_t i = 0; i + 1 < s.size(); ++i) r *= s[i];
  return r;
}

int cols_of(const Shape& s) { return s.empty() ? 1 : s.back(); }

MapC value_of(const Node& n) { return MapC(n.value.data(), rows_of(n.shape), cols_of(n.shape)); }
MapM grad_of(Node& n) { return MapM(n.grad_buffer(), rows_of(n.shape), cols_of(n.shape)); }
MapC out_grad(const Node& n) { return MapC(n.grad.data(), rows_of(n.shape), cols_of(n.shape)); }

bool wants_grad(const Node& n) { return n.requires_grad; }

// Creates the result node; parents and the backward closure are only kept
// when recording is on and some input needs a gradient.
NodePtr make_result(Shape shape, std::initializer_list<NodePtr> parents, const char* op) {
  auto out = std::make_shared<Node>();
  out->shape = std::move(shape);
  out->value.assign(product(out->shape), 0.0);
  out->op = op;
  if (g_grad_enabled) {
    for (const auto& p : parents) {
      if (p->requires_grad) {
        out->requires_grad = true;
        break;
      }
    }
    if (out->requires_grad) out->parents.assign(parents.begin(), parents.end());
  }
  return out;
}

NodePtr make_result_list(Shape shape, const std::vector<NodePtr>& parents, const char* op) {
  auto out = std::make_shared<Node>();
  out->shape = std::move(shape);
  out->value.assign(product(out->shape), 0.0);
  out->op = op;
  if (g_grad_enabled) {
    for (const auto& p : parents) out->requires_grad = out->requires_grad || p->requires_grad;
    if (out->requires_grad) out->parents = parents;
  }
  return out;
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

enum class Bcast { same, row, scalar };

Bcast broadcast_kind(const char* op, const Node& a, const Node& b) {
  if (a.shape == b.shape) return Bcast::same;
  if (b.value.size() == 1) return Bcast::scalar;
  if (rows_of(b.shape) == 1 && cols_of(b.shape) == cols_of(a.shape) && b.shape.size() <= 2) return Bcast::row;
  if (a.value.size() == b.value.size() && rows_of(a.shape) == rows_of(b.shape) &&
      cols_of(a.shape) == cols_of(b.shape)) {
    return Bcast::same;
  }
  shape_fail(op, a.shape, b.shape);
}

// Sum a full-size gradient into the (possibly broadcast) operand's gradient.
template <typename Derived>
void reduce_into(Node& target, Bcast kind, const Eigen::MatrixBase<Derived>& g) {
  switch (kind) {
    case Bcast::same:
      grad_of(target) += g;
      break;
    case Bcast::row:
      grad_of(target).row(0) += g.colwise().sum();
      break;
    case Bcast::scalar:
      target.grad_buffer()[0] += g.sum();
      break;
  }
}

// Applies f(dst, a, b) with b broadcast to a's shape, one row at a time for
// row broadcasts so the expanded operand is never materialised.
template <typename F>
void broadcast_apply(MapM dst, MapC a, const Node& b, Bcast kind, F f) {
  switch (kind) {
    case Bcast::same:
      f(dst.array(), a.array(), value_of(b).array());
      break;
    case Bcast::row: {
      const auto brow = value_of(b).row(0).array();
      for (Eigen::Index i = 0; i < a.rows(); ++i) f(dst.row(i).array(), a.row(i).array(), brow);
      break;
    }
    case Bcast::scalar:
      f(dst.array(), a.array(), b.value[0]);
      break;
  }
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, const char* op, Fwd fwd, Deriv deriv) {
  const NodePtr& an = a.node_ptr();
  NodePtr out = make_result(an->shape, {an}, op);
  for (size_t i = 0; i < an->value.size(); ++i) out->value[i] = fwd(an->value[i]);
  if (out->requires_grad) {
    out->backward = [deriv](Node& self) {
      Node& p = *self.parents[0];
      if (!wants_grad(p)) return;
      double* g = p.grad_buffer();
      for (size_t i = 0; i < self.value.size(); ++i) g[i] += self.grad[i] * deriv(p.value[i], self.value[i]);
    };
  }
  return Tensor(out);
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor handle

Tensor::Tensor(Shape shape, double fill) : node_(std::make_shared<Node>()) {
  for (int d : shape) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  node_->value.assign(product(shape), fill);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : node_(std::make_shared<Node>()) {
  for (int d : shape) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (values.size() != product(shape)) {
    throw ShapeError("tensor data has " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
  }
  node_->shape = std::move(shape);
  node_->value.assign(values.begin(), values.end());
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

Tensor Tensor::from_matrix(const Eigen::Ref<const RowMatrix>& m) {
  Tensor t(Shape{static_cast<int>(m.rows()), static_cast<int>(m.cols())});
  t.mutable_matrix() = m;
  return t;
}

Tensor Tensor::column(const Eigen::Ref<const Eigen::VectorXd>& v) {
  Tensor t(Shape{static_cast<int>(v.size()), 1});
  std::copy(v.data(), v.data() + v.size(), t.node_->value.begin());
  return t;
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->value.size(); }
int Tensor::rows() const { return rows_of(node_->shape); }
int Tensor::cols() const { return cols_of(node_->shape); }
std::span<const double> Tensor::data() const { return node_->value; }
std::span<double> Tensor::mutable_data() { return node_->value; }
bool Tensor::has_grad() const { return node_->grad.size() == node_->value.size(); }
std::span<const double> Tensor::grad() const { return node_->grad; }
std::span<double> Tensor::mutable_grad() { return {node_->grad_buffer(), node_->value.size()}; }
void Tensor::zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }
Eigen::Map<const RowMatrix> Tensor::matrix() const { return value_of(*node_); }
Eigen::Map<RowMatrix> Tensor::mutable_matrix() { return MapM(node_->value.data(), rows(), cols()); }
Eigen::Map<const RowMatrix> Tensor::grad_matrix() const {
  node_->grad_buffer();
  return MapC(node_->grad.data(), rows(), cols());
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

Tensor Tensor::detach() const {
  Tensor out(node_->shape);
  out.node_->value = node_->value;
  return out;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  const NodePtr &an = a.node_ptr(), &bn = b.node_ptr();
  if (an->value.size() < bn->value.size()) return add(b, a);
  const Bcast kind = broadcast_kind("add", *an, *bn);
  NodePtr out = make_result(an->shape, {an, bn}, "add");
  const int r = rows_of(an->shape), c = cols_of(an->shape);
  broadcast_apply(MapM(out->value.data(), r, c), value_of(*an), *bn, kind,
                  [](auto&& d, const auto& x, const auto& y) { d = x + y; });
  if (out->requires_grad) {
    out->backward = [kind](Node& self) {
      const MapC g = out_grad(self);
      if (wants_grad(*self.parents[0])) grad_of(*self.parents[0]) += g;
      if (wants_grad(*self.parents[1])) reduce_into(*self.parents[1], kind, g);
    };
  }
  return Tensor(out);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.numel() < b.numel()) return add(neg(b), a);
  const NodePtr &an = a.node_ptr(), &bn = b.node_ptr();
  const Bcast kind = broadcast_kind("sub", *an, *bn);
  NodePtr out = make_result(an->shape, {an, bn}, "sub");
  const int r = rows_of(an->shape), c = cols_of(an->shape);
  broadcast_apply(MapM(out->value.data(), r, c), value_of(*an), *bn, kind,
                  [](auto&& d, const auto& x, const auto& y) { d = x - y; });
  if (out->requires_grad) {
    out->backward = [kind](Node& self) {
      const MapC g = out_grad(self);
      if (wants_grad(*self.parents[0])) grad_of(*self.parents[0]) += g;
      if (wants_grad(*self.parents[1])) reduce_into(*self.parents[1], kind, -g);
    };
  }
  return Tensor(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const NodePtr &an = a.node_ptr(), &bn = b.node_ptr();
  if (an->value.size() < bn->value.size()) return mul(b, a);
  const Bcast kind = broadcast_kind("mul", *an, *bn);
  NodePtr out = make_result(an->shape, {an, bn}, "mul");
  const int r = rows_of(an->shape), c = cols_of(an->shape);
  broadcast_apply(MapM(out->value.data(), r, c), value_of(*an), *bn, kind,
                  [](auto&& d, const auto& x, const auto& y) { d = x * y; });
  if (out->requires_grad) {
    out->backward = [kind](Node& self) {
      Node& pa = *self.parents[0];
      Node& pb = *self.parents[1];
      const MapC g = out_grad(self);
      if (wants_grad(pa)) {
        broadcast_apply(grad_of(pa), g, pb, kind, [](auto&& d, const auto& x, const auto& y) { d += x * y; });
      }
      if (wants_grad(pb)) reduce_into(pb, kind, g.cwiseProduct(value_of(pa)));
    };
  }
  return Tensor(out);
}

Tensor scale(const Tensor& a, double c) {
  return unary(a, "scale", [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary(a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

// Vectorised; the generic unary path costs a scalar exp per element.
Tensor silu(const Tensor& a) {
  using MapA = Eigen::Map<const Eigen::ArrayXd>;
  const NodePtr& an = a.node_ptr();
  NodePtr out = make_result(an->shape, {an}, "silu");
  const auto n = static_cast<Eigen::Index>(an->value.size());
  const MapA x(an->value.data(), n);
  Eigen::Map<Eigen::ArrayXd>(out->value.data(), n) = x / (1.0 + (-x).exp());
  if (out->requires_grad) {
    out->backward = [n](Node& self) {
      Node& p = *self.parents[0];
      if (!wants_grad(p)) return;
      const MapA xs(p.value.data(), n);
      const Eigen::ArrayXd s = 1.0 / (1.0 + (-xs).exp());
      Eigen::Map<Eigen::ArrayXd>(p.grad_buffer(), n) += MapA(self.grad.data(), n) * s * (1.0 + xs * (1.0 - s));
    };
  }
  return Tensor(out);
}

Tensor tanh(const Tensor& a) {
  return unary(a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(a, "sigmoid", sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Tensor log(const Tensor& a) {
  return unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor softplus(const Tensor& a) {
  return unary(
      a, "softplus", [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
      [](double x, double) { return sigmoid_scalar(x); });
}

Tensor pow_scalar(const Tensor& a, double p) {
  return unary(
      a, "pow", [p](double x) { return std::pow(x, p); },
      [p](double x, double) { return p == 0.0 ? 0.0 : p * std::pow(x, p - 1.0); });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary(
      a, "clamp", [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  const NodePtr &an = a.node_ptr(), &bn = b.node_ptr();
  if (an->shape.size() != 2 || bn->shape.size() != 2 || an->shape[1] != bn->shape[0]) {
    shape_fail("matmul", an->shape, bn->shape);
  }
  const int m = an->shape[0], n = bn->shape[1];
  NodePtr out = make_result({m, n}, {an, bn}, "matmul");
  MapM(out->value.data(), m, n).noalias() = value_of(*an) * value_of(*bn);
  if (out->requires_grad) {
    out->backward = [](Node& self) {
      Node& pa = *self.parents[0];
      Node& pb = *self.parents[1];
      const MapC g = out_grad(self);
      if (wants_grad(pa)) grad_of(pa).noalias() += g * value_of(pb).transpose();
      if (wants_grad(pb)) grad_of(pb).noalias() += value_of(pa).transpose() * g;
    };
  }
  return Tensor(out);
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const NodePtr &an = a.node_ptr(), &bn = b.node_ptr();
  if (an->shape.size() != 2 || bn->shape.size() != 2 || an->shape[1] != bn->shape[1]) {
    shape_fail("matmul_nt", an->shape, bn->shape);
  }
  const int m = an->shape[0], n = bn->shape[0];
  NodePtr out = make_result({m, n}, {an, bn}, "matmul_nt");
  MapM(out->value.data(), m, n).noalias() = value_of(*an) * value_of(*bn).transpose();
  if (out->requires_grad) {
    out->backward = [](Node& self) {
      Node& pa = *self.parents[0];
      Node& pb = *self.parents[1];
      const MapC g = out_grad(self);
      if (wants_grad(pa)) grad_of(pa).noalias() += g * value_of(pb);
      if (wants_grad(pb)) grad_of(pb).noalias() += g.transpose() * value_of(pa);
    };
  }
  return Tensor(out);
}

Tensor transpose(const Tensor& a) {
  const NodePtr& an = a.node_ptr();
  if (an->shape.size() != 2) throw ShapeError("transpose expects rank 2, got " + shape_str(an->shape));
  const int r = an->shape[0], c = an->shape[1];
  NodePtr out = make_result({c, r}, {an}, "transpose");
  MapM(out->value.data(), c, r) = value_of(*an).transpose();
  if (out->requires_grad) {
    out->backward = [](Node& self) {
      if (wants_grad(*self.parents[0])) grad_of(*self.parents[0]) += out_grad(self).transpose();
    };
  }
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Structural

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const int r = parts.front().rows();
  int total = 0;
  std::vector<NodePtr> nodes;
  for (const auto& p : parts) {
    if (p.rows() != r) shape_fail("concat_cols", parts.front().shape(), p.shape());
    total += p.cols();
    nodes.push_back(p.node_ptr());
  }
  NodePtr out = make_result_list({r, total}, nodes, "concat_cols");
  MapM o(out->value.data(), r, total);
  int off = 0;
  for (const auto& p : parts) {
    o.middleCols(off, p.cols()) = p.matrix();
    off += p.cols();
  }
  if (out->requires_grad) {
    out->backward = [r, total](Node& self) {
      const MapC g(self.grad.data(), r, total);
      int offset = 0;
      for (auto& p : self.parents) {
        const int c = cols_of(p->shape);
        if (wants_grad(*p)) grad_of(*p) += g.middleCols(offset, c);
        offset += c;
      }
    };
  }
  return Tensor(out);
}

Tensor slice_cols(const Tensor& a, int start, int len) {
  const NodePtr& an = a.node_ptr();
  const int r = rows_of(an->shape), c = cols_of(an->shape);
  if (start < 0 || len <= 0 || start + len > c) {
    throw ShapeError("slice_cols: [" + std::to_string(start) + ", " + std::to_string(start + len) +
                     ") out of range for shape " + shape_str(an->shape));
  }
  NodePtr out = make_result({r, len}, {an}, "slice_cols");
  MapM(out->value.data(), r, len) = value_of(*an).middleCols(start, len);
  if (out->requires_grad) {
    out->backward = [start, len](Node& self) {
      if (wants_grad(*self.parents[0])) grad_of(*self.parents[0]).middleCols(start, len) += out_grad(self);
    };
  }
  return Tensor(out);
}

Tensor gather_rows(const Tensor& a, std::vector<int> index) {
  const NodePtr& an = a.node_ptr();
  const int r = rows_of(an->shape), c = cols_of(an->shape);
  for (int i : index) {
    if (i < 0 || i >= r) throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range for " + shape_str(an->shape));
  }
  if (index.empty()) throw ShapeError("gather_rows: empty index");
  const int n = static_cast<int>(index.size());
  NodePtr out = make_result({n, c}, {an}, "gather_rows");
  const MapC src = value_of(*an);
  MapM dst(out->value.data(), n, c);
  for (int i = 0; i < n; ++i) dst.row(i) = src.row(index[static_cast<size_t>(i)]);
  if (out->requires_grad) {
    out->backward = [index = std::move(index)](Node& self) {
      Node& p = *self.parents[0];
      if (!wants_grad(p)) return;
      MapM g = grad_of(p);
      const MapC go = out_grad(self);
      for (size_t i = 0; i < index.size(); ++i) g.row(index[i]) += go.row(static_cast<Eigen::Index>(i));
    };
  }
  return Tensor(out);
}

Tensor broadcast_rows(const Tensor& a, int n) {
  const NodePtr& an = a.node_ptr();
  if (rows_of(an->shape) != 1) throw ShapeError("broadcast_rows expects a single row, got " + shape_str(an->shape));
  const int c = cols_of(an->shape);
  NodePtr out = make_result({n, c}, {an}, "broadcast_rows");
  MapM(out->value.data(), n, c) = value_of(*an).replicate(n, 1);
  if (out->requires_grad) {
    out->backward = [](Node& self) {
      if (wants_grad(*self.parents[0])) grad_of(*self.parents[0]) += out_grad(self).colwise().sum();
    };
  }
  return Tensor(out);
}

Tensor reshape(const Tensor& a, Shape shape) {
  const NodePtr& an = a.node_ptr();
  if (product(shape) != an->value.size()) shape_fail("reshape", an->shape, shape);
  NodePtr out = make_result(std::move(shape), {an}, "reshape");
  out->value = an->value;
  if (out->requires_grad) {
    out->backward = [](Node& self) {
      Node& p = *self.parents[0];
      if (!wants_grad(p)) return;
      double* g = p.grad_buffer();
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    };
  }
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Normalisation

Tensor softmax(const Tensor& a) {
  const NodePtr& an = a.node_ptr();
  const int r = rows_of(an->shape), c = cols_of(an->shape);
  NodePtr out = make_result(an->shape, {an}, "softmax");
  const MapC x = value_of(*an);
  MapM y(out->value.data(), r, c);
  for (int i = 0; i < r; ++i) {
    const double m = x.row(i).maxCoeff();
    y.row(i) = (x.row(i).array() - m).exp();
    y.row(i) /= y.row(i).sum();
  }
  if (out->requires_grad) {
    out->backward = [r, c](Node& self) {
      Node& p = *self.parents[0];
      if (!wants_grad(p)) return;
      const MapC yv(self.value.data(), r, c);
      const MapC g = out_grad(self);
      MapM gx = grad_of(p);
      for (int i = 0; i < r; ++i) {
        const double dot = g.row(i).dot(yv.row(i));
        gx.row(i).array() += yv.row(i).array() * (g.row(i).array() - dot);
      }
    };
  }
  return Tensor(out);
}

Tensor layer_norm(const Tensor& a, double eps) {
  const NodePtr& an = a.node_ptr();
  const int r = rows_of(an->shape), c = cols_of(an->shape);
  NodePtr out = make_result(an->shape, {an}, "layer_norm");
  const MapC x = value_of(*an);
  MapM y(out->value.data(), r, c);
  Eigen::VectorXd inv_std(r);
  for (int i = 0; i < r; ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    y.row(i) = (x.row(i).array() - mu) * inv_std(i);
  }
  if (out->requires_grad) {
    out->backward = [r, c, inv_std](Node& self) {
      Node& p = *self.parents[0];
      if (!wants_grad(p)) return;
      const MapC yv(self.value.data(), r, c);
      const MapC g = out_grad(self);
      MapM gx = grad_of(p);
      for (int i = 0; i < r; ++i) {
        const double gm = g.row(i).mean();
        const double gy = g.row(i).dot(yv.row(i)) / c;
        gx.row(i).array() += inv_std(i) * (g.row(i).array() - gm - yv.row(i).array() * gy);
      }
    };
  }
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  const NodePtr& an = a.node_ptr();
  NodePtr out = make_result({}, {an}, "sum");
  out->value[0] = std::accumulate(an->value.begin(), an->value.end(), 0.0);
  if (out->requires_grad) {
    out->backward = [](Node& self) {
      Node& p = *self.parents[0];
      if (!wants_grad(p)) return;
      double* g = p.grad_buffer();
      for (size_t i = 0; i < p.value.size(); ++i) g[i] += self.grad[0];
    };
  }
  return Tensor(out);
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

// ---------------------------------------------------------------------------
// Grouped ops for neighbourhood pooling and grouped vector attention

Tensor max_pool_groups(const Tensor& a, int k) {
  const NodePtr& an = a.node_ptr();
  const int r = rows_of(an->shape), c = cols_of(an->shape);
  if (k <= 0 || r % k != 0) throw ShapeError("max_pool_groups: rows " + std::to_string(r) + " not divisible by k=" + std::to_string(k));
  const int n = r / k;
  NodePtr out = make_result({n, c}, {an}, "max_pool_groups");
  const MapC x = value_of(*an);
  MapM y(out->value.data(), n, c);
  std::vector<int> arg(static_cast<size_t>(n) * c);
  for (int g = 0; g < n; ++g) {
    for (int j = 0; j < c; ++j) {
      int best = g * k;
      for (int m = 1; m < k; ++m) {
        if (x(g * k + m, j) > x(best, j)) best = g * k + m;
      }
      y(g, j) = x(best, j);
      arg[static_cast<size_t>(g) * c + j] = best;
    }
  }
  if (out->requires_grad) {
    out->backward = [n, c, arg = std::move(arg)](Node& self) {
      Node& p = *self.parents[0];
      if (!wants_grad(p)) return;
      MapM gx = grad_of(p);
      const MapC g = out_grad(self);
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < c; ++j) gx(arg[static_cast<size_t>(i) * c + j], j) += g(i, j);
      }
    };
  }
  return Tensor(out);
}

Tensor multi_head_attention(const Tensor& qkv, int heads) {
  const NodePtr& an = qkv.node_ptr();
  const int n = rows_of(an->shape), c = cols_of(an->shape);
  if (an->shape.size() != 2 || heads <= 0 || c % (3 * heads) != 0) {
    throw ShapeError("multi_head_attention: " + shape_str(an->shape) + " cannot hold q, k, v for " +
                     std::to_string(heads) + " heads");
  }
  const int d = c / 3, dh = d / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  NodePtr out = make_result({n, d}, {an}, "multi_head_attention");
  const MapC x = value_of(*an);
  MapM y(out->value.data(), n, d);
  // Row-softmaxed scores per head, kept for the backward pass.
  auto probs = std::make_shared<std::vector<RowMatrix>>(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    RowMatrix& p = (*probs)[static_cast<std::size_t>(h)];
    p.noalias() = x.middleCols(h * dh, dh) * x.middleCols(d + h * dh, dh).transpose();
    p *= inv;
    for (int i = 0; i < n; ++i) {
      p.row(i).array() = (p.row(i).array() - p.row(i).maxCoeff()).exp();
      p.row(i) /= p.row(i).sum();
    }
    y.middleCols(h * dh, dh).noalias() = p * x.middleCols(2 * d + h * dh, dh);
  }
  if (out->requires_grad) {
    out->backward = [probs, heads, n, d, dh, inv](Node& self) {
      Node& src = *self.parents[0];
      if (!wants_grad(src)) return;
      const MapC xv = value_of(src);
      const MapC g = out_grad(self);
      MapM gx = grad_of(src);
      RowMatrix ds(n, n);
      for (int h = 0; h < heads; ++h) {
        const RowMatrix& p = (*probs)[static_cast<std::size_t>(h)];
        const auto go = g.middleCols(h * dh, dh);
        gx.middleCols(2 * d + h * dh, dh).noalias() += p.transpose() * go;
        ds.noalias() = go * xv.middleCols(2 * d + h * dh, dh).transpose();
        const Eigen::VectorXd dot = (ds.array() * p.array()).rowwise().sum();
        ds.array() = p.array() * (ds.array().colwise() - dot.array()) * inv;
        gx.middleCols(h * dh, dh).noalias() += ds * xv.middleCols(d + h * dh, dh);
        gx.middleCols(d + h * dh, dh).noalias() += ds.transpose() * xv.middleCols(h * dh, dh);
      }
    };
  }
  return Tensor(out);
}

Tensor group_softmax(const Tensor& logits, int k) {
  const NodePtr& an = logits.node_ptr();
  const int r = rows_of(an->shape), c = cols_of(an->shape);
  if (k <= 0 || r % k != 0) throw ShapeError("group_softmax: rows " + std::to_string(r) + " not divisible by k=" + std::to_string(k));
  const int n = r / k;
  NodePtr out = make_result(an->shape, {an}, "group_softmax");
  const MapC x = value_of(*an);
  MapM y(out->value.data(), r, c);
  for (int g = 0; g < n; ++g) {
    auto xs = x.middleRows(g * k, k);
    auto ys = y.middleRows(g * k, k);
    const Eigen::RowVectorXd m = xs.colwise().maxCoeff();
    ys = (xs.rowwise() - m).array().exp();
    const Eigen::RowVectorXd s = ys.colwise().sum();
    ys.array().rowwise() /= s.array();
  }
  if (out->requires_grad) {
    out->backward = [n, k, r, c](Node& self) {
      Node& p = *self.parents[0];
      if (!wants_grad(p)) return;
      const MapC yv(self.value.data(), r, c);
      const MapC g = out_grad(self);
      MapM gx = grad_of(p);
      for (int grp = 0; grp < n; ++grp) {
        auto ys = yv.middleRows(grp * k, k);
        auto gs = g.middleRows(grp * k, k);
        const Eigen::RowVectorXd dot = (ys.array() * gs.array()).colwise().sum();
        gx.middleRows(grp * k, k).array() += ys.array() * (gs.array().rowwise() - dot.array());
      }
    };
  }
  return Tensor(out);
}

Tensor grouped_weighted_sum(const Tensor& w, const Tensor& v, int k) {
  const NodePtr &wn = w.node_ptr(), &vn = v.node_ptr();
  const int r = rows_of(vn->shape), c = cols_of(vn->shape), groups = cols_of(wn->shape);
  if (rows_of(wn->shape) != r || k <= 0 || r % k != 0 || groups <= 0 || c % groups != 0) {
    shape_fail("grouped_weighted_sum", wn->shape, vn->shape);
  }
  const int n = r / k, width = c / groups;
  NodePtr out = make_result({n, c}, {wn, vn}, "grouped_weighted_sum");
  const MapC wv = value_of(*wn);
  const MapC vv = value_of(*vn);
  MapM y(out->value.data(), n, c);
  for (int i = 0; i < n; ++i) {
    for (int m = 0; m < k; ++m) {
      const int row = i * k + m;
      for (int g = 0; g < groups; ++g) {
        y.row(i).segment(g * width, width) += wv(row, g) * vv.row(row).segment(g * width, width);
      }
    }
  }
  if (out->requires_grad) {
    out->backward = [n, k, groups, width](Node& self) {
      Node& pw = *self.parents[0];
      Node& pv = *self.parents[1];
      const MapC g = out_grad(self);
      const MapC wv2 = value_of(pw);
      const MapC vv2 = value_of(pv);
      const bool gw = wants_grad(pw), gv = wants_grad(pv);
      MapM dw(gw ? pw.grad_buffer() : nullptr, gw ? rows_of(pw.shape) : 0, gw ? groups : 0);
      MapM dv(gv ? pv.grad_buffer() : nullptr, gv ? rows_of(pv.shape) : 0, gv ? groups * width : 0);
      for (int i = 0; i < n; ++i) {
        for (int m = 0; m < k; ++m) {
          const int row = i * k + m;
          for (int grp = 0; grp < groups; ++grp) {
            const auto gseg = g.row(i).segment(grp * width, width);
            if (gw) dw(row, grp) += gseg.dot(vv2.row(row).segment(grp * width, width));
            if (gv) dv.row(row).segment(grp * width, width) += wv2(row, grp) * gseg;
          }
        }
      }
    };
  }
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Reverse pass

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + (loss.defined() ? shape_str(loss.shape()) : "<undefined>"));
  }
  Node* root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (n->backward) n->grad.assign(n->value.size(), 0.0);
  }
  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h, double tol) {
  Tensor leaf = x.detach();
  leaf.set_requires_grad(true);
  const Tensor y = f(leaf);
  if (y.numel() != 1) throw ShapeError("grad_check: function must be scalar-valued");
  if (!std::isfinite(y.item())) throw NumericError("grad_check: f(x) is not finite");
  backward(y);
  std::vector<double> analytic(leaf.numel(), 0.0);
  if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());

  GradCheckReport report;
  NoGradGuard no_grad;
  auto values = leaf.mutable_data();
  for (size_t i = 0; i < values.size(); ++i) {
    const double orig = values[i];
    values[i] = orig + h;
    const double fp = f(leaf).item();
    values[i] = orig - h;
    const double fm = f(leaf).item();
    values[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    report.max_rel_err = std::max(report.max_rel_err, std::abs(analytic[i] - numeric) / denom);
  }
  report.pass = report.max_rel_err < tol;
  return report;
}

}  // namespace dap

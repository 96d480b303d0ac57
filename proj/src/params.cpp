#include "dap/params.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace dap {

Tensor& ParamStore::add(const std::string& name, Tensor t) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  t.set_requires_grad(true);
  index_[name] = entries_.size();
  entries_.emplace_back(name, std::move(t));
  return entries_.back().second;
}

Tensor& ParamStore::at(const std::string& name) {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return entries_[it->second].second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return entries_[it->second].second;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

void ParamStore::assign(const ParamStore& other) {
  if (other.size() != size()) {
    throw FormatError("parameter count mismatch: have " + std::to_string(size()) + ", got " +
                      std::to_string(other.size()));
  }
  for (auto& [name, t] : entries_) {
    if (!other.contains(name)) throw FormatError("checkpoint lacks parameter '" + name + "'");
    const Tensor& src = other.at(name);
    if (src.shape() != t.shape()) {
      throw FormatError("shape mismatch for '" + name + "': " + shape_str(t.shape()) + " vs " + shape_str(src.shape()));
    }
    std::copy(src.data().begin(), src.data().end(), t.mutable_data().begin());
  }
}

void backward(const Tensor& loss, ParamStore& params) {
  backward(loss);
  for (auto& [name, t] : params) t.mutable_grad();
}

AdamState::AdamState(const ParamStore& params, AdamConfig cfg) : config(cfg) {
  for (const auto& [name, t] : params) {
    m.emplace_back(t.numel(), 0.0);
    v.emplace_back(t.numel(), 0.0);
  }
}

void adam_step(ParamStore& params, AdamState& state) {
  if (state.m.size() != params.size()) throw StateError("adam state does not match the parameter store");
  for (const auto& [name, t] : params) {
    if (!t.has_grad()) throw StateError("parameter '" + name + "' has no gradient");
  }
  ++state.step;
  const auto& c = state.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  std::size_t p = 0;
  for (auto& [name, t] : params) {
    auto& m = state.m[p];
    auto& v = state.v[p];
    if (m.size() != t.numel()) throw StateError("adam moment shape mismatch for '" + name + "'");
    auto w = t.mutable_data();
    auto g = t.mutable_grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
      g[i] = 0.0;
    }
    ++p;
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr std::array<char, 8> kMagic = {'D', 'A', 'P', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_string32(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  template <typename T>
  T get() {
    T v{};
    if (!in_.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError("checkpoint is truncated");
    return v;
  }

  std::string bytes(std::size_t n) {
    std::string s(n, '\0');
    if (n && !in_.read(s.data(), static_cast<std::streamsize>(n))) throw FormatError("checkpoint is truncated");
    return s;
  }

 private:
  std::istream& in_;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params, const Meta& meta) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    if (name.size() > 0xFFFF) throw FormatError("parameter name too long: " + name);
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (int d : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  put<std::uint32_t>(out, static_cast<std::uint32_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    put_string32(out, k);
    put_string32(out, v);
  }
  if (!out) throw IoError("failed writing checkpoint '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  Reader r(in);
  const std::string magic = r.bytes(kMagic.size());
  if (!std::equal(magic.begin(), magic.end(), kMagic.begin())) throw FormatError("bad checkpoint magic in '" + path.string() + "'");

  Checkpoint ck;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto name_len = r.get<std::uint16_t>();
    const std::string name = r.bytes(name_len);
    const auto rank = r.get<std::uint8_t>();
    Shape shape;
    std::size_t n = 1;
    for (int d = 0; d < rank; ++d) {
      const auto dim = r.get<std::uint32_t>();
      if (dim == 0 || dim > (1u << 28)) throw FormatError("invalid dimension in checkpoint entry '" + name + "'");
      shape.push_back(static_cast<int>(dim));
      n *= dim;
    }
    std::vector<double> values(n);
    if (n && !in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n * sizeof(double)))) {
      throw FormatError("checkpoint is truncated in entry '" + name + "'");
    }
    ck.params.add(name, Tensor(shape, std::move(values)));
  }
  const auto meta_count = r.get<std::uint32_t>();
  for (std::uint32_t e = 0; e < meta_count; ++e) {
    const std::string k = r.bytes(r.get<std::uint32_t>());
    ck.meta[k] = r.bytes(r.get<std::uint32_t>());
  }
  return ck;
}

GradCheckReport grad_check_params(const std::function<Tensor()>& loss_fn, ParamStore& params, double h, double tol,
                                  std::size_t max_per_tensor) {
  params.zero_grad();
  const Tensor loss = loss_fn();
  if (!std::isfinite(loss.item())) throw NumericError("grad_check_params: loss is not finite");
  backward(loss, params);

  GradCheckReport report;
  NoGradGuard no_grad;
  for (auto& [name, t] : params) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto w = t.mutable_data();
    const std::size_t stride = std::max<std::size_t>(1, w.size() / max_per_tensor);
    for (std::size_t i = 0; i < w.size(); i += stride) {
      const double orig = w[i];
      w[i] = orig + h;
      const double fp = loss_fn().item();
      w[i] = orig - h;
      const double fm = loss_fn().item();
      w[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      report.max_rel_err = std::max(report.max_rel_err, std::abs(analytic[i] - numeric) / denom);
    }
  }
  report.pass = report.max_rel_err < tol;
  return report;
}

}  // namespace dap

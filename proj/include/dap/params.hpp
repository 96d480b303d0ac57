#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dap/tensor.hpp"

namespace dap {

// Named trainable tensors, iterated in insertion order.
class ParamStore {
 public:
  // Registers a new trainable tensor; names must be unique.
  Tensor& add(const std::string& name, Tensor t);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;

  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  // Allocates zeroed gradient buffers for every parameter.
  void zero_grad();

  // Copies values from `other` by name. Shapes and name sets must agree.
  void assign(const ParamStore& other);

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

// backward() followed by zero-filling the grads of unreachable parameters.
void backward(const Tensor& loss, ParamStore& params);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::int64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  explicit AdamState(const ParamStore& params, AdamConfig cfg = {});
};

// One bias-corrected Adam update; gradients are zeroed afterwards. Throws
// StateError when a parameter has no gradient buffer.
void adam_step(ParamStore& params, AdamState& state);

using Meta = std::map<std::string, std::string>;

// Binary checkpoint: "DAPCKPT1", u32 entry count, then per entry a u16-length
// name, u8 rank, u32 dims and raw f64 payload, then u32 meta count and
// u32-length-prefixed key/value strings. Everything little-endian.
void save_checkpoint(const std::filesystem::path& path, const ParamStore& params, const Meta& meta);

struct Checkpoint {
  ParamStore params;
  Meta meta;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Finite-difference check of a parameterised scalar loss against backward().
// Perturbs at most `max_per_tensor` entries of each parameter.
GradCheckReport grad_check_params(const std::function<Tensor()>& loss_fn, ParamStore& params, double h, double tol,
                                  std::size_t max_per_tensor = 8);

}  // namespace dap

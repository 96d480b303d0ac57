#include <filesystem>
#include <fstream>

#include "doctest.h"

#include "dap/params.hpp"
#include "grad_suite.hpp"

using namespace dap;
using dap::testing::random_tensor;

TEST_CASE("every op passes a central-difference check") {
  Rng rng(21);
  for (const auto& c : dap::testing::grad_cases()) {
    for (int trial = 0; trial < 5; ++trial) {
      const GradCheckReport r = c.run(rng, 1e-5, 1e-4);
      INFO(c.name << " trial " << trial << " max rel err " << r.max_rel_err);
      CHECK(r.pass);
    }
  }
}

TEST_CASE("forward values of a few ops") {
  const Tensor a({2, 2}, {1, 2, 3, 4});
  const Tensor b({2, 2}, {5, 6, 7, 8});
  CHECK(matmul(a, b).matrix()(1, 0) == 3 * 5 + 4 * 7);
  CHECK(matmul_nt(a, b).matrix()(0, 1) == 1 * 7 + 2 * 8);
  CHECK(add(a, Tensor({1, 2}, {10, 20})).matrix()(1, 1) == 24);
  CHECK(sum(a).item() == 10);
  const Tensor s = softmax(Tensor({1, 3}, {1000, 1000, 1000}));
  CHECK(s.matrix()(0, 2) == doctest::Approx(1.0 / 3));
  const Tensor ln = layer_norm(Tensor({1, 4}, {1, 2, 3, 4}));
  CHECK(ln.matrix().sum() == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(max_pool_groups(Tensor({4, 1}, {1, 5, 3, 2}), 2).matrix()(1, 0) == 3);
}

TEST_CASE("fused attention equals the per-head composition") {
  Rng rng(21);
  const int n = 7, heads = 2, dh = 3, d = heads * dh;
  const Tensor qkv = random_tensor(rng, n, 3 * d, -2, 2);
  std::vector<Tensor> parts;
  for (int h = 0; h < heads; ++h) {
    const Tensor q = slice_cols(qkv, h * dh, dh), k = slice_cols(qkv, d + h * dh, dh), v = slice_cols(qkv, 2 * d + h * dh, dh);
    parts.push_back(matmul(softmax(scale(matmul_nt(q, k), 1.0 / std::sqrt(double(dh)))), v));
  }
  const RowMatrix expected = concat_cols(parts).matrix();
  CHECK((multi_head_attention(qkv, heads).matrix() - expected).cwiseAbs().maxCoeff() < 1e-12);
  CHECK_THROWS_AS(multi_head_attention(random_tensor(rng, n, 10), 2), ShapeError);
}

TEST_CASE("shape errors name the shapes") {
  const Tensor a({2, 3}), b({2, 3});
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
  CHECK_THROWS_AS(add(a, Tensor({3, 3})), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST_CASE("backward accumulates and no-grad records nothing") {
  Tensor x = Tensor::scalar(3.0);
  x.set_requires_grad(true);
  const Tensor y = mul(x, x);
  backward(y);
  CHECK(x.grad()[0] == doctest::Approx(6.0));
  backward(y);
  CHECK(x.grad()[0] == doctest::Approx(12.0));
  {
    NoGradGuard guard;
    CHECK_FALSE(mul(x, x).requires_grad());
  }
  CHECK(grad_enabled());
}

TEST_CASE("adam minimises a quadratic") {
  ParamStore store;
  Tensor& w = store.add("w", Tensor({1, 3}, {2.0, -1.0, 0.5}));
  AdamConfig cfg;
  cfg.lr = 0.05;
  AdamState state(store, cfg);
  const Tensor target({1, 3}, {0.3, 0.2, -0.4});
  double last = 0.0;
  for (int i = 0; i < 500; ++i) {
    const Tensor d = sub(w, target);
    const Tensor loss = sum(mul(d, d));
    last = loss.item();
    backward(loss, store);
    adam_step(store, state);
  }
  CHECK(last < 1e-4);
  CHECK(state.step == 500);
}

TEST_CASE("adam refuses parameters without gradients") {
  ParamStore store;
  store.add("w", Tensor({1, 1}, {1.0}));
  AdamState state(store);
  CHECK_THROWS_AS(adam_step(store, state), StateError);
}

TEST_CASE("parameter gradients pass a finite-difference check") {
  Rng rng(8);
  ParamStore store;
  store.add("a", random_tensor(rng, 3, 4));
  store.add("b", random_tensor(rng, 1, 4));
  const Tensor x = random_tensor(rng, 5, 3);
  const auto loss = [&] { return mean(tanh(add(matmul(x, store.at("a")), store.at("b")))); };
  const GradCheckReport r = grad_check_params(loss, store, 1e-5, 1e-4);
  CHECK(r.pass);
}

TEST_CASE("checkpoints round-trip bitwise") {
  Rng rng(6);
  ParamStore store;
  store.add("layer.w", random_tensor(rng, 4, 5));
  store.add("layer.b", random_tensor(rng, 1, 5));
  const Meta meta{{"target", "afford"}, {"note", "x"}};
  const auto dir = std::filesystem::temp_directory_path() / "dap_test_tensor";
  std::filesystem::create_directories(dir);
  const auto p1 = dir / "a.ckpt", p2 = dir / "b.ckpt";
  save_checkpoint(p1, store, meta);
  const Checkpoint back = load_checkpoint(p1);
  CHECK(back.meta == meta);
  REQUIRE(back.params.size() == 2);
  const auto d0 = store.at("layer.w").data(), d1 = back.params.at("layer.w").data();
  CHECK(std::equal(d0.begin(), d0.end(), d1.begin(), d1.end()));
  save_checkpoint(p2, back.params, back.meta);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  const std::string s1((std::istreambuf_iterator<char>(f1)), {}), s2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(s1 == s2);
  CHECK(s1.rfind("DAPCKPT1", 0) == 0);

  std::ofstream(dir / "bad.ckpt", std::ios::binary) << "NOTACKPT";
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.ckpt"), FormatError);
  std::ofstream(dir / "short.ckpt", std::ios::binary) << s1.substr(0, s1.size() / 2);
  CHECK_THROWS_AS(load_checkpoint(dir / "short.ckpt"), FormatError);

  ParamStore other;
  other.add("layer.w", Tensor({4, 5}));
  CHECK_THROWS(other.assign(store));
  std::filesystem::remove_all(dir);
}

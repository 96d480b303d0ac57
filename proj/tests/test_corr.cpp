#include <cmath>

#include "doctest.h"

#include "dap/corr.hpp"
#include "dap/env.hpp"
#include "dap/params.hpp"
#include "support.hpp"

using namespace dap;
using dap::testing::random_cloud;

TEST_CASE("focal loss matches the per-entry formula") {
  RowMatrix p(2, 2);
  p << 0.9, 0.2, 0.4, 0.7;
  CorrespondenceMatrix y(2, 2);
  y << 1, 0, 0, 1;
  const double g = 2.0;
  double want = 0.0;
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      const double pp = p(i, j);
      want += -(y(i, j) * std::pow(1 - pp, g) * std::log(pp) + (1 - y(i, j)) * std::pow(pp, g) * std::log(1 - pp));
    }
  }
  CHECK(focal_loss(Tensor::from_matrix(p), y, g).item() == doctest::Approx(want / 4).epsilon(1e-12));
}

TEST_CASE("focal loss vanishes on perfect predictions and survives saturation") {
  CorrespondenceMatrix y(2, 3);
  y << 1, 0, 0, 0, 1, 1;
  CHECK(focal_loss(Tensor::from_matrix(y), y, 2.0).item() < 1e-5);
  const RowMatrix wrong = (1.0 - y.array()).matrix();
  const double l = focal_loss(Tensor::from_matrix(wrong), y, 2.0).item();
  CHECK(std::isfinite(l));
  CHECK(l > 1.0);
  CHECK_THROWS_AS(focal_loss(Tensor({3, 3}), y, 2.0), ShapeError);
}

TEST_CASE("match extraction keeps the best column above threshold") {
  Rng rng(1);
  const PointCloud obj = random_cloud(rng, 4), cont = random_cloud(rng, 3);
  CorrespondenceMatrix p(4, 3);
  p << 0.9, 0.1, 0.2,  //
      0.3, 0.2, 0.4,   //
      0.1, 0.8, 0.85,  //
      0.6, 0.7, 0.1;
  CorrConfig cfg;
  const MatchSet m = extract_matches(p, obj, cont, cfg);
  REQUIRE(m.size() == 3);
  CHECK(m[0].object_index == 0);
  CHECK(m[0].container_index == 0);
  CHECK(m[1].object_index == 2);
  CHECK(m[1].container_index == 2);
  CHECK(m[1].weight == doctest::Approx(0.85));
  CHECK(m[2].container_index == 1);

  cfg.match_threshold = 0.86;
  CHECK_THROWS_AS(extract_matches(p, obj, cont, cfg), InsufficientMatchesError);
  CHECK_THROWS_AS(extract_matches(p.topRows(2), obj, cont, CorrConfig{}), ShapeError);
}

TEST_CASE("correspondence model output is a probability matrix") {
  const SceneSpec scene = gen_scene(TaskKind::shelf, 2);
  const Demonstration d = sample_demonstration(scene, 3).demo;
  const PointCloud crop = sample_demo_crop(d.container, d.object, d.goal, LabelConfig{}, 4);
  CorrConfig cfg;
  cfg.token_dim = 32;
  cfg.num_blocks = 1;
  const CorrModel model(cfg, 9);
  const CorrespondenceMatrix p = model.predict(crop, d.object);
  CHECK(p.rows() == d.object.size());
  CHECK(p.cols() == crop.size());
  CHECK((p.array() > 0.0).all());
  CHECK((p.array() < 1.0).all());
  CHECK(model.predict(crop, d.object) == p);
  CHECK_THROWS_AS(model.predict(PointCloud{}, d.object), SizeError);
}

TEST_CASE("correspondence is invariant to a shared rigid motion") {
  // Both clouds are centred before encoding and the features see only
  // relative offsets and normals, so a common translation changes nothing.
  const SceneSpec scene = gen_scene(TaskKind::cabinet, 2);
  const Demonstration d = sample_demonstration(scene, 3).demo;
  const PointCloud crop = sample_demo_crop(d.container, d.object, d.goal, LabelConfig{}, 4);
  CorrConfig cfg;
  cfg.token_dim = 32;
  cfg.num_blocks = 1;
  const CorrModel model(cfg, 9);
  const RigidTransform shift = RigidTransform::from_translation(Vec3(0.4, -1.0, 2.0));
  const CorrespondenceMatrix a = model.predict(crop, d.object);
  const CorrespondenceMatrix b = model.predict(apply_transform(crop, shift), apply_transform(d.object, shift));
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("gva layer rejects mismatched widths") {
  ParamStore store;
  Rng rng(1);
  const GvaLayer layer(store, "g", 8, 4, rng);
  const Points3 pos = random_cloud(rng, 6).positions;
  const Tensor good({6, 8}), bad({6, 4});
  CHECK(gva_attention(layer, good, good, good, pos, pos, 3).cols() == 8);
  CHECK_THROWS_AS(gva_attention(layer, bad, good, good, pos, pos, 3), ShapeError);
}

TEST_CASE("overfitting one crop drives the focal loss down") {
  const SceneSpec scene = gen_scene(TaskKind::shelf, 5);
  const Demonstration d = sample_demonstration(scene, 1).demo;
  const PointCloud crop = sample_demo_crop(d.container, d.object, d.goal, LabelConfig{}, 2);
  const CorrespondenceMatrix label = label_correspondence(crop, d.object, d.goal, LabelConfig{});
  CorrConfig cfg;
  cfg.token_dim = 32;
  cfg.num_blocks = 1;
  CorrModel model(cfg, 4);
  AdamConfig adam;
  adam.lr = 3e-3;
  AdamState state(model.params(), adam);
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 150; ++step) {
    const Tensor loss = focal_loss(model.forward(crop, d.object), label, cfg.gamma);
    if (step == 0) first = loss.item();
    last = loss.item();
    backward(loss, model.params());
    adam_step(model.params(), state);
  }
  CHECK(last < 0.3 * first);
}

TEST_CASE("corr config validation") {
  CorrConfig cfg;
  cfg.gva_groups = 5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.match_threshold = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

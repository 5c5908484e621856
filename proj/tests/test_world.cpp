#include <cmath>

#include "doctest.h"
#include "lorakey/error.hpp"
#include "lorakey/grad_check.hpp"
#include "lorakey/world.hpp"

using namespace lorakey;

TEST_CASE("codec basis is orthonormal") {
  for (double width : {4.0, 0.0}) {
    const LatentCodec codec = LatentCodec::build(1, {3, 8, 8}, 32, {.spectral_width = width});
    const Tensor gram = matmul_tn(codec.basis(), codec.basis());
    double worst = 0.0;
    for (std::size_t i = 0; i < 32; ++i) {
      for (std::size_t j = 0; j < 32; ++j) worst = std::max(worst, std::abs(gram.at(i, j) - (i == j ? 1.0 : 0.0)));
    }
    CHECK(worst <= 1e-12);
  }
}

TEST_CASE("codec roundtrip") {
  const LatentCodec codec = LatentCodec::build(2, {3, 16, 16}, 64);
  Rng rng(3);
  const Tensor z = rng.normal_tensor({10, 64});
  CHECK(max_abs_diff(codec.encode(codec.decode(z)), z) <= 1e-8);
  const Tensor one = codec.decode(rng.normal_tensor({64}));
  CHECK(one.shape() == Shape{3, 16, 16});
  CHECK(codec.encode(one).shape() == Shape{64});

  // With as many latents as pixels the codec is a bijection in both directions.
  const LatentCodec square = LatentCodec::build(4, {1, 4, 4}, 16);
  const Tensor x = rng.normal_tensor({5, 16});
  CHECK(max_abs_diff(square.decode(square.encode(x)), x) <= 1e-10);
  CHECK_THROWS_AS(LatentCodec::build(5, {1, 4, 4}, 17), DimensionError);
}

TEST_CASE("codec adjoints") {
  const LatentCodec codec = LatentCodec::build(6, {3, 8, 8}, 16);
  Rng rng(7);
  const Tensor z = rng.normal_tensor({3, 16}), dz = rng.normal_tensor({3, 16});
  const Tensor g = rng.normal_tensor({3, codec.image_dim()});
  // decode is affine, so the change equals the Jacobian applied to dz exactly.
  const double lhs = dot(codec.decode(z + dz) - codec.decode(z), g);
  CHECK(lhs == doctest::Approx(dot(dz, codec.decode_backward(g))).epsilon(1e-10));
  const Tensor x = rng.normal_tensor({3, codec.image_dim()}), dx = rng.normal_tensor({3, codec.image_dim()});
  const Tensor h = rng.normal_tensor({3, 16});
  CHECK(dot(codec.encode(x + dx) - codec.encode(x), h) ==
        doctest::Approx(dot(dx, codec.encode_backward(h))).epsilon(1e-10));
}

TEST_CASE("world sampling moments") {
  const SyntheticWorld world = SyntheticWorld::build(8, 6, {.classes = 3});
  const LatentCodec codec = LatentCodec::build(9, {3, 4, 4}, 6);
  double total = 0.0;
  for (double w : world.weights()) total += w;
  CHECK(total == doctest::Approx(1.0));
  Rng rng(10);
  const std::size_t n = 20000;
  const WorldBatch b = sample_world(world, codec, 1, rng, n);
  CHECK(b.images.cols() == codec.image_dim());
  const ClassComponent& comp = world.component(1);
  for (std::size_t j = 0; j < 6; ++j) {
    double mean = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += b.latents.at(i, j);
    mean /= n;
    for (std::size_t i = 0; i < n; ++i) sq += (b.latents.at(i, j) - mean) * (b.latents.at(i, j) - mean);
    const double var = sq / (n - 1);
    const double sd = std::sqrt(comp.variance[j]);
    CHECK(std::abs(mean - comp.mean[j]) < 4.0 * sd / std::sqrt(static_cast<double>(n)));
    CHECK(var == doctest::Approx(comp.variance[j]).epsilon(0.05));
    CHECK(comp.variance[j] >= 0.25);
    CHECK(comp.variance[j] <= 1.0);
  }
  CHECK_THROWS(world.component(3));

  std::vector<std::size_t> counts(3);
  for (std::size_t i = 0; i < n; ++i) ++counts[world.draw_class(rng)];
  for (std::size_t c = 0; c < 3; ++c) {
    const double p = world.weights()[c];
    CHECK(std::abs(counts[c] - n * p) < 4.0 * std::sqrt(n * p * (1 - p)));
  }
}

TEST_CASE("world is reproducible") {
  const SyntheticWorld a = SyntheticWorld::build(11, 4), b = SyntheticWorld::build(11, 4);
  CHECK(a.component(2).mean == b.component(2).mean);
  Rng r1(1), r2(1);
  CHECK(sample_latents(a, {0, 1, 2}, r1) == sample_latents(b, {0, 1, 2}, r2));
}

TEST_CASE("perception gradient") {
  const PerceptionNet net = PerceptionNet::build(12, {3, 4, 4}, {.hidden = 10, .features = 5});
  Rng rng(13);
  const Tensor w = rng.normal_tensor({3, 5});
  GradVector p;
  p.add("x", rng.normal_tensor({3, 48}, 0.2) + Tensor({3, 48}, 0.5));
  const Objective f = [&](const GradVector& q, GradVector* g) {
    const Perception out = net.perceive(q[0]);
    if (g) g->add("x", net.backward(out, w));
    return dot(out.features, w);
  };
  CHECK(grad_check(f, p, rng).max_relative_error <= 1e-6);
  CHECK(net.perceive(Tensor({3, 4, 4}, 0.5)).features.shape() == Shape{5});
  CHECK(net.feature_dim() == 5);
}

TEST_CASE("image rows") {
  CHECK(as_image_rows(Tensor({3, 4, 4}), 48).shape() == Shape{1, 48});
  CHECK(as_image_rows(Tensor({2, 48}), 48).shape() == Shape{2, 48});
  CHECK_THROWS_AS(as_image_rows(Tensor({2, 47}), 48), DimensionError);
}

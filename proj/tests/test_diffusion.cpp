#include <cmath>

#include "doctest.h"
#include "fixtures.hpp"
#include "lorakey/error.hpp"

using namespace lorakey;

namespace {

// Posterior-weighted eps for a diagonal Gaussian mixture, written out directly.
std::vector<double> mixture_eps(const SyntheticWorld& world, const NoiseSchedule& s, std::span<const double> z,
                                std::size_t t) {
  const double ab = s.alpha_bar(t), sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
  const std::size_t d = z.size(), k = world.classes();
  std::vector<double> logw(k);
  std::vector<std::vector<double>> eps(k, std::vector<double>(d));
  for (std::size_t c = 0; c < k; ++c) {
    const ClassComponent& comp = world.component(c);
    double lw = std::log(world.weights()[c]);
    for (std::size_t j = 0; j < d; ++j) {
      const double var = ab * comp.variance[j] + 1.0 - ab;
      const double r = z[j] - sa * comp.mean[j];
      lw += -0.5 * std::log(var) - 0.5 * r * r / var;
      eps[c][j] = sb * r / var;
    }
    logw[c] = lw;
  }
  const double top = *std::max_element(logw.begin(), logw.end());
  double total = 0.0;
  for (double& l : logw) total += (l = std::exp(l - top));
  std::vector<double> out(d);
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t j = 0; j < d; ++j) out[j] += logw[c] / total * eps[c][j];
  }
  return out;
}

}  // namespace

TEST_CASE("linear schedule") {
  const NoiseSchedule s = NoiseSchedule::linear(100);
  CHECK(s.beta(1) == doctest::Approx(1e-4));
  CHECK(s.beta(100) == doctest::Approx(0.02));
  double prod = 1.0;
  for (std::size_t t = 1; t <= 100; ++t) {
    prod *= 1.0 - s.beta(t);
    CHECK(s.alpha_bar(t) == doctest::Approx(prod).epsilon(1e-14));
    if (t > 1) CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
  }
  CHECK_THROWS(s.beta(0));
  CHECK_THROWS(s.beta(101));
  CHECK_THROWS(NoiseSchedule::from_betas({0.1, 1.0}));
}

TEST_CASE("z0 estimate inverts forward diffusion") {
  const NoiseSchedule s = NoiseSchedule::linear(100);
  Rng rng(1);
  const Tensor z0 = rng.normal_tensor({4, 8}), eps = rng.normal_tensor({4, 8});
  double worst = 0.0;
  for (std::size_t t = 1; t <= 100; ++t) {
    worst = std::max(worst, max_abs_diff(estimate_z0(s, forward_diffuse(s, z0, t, eps), t, eps), z0));
  }
  CHECK(worst <= 1e-10);
  const std::vector<std::size_t> ts = {1, 50, 99, 100};
  CHECK(max_abs_diff(estimate_z0(s, forward_diffuse(s, z0, ts, eps), ts, eps), z0) <= 1e-10);
  CHECK_THROWS_AS(forward_diffuse(s, z0, std::vector<std::size_t>{1, 2}, eps), DimensionError);
}

TEST_CASE("analytic eps matches the mixture posterior") {
  const SyntheticWorld world = SyntheticWorld::build(2, 5, {.classes = 3});
  const NoiseSchedule s = NoiseSchedule::linear(50);
  Rng rng(3);
  for (std::size_t t : {1, 10, 25, 50}) {
    const Tensor z = rng.normal_tensor({6, 5}, 2.0);
    const Tensor uncond = analytic_gmm_eps(world, s, z, t, world.classes());
    for (std::size_t i = 0; i < 6; ++i) {
      const std::vector<double> ref = mixture_eps(world, s, z.row(i), t);
      for (std::size_t j = 0; j < 5; ++j) CHECK(uncond.at(i, j) == doctest::Approx(ref[j]).epsilon(1e-10));
    }
  }
}

TEST_CASE("analytic eps is the conditional mean") {
  // Monte Carlo orthogonality: E[(eps - eps*) z_t] = 0.
  const SyntheticWorld world = SyntheticWorld::build(4, 3, {.classes = 2});
  const NoiseSchedule s = NoiseSchedule::linear(20);
  Rng rng(5);
  const std::size_t n = 40000, t = 10;
  std::vector<std::size_t> classes(n, 0);
  const Tensor z0 = sample_latents(world, classes, rng);
  const Tensor eps = rng.normal_tensor({n, 3});
  const Tensor zt = forward_diffuse(s, z0, t, eps);
  const Tensor star = analytic_gmm_eps(world, s, zt, t, 0);
  for (std::size_t j = 0; j < 3; ++j) {
    double acc = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = (eps.at(i, j) - star.at(i, j)) * zt.at(i, j);
      acc += v;
      sq += v * v;
    }
    const double mean = acc / n, se = std::sqrt(sq / n - mean * mean) / std::sqrt(static_cast<double>(n));
    CHECK(std::abs(mean) < 4.0 * se);
  }
}

TEST_CASE("denoiser structure") {
  fixtures::Small s;
  const Denoiser& d = s.denoiser;
  CHECK(d.classes() == 3);
  CHECK(d.null_class() == 3);
  CHECK(d.layer_names().size() == d.net().depth());
  const std::vector<std::size_t> t = {1, 20}, c = {0, 3};
  const Tensor input = d.assemble_input(Tensor({2, 8}), t, c);
  CHECK(input.cols() == 8 + 4 + 4);
  CHECK_THROWS(d.assemble_input(Tensor({2, 8}), std::vector<std::size_t>{0, 1}, c));
  CHECK_THROWS(d.assemble_input(Tensor({2, 8}), t, std::vector<std::size_t>{0, 4}));
  CHECK(d.time_embedding(1) != d.time_embedding(2));
}

TEST_CASE("adapters with zero B leave predictions unchanged") {
  fixtures::Small s;
  Rng rng(6);
  const LoraAdapter zero = init_lora(s.denoiser, s.denoiser.layer_names(), 2, rng);
  const Tensor z = rng.normal_tensor({3, 8});
  const std::vector<std::size_t> t = {1, 7, 20}, c = {0, 1, 3};
  CHECK(predict_eps(s.denoiser, {{&zero, 1.0}}, z, t, c).eps == predict_eps(s.denoiser, {}, z, t, c).eps);
}

TEST_CASE("sampling is batch invariant and reproducible") {
  fixtures::Small s;
  const std::vector<std::size_t> classes = {0, 2, 1};
  const Rng rng(7);
  const SampleResult all = sample(s.denoiser, {}, s.schedule, s.codec, classes, rng);
  const SampleResult again = sample(s.denoiser, {}, s.schedule, s.codec, classes, rng);
  CHECK(all.latents == again.latents);
  const SampleResult first = sample(s.denoiser, {}, s.schedule, s.codec, std::vector<std::size_t>{0}, rng);
  // Same draws; only the matrix-product blocking differs with batch size.
  for (std::size_t j = 0; j < 8; ++j) CHECK(std::abs(first.latents.at(0, j) - all.latents.at(0, j)) <= 1e-12);
  for (double v : all.images.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  const SampleResult guided =
      sample(s.denoiser, {}, s.schedule, s.codec, classes, rng, {.guidance = 1.0});
  CHECK(max_abs_diff(guided.latents, all.latents) <= 1e-12);
}

TEST_CASE("base training reduces the oracle gap") {
  fixtures::Small s;
  Rng r0(8), r1(8);
  const double before = oracle_relative_mse(s.denoiser, s.world, s.schedule, 500, r0);
  DenoiserTrainConfig cfg;
  cfg.steps = 400;
  cfg.batch = 32;
  Rng train(9);
  DenoiserTrainLog log;
  Denoiser d = Denoiser::build(14, 8, 3, 20, {.hidden_width = 16, .time_dim = 4, .class_dim = 4});
  const Denoiser trained = train_base_denoiser(s.world, s.schedule, d, cfg, train, &log);
  CHECK(trained.frozen());
  CHECK(log.losses.size() == 400);
  CHECK(oracle_relative_mse(trained, s.world, s.schedule, 500, r1) < 0.5 * before);
}

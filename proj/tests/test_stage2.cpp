#include <cmath>

#include "doctest.h"
#include "fixtures.hpp"
#include "lorakey/error.hpp"
#include "lorakey/losses.hpp"
#include "lorakey/stage2.hpp"

using namespace lorakey;

namespace {

GradVector gv(std::vector<double> v) {
  GradVector g;
  g.add("w", Tensor::vector(std::move(v)));
  return g;
}

GradVector random_pair_member(Rng& rng) {
  GradVector g;
  g.add("fc1.A", rng.normal_tensor({2, 5}));
  g.add("fc1.B", rng.normal_tensor({3, 2}));
  g.add("fc2.A", rng.normal_tensor({2, 3}));
  g.add("fc2.B", rng.normal_tensor({4, 2}));
  return g;
}

}  // namespace

TEST_CASE("gop hand values") {
  GopResult r = gop_project(gv({1, 1}), gv({0, 2}), 0.0);
  CHECK(r.alpha == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(r.projected[0][0] == 1.0);
  CHECK(r.projected[0][1] == 0.0);

  r = gop_project(gv({2, 0}), gv({1, 0}), 0.0);
  CHECK(r.alpha == 2.0);
  CHECK(r.projected[0][0] == 0.0);
  CHECK(r.projected[0][1] == 0.0);

  r = gop_project(gv({0, 3}), gv({1, 0}), 1e-8);
  CHECK(r.alpha == 0.0);
  CHECK(r.projected[0][1] == 3.0);
}

TEST_CASE("gop zero semantic gradient is guarded") {
  GopResult r = gop_project(gv({1, 2}), gv({0, 0}), 1e-8);
  CHECK(r.alpha == 0.0);
  CHECK(r.projected[0][1] == 2.0);
}

TEST_CASE("gop properties on random pairs") {
  Rng rng(3, "gop-props");
  for (int trial = 0; trial < 200; ++trial) {
    const GradVector g_wm = random_pair_member(rng);
    GradVector g_sem = random_pair_member(rng);
    g_sem *= std::exp(rng.uniform(-3.0, 3.0));
    const GopResult p = gop_project(g_wm, g_sem, 1e-8);
    CHECK(std::abs(dot(p.projected, g_sem)) <= 1e-6 * norm(g_wm) * norm(g_sem));

    const GopResult exact = gop_project(g_wm, g_sem, 0.0);
    CHECK(norm(exact.projected) <= norm(g_wm) * (1.0 + 1e-14));
    const GopResult twice = gop_project(exact.projected, g_sem, 0.0);
    CHECK(max_abs(twice.projected.flatten() - exact.projected.flatten()) <= 1e-10 * norm(exact.projected));

    GradVector scaled = g_wm;
    scaled *= -2.5;
    const GopResult s = gop_project(scaled, g_sem, 0.0);
    CHECK(max_abs(s.projected.flatten() - exact.projected.flatten() * -2.5) <= 1e-12 * norm(scaled));
  }
}

TEST_CASE("gop matches a least-squares projection oracle") {
  // Removing the g_sem component is the residual of regressing g_wm on g_sem.
  Rng rng(5);
  const GradVector g_wm = random_pair_member(rng);
  const GradVector g_sem = random_pair_member(rng);
  const Tensor w = g_wm.flatten(), s = g_sem.flatten();
  const Eigen::VectorXd coef = s.vec().colPivHouseholderQr().solve(w.vec());
  const Eigen::VectorXd residual = w.vec() - s.vec() * coef(0);
  const GopResult r = gop_project(g_wm, g_sem, 0.0);
  CHECK(r.alpha == doctest::Approx(coef(0)).epsilon(1e-12));
  CHECK((r.projected.flatten().vec() - residual).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("per-layer projection is orthogonal within each layer") {
  Rng rng(6);
  const GradVector g_wm = random_pair_member(rng);
  const GradVector g_sem = random_pair_member(rng);
  const GopResult r = gop_project_per_layer(g_wm, g_sem, 0.0);
  for (const std::string layer : {"fc1", "fc2"}) {
    const double d = dot(r.projected.get(layer + ".A").values(), g_sem.get(layer + ".A").values()) +
                     dot(r.projected.get(layer + ".B").values(), g_sem.get(layer + ".B").values());
    CHECK(std::abs(d) <= 1e-12);
  }
  GopConfig off;
  off.mode = ProjectionMode::kOff;
  CHECK(gop_apply(g_wm, g_sem, off).projected.flatten() == g_wm.flatten());
}

TEST_CASE("gop config validation") {
  GopConfig c;
  c.epsilon = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.accumulation = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(projection_mode_from_string("diagonal"), ConfigError);
}

TEST_CASE("watermark loss vanishes for zero residual and zero adapter") {
  fixtures::Small s;
  Rng rng(1);
  PriorModels m = init_prior(s.latent_dim, {.message_length = 4, .encoder_hidden = 8, .decoder_hidden = 8}, rng);
  LoraAdapter key = init_lora(s.denoiser, s.denoiser.layer_names(), 2, rng);
  const WatermarkBatch b = draw_watermark_batch(s.world, s.schedule, 5, rng);
  const WatermarkLoss wm =
      watermark_consistency_loss(s.denoiser, key, m.encoder, Message::parse("1010"), s.schedule, b);
  CHECK(wm.value == 0.0);
  CHECK(norm(wm.grad) == 0.0);
}

TEST_CASE("watermark loss matches a direct double forward") {
  fixtures::Small s;
  Rng rng(2);
  const MessageEncoder enc = s.random_encoder(3);
  const Message msg = Message::parse("0110");
  LoraAdapter key = init_lora(s.denoiser, s.denoiser.layer_names(), 2, rng);
  const WatermarkBatch b = draw_watermark_batch(s.world, s.schedule, 6, rng);
  const WatermarkLoss wm = watermark_consistency_loss(s.denoiser, key, enc, msg, s.schedule, b, false);

  const Tensor r = enc.residual(msg);
  double expected = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    const double ab = s.schedule.alpha_bar(b.t[i]);
    Tensor z_t({1, s.latent_dim}), z_wm_t({1, s.latent_dim});
    for (std::size_t j = 0; j < s.latent_dim; ++j) {
      z_t[j] = std::sqrt(ab) * b.z0.at(i, j) + std::sqrt(1 - ab) * b.eps.at(i, j);
      z_wm_t[j] = std::sqrt(ab) * (b.z0.at(i, j) + r[j]) + std::sqrt(1 - ab) * b.eps.at(i, j);
    }
    const std::vector<std::size_t> t{b.t[i]}, c{b.c[i]};
    const Tensor d = predict_eps(s.denoiser, {}, z_wm_t, t, c).eps - predict_eps(s.denoiser, {}, z_t, t, c).eps;
    expected += d.vec().squaredNorm();
  }
  expected /= 6.0;
  CHECK(wm.value == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("watermark and semantic gradients pass finite differences") {
  fixtures::Small s;
  Rng rng(4);
  const MessageEncoder enc = s.random_encoder(5);
  const Message msg = Message::parse("1101");
  const LoraAdapter start = s.random_adapter(6);
  const WatermarkBatch b = draw_watermark_batch(s.world, s.schedule, 4, rng);

  const Objective f_wm = [&](const GradVector& p, GradVector* grad) {
    LoraAdapter key = start;
    key.set_parameters(p);
    WatermarkLoss wm = watermark_consistency_loss(s.denoiser, key, enc, msg, s.schedule, b, grad != nullptr);
    if (grad) *grad = wm.grad;
    return wm.value;
  };
  const Objective f_sem = [&](const GradVector& p, GradVector* grad) {
    LoraAdapter key = start;
    key.set_parameters(p);
    const WatermarkLoss wm = watermark_consistency_loss(s.denoiser, key, enc, msg, s.schedule, b, false);
    SemanticLoss sem = semantic_consistency_loss(s.denoiser, s.schedule, s.codec, s.perception, wm.cache,
                                                 grad != nullptr);
    if (grad) *grad = sem.grad;
    return sem.value;
  };
  Rng check_rng(7);
  const GradCheckReport r_wm = grad_check(f_wm, start.parameters(), check_rng);
  const GradCheckReport r_sem = grad_check(f_sem, start.parameters(), check_rng);
  INFO("wm worst " << r_wm.worst_entry << " sem worst " << r_sem.worst_entry);
  CHECK(r_wm.max_relative_error <= 1e-4);
  CHECK(r_sem.max_relative_error <= 1e-4);
}

TEST_CASE("semantic loss is zero for perfect reconstruction") {
  fixtures::Small s;
  Rng rng(8);
  const WatermarkBatch b = draw_watermark_batch(s.world, s.schedule, 3, rng);
  WatermarkCache cache;
  cache.t = b.t;
  cache.z0 = b.z0;
  // eps_hat equal to the true noise of z0 recovers z0 exactly.
  cache.z_wm_t = forward_diffuse(s.schedule, b.z0, b.t, b.eps);
  cache.key.eps = b.eps;
  const SemanticLoss sem = semantic_consistency_loss(s.denoiser, s.schedule, s.codec, s.perception, cache, false);
  CHECK(std::abs(sem.value) <= 1e-12);
}

TEST_CASE("semantic loss is two for antipodal features") {
  fixtures::Small s;
  const LatentCodec centered = LatentCodec::build(12, s.shape, s.latent_dim, {.pixel_offset = 0.0, .pixel_gain = 1.0});
  const PerceptionNet odd = PerceptionNet::build(13, s.shape, {.hidden = 12, .features = 6, .input_center = 0.0,
                                                               .zero_bias = true});
  Rng rng(9);
  const WatermarkBatch b = draw_watermark_batch(s.world, s.schedule, 3, rng);
  WatermarkCache cache;
  cache.t = b.t;
  cache.z0 = b.z0;
  // Choose eps_hat so that z0_hat = -z0.
  cache.z_wm_t = forward_diffuse(s.schedule, b.z0, b.t, b.eps);
  cache.key.eps = Tensor(b.eps.shape());
  for (std::size_t i = 0; i < 3; ++i) {
    const double ab = s.schedule.alpha_bar(b.t[i]);
    for (std::size_t j = 0; j < s.latent_dim; ++j) {
      cache.key.eps.at(i, j) = (cache.z_wm_t.at(i, j) + std::sqrt(ab) * b.z0.at(i, j)) / std::sqrt(1 - ab);
    }
  }
  const SemanticLoss sem = semantic_consistency_loss(s.denoiser, s.schedule, centered, odd, cache, false);
  CHECK(sem.value == doctest::Approx(2.0).epsilon(1e-10));
}

TEST_CASE("zero-step trainers return zero-init adapters") {
  fixtures::Small s;
  Rng rng(10);
  const MessageEncoder enc = s.random_encoder(11);
  WatermarkTrainConfig wc;
  wc.steps = 0;
  wc.rank = 2;
  const WatermarkTrainResult w =
      train_watermark_lora(s.denoiser, s.world, s.codec, s.perception, enc, Message::parse("0001"), s.schedule, wc, rng);
  CHECK(w.log.empty());
  for (const LoraEntry& e : w.adapter.entries) CHECK(max_abs(e.b) == 0.0);
  CHECK(w.adapter.role == AdapterRole::kWatermark);

  StyleTrainConfig sc;
  sc.steps = 0;
  sc.rank = 2;
  const StyleTrainResult st = train_style_lora(s.denoiser, s.world, StyleSpec::identity(), s.schedule, sc, rng);
  for (const LoraEntry& e : st.adapter.entries) CHECK(max_abs(e.b) == 0.0);
}

TEST_CASE("training logs orthogonality on every step") {
  fixtures::Small s;
  Rng rng(12);
  const MessageEncoder enc = s.random_encoder(13);
  WatermarkTrainConfig wc;
  wc.steps = 12;
  wc.batch = 4;
  wc.rank = 2;
  const WatermarkTrainResult w =
      train_watermark_lora(s.denoiser, s.world, s.codec, s.perception, enc, Message::parse("0111"), s.schedule, wc, rng);
  REQUIRE(w.log.size() == 12);
  // The cosine is relative to ||g_proj||, which can be far smaller than ||g_wm||.
  for (const WatermarkLogRow& row : w.log) CHECK(std::abs(row.cos_proj_sem) <= 1e-3);
  CHECK(norm(w.adapter.parameters()) > 0.0);
}

TEST_CASE("style spec validation and application") {
  StyleSpec s = StyleSpec::coordinate_shift(3, 0, 2.0);
  CHECK_FALSE(s.is_identity());
  CHECK(StyleSpec::identity().is_identity());
  const Tensor z = Tensor::matrix({{1, 2, 3}});
  CHECK(s.apply(z) == Tensor::matrix({{3, 2, 3}}));
  s.transform = Tensor::matrix({{1, 0, 0}, {0, 0, 0}, {0, 0, 1}});
  CHECK_THROWS_AS(s.validate(3), ConfigError);
  CHECK_THROWS_AS(StyleSpec::coordinate_shift(3, 3, 1.0), DimensionError);
}

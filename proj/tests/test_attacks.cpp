#include <cmath>
#include <numbers>

#include "doctest.h"
#include "fixtures.hpp"
#include "lorakey/attacks.hpp"
#include "lorakey/error.hpp"

using namespace lorakey;

namespace {

const ImageShape kShape{3, 16, 16};

Tensor random_images(std::size_t n, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor t({n, kShape.size()});
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Plane whose orthonormal 8x8 DCT coefficients (after the 255 scale and 128
// shift) are small integers, built by an independent direct inverse transform.
std::vector<double> integer_dct_plane(std::size_t h, std::size_t w, Rng& rng) {
  std::vector<double> plane(h * w);
  auto alpha = [](int u) { return u == 0 ? std::sqrt(0.125) : 0.5; };
  for (std::size_t by = 0; by < h; by += 8) {
    for (std::size_t bx = 0; bx < w; bx += 8) {
      double coef[8][8] = {};
      coef[0][0] = static_cast<double>(rng.uniform_index(81)) - 40.0;
      coef[0][1] = static_cast<double>(rng.uniform_index(11)) - 5.0;
      coef[1][0] = static_cast<double>(rng.uniform_index(11)) - 5.0;
      coef[2][3] = static_cast<double>(rng.uniform_index(7)) - 3.0;
      for (int y = 0; y < 8; ++y) {
        for (int x = 0; x < 8; ++x) {
          double acc = 0.0;
          for (int v = 0; v < 8; ++v) {
            for (int u = 0; u < 8; ++u) {
              acc += alpha(u) * alpha(v) * coef[v][u] * std::cos((2 * x + 1) * u * std::numbers::pi / 16.0) *
                     std::cos((2 * y + 1) * v * std::numbers::pi / 16.0);
            }
          }
          plane[(by + y) * w + bx + x] = (acc + 128.0) / 255.0;
        }
      }
    }
  }
  return plane;
}

}  // namespace

TEST_CASE("neutral settings are exact identities") {
  const Tensor images = random_images(3, 1);
  const Rng rng(2);
  for (const ImageDistortion& d : neutral_distortion_suite()) {
    if (d.name == "jpeg") continue;  // only exact on DCT-representable images, checked below
    CAPTURE(d.label());
    CHECK(apply_distortion(d, images, kShape, rng) == images);
  }
  CHECK(apply_distortion(ImageDistortion::identity(), images, kShape, rng) == images);
}

TEST_CASE("jpeg tables") {
  const std::vector<int> q100 = jpeg_quant_table(100);
  for (int v : q100) CHECK(v == 1);
  const std::vector<int> q50 = jpeg_quant_table(50);
  CHECK(q50[0] == 16);
  CHECK(q50[63] == 99);
  const std::vector<int> q10 = jpeg_quant_table(10);
  CHECK(q10[0] == 80);  // floor((16 * 500 + 50) / 100)
  CHECK_THROWS_AS(jpeg_quant_table(0), ConfigError);
}

TEST_CASE("jpeg at quality 100 keeps integer-coefficient planes") {
  Rng rng(3);
  const std::vector<double> plane = integer_dct_plane(16, 24, rng);
  const std::vector<double> out = jpeg_plane(plane, 16, 24, 100);
  double worst = 0.0;
  for (std::size_t i = 0; i < plane.size(); ++i) worst = std::max(worst, std::abs(out[i] - plane[i]));
  CHECK(worst <= 1e-12);

  // Lower quality loses detail but stays close on smooth content.
  const std::vector<double> q50 = jpeg_plane(plane, 16, 24, 50);
  worst = 0.0;
  for (std::size_t i = 0; i < plane.size(); ++i) worst = std::max(worst, std::abs(q50[i] - plane[i]));
  CHECK(worst > 0.0);
  CHECK(worst < 0.1);
}

TEST_CASE("jpeg handles sides that are not multiples of eight") {
  const std::vector<double> flat(5 * 7, 0.5);
  const std::vector<double> out = jpeg_plane(flat, 5, 7, 30);
  CHECK(out.size() == flat.size());
  for (double v : out) CHECK(std::abs(v - 0.5) < 0.01);
}

TEST_CASE("constant images survive geometric filters") {
  const Tensor gray({2, kShape.size()}, 0.3);
  const Rng rng(4);
  for (const ImageDistortion& d : {ImageDistortion::resize(0.5), ImageDistortion::resize(0.3),
                                   ImageDistortion::gaussian_blur(4.0), ImageDistortion::sharpen(10.0)}) {
    CAPTURE(d.label());
    CHECK(max_abs_diff(apply_distortion(d, gray, kShape, rng), gray) <= 1e-15);
  }
}

TEST_CASE("outputs are clamped") {
  const Tensor images = random_images(4, 5);
  const Rng rng(6);
  for (const ImageDistortion& d : {ImageDistortion::brightness(3.0, 3.0), ImageDistortion::gaussian_noise(2.0),
                                   ImageDistortion::contrast(5.0, 5.0), ImageDistortion::sharpen(20.0)}) {
    const Tensor out = apply_distortion(d, images, kShape, rng);
    for (double v : out.values()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("noise has the requested spread") {
  const Tensor gray({4, kShape.size()}, 0.5);
  const Tensor out = apply_distortion(ImageDistortion::gaussian_noise(0.1), gray, kShape, Rng(7));
  double mean = 0.0, sq = 0.0;
  for (double v : out.values()) mean += v - 0.5;
  mean /= static_cast<double>(out.size());
  for (double v : out.values()) sq += (v - 0.5 - mean) * (v - 0.5 - mean);
  const double sd = std::sqrt(sq / static_cast<double>(out.size() - 1));
  CHECK(std::abs(mean) < 0.01);
  CHECK(sd == doctest::Approx(0.1).epsilon(0.05));
}

TEST_CASE("color jitter factors stay in range") {
  const Tensor gray({50, kShape.size()}, 0.5);
  const Tensor out = apply_distortion(ImageDistortion::brightness(0.8, 1.2), gray, kShape, Rng(8));
  double lo = 2.0, hi = 0.0;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    const double f = out.at(i, 0) / 0.5;
    for (double v : out.row(i)) CHECK(v == out.at(i, 0));
    lo = std::min(lo, f);
    hi = std::max(hi, f);
  }
  CHECK(lo >= 0.8);
  CHECK(hi <= 1.2);
  CHECK(hi - lo > 0.2);

  // Contrast keeps the image mean; saturation leaves gray pixels alone.
  const Tensor mid = random_images(3, 9, 0.4, 0.6);
  const Tensor c = apply_distortion(ImageDistortion::contrast(0.8, 1.2), mid, kShape, Rng(10));
  for (std::size_t i = 0; i < mid.rows(); ++i) {
    double a = 0.0, b = 0.0;
    for (std::size_t j = 0; j < mid.cols(); ++j) {
      a += mid.at(i, j);
      b += c.at(i, j);
    }
    CHECK(std::abs(a - b) / static_cast<double>(mid.cols()) < 1e-12);
  }
  Tensor achromatic = random_images(2, 11);
  const std::size_t hw = kShape.height * kShape.width;
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t p = 0; p < hw; ++p) achromatic.at(i, hw + p) = achromatic.at(i, 2 * hw + p) = achromatic.at(i, p);
  }
  CHECK(max_abs_diff(apply_distortion(ImageDistortion::saturation(0.8, 1.2), achromatic, kShape, Rng(12)),
                     achromatic) <= 1e-15);
  CHECK_THROWS_AS(apply_distortion(ImageDistortion::brightness(1.2, 0.8), gray, kShape, Rng(1)), ConfigError);
}

TEST_CASE("sharpen leaves the border and amplifies detail") {
  const Tensor images = random_images(1, 13, 0.45, 0.55);
  const Tensor out = apply_distortion(ImageDistortion::sharpen(3.0), images, kShape, Rng(14));
  double inner_in = 0.0, inner_out = 0.0;
  for (std::size_t c = 0; c < kShape.channels; ++c) {
    for (std::size_t y = 0; y < kShape.height; ++y) {
      for (std::size_t x = 0; x < kShape.width; ++x) {
        const std::size_t k = (c * kShape.height + y) * kShape.width + x;
        if (y == 0 || x == 0 || y + 1 == kShape.height || x + 1 == kShape.width) {
          CHECK(out.at(0, k) == images.at(0, k));
        } else {
          inner_in += std::abs(images.at(0, k) - 0.5);
          inner_out += std::abs(out.at(0, k) - 0.5);
        }
      }
    }
  }
  CHECK(inner_out > inner_in);
}

TEST_CASE("distortions are deterministic per image") {
  const Tensor images = random_images(3, 15);
  const Rng rng(16);
  for (const ImageDistortion& d : default_distortion_suite()) {
    CAPTURE(d.label());
    const Tensor a = apply_distortion(d, images, kShape, rng);
    CHECK(a == apply_distortion(d, images, kShape, rng));
    // Image 0 alone sees the same randomness as inside the batch.
    Tensor first({1, kShape.size()});
    std::copy(images.row(0).begin(), images.row(0).end(), first.row(0).begin());
    const Tensor b = apply_distortion(d, first, kShape, rng);
    for (std::size_t j = 0; j < kShape.size(); ++j) CHECK(b.at(0, j) == a.at(0, j));
  }
  CHECK_THROWS_AS(apply_distortion({"smudge", 1.0, 1.0, 1.0}, images, kShape, rng), ConfigError);
  CHECK_THROWS_AS(apply_distortion(ImageDistortion::resize(1.5), images, kShape, rng), ConfigError);
}

TEST_CASE("labels") {
  CHECK(ImageDistortion::gaussian_noise(0.1).label() == "gaussian_noise(0.1)");
  CHECK(ImageDistortion::brightness(0.8, 1.2).label() == "brightness(0.8-1.2)");
  CHECK(ImageDistortion::identity().label() == "identity");
  CHECK(default_distortion_suite().size() == 8);
}

TEST_CASE("parameter attacks at zero strength are identities") {
  fixtures::Small s;
  const LoraAdapter key = s.random_adapter(20);
  const MergedModel model(s.denoiser, {key}, {1.0});
  Rng rng(21);
  const Tensor z = rng.normal_tensor({5, s.latent_dim});
  const std::vector<std::size_t> t = {1, 5, 10, 15, 20}, c = {0, 1, 2, 0, 1};
  const Tensor reference = model.predict(z, t, c);

  CHECK(prune_attack(model, 0.0).predict(z, t, c) == reference);

  Rng ft_rng(22);
  FinetuneConfig none;
  none.steps = 0;
  CHECK(finetune_attack(model, s.world, s.schedule, none, ft_rng).predict(z, t, c) == reference);
  FinetuneConfig frozen;
  frozen.steps = 3;
  frozen.batch = 4;
  frozen.learning_rate = 0.0;
  CHECK(finetune_attack(model, s.world, s.schedule, frozen, ft_rng).predict(z, t, c) == reference);

  FinetuneConfig some = frozen;
  some.learning_rate = 1e-2;
  CHECK(max_abs_diff(finetune_attack(model, s.world, s.schedule, some, ft_rng).predict(z, t, c), reference) > 0.0);
  CHECK(max_abs_diff(prune_attack(model, 0.9).predict(z, t, c), reference) > 0.0);
  // Two adapters on the same layers train side by side.
  const MergedModel pair(s.denoiser, {key, s.random_adapter(25)}, {1.0, 0.5});
  CHECK(max_abs_diff(finetune_attack(pair, s.world, s.schedule, some, ft_rng).predict(z, t, c),
                     pair.predict(z, t, c)) > 0.0);

  const std::vector<LoraAdapter> extras = {s.random_adapter(23), s.random_adapter(24)};
  CHECK(max_abs_diff(fusion_attack(s.denoiser, key, 1.0, extras, {0.0, 0.0}).predict(z, t, c), reference) <= 1e-12);
  CHECK_THROWS_AS(fusion_attack(s.denoiser, key, 1.0, extras, {1.0}), DimensionError);
}

TEST_CASE("fusion does not depend on adapter order") {
  fixtures::Small s;
  const LoraAdapter key = s.random_adapter(30);
  const std::vector<LoraAdapter> extras = {s.random_adapter(31), s.random_adapter(32), s.random_adapter(33)};
  const MergedModel a = fusion_attack(s.denoiser, key, 0.8, extras, {1.0, 0.5, 0.25});
  const MergedModel b = fusion_attack(s.denoiser, key, 0.8, {extras[2], extras[0], extras[1]}, {0.25, 1.0, 0.5});
  Rng rng(34);
  const Tensor z = rng.normal_tensor({4, s.latent_dim});
  const std::vector<std::size_t> t = {2, 4, 8, 16}, c = {0, 1, 2, 0};
  CHECK(max_abs_diff(a.predict(z, t, c), b.predict(z, t, c)) <= 1e-12);
}

TEST_CASE("robustness report layout") {
  fixtures::Small s;
  Rng init(40);
  PriorModelConfig cfg;
  cfg.message_length = 8;
  cfg.encoder_hidden = 8;
  cfg.decoder_hidden = 8;
  const PriorModels prior = init_prior(s.latent_dim, cfg, init);
  DeploymentProbe probe;
  probe.schedule = &s.schedule;
  probe.codec = &s.codec;
  probe.decoder = &prior.decoder;
  probe.world = &s.world;
  probe.policy = VerificationPolicy::make(Message::parse("10110010"), 0.05);
  probe.group_size = 2;
  const LoraAdapter key = s.random_adapter(41);
  const MergedModel model(s.denoiser, {key}, {1.0});
  DistortionSuite suite = {ImageDistortion::identity(), ImageDistortion::gaussian_noise(0.1)};
  const AttackReport r = run_robustness_suite(model, probe, suite, 6, Rng(42));
  REQUIRE(r.rows.size() == 4);
  CHECK(r.rows.front().name == "clean");
  CHECK(r.rows.back().name == "unwatermarked");
  CHECK(r.row("identity").bit_accuracy == r.row("clean").bit_accuracy);
  CHECK(r.adversarial_average ==
        doctest::Approx((r.rows[1].bit_accuracy + r.rows[2].bit_accuracy) / 2.0).epsilon(1e-15));
  CHECK_THROWS(r.row("missing"));

  const AttackReport again = run_robustness_suite(model, probe, suite, 6, Rng(42));
  for (std::size_t i = 0; i < r.rows.size(); ++i) CHECK(again.rows[i].bit_accuracy == r.rows[i].bit_accuracy);

  const nlohmann::json j = attack_report_json(r);
  CHECK(j["rows"].size() == 4);
  const std::string csv = attack_report_csv(r);
  CHECK(csv.rfind("condition,bit_accuracy,tpr,tpr_averaged\n\"clean\",", 0) == 0);
  CHECK(attack_curves_csv(r) == "attack,parameter,bit_accuracy,tpr,tpr_averaged\n");
}

#include <cmath>

#include "doctest.h"
#include "fixtures.hpp"
#include "lorakey/error.hpp"
#include "lorakey/verify.hpp"

using namespace lorakey;

namespace {

// Exact tail: sum of integer binomials over 2^L, converted once.
long double exact_tail(std::size_t length, std::size_t tau) {
  unsigned __int128 c = 1, total = 0;
  for (std::size_t i = 0; i <= length; ++i) {
    if (i > tau) total += c;
    c = c * (length - i) / (i + 1);
  }
  return static_cast<long double>(total) / std::ldexp(1.0L, static_cast<int>(length));
}

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

// Decoder whose logits are a fixed affine map of the latent, so outputs can be dictated.
WatermarkDecoder constant_decoder(const Message& m, std::size_t latent_dim) {
  Layer l;
  l.name = "out";
  l.weight = Tensor({m.size(), latent_dim});
  l.bias = m.signed_view();
  l.activation = Activation::kIdentity;
  WatermarkDecoder d;
  d.net = Mlp({l});
  d.frozen = true;
  return d;
}

}  // namespace

TEST_CASE("matching bits") {
  CHECK(matching_bits(Message::parse("0101"), Message::parse("0111")) == 3);
  const Message m = Message::parse("110010");
  CHECK(matching_bits(m, m) == 6);
  CHECK(matching_bits(m, m.complement()) == 0);
  CHECK_THROWS_AS(matching_bits(m, Message::parse("01")), DimensionError);
}

TEST_CASE("tail hand values") {
  CHECK(fpr_sum(8, 8) == 0.0);
  CHECK(fpr_sum(8, 7) == 0.00390625);
  CHECK(fpr_sum(8, 6) == 0.03515625);
  CHECK(fpr_beta(8, 7) == doctest::Approx(0.00390625).epsilon(1e-14));
  CHECK(fpr_beta(8, 8) == 0.0);
  CHECK(fpr_beta(8, 0) == doctest::Approx(1.0 - 1.0 / 256.0).epsilon(1e-14));
  CHECK_THROWS(fpr_sum(8, 9));
}

TEST_CASE("fpr_sum matches the exact integer tail") {
  for (std::size_t length : {8, 16, 32, 48, 64}) {
    for (std::size_t tau = 0; tau < length; ++tau) {
      CHECK(rel(fpr_sum(length, tau), static_cast<double>(exact_tail(length, tau))) <= 1e-14);
    }
    CHECK(fpr_sum(length, length - 1) == std::ldexp(1.0, -static_cast<int>(length)));
  }
}

TEST_CASE("both tail routes agree") {
  for (std::size_t length : {8, 16, 32, 48, 64}) {
    for (std::size_t tau = 0; tau <= length; ++tau) {
      const double s = fpr_sum(length, tau), b = fpr_beta(length, tau);
      if (s == 0.0) {
        CHECK(b == 0.0);
      } else {
        CHECK(rel(b, s) <= 1e-12);
      }
    }
  }
}

TEST_CASE("tail is strictly decreasing") {
  for (std::size_t length : {8, 16, 48}) {
    for (std::size_t tau = 1; tau <= length; ++tau) CHECK(fpr_sum(length, tau) < fpr_sum(length, tau - 1));
  }
}

TEST_CASE("threshold selection") {
  CHECK(threshold_for_fpr(8, 0.004) == 7);
  CHECK(threshold_for_fpr(16, 1e-3) == 14);
  CHECK(threshold_for_fpr(16, 1.0 - 1e-15) == 0);

  // Exhaustive scan oracle, frozen as a fixture.
  std::size_t scan = 48;
  for (std::size_t tau = 0; tau <= 48; ++tau) {
    if (static_cast<double>(exact_tail(48, tau)) <= 1e-6) {
      scan = tau;
      break;
    }
  }
  CHECK(scan == 40);
  CHECK(threshold_for_fpr(48, 1e-6) == scan);

  std::size_t previous = 0;
  for (double target : {0.5, 0.1, 1e-2, 1e-3, 1e-6, 1e-9}) {
    const std::size_t tau = threshold_for_fpr(32, target);
    CHECK(tau >= previous);
    previous = tau;
  }
  CHECK_THROWS(threshold_for_fpr(16, 0.0));
}

TEST_CASE("policy invariants") {
  const VerificationPolicy p = VerificationPolicy::make(Message::parse("0110100111001010"), 1e-3);
  CHECK(p.tau == 14);
  CHECK_NOTHROW(p.validate());
  VerificationPolicy bad = p;
  bad.tau = 15;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.tau = 13;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("image verification with dictated decoders") {
  const Message m = Message::parse("1011001110001101");
  const LatentCodec codec = LatentCodec::build(1, {3, 4, 4}, 8);
  const Tensor image = codec.decode(Tensor({8}));
  // All three leave tau < L.
  for (double target : {0.5, 1e-3, 1e-4}) {
    const VerificationPolicy p = VerificationPolicy::make(m, target);
    CHECK(verify_image(p, constant_decoder(m, 8), codec, image).accepted);
    const Verdict v = verify_image(p, constant_decoder(m.complement(), 8), codec, image);
    CHECK_FALSE(v.accepted);
    CHECK(v.matching == 0);
  }
}

TEST_CASE("aggregation modes") {
  const Message m = Message::parse("1111");
  const VerificationPolicy p = VerificationPolicy::make(m, 0.07);  // tau = 3: all four bits needed
  REQUIRE(p.tau == 3);
  const Tensor logits = Tensor::matrix({{1.0, 1.0, 1.0, -0.1},
                                        {1.0, 1.0, -0.2, 1.0},
                                        {1.0, -3.0, 1.0, 1.0},
                                        {1.0, 1.0, 1.0, 1.0}});
  const VerificationReport per = batch_verify_logits(p, logits, 1, Aggregation::kPerImage);
  CHECK(per.trials.size() == 4);
  CHECK(per.acceptance_rate == 0.25);
  CHECK(per.mean_bit_accuracy == doctest::Approx(13.0 / 16.0));

  const VerificationReport mean = batch_verify_logits(p, logits, 4, Aggregation::kMeanLogits);
  REQUIRE(mean.trials.size() == 1);
  // Column 1 averages to 0, which reads as bit 0.
  CHECK(mean.trials[0].matching == 3);

  const VerificationReport vote = batch_verify_logits(p, logits, 4, Aggregation::kMajorityVote);
  CHECK(vote.trials[0].matching == 4);
  CHECK(vote.acceptance_rate == 1.0);

  const VerificationReport single = batch_verify_logits(p, logits, 1, Aggregation::kMeanLogits);
  CHECK(single.acceptance_rate == per.acceptance_rate);
  CHECK_THROWS(batch_verify_logits(p, Tensor({0, 4}), 1));
}

TEST_CASE("clean images accept at the binomial rate") {
  // A decoder that outputs independent fair bits: random logits per image.
  const VerificationPolicy p = VerificationPolicy::make(Message::parse("0110100111001010"), 1e-3);
  Rng rng(21);
  const std::size_t n = 10000;
  const Tensor logits = rng.normal_tensor({n, 16});
  const VerificationReport r = batch_verify_logits(p, logits, 1, Aggregation::kPerImage);
  const double expected = n * fpr_sum(16, p.tau);
  const double sd = std::sqrt(n * fpr_sum(16, p.tau) * (1.0 - fpr_sum(16, p.tau)));
  const double accepted = r.acceptance_rate * n;
  CHECK(accepted <= expected + 3.0 * sd);
  CHECK(accepted >= expected - 3.0 * sd);
}

TEST_CASE("reports serialize") {
  const VerificationPolicy p = VerificationPolicy::make(Message::parse("11"), 0.3);
  const VerificationReport r = batch_verify_logits(p, Tensor::matrix({{1, 1}, {-1, 1}}), 1, Aggregation::kPerImage);
  const nlohmann::json j = report_json(r);
  CHECK(j["trials"] == 2);
  CHECK(report_csv(r).rfind("index,matching,bit_accuracy,accepted\n0,2,1,1\n", 0) == 0);
  const std::string table = threshold_table_csv({8}, {0.004});
  CHECK(table == "length,target_fpr,tau,fpr_at_tau\n8,0.0040000000000000001,7,0.00390625\n");
}

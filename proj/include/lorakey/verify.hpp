#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "lorakey/stage1.hpp"

namespace lorakey {

// Number of agreeing positions.
std::size_t matching_bits(const Message& m, const Message& m_prime);

// P(M > tau) for M ~ Binomial(L, 1/2), summed term by term in log space.
double fpr_sum(std::size_t length, std::size_t tau);
// The same tail as the regularized incomplete beta I_{1/2}(tau + 1, L - tau).
double fpr_beta(std::size_t length, std::size_t tau);
// I_x(a, b) by continued fraction.
double regularized_incomplete_beta(double x, double a, double b);

// Smallest tau with fpr_sum(L, tau) <= target.
std::size_t threshold_for_fpr(std::size_t length, double target_fpr);

struct VerificationPolicy {
  Message message;
  double target_fpr = 1e-3;
  std::size_t tau = 0;

  static VerificationPolicy make(Message message, double target_fpr);
  std::size_t length() const { return message.size(); }
  bool accepts(std::size_t matching) const { return matching > tau; }
  void validate() const;
};

enum class Aggregation { kPerImage, kMeanLogits, kMajorityVote };

std::string to_string(Aggregation a);
Aggregation aggregation_from_string(const std::string& s);

struct Verdict {
  std::size_t matching = 0;
  double bit_accuracy = 0.0;
  bool accepted = false;
};

Verdict judge(const VerificationPolicy& policy, const Message& recovered);

Verdict verify_image(const VerificationPolicy& policy, const WatermarkDecoder& decoder, const LatentCodec& codec,
                     const Tensor& image);

struct VerificationReport {
  Aggregation mode = Aggregation::kPerImage;
  std::size_t group_size = 1;
  std::size_t tau = 0;
  double target_fpr = 0.0;
  std::vector<Verdict> images;  // per image, before aggregation
  std::vector<Verdict> trials;  // per decision (group of group_size images)
  double mean_bit_accuracy = 0.0;  // over images
  double acceptance_rate = 0.0;    // over trials: TPR on watermarked sets, FPR on clean sets
};

// Decisions over consecutive groups of `group_size` images; a trailing partial
// group is dropped. group_size 1 is per-image verification in every mode.
VerificationReport batch_verify(const VerificationPolicy& policy, const WatermarkDecoder& decoder,
                                const LatentCodec& codec, const Tensor& images, std::size_t group_size = 1,
                                Aggregation mode = Aggregation::kMeanLogits);
VerificationReport batch_verify_logits(const VerificationPolicy& policy, const Tensor& logits,
                                       std::size_t group_size = 1, Aggregation mode = Aggregation::kMeanLogits);

nlohmann::json report_json(const VerificationReport& report);
// One row per image: index, matching, bit_accuracy, accepted.
std::string report_csv(const VerificationReport& report);

// Columns: length, target_fpr, tau, fpr_at_tau.
std::string threshold_table_csv(const std::vector<std::size_t>& lengths, const std::vector<double>& targets);

}  // namespace lorakey

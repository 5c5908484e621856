#include "lorakey/verify.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "lorakey/error.hpp"

namespace lorakey {

std::size_t matching_bits(const Message& m, const Message& m_prime) {
  if (m.size() != m_prime.size()) {
    throw DimensionError("message lengths differ (" + std::to_string(m.size()) + " vs " +
                         std::to_string(m_prime.size()) + ")");
  }
  std::size_t n = 0;
  for (std::size_t i = 0; i < m.size(); ++i) n += m[i] == m_prime[i];
  return n;
}

// ---------------------------------------------------------------------------
// Tail probabilities

double fpr_sum(std::size_t length, std::size_t tau) {
  if (tau > length) throw Error("tau must lie in [0, L]");
  if (tau == length) return 0.0;
  // log C(L, i) - L log 2, built from i = L downwards: C(L, i-1) = C(L, i) * i / (L - i + 1).
  const long double log2 = std::log(2.0L);
  long double log_term = -static_cast<long double>(length) * log2;
  long double sum = 0.0L, comp = 0.0L;
  for (std::size_t i = length; i > tau; --i) {
    const long double term = std::exp(log_term);
    // Neumaier summation
    const long double t = sum + term;
    comp += std::fabs(sum) >= std::fabs(term) ? (sum - t) + term : (term - t) + sum;
    sum = t;
    log_term += std::log(static_cast<long double>(i)) - std::log(static_cast<long double>(length - i + 1));
  }
  return static_cast<double>(sum + comp);
}

namespace {

// Modified Lentz evaluation of the continued fraction for I_x(a, b).
double beta_continued_fraction(double x, double a, double b) {
  constexpr double tiny = 1e-300;
  constexpr double eps = 1e-16;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 10000; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < eps) return h;
  }
  throw NonFiniteError("incomplete beta continued fraction did not converge");
}

}  // namespace

double regularized_incomplete_beta(double x, double a, double b) {
  if (!(a > 0.0) || !(b > 0.0) || !(x >= 0.0 && x <= 1.0)) throw Error("incomplete beta parameters out of range");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(x, a, b) / a;
  return 1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b;
}

double fpr_beta(std::size_t length, std::size_t tau) {
  if (tau > length) throw Error("tau must lie in [0, L]");
  if (tau == length) return 0.0;
  return regularized_incomplete_beta(0.5, static_cast<double>(tau + 1), static_cast<double>(length - tau));
}

std::size_t threshold_for_fpr(std::size_t length, double target_fpr) {
  if (!(target_fpr > 0.0 && target_fpr < 1.0)) throw Error("target FPR must lie in (0, 1)");
  for (std::size_t tau = 0; tau < length; ++tau) {
    if (fpr_sum(length, tau) <= target_fpr) return tau;
  }
  return length;
}

// ---------------------------------------------------------------------------
// Policy and decisions

VerificationPolicy VerificationPolicy::make(Message message, double target_fpr) {
  VerificationPolicy p;
  p.tau = threshold_for_fpr(message.size(), target_fpr);
  p.message = std::move(message);
  p.target_fpr = target_fpr;
  return p;
}

void VerificationPolicy::validate() const {
  if (message.size() == 0) throw ConfigError("verification policy has an empty message");
  if (tau > message.size()) throw ConfigError("verification threshold exceeds the message length");
  if (fpr_sum(message.size(), tau) > target_fpr) throw ConfigError("verification threshold violates the target FPR");
  if (tau > 0 && fpr_sum(message.size(), tau - 1) <= target_fpr) {
    throw ConfigError("verification threshold is not the smallest admissible value");
  }
}

std::string to_string(Aggregation a) {
  switch (a) {
    case Aggregation::kPerImage:
      return "per_image";
    case Aggregation::kMeanLogits:
      return "mean_logits";
    case Aggregation::kMajorityVote:
      return "majority_vote";
  }
  return "per_image";
}

Aggregation aggregation_from_string(const std::string& s) {
  if (s == "per_image") return Aggregation::kPerImage;
  if (s == "mean_logits") return Aggregation::kMeanLogits;
  if (s == "majority_vote") return Aggregation::kMajorityVote;
  throw ConfigError("unknown aggregation mode '" + s + "'");
}

Verdict judge(const VerificationPolicy& policy, const Message& recovered) {
  Verdict v;
  v.matching = matching_bits(policy.message, recovered);
  v.bit_accuracy = static_cast<double>(v.matching) / static_cast<double>(policy.length());
  v.accepted = policy.accepts(v.matching);
  return v;
}

Verdict verify_image(const VerificationPolicy& policy, const WatermarkDecoder& decoder, const LatentCodec& codec,
                     const Tensor& image) {
  const Tensor rows = as_image_rows(image, codec.image_dim());
  if (rows.rows() != 1) throw DimensionError("verify_image expects a single image");
  return judge(policy, extract_bits(decoder, codec, rows).messages.front());
}

VerificationReport batch_verify_logits(const VerificationPolicy& policy, const Tensor& logits, std::size_t group_size,
                                       Aggregation mode) {
  if (logits.rank() != 2 || logits.rows() == 0) throw Error("batch verification needs a non-empty batch");
  if (logits.cols() != policy.length()) throw DimensionError("decoder output length does not match the policy");
  if (group_size == 0) throw Error("averaging count must be >= 1");
  if (mode == Aggregation::kPerImage) group_size = 1;
  const std::size_t n = logits.rows(), length = logits.cols();
  if (group_size > n) throw Error("averaging count exceeds the batch size");

  VerificationReport r;
  r.mode = mode;
  r.group_size = group_size;
  r.tau = policy.tau;
  r.target_fpr = policy.target_fpr;
  const Extraction per_image = bits_from_logits(logits);
  for (const Message& m : per_image.messages) {
    r.images.push_back(judge(policy, m));
    r.mean_bit_accuracy += r.images.back().bit_accuracy;
  }
  r.mean_bit_accuracy /= static_cast<double>(n);

  std::size_t accepted = 0;
  for (std::size_t g = 0; g + group_size <= n; g += group_size) {
    std::vector<std::uint8_t> bits(length);
    for (std::size_t j = 0; j < length; ++j) {
      double mean = 0.0;
      std::size_t ones = 0;
      for (std::size_t i = g; i < g + group_size; ++i) {
        mean += logits.at(i, j);
        ones += per_image.messages[i][j];
      }
      if (mode == Aggregation::kMajorityVote && 2 * ones != group_size) {
        bits[j] = 2 * ones > group_size ? 1 : 0;
      } else {
        // Mean-logit mode, and the tie-break for even-sized majority votes.
        bits[j] = mean > 0.0 ? 1 : 0;
      }
    }
    r.trials.push_back(judge(policy, Message(std::move(bits))));
    accepted += r.trials.back().accepted;
  }
  r.acceptance_rate = static_cast<double>(accepted) / static_cast<double>(r.trials.size());
  return r;
}

VerificationReport batch_verify(const VerificationPolicy& policy, const WatermarkDecoder& decoder,
                                const LatentCodec& codec, const Tensor& images, std::size_t group_size,
                                Aggregation mode) {
  const Tensor rows = as_image_rows(images, codec.image_dim());
  if (rows.rows() == 0) throw Error("batch verification needs a non-empty batch");
  return batch_verify_logits(policy, extract_bits(decoder, codec, rows).logits, group_size, mode);
}

// ---------------------------------------------------------------------------
// Reports

nlohmann::json report_json(const VerificationReport& report) {
  nlohmann::json j;
  j["mode"] = to_string(report.mode);
  j["group_size"] = report.group_size;
  j["tau"] = report.tau;
  j["target_fpr"] = report.target_fpr;
  j["images"] = report.images.size();
  j["trials"] = report.trials.size();
  j["mean_bit_accuracy"] = report.mean_bit_accuracy;
  j["acceptance_rate"] = report.acceptance_rate;
  std::size_t per_image_accepted = 0;
  for (const Verdict& v : report.images) per_image_accepted += v.accepted;
  j["per_image_acceptance_rate"] = static_cast<double>(per_image_accepted) / static_cast<double>(report.images.size());
  return j;
}

std::string report_csv(const VerificationReport& report) {
  std::ostringstream out;
  out << "index,matching,bit_accuracy,accepted\n";
  out.precision(17);
  for (std::size_t i = 0; i < report.images.size(); ++i) {
    const Verdict& v = report.images[i];
    out << i << ',' << v.matching << ',' << v.bit_accuracy << ',' << (v.accepted ? 1 : 0) << '\n';
  }
  return out.str();
}

std::string threshold_table_csv(const std::vector<std::size_t>& lengths, const std::vector<double>& targets) {
  std::ostringstream out;
  out << "length,target_fpr,tau,fpr_at_tau\n";
  out.precision(17);
  for (std::size_t length : lengths) {
    for (double target : targets) {
      const std::size_t tau = threshold_for_fpr(length, target);
      out << length << ',' << target << ',' << tau << ',' << fpr_sum(length, tau) << '\n';
    }
  }
  return out.str();
}

}  // namespace lorakey

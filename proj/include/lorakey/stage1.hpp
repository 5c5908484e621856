#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lorakey/grad_vector.hpp"
#include "lorakey/mlp.hpp"
#include "lorakey/rng.hpp"
#include "lorakey/world.hpp"

namespace lorakey {

// Fixed-length binary secret.
class Message {
 public:
  Message() = default;
  explicit Message(std::vector<std::uint8_t> bits);

  static Message random(std::size_t length, Rng& rng);
  // Parses a string of '0'/'1' characters.
  static Message parse(const std::string& bits);

  std::size_t size() const { return bits_.size(); }
  std::uint8_t operator[](std::size_t i) const { return bits_[i]; }
  const std::vector<std::uint8_t>& bits() const { return bits_; }
  std::string str() const;
  Message complement() const;

  // {0,1} targets, [L].
  Tensor targets() const;
  // 2m - 1, [L].
  Tensor signed_view() const;

  bool operator==(const Message&) const = default;

 private:
  std::vector<std::uint8_t> bits_;
};

// Residual generator: r(m) = gain * net(2m - 1). The last layer starts at zero.
struct MessageEncoder {
  Mlp net;
  double gain = 1.0;

  std::size_t message_length() const { return net.in_dim(); }
  std::size_t latent_dim() const { return net.out_dim(); }
  // signs: [N x L] of +-1 -> [N x D_z]
  Tensor residual(const Tensor& signs) const;
  Tensor residual(const Message& m) const;
};

// Private message decoder: latent -> L logits.
struct WatermarkDecoder {
  Mlp net;
  bool frozen = false;

  std::size_t message_length() const { return net.out_dim(); }
  Tensor logits(const Tensor& latents) const;
};

// z_wm = z + r(m), row-wise. `z` is [D_z] or [N x D_z].
Tensor embed_message(const MessageEncoder& encoder, const Tensor& z, const Message& m);

enum class DistortionKind { kGaussianNoise, kRandomMask, kQuantize };

std::string to_string(DistortionKind k);
DistortionKind distortion_kind_from_string(const std::string& s);

struct DistortionConfig {
  std::vector<DistortionKind> enabled;
  double noise_sigma = 0.05;
  double mask_fraction = 0.1;  // area fraction of the zeroed rectangle
  int quantize_levels = 32;
  ImageShape image_shape;
};

// Per-row draws of one stochastic pass; replaying it re-applies the same noise
// and masks. The backward contract: noise and quantize pass gradients through
// unchanged (straight-through), masks zero them where pixels were zeroed.
struct DistortionRecord {
  std::vector<int> kind;  // index into DistortionKind, -1 for identity
  Tensor additive;        // [N x D_img]
  Tensor multiplicative;  // [N x D_img]
  int quantize_levels = 0;
};

struct DistortionResult {
  Tensor images;
  DistortionRecord record;
};

// One enabled distortion, chosen uniformly per row; identity when none are enabled.
DistortionResult distort(const DistortionConfig& config, const Tensor& images, Rng& rng);
Tensor replay_distortion(const DistortionRecord& record, const Tensor& images);
Tensor distortion_backward(const DistortionRecord& record, const Tensor& grad_out);

struct Extraction {
  Tensor logits;  // [N x L]
  std::vector<Message> messages;
};

// m' = 1[D(E_vae(x)) > 0] row-wise.
Extraction extract_bits(const WatermarkDecoder& decoder, const LatentCodec& codec, const Tensor& images);
Extraction bits_from_logits(Tensor logits);

struct PriorModelConfig {
  std::size_t message_length = 16;
  std::size_t encoder_hidden = 128;
  std::size_t decoder_hidden = 256;
  double encoder_gain = 1.0;
};

struct PriorModels {
  MessageEncoder encoder;
  WatermarkDecoder decoder;
};

PriorModels init_prior(std::size_t latent_dim, const PriorModelConfig& config, Rng& rng);

struct PriorTrainConfig {
  PriorModelConfig model;
  double lambda_mse = 1.0;
  double lambda_perceptual = 0.1;
  std::size_t steps = 2000;
  std::size_t batch = 32;
  double learning_rate = 2e-3;
  double weight_decay = 0.0;
  DistortionConfig distortions;
};

struct PriorLogRow {
  std::size_t step;
  double bce;
  double mse;
  double feat_mse;
  double bit_acc;
};

struct PriorLoss {
  double total = 0.0;
  double bce = 0.0;
  double mse = 0.0;
  double feat_mse = 0.0;
  double bit_acc = 0.0;
  GradVector encoder_grad;  // "enc.<param>"
  GradVector decoder_grad;  // "dec.<param>"
};

// L_prior = BCE(m, m') + lambda_mse * MSE(x_clean, x_wm) + lambda_perceptual * MSE(F(x_clean), F(x_wm))
// for latents `z` [N x D_z] and messages `bits` [N x L] under a fixed distortion draw.
PriorLoss prior_loss(const PriorModels& models, const LatentCodec& codec, const PerceptionNet& perception,
                     const Tensor& z, const Tensor& bits, const DistortionRecord& distortion, double lambda_mse,
                     double lambda_perceptual, bool want_grads);

struct PriorTrainResult {
  PriorModels models;  // decoder frozen
  std::vector<PriorLogRow> log;
};

PriorTrainResult train_prior(const SyntheticWorld& world, const LatentCodec& codec, const PerceptionNet& perception,
                             const PriorTrainConfig& config, Rng& rng, const PriorModels* init = nullptr);

struct PriorEvaluation {
  double bit_accuracy = 0.0;
  double residual_rms = 0.0;  // mean ||r(m)|| / sqrt(D_z)
};

// Held-out evaluation over fresh world latents and random messages; the
// distortion config may be empty for clean accuracy.
PriorEvaluation evaluate_prior(const PriorModels& models, const SyntheticWorld& world, const LatentCodec& codec,
                               const DistortionConfig& distortions, std::size_t samples, Rng& rng);

}  // namespace lorakey

#include "lorakey/stage1.hpp"

#include <algorithm>
#include <cmath>

#include "lorakey/error.hpp"
#include "lorakey/losses.hpp"
#include "lorakey/optimizer.hpp"

namespace lorakey {

// ---------------------------------------------------------------------------
// Message

Message::Message(std::vector<std::uint8_t> bits) : bits_(std::move(bits)) {
  for (std::uint8_t b : bits_) {
    if (b > 1) throw Error("message bits must be 0 or 1");
  }
}

Message Message::random(std::size_t length, Rng& rng) {
  std::vector<std::uint8_t> bits(length);
  for (auto& b : bits) b = static_cast<std::uint8_t>(rng.bit());
  return Message(std::move(bits));
}

Message Message::parse(const std::string& text) {
  if (text.empty()) throw Error("message string is empty");
  std::vector<std::uint8_t> bits;
  for (char ch : text) {
    if (ch != '0' && ch != '1') throw Error("message string may only contain '0' and '1'");
    bits.push_back(static_cast<std::uint8_t>(ch - '0'));
  }
  return Message(std::move(bits));
}

std::string Message::str() const {
  std::string s;
  for (std::uint8_t b : bits_) s.push_back(static_cast<char>('0' + b));
  return s;
}

Message Message::complement() const {
  std::vector<std::uint8_t> bits(bits_);
  for (auto& b : bits) b ^= 1u;
  return Message(std::move(bits));
}

Tensor Message::targets() const {
  Tensor t({bits_.size()});
  for (std::size_t i = 0; i < bits_.size(); ++i) t[i] = bits_[i];
  return t;
}

Tensor Message::signed_view() const {
  Tensor t({bits_.size()});
  for (std::size_t i = 0; i < bits_.size(); ++i) t[i] = 2.0 * bits_[i] - 1.0;
  return t;
}

// ---------------------------------------------------------------------------
// Encoder / decoder

Tensor MessageEncoder::residual(const Tensor& signs) const {
  Tensor r = mlp_forward(net, signs).y;
  r *= gain;
  return r;
}

Tensor MessageEncoder::residual(const Message& m) const {
  if (m.size() != message_length()) {
    throw DimensionError("message of length " + std::to_string(m.size()) + " for an encoder of length " +
                         std::to_string(message_length()));
  }
  return residual(m.signed_view());
}

Tensor WatermarkDecoder::logits(const Tensor& latents) const { return mlp_forward(net, latents).y; }

Tensor embed_message(const MessageEncoder& encoder, const Tensor& z, const Message& m) {
  const Tensor r = encoder.residual(m);
  if (z.cols() != r.size()) throw DimensionError("embed_message: latent width does not match encoder output");
  Tensor out = z;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto row = out.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += r[j];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Distortion layer

std::string to_string(DistortionKind k) {
  switch (k) {
    case DistortionKind::kGaussianNoise:
      return "gaussian_noise";
    case DistortionKind::kRandomMask:
      return "random_mask";
    case DistortionKind::kQuantize:
      return "quantize";
  }
  return "gaussian_noise";
}

DistortionKind distortion_kind_from_string(const std::string& s) {
  if (s == "gaussian_noise") return DistortionKind::kGaussianNoise;
  if (s == "random_mask") return DistortionKind::kRandomMask;
  if (s == "quantize") return DistortionKind::kQuantize;
  throw ConfigError("unknown training distortion '" + s + "'");
}

namespace {

double quantize_value(double v, int levels) {
  const double q = static_cast<double>(levels - 1);
  return std::round(std::clamp(v, 0.0, 1.0) * q) / q;
}

}  // namespace

DistortionResult distort(const DistortionConfig& config, const Tensor& images, Rng& rng) {
  const ImageShape& shape = config.image_shape;
  const Tensor rows = as_image_rows(images, shape.size());
  const std::size_t n = rows.rows();
  DistortionResult out;
  DistortionRecord& rec = out.record;
  rec.kind.assign(n, -1);
  rec.additive = Tensor({n, shape.size()});
  rec.multiplicative = Tensor({n, shape.size()}, 1.0);
  rec.quantize_levels = config.quantize_levels;
  for (std::size_t i = 0; i < n; ++i) {
    if (config.enabled.empty()) continue;
    const DistortionKind kind = config.enabled[rng.uniform_index(config.enabled.size())];
    rec.kind[i] = static_cast<int>(kind);
    if (kind == DistortionKind::kGaussianNoise) {
      for (double& v : rec.additive.row(i)) v = config.noise_sigma * rng.normal();
    } else if (kind == DistortionKind::kRandomMask) {
      // Axis-aligned rectangle covering `mask_fraction` of the image area, all channels.
      const double side = std::sqrt(std::clamp(config.mask_fraction, 0.0, 1.0));
      const std::size_t mh = static_cast<std::size_t>(std::lround(side * shape.height));
      const std::size_t mw = static_cast<std::size_t>(std::lround(side * shape.width));
      const std::size_t y0 = rng.uniform_index(shape.height - mh + 1);
      const std::size_t x0 = rng.uniform_index(shape.width - mw + 1);
      auto mask = rec.multiplicative.row(i);
      for (std::size_t c = 0; c < shape.channels; ++c) {
        for (std::size_t y = y0; y < y0 + mh; ++y) {
          for (std::size_t x = x0; x < x0 + mw; ++x) mask[(c * shape.height + y) * shape.width + x] = 0.0;
        }
      }
    }
  }
  out.images = replay_distortion(rec, rows);
  return out;
}

Tensor replay_distortion(const DistortionRecord& record, const Tensor& images) {
  if (images.rows() != record.kind.size() || images.cols() != record.additive.cols()) {
    throw DimensionError("replay_distortion: record does not match the image batch");
  }
  Tensor out({images.rows(), images.cols()});
  for (std::size_t i = 0; i < images.rows(); ++i) {
    auto src = images.row(i);
    auto dst = out.row(i);
    auto add = record.additive.row(i);
    auto mul = record.multiplicative.row(i);
    const bool quantize = record.kind[i] == static_cast<int>(DistortionKind::kQuantize);
    for (std::size_t j = 0; j < dst.size(); ++j) {
      const double v = src[j] * mul[j] + add[j];
      dst[j] = quantize ? quantize_value(v, record.quantize_levels) : v;
    }
  }
  return out;
}

Tensor distortion_backward(const DistortionRecord& record, const Tensor& grad_out) {
  require_same_shape(grad_out, record.multiplicative, "distortion_backward");
  return hadamard(grad_out, record.multiplicative);
}

// ---------------------------------------------------------------------------
// Extraction

Extraction bits_from_logits(Tensor logits) {
  Extraction e;
  if (logits.rank() == 1) logits = logits.reshaped({1, logits.size()});
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    std::vector<std::uint8_t> bits;
    for (double v : logits.row(i)) bits.push_back(v > 0.0 ? 1 : 0);
    e.messages.emplace_back(std::move(bits));
  }
  e.logits = std::move(logits);
  return e;
}

Extraction extract_bits(const WatermarkDecoder& decoder, const LatentCodec& codec, const Tensor& images) {
  const Tensor rows = as_image_rows(images, codec.image_dim());
  return bits_from_logits(decoder.logits(codec.encode(rows)));
}

// ---------------------------------------------------------------------------
// Training

PriorModels init_prior(std::size_t latent_dim, const PriorModelConfig& config, Rng& rng) {
  PriorModels m;
  Rng enc_rng = rng.fork("encoder");
  m.encoder.net = Mlp::build({config.message_length, config.encoder_hidden, latent_dim},
                             {Activation::kTanh, Activation::kIdentity}, {"enc1", "enc2"}, enc_rng);
  m.encoder.net.layer(1).weight.fill(0.0);
  m.encoder.gain = config.encoder_gain;
  Rng dec_rng = rng.fork("decoder");
  m.decoder.net = Mlp::build({latent_dim, config.decoder_hidden, config.decoder_hidden, config.message_length},
                             {Activation::kTanh, Activation::kTanh, Activation::kIdentity}, {"dec1", "dec2", "dec3"},
                             dec_rng);
  // Latents span several units; keep first-layer pre-activations O(1).
  m.decoder.net.layer(0).weight *= 0.5;
  return m;
}

namespace {

GradVector prefixed(const GradVector& g, const std::string& prefix) {
  GradVector out;
  for (std::size_t i = 0; i < g.entries(); ++i) out.add(prefix + g.name(i), g[i]);
  return out;
}

}  // namespace

PriorLoss prior_loss(const PriorModels& models, const LatentCodec& codec, const PerceptionNet& perception,
                     const Tensor& z, const Tensor& bits, const DistortionRecord& distortion, double lambda_mse,
                     double lambda_perceptual, bool want_grads) {
  const std::size_t n = z.rows();
  if (bits.rows() != n || bits.cols() != models.encoder.message_length()) {
    throw DimensionError("prior_loss: message batch does not match latents/encoder");
  }
  Tensor signs = bits * 2.0;
  signs.vec().array() -= 1.0;

  MlpForward enc = mlp_forward(models.encoder.net, signs);
  Tensor r = enc.y * models.encoder.gain;
  const Tensor z_wm = z + r;
  const Tensor x_clean = codec.decode(z);
  const Tensor x_wm = codec.decode(z_wm);
  const Tensor x_dist = replay_distortion(distortion, x_wm);
  const Tensor z_dist = codec.encode(x_dist);
  MlpForward dec = mlp_forward(models.decoder.net, z_dist);

  PriorLoss out;
  LossResult bce = loss_bce_logits(dec.y, bits);
  LossResult mse = loss_mse(x_wm, x_clean);
  const Perception f_clean = perception.perceive(x_clean);
  const Perception f_wm = perception.perceive(x_wm);
  LossResult feat = loss_mse(f_wm.features, f_clean.features);
  out.bce = bce.value;
  out.mse = mse.value;
  out.feat_mse = feat.value;
  out.total = bce.value + lambda_mse * mse.value + lambda_perceptual * feat.value;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < dec.y.size(); ++i) correct += (dec.y[i] > 0.0) == (bits[i] > 0.5);
  out.bit_acc = static_cast<double>(correct) / static_cast<double>(dec.y.size());
  if (!std::isfinite(out.total)) throw NonFiniteError("prior loss is not finite");
  if (!want_grads) return out;

  MlpGradients dec_g = mlp_backward(dec.cache, bce.grad, models.decoder.net);
  const Tensor grad_x_dist = codec.encode_backward(dec_g.input);
  Tensor grad_x_wm = distortion_backward(distortion, grad_x_dist);
  axpy(lambda_mse, mse.grad, grad_x_wm);
  if (lambda_perceptual != 0.0) axpy(lambda_perceptual, perception.backward(f_wm, feat.grad), grad_x_wm);
  Tensor grad_r = codec.decode_backward(grad_x_wm);
  grad_r *= models.encoder.gain;
  BackwardOptions enc_opts;
  enc_opts.input_grad = false;
  MlpGradients enc_g = mlp_backward(enc.cache, grad_r, models.encoder.net, {}, enc_opts);
  out.encoder_grad = prefixed(enc_g.params, "enc.");
  out.decoder_grad = prefixed(dec_g.params, "dec.");
  return out;
}

PriorTrainResult train_prior(const SyntheticWorld& world, const LatentCodec& codec, const PerceptionNet& perception,
                             const PriorTrainConfig& config, Rng& rng, const PriorModels* init) {
  if (config.lambda_mse < 0.0 || config.lambda_perceptual < 0.0) throw ConfigError("prior loss weights must be >= 0");
  if (world.latent_dim() != codec.latent_dim()) throw DimensionError("world and codec latent dims differ");
  PriorTrainResult result;
  result.models = init != nullptr ? *init : init_prior(world.latent_dim(), config.model, rng);
  PriorModels& models = result.models;
  const std::size_t length = models.encoder.message_length();
  DistortionConfig dcfg = config.distortions;
  dcfg.image_shape = codec.image_shape();

  AdamWConfig opt_cfg;
  opt_cfg.learning_rate = config.learning_rate;
  opt_cfg.weight_decay = config.weight_decay;
  AdamW opt(opt_cfg);
  std::vector<Tensor*> refs = models.encoder.net.parameter_refs();
  for (Tensor* t : models.decoder.net.parameter_refs()) refs.push_back(t);

  for (std::size_t step = 0; step < config.steps; ++step) {
    std::vector<std::size_t> classes(config.batch);
    for (auto& c : classes) c = world.draw_class(rng);
    const Tensor z = sample_latents(world, classes, rng);
    Tensor bits({config.batch, length});
    for (double& b : bits.values()) b = rng.bit();
    // The distortion draw is taken on the clean decode; the record is replayed on x_wm.
    const DistortionRecord record = distort(dcfg, codec.decode(z), rng).record;
    PriorLoss loss = prior_loss(models, codec, perception, z, bits, record, config.lambda_mse,
                                config.lambda_perceptual, true);
    result.log.push_back({step, loss.bce, loss.mse, loss.feat_mse, loss.bit_acc});
    GradVector grads = std::move(loss.encoder_grad);
    grads.append(loss.decoder_grad);
    opt.step(refs, grads);
  }
  models.decoder.frozen = true;
  return result;
}

PriorEvaluation evaluate_prior(const PriorModels& models, const SyntheticWorld& world, const LatentCodec& codec,
                               const DistortionConfig& distortions, std::size_t samples, Rng& rng) {
  DistortionConfig dcfg = distortions;
  dcfg.image_shape = codec.image_shape();
  const std::size_t length = models.encoder.message_length();
  std::vector<std::size_t> classes(samples);
  for (auto& c : classes) c = world.draw_class(rng);
  const Tensor z = sample_latents(world, classes, rng);
  Tensor signs({samples, length});
  for (double& s : signs.values()) s = rng.bit() ? 1.0 : -1.0;
  const Tensor r = models.encoder.residual(signs);
  const Tensor x_wm = codec.decode(z + r);
  const Tensor x_dist = distort(dcfg, x_wm, rng).images;
  const Extraction e = extract_bits(models.decoder, codec, x_dist);

  PriorEvaluation ev;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < samples; ++i) {
    for (std::size_t j = 0; j < length; ++j) correct += e.messages[i][j] == (signs.at(i, j) > 0.0 ? 1 : 0);
    ev.residual_rms += norm(r.row(i)) / std::sqrt(static_cast<double>(r.cols()));
  }
  ev.bit_accuracy = static_cast<double>(correct) / static_cast<double>(samples * length);
  ev.residual_rms /= static_cast<double>(samples);
  return ev;
}

}  // namespace lorakey

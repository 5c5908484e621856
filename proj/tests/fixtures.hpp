#pragma once

#include "lorakey/diffusion.hpp"
#include "lorakey/grad_check.hpp"
#include "lorakey/lora.hpp"
#include "lorakey/stage1.hpp"
#include "lorakey/world.hpp"

namespace fixtures {

using namespace lorakey;

// Reduced-size setting for gradient checks: 8-dim latent, 3x4x4 images,
// width-16 denoiser over 20 steps.
struct Small {
  ImageShape shape{3, 4, 4};
  std::size_t latent_dim = 8;
  SyntheticWorld world = SyntheticWorld::build(11, 8, {.classes = 3});
  LatentCodec codec = LatentCodec::build(12, {3, 4, 4}, 8);
  PerceptionNet perception = PerceptionNet::build(13, {3, 4, 4}, {.hidden = 12, .features = 6});
  NoiseSchedule schedule = NoiseSchedule::linear(20);
  Denoiser denoiser = make_denoiser();

  static Denoiser make_denoiser() {
    DenoiserConfig cfg;
    cfg.hidden_width = 16;
    cfg.time_dim = 4;
    cfg.class_dim = 4;
    Denoiser d = Denoiser::build(14, 8, 3, 20, cfg);
    d.freeze();
    return d;
  }

  // Adapter with non-zero B so both factor gradients are informative.
  LoraAdapter random_adapter(std::uint64_t seed, std::size_t rank = 2) const {
    Rng rng(seed);
    LoraAdapter a = init_lora(denoiser, denoiser.layer_names(), rank, rng);
    for (LoraEntry& e : a.entries) e.b = rng.normal_tensor(e.b.shape(), 0.3);
    return a;
  }

  // Encoder whose last layer is randomized so the residual is non-zero.
  MessageEncoder random_encoder(std::uint64_t seed, std::size_t length = 4) const {
    Rng rng(seed);
    PriorModelConfig cfg;
    cfg.message_length = length;
    cfg.encoder_hidden = 8;
    cfg.decoder_hidden = 8;
    PriorModels m = init_prior(latent_dim, cfg, rng);
    Layer& last = m.encoder.net.layer(1);
    last.weight = rng.normal_tensor(last.weight.shape(), 0.3);
    return m.encoder;
  }
};

}  // namespace fixtures

#pragma once

#include <string>
#include <vector>

#include "lorakey/diffusion.hpp"
#include "lorakey/lora.hpp"
#include "lorakey/stage1.hpp"

namespace lorakey {

enum class ProjectionMode { kGlobal, kPerLayer, kOff };

std::string to_string(ProjectionMode m);
ProjectionMode projection_mode_from_string(const std::string& s);

struct GopConfig {
  double epsilon = 1e-8;
  double lambda_sem = 1.0;
  bool include_sem_update = true;
  std::size_t accumulation = 4;
  double learning_rate = 1e-3;
  ProjectionMode mode = ProjectionMode::kGlobal;

  void validate() const;
};

struct GopResult {
  GradVector projected;
  double alpha = 0.0;  // mean coefficient over groups in per-layer mode
};

// alpha = <g_wm, g_sem> / (||g_sem||^2 + epsilon), g_proj = g_wm - alpha g_sem.
GopResult gop_project(const GradVector& g_wm, const GradVector& g_sem, double epsilon);
// Same rule applied independently to each adapter layer ("<layer>.A", "<layer>.B").
GopResult gop_project_per_layer(const GradVector& g_wm, const GradVector& g_sem, double epsilon);
GopResult gop_apply(const GradVector& g_wm, const GradVector& g_sem, const GopConfig& config);

struct WatermarkBatch {
  Tensor z0;  // [N x D_z] clean latents
  Tensor eps;
  std::vector<std::size_t> t;
  std::vector<std::size_t> c;
};

WatermarkBatch draw_watermark_batch(const SyntheticWorld& world, const NoiseSchedule& schedule, std::size_t n,
                                    Rng& rng);

struct WatermarkCache {
  std::vector<AttachedAdapter> attached;
  EpsPrediction key;
  Tensor z_wm_t;
  std::vector<std::size_t> t;
  Tensor z0;
};

struct WatermarkLoss {
  double value = 0.0;
  GradVector grad;  // over the key adapter
  WatermarkCache cache;
};

// L_wm = mean over rows of ||eps_key(z_wm,t) - eps_base(z_t)||^2 with z_wm = z0 + r(m), both
// noised with the same eps; the base prediction is held constant.
WatermarkLoss watermark_consistency_loss(const Denoiser& base, const LoraAdapter& key, const MessageEncoder& encoder,
                                         const Message& message, const NoiseSchedule& schedule,
                                         const WatermarkBatch& batch, bool want_grad = true);

struct SemanticLoss {
  double value = 0.0;
  GradVector grad;
};

// L_sem = 1 - cos(F(decode(z0)), F(decode(z0_hat))), averaged over rows, with
// z0_hat recovered from the key prediction in `cache`; the reference side is
// constant.
SemanticLoss semantic_consistency_loss(const Denoiser& base, const NoiseSchedule& schedule, const LatentCodec& codec,
                                       const PerceptionNet& perception, const WatermarkCache& cache,
                                       bool want_grad = true);

struct WatermarkTrainConfig {
  GopConfig gop;
  std::size_t steps = 5000;  // micro-steps
  std::size_t batch = 32;
  std::size_t rank = 8;
  std::vector<std::string> layers;  // empty: every denoiser layer
  double weight_decay = 0.0;
};

struct WatermarkLogRow {
  std::size_t step;
  double l_wm;
  double l_sem;
  double alpha;
  double cos_wm_sem;
  double cos_proj_sem;
};

struct WatermarkTrainResult {
  LoraAdapter adapter;
  std::vector<WatermarkLogRow> log;
};

WatermarkTrainResult train_watermark_lora(const Denoiser& base, const SyntheticWorld& world, const LatentCodec& codec,
                                          const PerceptionNet& perception, const MessageEncoder& encoder,
                                          const Message& message, const NoiseSchedule& schedule,
                                          const WatermarkTrainConfig& config, Rng& rng);

// Mean L_wm and L_sem of a finished adapter over fresh batches.
struct WatermarkLossEval {
  double l_wm = 0.0;
  double l_sem = 0.0;
};
WatermarkLossEval evaluate_watermark_losses(const Denoiser& base, const std::vector<AttachedAdapter>& others,
                                            const LoraAdapter& key, double gamma, const SyntheticWorld& world,
                                            const LatentCodec& codec, const PerceptionNet& perception,
                                            const MessageEncoder& encoder, const Message& message,
                                            const NoiseSchedule& schedule, std::size_t batches, std::size_t batch,
                                            Rng& rng);

// Style as an affine map of the world's latents: z -> transform * z + shift.
struct StyleSpec {
  Tensor shift;      // [D_z], empty for none
  Tensor transform;  // [D_z x D_z], empty for identity

  static StyleSpec identity();
  static StyleSpec coordinate_shift(std::size_t latent_dim, std::size_t coordinate, double amount);
  bool is_identity() const;
  Tensor apply(const Tensor& z) const;
  void validate(std::size_t latent_dim) const;
};

struct StyleTrainConfig {
  std::size_t steps = 3000;
  std::size_t batch = 64;
  std::size_t rank = 8;
  double learning_rate = 1e-4;
  double weight_decay = 0.0;
  std::vector<std::string> layers;
};

struct StyleTrainResult {
  LoraAdapter adapter;
  std::vector<double> losses;
};

StyleTrainResult train_style_lora(const Denoiser& base, const SyntheticWorld& world, const StyleSpec& style,
                                  const NoiseSchedule& schedule, const StyleTrainConfig& config, Rng& rng);

}  // namespace lorakey

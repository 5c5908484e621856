#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "lorakey/diffusion.hpp"
#include "lorakey/lora.hpp"
#include "lorakey/verify.hpp"

namespace lorakey {

// One image-space post-processing step. `value` carries the scalar setting
// (scale, sigma, intensity, quality, factor); color jitter draws its factor per
// image from [low, high].
struct ImageDistortion {
  std::string name;
  double value = 0.0;
  double low = 1.0;
  double high = 1.0;

  static ImageDistortion identity();
  static ImageDistortion resize(double scale);
  static ImageDistortion gaussian_blur(double sigma);
  static ImageDistortion gaussian_noise(double intensity);
  static ImageDistortion jpeg(double quality);
  static ImageDistortion brightness(double low, double high);
  static ImageDistortion contrast(double low, double high);
  static ImageDistortion saturation(double low, double high);
  static ImageDistortion sharpen(double factor);

  // Label used in reports, e.g. "gaussian_noise(0.1)".
  std::string label() const;
};

using DistortionSuite = std::vector<ImageDistortion>;

// Resize 0.5, blur sigma 4, noise 0.10, JPEG 50, brightness/contrast/saturation
// in [0.8, 1.2], sharpen 10.
DistortionSuite default_distortion_suite();
// The same distortions at their neutral settings.
DistortionSuite neutral_distortion_suite();

// images: [N x D_img] (or one [C,H,W] image). Image i draws from rng.fork(i).
// Outputs are clamped to [0, 1].
Tensor apply_distortion(const ImageDistortion& d, const Tensor& images, const ImageShape& shape, const Rng& rng);

// Blockwise 8x8 DCT quantization of one channel plane given as [0, 1] values;
// exposed for tests. Planes whose sides are not multiples of 8 are padded by
// edge replication.
std::vector<double> jpeg_plane(const std::vector<double>& plane, std::size_t height, std::size_t width,
                               double quality);
// Standard luminance table scaled for a quality in [1, 100].
std::vector<int> jpeg_quant_table(double quality);

// Magnitude pruning of every attached adapter.
MergedModel prune_attack(const MergedModel& model, double fraction);

struct FinetuneConfig {
  std::size_t steps = 500;
  std::size_t batch = 32;
  double learning_rate = 1e-4;
};

// Continued eps-MSE training of all attached adapter factors on clean world
// data; the base stays frozen and coefficients are kept.
MergedModel finetune_attack(const MergedModel& model, const SyntheticWorld& world, const NoiseSchedule& schedule,
                            const FinetuneConfig& config, Rng& rng);

// Key adapter at gamma plus `extras` at their coefficients.
MergedModel fusion_attack(const Denoiser& base, const LoraAdapter& key, double gamma,
                          const std::vector<LoraAdapter>& extras, const std::vector<double>& coefficients);

// Everything needed to generate and check images from one deployment.
struct DeploymentProbe {
  const NoiseSchedule* schedule = nullptr;
  const LatentCodec* codec = nullptr;
  const WatermarkDecoder* decoder = nullptr;
  const SyntheticWorld* world = nullptr;
  VerificationPolicy policy;
  std::size_t group_size = 4;  // probe images averaged per decision in the averaged columns
  Aggregation aggregation = Aggregation::kMeanLogits;
};

// Images from the deployment with classes drawn from the world.
Tensor generate_probe_images(const MergedModel& model, const DeploymentProbe& probe, std::size_t n, const Rng& rng);

struct AttackRow {
  std::string name;
  double bit_accuracy = 0.0;
  double tpr = 0.0;           // per-image decisions
  double tpr_averaged = 0.0;  // decisions on probe groups
};

struct CurvePoint {
  std::string attack;
  double parameter = 0.0;
  double bit_accuracy = 0.0;
  double tpr = 0.0;
  double tpr_averaged = 0.0;
};

struct AttackReport {
  std::vector<AttackRow> rows;  // first row "clean", last row "unwatermarked"
  std::vector<CurvePoint> curves;
  double adversarial_average = 0.0;  // mean bit accuracy over the distortion rows

  const AttackRow& row(const std::string& name) const;
};

AttackRow evaluate_images(const std::string& name, const Tensor& images, const DeploymentProbe& probe);

// Generates n_images once from `model` and once from the bare base, then scores
// the clean set, every distortion in `suite`, and the unwatermarked control.
AttackReport run_robustness_suite(const MergedModel& model, const DeploymentProbe& probe,
                                  const DistortionSuite& suite, std::size_t n_images, const Rng& rng);

nlohmann::json attack_report_json(const AttackReport& report);
// Rows = conditions, columns = bit_accuracy, tpr, tpr_averaged.
std::string attack_report_csv(const AttackReport& report);
std::string attack_curves_csv(const AttackReport& report);

}  // namespace lorakey

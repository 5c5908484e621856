#pragma once

#include <cstdint>
#include <vector>

#include "lorakey/mlp.hpp"
#include "lorakey/rng.hpp"
#include "lorakey/tensor.hpp"

namespace lorakey {

struct ImageShape {
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;

  std::size_t size() const { return channels * height * width; }
  Shape shape() const { return {channels, height, width}; }
  bool operator==(const ImageShape&) const = default;
};

struct CodecOptions {
  // Pixel intensity = offset + gain * (V z). The frozen decoder renders
  // latents into [0, 1]-range images around mid-gray.
  double pixel_offset = 0.5;
  double pixel_gain = 0.25;
  // Width (in DCT frequency units) of the Gaussian spectral envelope used to
  // draw the columns of V; <= 0 draws white columns.
  double spectral_width = 4.0;
};

// Fixed linear latent codec: decode(z) = offset + gain * V z with V^T V = I,
// encode(x) = V^T (x - offset) / gain.
class LatentCodec {
 public:
  static LatentCodec build(std::uint64_t seed, ImageShape image_shape, std::size_t latent_dim,
                           CodecOptions options = {});
  LatentCodec(Tensor basis, ImageShape image_shape, CodecOptions options, std::uint64_t seed);

  const Tensor& basis() const { return basis_; }  // V, [D_img x D_z]
  const ImageShape& image_shape() const { return image_shape_; }
  std::size_t latent_dim() const { return basis_.cols(); }
  std::size_t image_dim() const { return basis_.rows(); }
  const CodecOptions& options() const { return options_; }
  std::uint64_t seed() const { return seed_; }

  // x: [C,H,W], [D_img] or [N x D_img]; returns [D_z] or [N x D_z].
  Tensor encode(const Tensor& x) const;
  // z: [D_z] or [N x D_z]; returns [C,H,W] for a single latent, else [N x D_img].
  Tensor decode(const Tensor& z) const;

  // Adjoints of the Jacobians, for back-propagation.
  Tensor decode_backward(const Tensor& grad_image) const;  // -> grad wrt z
  Tensor encode_backward(const Tensor& grad_latent) const;  // -> grad wrt x, rows of D_img

 private:
  Tensor basis_;
  ImageShape image_shape_;
  CodecOptions options_;
  std::uint64_t seed_ = 0;
};

struct ClassComponent {
  Tensor mean;      // [D_z]
  Tensor variance;  // [D_z], diagonal covariance
};

struct WorldOptions {
  std::size_t classes = 4;
  double mean_stddev = 2.0;  // means ~ N(0, 4 I)
  double variance_min = 0.25;
  double variance_max = 1.0;
};

// Class-conditional diagonal Gaussian mixture over latents.
class SyntheticWorld {
 public:
  static SyntheticWorld build(std::uint64_t seed, std::size_t latent_dim, WorldOptions options = {});
  SyntheticWorld(std::vector<ClassComponent> components, std::vector<double> weights, std::uint64_t seed);

  std::size_t classes() const { return components_.size(); }
  std::size_t latent_dim() const { return components_.front().mean.size(); }
  const ClassComponent& component(std::size_t c) const;
  const std::vector<double>& weights() const { return weights_; }
  std::uint64_t seed() const { return seed_; }

  // Draws a class according to the mixture weights.
  std::size_t draw_class(Rng& rng) const;

 private:
  std::vector<ClassComponent> components_;
  std::vector<double> weights_;
  std::uint64_t seed_ = 0;
};

struct WorldBatch {
  Tensor latents;  // [n x D_z]
  Tensor images;   // [n x D_img]
  std::vector<std::size_t> classes;
};

// n samples from one class.
WorldBatch sample_world(const SyntheticWorld& world, const LatentCodec& codec, std::size_t c, Rng& rng,
                        std::size_t n);
// n samples with classes drawn from the mixture.
WorldBatch sample_world_mixed(const SyntheticWorld& world, const LatentCodec& codec, Rng& rng, std::size_t n);
// Latents only, one row per entry of `classes`.
Tensor sample_latents(const SyntheticWorld& world, const std::vector<std::size_t>& classes, Rng& rng);

struct PerceptionOptions {
  std::size_t hidden = 128;
  std::size_t features = 64;
  // Subtracted from every pixel before the first layer.
  double input_center = 0.5;
  bool zero_bias = false;
};

struct Perception {
  Tensor features;  // [N x F], or [F] for a single image
  MlpCache cache;
};

// Frozen 2-layer tanh feature extractor over flattened images.
class PerceptionNet {
 public:
  static PerceptionNet build(std::uint64_t seed, ImageShape image_shape, PerceptionOptions options = {});
  PerceptionNet(Mlp net, ImageShape image_shape, double input_center);

  Perception perceive(const Tensor& images) const;
  // Gradient with respect to the images, same layout as the perceive() input rows.
  Tensor backward(const Perception& p, const Tensor& grad_features) const;

  const Mlp& net() const { return net_; }
  const ImageShape& image_shape() const { return image_shape_; }
  std::size_t feature_dim() const { return net_.out_dim(); }

 private:
  Mlp net_;
  ImageShape image_shape_;
  double input_center_ = 0.0;
};

// Flattens a [C,H,W] image or passes [N x D_img] through as rows.
Tensor as_image_rows(const Tensor& images, std::size_t image_dim);

}  // namespace lorakey

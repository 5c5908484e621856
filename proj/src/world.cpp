#include "lorakey/world.hpp"

#include <cmath>
#include <numbers>

#include "lorakey/error.hpp"

namespace lorakey {

Tensor as_image_rows(const Tensor& images, std::size_t image_dim) {
  if (images.rank() == 3 || images.rank() == 1) {
    if (images.size() != image_dim) {
      throw DimensionError("image " + shape_string(images.shape()) + " does not have " + std::to_string(image_dim) +
                           " pixels");
    }
    return images.reshaped({1, image_dim});
  }
  if (images.rank() != 2 || images.cols() != image_dim) {
    throw DimensionError("image batch " + shape_string(images.shape()) + " does not have " +
                         std::to_string(image_dim) + " pixels per row");
  }
  return images;
}

// ---------------------------------------------------------------------------
// LatentCodec

namespace {

// Orthonormal DCT-II basis value for frequency u at position x over n samples.
double dct_basis(std::size_t u, std::size_t x, std::size_t n) {
  const double scale = u == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
  return scale * std::cos(std::numbers::pi * (2.0 * x + 1.0) * u / (2.0 * n));
}

}  // namespace

LatentCodec LatentCodec::build(std::uint64_t seed, ImageShape image_shape, std::size_t latent_dim,
                               CodecOptions options) {
  const std::size_t d_img = image_shape.size();
  if (latent_dim == 0 || latent_dim > d_img) {
    throw DimensionError("latent_dim " + std::to_string(latent_dim) + " must be in [1, " + std::to_string(d_img) + "]");
  }
  if (options.pixel_gain <= 0.0) throw Error("codec pixel gain must be positive");
  Rng rng(seed, "codec");
  RowMatrix g(d_img, latent_dim);
  for (Eigen::Index i = 0; i < g.rows(); ++i) {
    for (Eigen::Index j = 0; j < g.cols(); ++j) g(i, j) = rng.normal();
  }

  if (options.spectral_width > 0.0) {
    // Shape the Gaussian columns with a low-pass envelope in the per-channel
    // DCT domain. The envelope is strictly positive, so the shaped matrix keeps
    // full column rank; the DC term is suppressed so flat offsets stay outside
    // the latent span.
    const std::size_t h = image_shape.height;
    const std::size_t w = image_shape.width;
    const std::size_t plane = h * w;
    constexpr double kFloor = 1e-3;
    const double s2 = options.spectral_width * options.spectral_width;
    RowMatrix basis(plane, plane);  // row: pixel (y, x), column: frequency (u, v)
    for (std::size_t u = 0; u < h; ++u) {
      for (std::size_t v = 0; v < w; ++v) {
        const bool dc = u == 0 && v == 0;
        const double env = kFloor + (dc ? 0.0 : std::exp(-(double(u * u) + double(v * v)) / (2.0 * s2)));
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t x = 0; x < w; ++x) {
            basis(y * w + x, u * w + v) = env * dct_basis(u, y, h) * dct_basis(v, x, w);
          }
        }
      }
    }
    for (std::size_t c = 0; c < image_shape.channels; ++c) {
      const auto rows = Eigen::seqN(static_cast<Eigen::Index>(c * plane), static_cast<Eigen::Index>(plane));
      RowMatrix block = g(rows, Eigen::all);
      g(rows, Eigen::all) = basis * block;
    }
  }

  Eigen::HouseholderQR<RowMatrix> qr(g);
  RowMatrix q = qr.householderQ() * RowMatrix::Identity(static_cast<Eigen::Index>(d_img),
                                                         static_cast<Eigen::Index>(latent_dim));
  return LatentCodec(Tensor::from(q), image_shape, options, seed);
}

LatentCodec::LatentCodec(Tensor basis, ImageShape image_shape, CodecOptions options, std::uint64_t seed)
    : basis_(std::move(basis)), image_shape_(image_shape), options_(options), seed_(seed) {
  if (basis_.rank() != 2 || basis_.rows() != image_shape_.size()) {
    throw DimensionError("codec basis " + shape_string(basis_.shape()) + " does not match image shape");
  }
}

Tensor LatentCodec::encode(const Tensor& x) const {
  const Tensor rows = as_image_rows(x, image_dim());
  Tensor z({rows.rows(), latent_dim()});
  z.mat().noalias() = ((rows.mat().array() - options_.pixel_offset).matrix() * basis_.mat()) / options_.pixel_gain;
  if (x.rank() != 2) return z.reshaped({latent_dim()});
  return z;
}

Tensor LatentCodec::decode(const Tensor& z) const {
  if (z.cols() != latent_dim() || z.rank() > 2) {
    throw DimensionError("latent " + shape_string(z.shape()) + " does not match latent dim " +
                         std::to_string(latent_dim()));
  }
  Tensor x({z.rows(), image_dim()});
  x.mat().noalias() = options_.pixel_gain * (z.mat() * basis_.mat().transpose());
  x.mat().array() += options_.pixel_offset;
  if (z.rank() == 1) return x.reshaped(image_shape_.shape());
  return x;
}

Tensor LatentCodec::decode_backward(const Tensor& grad_image) const {
  const Tensor rows = as_image_rows(grad_image, image_dim());
  Tensor g({rows.rows(), latent_dim()});
  g.mat().noalias() = options_.pixel_gain * (rows.mat() * basis_.mat());
  if (grad_image.rank() != 2) return g.reshaped({latent_dim()});
  return g;
}

Tensor LatentCodec::encode_backward(const Tensor& grad_latent) const {
  if (grad_latent.cols() != latent_dim()) throw DimensionError("encode_backward: latent gradient width mismatch");
  Tensor g({grad_latent.rows(), image_dim()});
  g.mat().noalias() = (grad_latent.mat() * basis_.mat().transpose()) / options_.pixel_gain;
  if (grad_latent.rank() == 1) return g.reshaped({image_dim()});
  return g;
}

// ---------------------------------------------------------------------------
// SyntheticWorld

SyntheticWorld SyntheticWorld::build(std::uint64_t seed, std::size_t latent_dim, WorldOptions options) {
  if (options.classes == 0) throw Error("world needs at least one class");
  if (!(options.variance_min > 0.0) || options.variance_max < options.variance_min) {
    throw Error("world variances must be positive and ordered");
  }
  Rng rng(seed, "world");
  std::vector<ClassComponent> comps;
  for (std::size_t c = 0; c < options.classes; ++c) {
    ClassComponent comp;
    comp.mean = rng.normal_tensor({latent_dim}, options.mean_stddev);
    comp.variance = Tensor({latent_dim});
    for (double& v : comp.variance.values()) v = rng.uniform(options.variance_min, options.variance_max);
    comps.push_back(std::move(comp));
  }
  std::vector<double> weights(options.classes, 1.0 / static_cast<double>(options.classes));
  return SyntheticWorld(std::move(comps), std::move(weights), seed);
}

SyntheticWorld::SyntheticWorld(std::vector<ClassComponent> components, std::vector<double> weights,
                               std::uint64_t seed)
    : components_(std::move(components)), weights_(std::move(weights)), seed_(seed) {
  if (components_.empty() || components_.size() != weights_.size()) throw Error("world components/weights mismatch");
  double total = 0.0;
  for (double w : weights_) total += w;
  if (std::abs(total - 1.0) > 1e-12) throw Error("world weights must sum to 1");
  for (const ClassComponent& c : components_) {
    if (c.mean.size() != components_.front().mean.size() || c.variance.size() != c.mean.size()) {
      throw DimensionError("world components have inconsistent dimensions");
    }
    for (double v : c.variance.values()) {
      if (!(v > 0.0)) throw Error("world covariances must be strictly positive");
    }
  }
}

const ClassComponent& SyntheticWorld::component(std::size_t c) const {
  if (c >= components_.size()) {
    throw DimensionError("class " + std::to_string(c) + " out of range (K=" + std::to_string(components_.size()) + ")");
  }
  return components_[c];
}

std::size_t SyntheticWorld::draw_class(Rng& rng) const {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t c = 0; c < weights_.size(); ++c) {
    acc += weights_[c];
    if (u < acc) return c;
  }
  return weights_.size() - 1;
}

Tensor sample_latents(const SyntheticWorld& world, const std::vector<std::size_t>& classes, Rng& rng) {
  Tensor z({classes.size(), world.latent_dim()});
  for (std::size_t i = 0; i < classes.size(); ++i) {
    const ClassComponent& comp = world.component(classes[i]);
    auto row = z.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = comp.mean[j] + std::sqrt(comp.variance[j]) * rng.normal();
  }
  return z;
}

WorldBatch sample_world(const SyntheticWorld& world, const LatentCodec& codec, std::size_t c, Rng& rng,
                        std::size_t n) {
  world.component(c);
  WorldBatch batch;
  batch.classes.assign(n, c);
  batch.latents = sample_latents(world, batch.classes, rng);
  batch.images = codec.decode(batch.latents);
  return batch;
}

WorldBatch sample_world_mixed(const SyntheticWorld& world, const LatentCodec& codec, Rng& rng, std::size_t n) {
  WorldBatch batch;
  for (std::size_t i = 0; i < n; ++i) batch.classes.push_back(world.draw_class(rng));
  batch.latents = sample_latents(world, batch.classes, rng);
  batch.images = codec.decode(batch.latents);
  return batch;
}

// ---------------------------------------------------------------------------
// PerceptionNet

PerceptionNet PerceptionNet::build(std::uint64_t seed, ImageShape image_shape, PerceptionOptions options) {
  Rng rng(seed, "perception");
  Mlp net = Mlp::build({image_shape.size(), options.hidden, options.features},
                       {Activation::kTanh, Activation::kTanh}, {"feat1", "feat2"}, rng);
  if (!options.zero_bias) {
    for (Layer& l : net.layers()) {
      for (double& b : l.bias.values()) b = 0.1 * rng.normal();
    }
  }
  // First layer sees centered pixels with std ~0.15; rescale so pre-activations are O(1).
  net.layer(0).weight *= 4.0;
  return PerceptionNet(std::move(net), image_shape, options.input_center);
}

PerceptionNet::PerceptionNet(Mlp net, ImageShape image_shape, double input_center)
    : net_(std::move(net)), image_shape_(image_shape), input_center_(input_center) {
  if (net_.in_dim() != image_shape_.size()) throw DimensionError("perception net input does not match image shape");
}

Perception PerceptionNet::perceive(const Tensor& images) const {
  Tensor rows = as_image_rows(images, image_shape_.size());
  if (input_center_ != 0.0) rows.vec().array() -= input_center_;
  MlpForward fwd = mlp_forward(net_, rows);
  Perception p;
  p.features = images.rank() == 2 ? std::move(fwd.y) : fwd.y.reshaped({net_.out_dim()});
  p.cache = std::move(fwd.cache);
  return p;
}

Tensor PerceptionNet::backward(const Perception& p, const Tensor& grad_features) const {
  BackwardOptions opts;
  opts.param_grads = false;
  opts.term_grads = false;
  MlpGradients g = mlp_backward(p.cache, grad_features, net_, {}, opts);
  if (p.features.rank() == 1) return g.input.reshaped({image_shape_.size()});
  return g.input;
}

}  // namespace lorakey

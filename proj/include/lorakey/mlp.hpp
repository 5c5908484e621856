#pragma once

#include <span>
#include <string>
#include <vector>

#include "lorakey/grad_vector.hpp"
#include "lorakey/rng.hpp"
#include "lorakey/tensor.hpp"

namespace lorakey {

enum class Activation { kTanh, kRelu, kIdentity };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct Layer {
  std::string name;
  Tensor weight;  // [out x in]
  Tensor bias;    // [out]
  Activation activation = Activation::kIdentity;

  std::size_t in_dim() const { return weight.cols(); }
  std::size_t out_dim() const { return weight.rows(); }
};

// Low-rank additive update on one named layer: W_eff = W + scale * B * A.
struct LowRankTerm {
  std::string layer;
  const Tensor* a = nullptr;  // [r x in]
  const Tensor* b = nullptr;  // [out x r]
  double scale = 1.0;
};

class Mlp {
 public:
  Mlp() = default;
  explicit Mlp(std::vector<Layer> layers);

  // Fully connected chain with Gaussian init scaled by 1/sqrt(fan_in) and zero biases.
  static Mlp build(const std::vector<std::size_t>& widths, const std::vector<Activation>& activations,
                   const std::vector<std::string>& names, Rng& rng);

  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }
  const Layer& layer(std::size_t i) const { return layers_[i]; }
  Layer& layer(std::size_t i) { return layers_[i]; }
  std::size_t depth() const { return layers_.size(); }
  std::size_t in_dim() const;
  std::size_t out_dim() const;

  // Index of a named layer; throws DimensionError if absent.
  std::size_t index_of(const std::string& name) const;
  bool has_layer(const std::string& name) const;

  // Snapshot of the parameters as "<layer>.weight" / "<layer>.bias" entries.
  GradVector parameters() const;
  void set_parameters(const GradVector& values);
  // Pointers in the same order as parameters().
  std::vector<Tensor*> parameter_refs();

  // Checks chained dimensions and unique names.
  void validate() const;

 private:
  std::vector<Layer> layers_;
};

struct MlpCache {
  std::vector<Tensor> activations;  // activations[0] is the input; [l+1] the output of layer l
  std::vector<Tensor> projections;  // per term: input_of_layer * A^T
  std::vector<std::size_t> term_layers;
  std::vector<Shape> term_shapes;  // A shape then B shape per term, flattened pairwise
  std::vector<Shape> layer_shapes;
  bool input_was_vector = false;
};

struct MlpForward {
  Tensor y;
  MlpCache cache;
};

// x is [in] or [N x in]; y has the matching rank.
MlpForward mlp_forward(const Mlp& net, const Tensor& x, std::span<const LowRankTerm> terms = {});

struct LowRankGrad {
  Tensor a;
  Tensor b;
};

struct MlpGradients {
  GradVector params;              // empty when not requested
  std::vector<LowRankGrad> terms;  // one per term, in term order
  Tensor input;
};

struct BackwardOptions {
  bool param_grads = true;
  bool term_grads = true;
  bool input_grad = true;
};

MlpGradients mlp_backward(const MlpCache& cache, const Tensor& upstream, const Mlp& net,
                          std::span<const LowRankTerm> terms = {}, BackwardOptions options = {});

}  // namespace lorakey

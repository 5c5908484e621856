#include "lorakey/mlp.hpp"

#include <cmath>
#include <set>

#include "lorakey/error.hpp"

namespace lorakey {

std::string to_string(Activation a) {
  switch (a) {
    case Activation::kTanh:
      return "tanh";
    case Activation::kRelu:
      return "relu";
    case Activation::kIdentity:
      return "identity";
  }
  return "identity";
}

Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::kTanh;
  if (s == "relu") return Activation::kRelu;
  if (s == "identity") return Activation::kIdentity;
  throw FormatError("unknown activation '" + s + "'");
}

Mlp::Mlp(std::vector<Layer> layers) : layers_(std::move(layers)) { validate(); }

Mlp Mlp::build(const std::vector<std::size_t>& widths, const std::vector<Activation>& activations,
               const std::vector<std::string>& names, Rng& rng) {
  if (widths.size() < 2 || activations.size() + 1 != widths.size() || names.size() != activations.size()) {
    throw DimensionError("Mlp::build: inconsistent layer description");
  }
  std::vector<Layer> layers;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    Layer layer;
    layer.name = names[l];
    layer.weight = rng.normal_tensor({widths[l + 1], widths[l]}, 1.0 / std::sqrt(static_cast<double>(widths[l])));
    layer.bias = Tensor({widths[l + 1]});
    layer.activation = activations[l];
    layers.push_back(std::move(layer));
  }
  return Mlp(std::move(layers));
}

std::size_t Mlp::in_dim() const { return layers_.empty() ? 0 : layers_.front().in_dim(); }
std::size_t Mlp::out_dim() const { return layers_.empty() ? 0 : layers_.back().out_dim(); }

std::size_t Mlp::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].name == name) return i;
  }
  throw DimensionError("unknown layer '" + name + "'");
}

bool Mlp::has_layer(const std::string& name) const {
  for (const Layer& l : layers_) {
    if (l.name == name) return true;
  }
  return false;
}

GradVector Mlp::parameters() const {
  GradVector out;
  for (const Layer& l : layers_) {
    out.add(l.name + ".weight", l.weight);
    out.add(l.name + ".bias", l.bias);
  }
  return out;
}

void Mlp::set_parameters(const GradVector& values) {
  if (!parameters().same_structure(values)) throw DimensionError("set_parameters: structure mismatch");
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    layers_[l].weight = values[2 * l];
    layers_[l].bias = values[2 * l + 1];
  }
}

std::vector<Tensor*> Mlp::parameter_refs() {
  std::vector<Tensor*> refs;
  for (Layer& l : layers_) {
    refs.push_back(&l.weight);
    refs.push_back(&l.bias);
  }
  return refs;
}

void Mlp::validate() const {
  std::set<std::string> names;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& layer = layers_[l];
    if (layer.weight.rank() != 2) throw DimensionError("layer '" + layer.name + "' weight must be rank 2");
    if (layer.bias.rank() != 1 || layer.bias.size() != layer.out_dim()) {
      throw DimensionError("layer '" + layer.name + "' bias does not match weight rows");
    }
    if (l > 0 && layers_[l - 1].out_dim() != layer.in_dim()) {
      throw DimensionError("layer '" + layer.name + "' input does not chain with '" + layers_[l - 1].name + "'");
    }
    if (!names.insert(layer.name).second) throw DimensionError("duplicate layer name '" + layer.name + "'");
  }
}

namespace {

void apply_activation(Activation act, Tensor& t) {
  switch (act) {
    case Activation::kTanh:
      for (double& v : t.values()) v = std::tanh(v);
      break;
    case Activation::kRelu:
      for (double& v : t.values()) v = v > 0.0 ? v : 0.0;
      break;
    case Activation::kIdentity:
      break;
  }
}

// Multiplies `grad` in place by the activation derivative evaluated from the layer output.
void scale_by_derivative(Activation act, const Tensor& out, Tensor& grad) {
  switch (act) {
    case Activation::kTanh:
      grad.vec().array() *= 1.0 - out.vec().array().square();
      break;
    case Activation::kRelu:
      // relu'(0) = 0
      for (std::size_t i = 0; i < grad.size(); ++i) {
        if (!(out[i] > 0.0)) grad[i] = 0.0;
      }
      break;
    case Activation::kIdentity:
      break;
  }
}

void check_term(const Mlp& net, const LowRankTerm& term, std::size_t layer_index) {
  const Layer& layer = net.layer(layer_index);
  if (term.a == nullptr || term.b == nullptr) throw DimensionError("low-rank term without factors");
  const std::size_t rank = term.a->rows();
  if (term.a->rank() != 2 || term.b->rank() != 2 || term.a->cols() != layer.in_dim() ||
      term.b->rows() != layer.out_dim() || term.b->cols() != rank) {
    throw DimensionError("low-rank factors " + shape_string(term.a->shape()) + ", " +
                         shape_string(term.b->shape()) + " do not fit layer '" + layer.name + "'");
  }
}

}  // namespace

MlpForward mlp_forward(const Mlp& net, const Tensor& x, std::span<const LowRankTerm> terms) {
  if (net.depth() == 0) throw DimensionError("mlp_forward: empty network");
  if (x.cols() != net.in_dim() || x.rank() > 2) {
    throw DimensionError("mlp_forward: input " + shape_string(x.shape()) + " does not match input width " +
                         std::to_string(net.in_dim()));
  }
  MlpForward out;
  MlpCache& cache = out.cache;
  cache.input_was_vector = x.rank() == 1;
  for (const Layer& l : net.layers()) cache.layer_shapes.push_back(l.weight.shape());
  for (const LowRankTerm& t : terms) {
    const std::size_t idx = net.index_of(t.layer);
    check_term(net, t, idx);
    cache.term_layers.push_back(idx);
    cache.term_shapes.push_back(t.a->shape());
    cache.term_shapes.push_back(t.b->shape());
  }
  cache.projections.resize(terms.size());

  const std::size_t n = x.rows();
  cache.activations.reserve(net.depth() + 1);
  cache.activations.push_back(x.reshaped({n, x.cols()}));
  for (std::size_t l = 0; l < net.depth(); ++l) {
    const Layer& layer = net.layer(l);
    const Tensor& h = cache.activations.back();
    Tensor pre({n, layer.out_dim()});
    pre.mat().noalias() = h.mat() * layer.weight.mat().transpose();
    pre.mat().rowwise() += layer.bias.vec().transpose();
    for (std::size_t k = 0; k < terms.size(); ++k) {
      if (cache.term_layers[k] != l) continue;
      const LowRankTerm& t = terms[k];
      Tensor u({n, t.a->rows()});
      u.mat().noalias() = h.mat() * t.a->mat().transpose();
      pre.mat().noalias() += t.scale * (u.mat() * t.b->mat().transpose());
      cache.projections[k] = std::move(u);
    }
    apply_activation(layer.activation, pre);
    cache.activations.push_back(std::move(pre));
  }
  const Tensor& last = cache.activations.back();
  out.y = cache.input_was_vector ? last.reshaped({last.cols()}) : last;
  return out;
}

MlpGradients mlp_backward(const MlpCache& cache, const Tensor& upstream, const Mlp& net,
                          std::span<const LowRankTerm> terms, BackwardOptions options) {
  if (cache.activations.size() != net.depth() + 1 || cache.layer_shapes.size() != net.depth()) {
    throw DimensionError("mlp_backward: cache does not match network depth");
  }
  for (std::size_t l = 0; l < net.depth(); ++l) {
    if (cache.layer_shapes[l] != net.layer(l).weight.shape()) {
      throw DimensionError("mlp_backward: cache was produced by a different network");
    }
  }
  if (terms.size() != cache.term_layers.size()) {
    throw DimensionError("mlp_backward: low-rank terms differ from the forward call");
  }
  for (std::size_t k = 0; k < terms.size(); ++k) {
    if (net.index_of(terms[k].layer) != cache.term_layers[k] || terms[k].a->shape() != cache.term_shapes[2 * k] ||
        terms[k].b->shape() != cache.term_shapes[2 * k + 1]) {
      throw DimensionError("mlp_backward: low-rank terms differ from the forward call");
    }
  }
  const Tensor& y = cache.activations.back();
  if (upstream.size() != y.size()) {
    throw DimensionError("mlp_backward: upstream gradient " + shape_string(upstream.shape()) +
                         " does not match output " + shape_string(y.shape()));
  }

  MlpGradients grads;
  std::vector<Tensor> weight_grads(net.depth());
  std::vector<Tensor> bias_grads(net.depth());
  grads.terms.resize(terms.size());

  Tensor delta = upstream.reshaped(y.shape());
  for (std::size_t li = net.depth(); li-- > 0;) {
    const Layer& layer = net.layer(li);
    const Tensor& h = cache.activations[li];
    scale_by_derivative(layer.activation, cache.activations[li + 1], delta);

    if (options.param_grads) {
      weight_grads[li] = matmul_tn(delta, h);
      Tensor db({layer.out_dim()});
      db.vec() = delta.mat().colwise().sum().transpose();
      bias_grads[li] = std::move(db);
    }

    const bool need_input = li > 0 || options.input_grad;
    Tensor dh;
    if (need_input) dh = matmul(delta, layer.weight);
    for (std::size_t k = 0; k < terms.size(); ++k) {
      if (cache.term_layers[k] != li) continue;
      const LowRankTerm& t = terms[k];
      Tensor v = matmul(delta, *t.b);  // [N x r]
      if (options.term_grads) {
        grads.terms[k].b = matmul_tn(delta, cache.projections[k]) * t.scale;
        grads.terms[k].a = matmul_tn(v, h) * t.scale;
      }
      if (need_input) dh.mat().noalias() += t.scale * (v.mat() * t.a->mat());
    }
    if (need_input) delta = std::move(dh);
  }

  if (options.param_grads) {
    for (std::size_t l = 0; l < net.depth(); ++l) {
      grads.params.add(net.layer(l).name + ".weight", std::move(weight_grads[l]));
      grads.params.add(net.layer(l).name + ".bias", std::move(bias_grads[l]));
    }
  }
  if (options.input_grad) {
    grads.input = cache.input_was_vector ? delta.reshaped({delta.cols()}) : delta;
  }
  return grads;
}

}  // namespace lorakey

#pragma once

#include <string>
#include <vector>

#include "lorakey/tensor.hpp"

namespace lorakey {

// Ordered collection of named tensors mirroring a parameter set. Flattening
// concatenates entries in declaration order.
class GradVector {
 public:
  GradVector() = default;

  void add(std::string name, Tensor value);
  void append(const GradVector& other);

  std::size_t entries() const { return tensors_.size(); }
  std::size_t numel() const;
  bool empty() const { return tensors_.empty(); }

  const std::string& name(std::size_t i) const { return names_[i]; }
  const Tensor& operator[](std::size_t i) const { return tensors_[i]; }
  Tensor& operator[](std::size_t i) { return tensors_[i]; }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }

  // Throws when the name is absent.
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  bool contains(const std::string& name) const;

  Tensor flatten() const;
  static GradVector unflatten(const GradVector& like, const Tensor& flat);
  // Zero-valued copy with the same structure.
  GradVector zeros_like() const;

  bool same_structure(const GradVector& other) const;

  GradVector& operator+=(const GradVector& other);
  GradVector& operator*=(double s);
  // this += s * other
  void axpy(double s, const GradVector& other);

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
};

double dot(const GradVector& u, const GradVector& v);
double norm(const GradVector& u);
double cosine(const GradVector& u, const GradVector& v);

}  // namespace lorakey

#include "lorakey/grad_vector.hpp"

#include <cmath>

#include "lorakey/error.hpp"

namespace lorakey {

void GradVector::add(std::string name, Tensor value) {
  if (contains(name)) throw Error("duplicate gradient entry '" + name + "'");
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(value));
}

void GradVector::append(const GradVector& other) {
  for (std::size_t i = 0; i < other.entries(); ++i) add(other.name(i), other[i]);
}

std::size_t GradVector::numel() const {
  std::size_t n = 0;
  for (const Tensor& t : tensors_) n += t.size();
  return n;
}

const Tensor& GradVector::get(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return tensors_[i];
  }
  throw Error("no gradient entry '" + name + "'");
}

Tensor& GradVector::get(const std::string& name) {
  return const_cast<Tensor&>(static_cast<const GradVector&>(*this).get(name));
}

bool GradVector::contains(const std::string& name) const {
  for (const std::string& n : names_) {
    if (n == name) return true;
  }
  return false;
}

Tensor GradVector::flatten() const {
  std::vector<double> flat;
  flat.reserve(numel());
  for (const Tensor& t : tensors_) flat.insert(flat.end(), t.values().begin(), t.values().end());
  if (flat.empty()) return Tensor();
  return Tensor::vector(std::move(flat));
}

GradVector GradVector::unflatten(const GradVector& like, const Tensor& flat) {
  if (flat.size() != like.numel()) {
    throw DimensionError("unflatten: " + std::to_string(flat.size()) + " values for " +
                         std::to_string(like.numel()) + " parameters");
  }
  GradVector out;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < like.entries(); ++i) {
    const Tensor& proto = like[i];
    std::vector<double> part(flat.data() + offset, flat.data() + offset + proto.size());
    offset += proto.size();
    out.add(like.name(i), Tensor(proto.shape(), std::move(part)));
  }
  return out;
}

GradVector GradVector::zeros_like() const {
  GradVector out;
  for (std::size_t i = 0; i < entries(); ++i) out.add(names_[i], Tensor(tensors_[i].shape()));
  return out;
}

bool GradVector::same_structure(const GradVector& other) const {
  if (entries() != other.entries()) return false;
  for (std::size_t i = 0; i < entries(); ++i) {
    if (names_[i] != other.names_[i] || tensors_[i].shape() != other.tensors_[i].shape()) return false;
  }
  return true;
}

GradVector& GradVector::operator+=(const GradVector& other) {
  axpy(1.0, other);
  return *this;
}

GradVector& GradVector::operator*=(double s) {
  for (Tensor& t : tensors_) t *= s;
  return *this;
}

void GradVector::axpy(double s, const GradVector& other) {
  if (!same_structure(other)) throw DimensionError("gradient structures differ");
  for (std::size_t i = 0; i < entries(); ++i) lorakey::axpy(s, other[i], tensors_[i]);
}

double dot(const GradVector& u, const GradVector& v) {
  if (!u.same_structure(v)) throw DimensionError("dot: gradient structures differ");
  double s = 0.0;
  for (std::size_t i = 0; i < u.entries(); ++i) s += dot(u[i], v[i]);
  return s;
}

double norm(const GradVector& u) { return std::sqrt(dot(u, u)); }

double cosine(const GradVector& u, const GradVector& v) {
  const double nu = norm(u);
  const double nv = norm(v);
  if (nu == 0.0 || nv == 0.0) throw DimensionError("cosine of a zero-norm gradient");
  return dot(u, v) / (nu * nv);
}

}  // namespace lorakey

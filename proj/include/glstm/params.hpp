#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "glstm/rng.hpp"
#include "glstm/tensor.hpp"

namespace glstm {

/// Ordered collection of named trainable tensors.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t) {
    if (contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    t.set_requires_grad(true);
    items_.emplace_back(name, std::move(t));
    return items_.back().second;
  }

  bool contains(const std::string& name) const {
    for (const auto& [n, _] : items_)
      if (n == name) return true;
    return false;
  }

  const Tensor& get(const std::string& name) const {
    for (const auto& [n, t] : items_)
      if (n == name) return t;
    throw std::out_of_range("no parameter named '" + name + "'");
  }
  Tensor& get(const std::string& name) {
    return const_cast<Tensor&>(static_cast<const ParamStore&>(*this).get(name));
  }

  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
  std::size_t size() const { return items_.size(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : items_) n += t.size();
    return n;
  }

  /// Deep copy with fresh leaves.
  ParamStore clone() const {
    ParamStore out;
    for (const auto& [n, t] : items_) out.add(n, t.detach());
    return out;
  }

  /// Copy whose tensors do not require gradients, so probes record only
  /// input-dependent operations.
  ParamStore frozen() const {
    ParamStore out;
    for (const auto& [n, t] : items_) out.items_.emplace_back(n, t.detach(false));
    return out;
  }

  void copy_values_from(const ParamStore& other) {
    if (other.size() != size()) throw std::invalid_argument("parameter layout mismatch");
    for (std::size_t i = 0; i < items_.size(); ++i) {
      auto src = other.items_[i].second.data();
      auto dst = items_[i].second.mutable_data();
      if (src.size() != dst.size()) throw std::invalid_argument("parameter shape mismatch");
      std::copy(src.begin(), src.end(), dst.begin());
    }
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

/// Uniform Glorot initialization for a [fan_out, fan_in] matrix.
inline Tensor glorot(std::size_t fan_out, std::size_t fan_in, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(fan_out * fan_in);
  for (double& x : v) x = rng.uniform(-a, a);
  return Tensor::matrix(fan_out, fan_in, std::move(v));
}

}  // namespace glstm

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "pivot/diffcore/tensor.hpp"

namespace pivot {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Named, insertion-ordered parameter tensors plus their Adam moments.
template <class T>
class ParamStore {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate parameter '" + name + "'");
    index_.emplace(name, tensors_.size());
    names_.push_back(name);
    first_moment_.emplace_back(value.size(), T{0});
    second_moment_.emplace_back(value.size(), T{0});
    tensors_.push_back(std::move(value));
    return tensors_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<T>& get(const std::string& name) { return tensors_[index_of(name)]; }
  const Tensor<T>& get(const std::string& name) const { return tensors_[index_of(name)]; }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParamStore: unknown parameter '" + name + "'");
    return it->second;
  }

  std::size_t size() const noexcept { return tensors_.size(); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  Tensor<T>& at(std::size_t i) { return tensors_[i]; }
  const Tensor<T>& at(std::size_t i) const { return tensors_[i]; }

  std::uint64_t step() const noexcept { return step_; }
  void set_step(std::uint64_t s) { step_ = s; }

  std::vector<T>& first_moment(std::size_t i) { return first_moment_[i]; }
  std::vector<T>& second_moment(std::size_t i) { return second_moment_[i]; }

  void zero_grad() {
    for (auto& t : tensors_) {
      t.ensure_grad();
      t.zero_grad();
    }
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  /// Global L2 norm of all gradient buffers that exist.
  double grad_norm() const {
    double s = 0;
    for (const auto& t : tensors_) {
      if (!t.has_grad()) continue;
      for (T g : t.grad()) s += static_cast<double>(g) * static_cast<double>(g);
    }
    return std::sqrt(s);
  }

  /// Rescale gradients so their global norm is at most `max_norm`. Returns the pre-clip norm.
  double clip_grad_norm(double max_norm) {
    const double norm = grad_norm();
    if (norm > max_norm && norm > 0) {
      const T scale = static_cast<T>(max_norm / norm);
      for (auto& t : tensors_) {
        if (!t.has_grad()) continue;
        for (T& g : t.grad()) g *= scale;
      }
    }
    return norm;
  }

  /// Parameter values only; Adam state and gradients are not copied.
  std::vector<Tensor<T>> snapshot() const {
    std::vector<Tensor<T>> out;
    out.reserve(tensors_.size());
    for (const auto& t : tensors_) out.emplace_back(t.shape(), t.storage());
    return out;
  }

  void restore(const std::vector<Tensor<T>>& values) {
    if (values.size() != tensors_.size()) throw std::invalid_argument("ParamStore::restore: size mismatch");
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (values[i].shape() != tensors_[i].shape()) {
        throw std::invalid_argument("ParamStore::restore: shape mismatch for '" + names_[i] + "'");
      }
      tensors_[i].storage() = values[i].storage();
    }
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
  std::vector<std::vector<T>> first_moment_;
  std::vector<std::vector<T>> second_moment_;
  std::unordered_map<std::string, std::size_t> index_;
  std::uint64_t step_ = 0;
};

/// One bias-corrected Adam update over every parameter, then zero the gradients.
template <class T>
void adam_step(ParamStore<T>& store, const AdamConfig& cfg) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (!store.at(i).has_grad()) {
      throw std::invalid_argument("adam_step: parameter '" + store.names()[i] + "' has no gradient buffer");
    }
  }
  store.set_step(store.step() + 1);
  const double t = static_cast<double>(store.step());
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& p = store.at(i);
    auto& g = p.grad();
    auto& m = store.first_moment(i);
    auto& v = store.second_moment(i);
    auto data = p.data();
    for (std::size_t j = 0; j < data.size(); ++j) {
      m[j] = b1 * m[j] + (T{1} - b1) * g[j];
      v[j] = b2 * v[j] + (T{1} - b2) * g[j] * g[j];
      const double m_hat = static_cast<double>(m[j]) / bc1;
      const double v_hat = static_cast<double>(v[j]) / bc2;
      data[j] -= static_cast<T>(cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps));
    }
    p.zero_grad();
  }
}

}  // namespace pivot

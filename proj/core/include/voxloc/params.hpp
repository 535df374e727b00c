#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "voxloc/rng.hpp"
#include "voxloc/tensor.hpp"

namespace voxloc {

// Named trainable tensors plus their Adam moment buffers.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    Tensor<T> m;
    Tensor<T> v;
  };

  int add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw std::runtime_error("duplicate parameter '" + name + "'");
    Entry e;
    e.name = name;
    e.m = Tensor<T>::zeros(value.shape());
    e.v = Tensor<T>::zeros(value.shape());
    e.value = std::move(value);
    entries_.push_back(std::move(e));
    index_.emplace(name, static_cast<int>(entries_.size()) - 1);
    return static_cast<int>(entries_.size()) - 1;
  }

  // truncated normal, std 1/sqrt(fan_in)
  int add_init(const std::string& name, const Shape& shape, int fan_in, Rng& rng) {
    Tensor<T> t(shape);
    double stddev = 1.0 / std::sqrt(static_cast<double>(fan_in > 0 ? fan_in : 1));
    for (std::size_t i = 0; i < t.numel(); ++i)
      t[i] = static_cast<T>(rng.truncated_normal(stddev));
    return add(name, std::move(t));
  }

  int add_zeros(const std::string& name, const Shape& shape) {
    return add(name, Tensor<T>::zeros(shape));
  }

  int find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }

  Entry& operator[](int id) { return entries_[id]; }
  const Entry& operator[](int id) const { return entries_[id]; }
  int size() const { return static_cast<int>(entries_.size()); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.numel();
    return n;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, int> index_;
};

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam over the whole store; `grads[i]` pairs with entry i and
// may be empty (parameter unused this step). Throws on non-finite gradients
// when checked, naming the parameter.
template <typename T>
void adam_update(ParamStore<T>& params, const std::vector<Tensor<T>>& grads, std::int64_t& step,
                 const AdamConfig& cfg, bool checked = false) {
  step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (int i = 0; i < params.size(); ++i) {
    auto& e = params[i];
    if (static_cast<std::size_t>(i) >= grads.size() || grads[i].numel() != e.value.numel()) continue;
    const Tensor<T>& g = grads[i];
    if (checked && !g.all_finite())
      throw numeric_error("non-finite gradient for parameter '" + e.name + "'");
    for (std::size_t j = 0; j < e.value.numel(); ++j) {
      double gj = static_cast<double>(g[j]);
      double m = cfg.beta1 * e.m[j] + (1.0 - cfg.beta1) * gj;
      double v = cfg.beta2 * e.v[j] + (1.0 - cfg.beta2) * gj * gj;
      e.m[j] = static_cast<T>(m);
      e.v[j] = static_cast<T>(v);
      double mhat = m / bc1;
      double vhat = v / bc2;
      e.value[j] -= static_cast<T>(cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

}  // namespace voxloc

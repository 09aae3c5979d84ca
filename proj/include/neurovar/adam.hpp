#pragma once

#include <string>
#include <utility>
#include <vector>

#include "neurovar/tensor.hpp"

namespace nv {

// Ordered, named parameter list. Order is the training/update/checkpoint
// order, which keeps runs reproducible.
template <class T>
struct ParamList {
  std::vector<std::pair<std::string, TensorT<T>>> items;

  TensorT<T>& add(const std::string& name, TensorT<T> t) {
    t.set_requires_grad(true);
    items.emplace_back(name, std::move(t));
    return items.back().second;
  }
  TensorT<T>* find(const std::string& name) {
    for (auto& [n, t] : items)
      if (n == name) return &t;
    return nullptr;
  }
  void zero_grad() {
    for (auto& [n, t] : items) t.zero_grad();
  }
  std::int64_t count() const {
    std::int64_t c = 0;
    for (const auto& [n, t] : items) c += t.size();
    return c;
  }
};

// Adaptive-moment optimizer state. Accumulators are aligned index-for-index
// with the parameter list handed to init().
template <class T>
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step_count = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  void init(const ParamList<T>& params);
  // One bias-corrected update, in place. Parameters with empty grads (never
  // touched by backward) are treated as zero-gradient.
  void step(ParamList<T>& params);
};

extern template struct AdamState<float>;
extern template struct AdamState<double>;

}  // namespace nv

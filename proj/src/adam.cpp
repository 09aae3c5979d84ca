#include "neurovar/adam.hpp"

#include <cmath>

namespace nv {

template <class T>
void AdamState<T>::init(const ParamList<T>& params) {
  if (lr <= 0.0) throw ConfigError("adam: learning rate must be > 0");
  step_count = 0;
  m.clear();
  v.clear();
  for (const auto& [name, t] : params.items) {
    m.emplace_back(t.data().size(), T(0));
    v.emplace_back(t.data().size(), T(0));
  }
}

template <class T>
void AdamState<T>::step(ParamList<T>& params) {
  if (m.size() != params.items.size())
    throw ShapeError("adam: state tracks " + std::to_string(m.size()) +
                     " parameters, got " + std::to_string(params.items.size()));
  ++step_count;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
  for (std::size_t pi = 0; pi < params.items.size(); ++pi) {
    auto& t = params.items[pi].second;
    auto& data = t.data();
    const auto& grad = t.grad();
    if (m[pi].size() != data.size())
      throw ShapeError("adam: accumulator size mismatch for parameter '" +
                       params.items[pi].first + "'");
    if (grad.empty()) continue;
    auto& mp = m[pi];
    auto& vp = v[pi];
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = grad[i];
      const double mi = beta1 * mp[i] + (1.0 - beta1) * g;
      const double vi = beta2 * vp[i] + (1.0 - beta2) * g * g;
      mp[i] = static_cast<T>(mi);
      vp[i] = static_cast<T>(vi);
      data[i] -= static_cast<T>(lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps));
    }
  }
}

template struct AdamState<float>;
template struct AdamState<double>;

}  // namespace nv

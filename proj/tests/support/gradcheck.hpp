#pragma once

// Central finite-difference gradient oracle. Independent of the autodiff
// engine's backward path: it only calls forward evaluation through a
// user-supplied closure and compares against analytic gradients.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "neurovar/tensor.hpp"

namespace nv::test {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst;  // which leaf/index was worst
  bool ok(double tol) const { return max_rel_err < tol; }
};

// leaves: the tensors whose gradients are checked (requires_grad is forced
// on). build_loss must construct a fresh graph from the current leaf values
// and return the scalar loss. h is the central-difference step.
inline GradCheckResult gradcheck(
    std::vector<DTensor> leaves,
    const std::function<DTensor(const std::vector<DTensor>&)>& build_loss, double h = 1e-5) {
  for (auto& l : leaves) l.set_requires_grad(true);

  // analytic gradients
  for (auto& l : leaves) l.zero_grad();
  DTensor loss = build_loss(leaves);
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto& l : leaves) {
    if (l.grad().empty()) l.zero_grad();  // leaf unused by the loss
    analytic.push_back(l.grad());
  }

  GradCheckResult res;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& data = leaves[li].data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + h;
      const double fp = build_loss(leaves).item();
      data[i] = orig - h;
      const double fm = build_loss(leaves).item();
      data[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[li][i];
      const double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = "leaf " + std::to_string(li) + " index " + std::to_string(i) + " analytic " +
                    std::to_string(a) + " numeric " + std::to_string(numeric);
      }
    }
  }
  return res;
}

// Fixed random probe weights for reducing an op output to a scalar so every
// output element influences the loss. Create ONCE per check and capture in
// the closure; drawing inside the closure would change the loss between the
// finite-difference evaluations.
inline DTensor make_probe(const Shape& out_shape, Rng& rng) {
  std::vector<double> w(static_cast<std::size_t>(numel(out_shape)));
  for (auto& v : w) v = rng.uniform(-1.0, 1.0);
  return DTensor::from(out_shape, std::move(w));
}

inline DTensor probe_loss(const DTensor& y, const DTensor& probe) {
  return sum_all(mul(y, probe));
}

}  // namespace nv::test

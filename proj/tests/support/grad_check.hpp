#pragma once

// Central finite-difference gradient checking. The loss closure must be a
// deterministic function of the leaf tensors so it can be re-evaluated under
// perturbation. Relative error uses a unit floor: |a - fd| / max(1, |a|, |fd|).

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "f2/tensor.hpp"

namespace f2::testing {

template <class S>
struct GradCheck {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
};

template <class S>
double rel_err(double a, double fd) {
  return std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)});
}

// Checks d(loss)/d(leaf) for every listed leaf. `coord_stride` > 1 subsamples
// coordinates (deterministically) for large leaves.
template <class S>
GradCheck<S> check_gradients(std::vector<TensorT<S>> leaves,
                             const std::function<TensorT<S>()>& make_loss, double h = 1e-3,
                             std::size_t coord_stride = 1) {
  for (auto& leaf : leaves) leaf.set_requires_grad(true);

  TapeT<S> tape;
  TensorT<S> loss;
  {
    TapeScopeT<S> scope(tape);
    loss = make_loss();
  }
  tape.backward(loss);

  std::vector<std::vector<S>> analytic;
  analytic.reserve(leaves.size());
  for (auto& leaf : leaves) {
    leaf.ensure_grad();
    analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());
  }

  const auto eval = [&]() -> double {
    TensorT<S> l = make_loss();  // no tape bound: plain forward
    return static_cast<double>(l.item());
  };

  GradCheck<S> result;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto vals = leaves[li].values_mut();
    for (std::size_t i = 0; i < vals.size(); i += coord_stride) {
      const S orig = vals[i];
      vals[i] = orig + static_cast<S>(h);
      const double up = eval();
      vals[i] = orig - static_cast<S>(h);
      const double down = eval();
      vals[i] = orig;
      const double fd = (up - down) / (2.0 * h);
      result.max_rel_err =
          std::max(result.max_rel_err, rel_err<S>(static_cast<double>(analytic[li][i]), fd));
      ++result.checked;
    }
  }
  return result;
}

}  // namespace f2::testing

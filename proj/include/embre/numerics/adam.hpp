#ifndef EMBRE_NUMERICS_ADAM_HPP
#define EMBRE_NUMERICS_ADAM_HPP

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "embre/numerics/tensor.hpp"

namespace embre::num {

struct AdamOptions {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <class T>
struct AdamState {
  AdamOptions options;
  std::size_t step = 0;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;

  AdamState() = default;
  explicit AdamState(AdamOptions opts) : options(opts) {}
};

/// One bias-corrected Adam update over `params`, then zeroes their grads.
/// Moment buffers are sized on the first call and must keep matching.
template <class T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state) {
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.size(), T(0));
      state.second_moment.emplace_back(p.size(), T(0));
    }
  }
  if (state.first_moment.size() != params.size())
    throw std::invalid_argument("adam_step: parameter count changed");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad())
      throw std::invalid_argument("adam_step: parameter " + std::to_string(i) +
                                  " has no gradient");
    if (state.first_moment[i].size() != params[i].size())
      throw std::invalid_argument("adam_step: parameter " + std::to_string(i) +
                                  " changed size");
  }

  ++state.step;
  const auto& o = state.options;
  const double t = static_cast<double>(state.step);
  const T c1 = static_cast<T>(1.0 - std::pow(o.beta1, t));
  const T c2 = static_cast<T>(1.0 - std::pow(o.beta2, t));
  const T b1 = static_cast<T>(o.beta1), b2 = static_cast<T>(o.beta2);
  const T lr = static_cast<T>(o.lr), eps = static_cast<T>(o.epsilon);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].data();
    auto grad = params[i].grad_mut();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t k = 0; k < data.size(); ++k) {
      const T g = grad[k];
      m[k] = b1 * m[k] + (T(1) - b1) * g;
      v[k] = b2 * v[k] + (T(1) - b2) * g * g;
      const T m_hat = m[k] / c1;
      const T v_hat = v[k] / c2;
      data[k] -= lr * m_hat / (std::sqrt(v_hat) + eps);
      grad[k] = T(0);
    }
  }
}

}  // namespace embre::num

#endif  // EMBRE_NUMERICS_ADAM_HPP

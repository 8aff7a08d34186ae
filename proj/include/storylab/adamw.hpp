#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "storylab/errors.hpp"
#include "storylab/tensor.hpp"

namespace storylab {

struct AdamWHyper {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <class T>
struct AdamWState {
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  AdamWHyper hyper;
};

/// One decoupled-weight-decay update of a single parameter array. `step`
/// is the 1-based step count used for bias correction.
template <class T>
void adamw_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                  std::uint64_t step, const AdamWHyper& hyper, double lr) {
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(step));
  const T b1 = static_cast<T>(hyper.beta1), b2 = static_cast<T>(hyper.beta2);
  const T decay = static_cast<T>(1.0 - lr * hyper.weight_decay);
  const T step_size = static_cast<T>(lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(hyper.eps);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i];
    m[i] = b1 * m[i] + (T(1) - b1) * g;
    v[i] = b2 * v[i] + (T(1) - b2) * g * g;
    param[i] *= decay;
    param[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps);
  }
}

/// AdamW over a fixed list of named parameters. Gradients accumulate in the
/// parameter tensors until zero_grad() is called explicitly.
template <class T>
class AdamW {
 public:
  AdamW(std::vector<NamedParam<T>> params, AdamWHyper hyper) : params_(std::move(params)) {
    state_.hyper = hyper;
    for (const auto& p : params_) {
      state_.m.emplace_back(p.tensor.numel(), T(0));
      state_.v.emplace_back(p.tensor.numel(), T(0));
    }
  }

  /// Applies one update at learning rate `lr`; throws DivergenceError naming
  /// the first parameter whose gradient is non-finite, before touching any
  /// parameter.
  void step(double lr) {
    for (const auto& p : params_) {
      if (!p.tensor.has_grad()) continue;
      for (T g : p.tensor.grad()) {
        if (!std::isfinite(g)) {
          throw DivergenceError("non-finite gradient in parameter '" + p.name + "'", p.name);
        }
      }
    }
    ++state_.step;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].tensor;
      std::vector<T> zeros;
      std::span<const T> grad = p.grad();
      if (!p.has_grad()) {
        zeros.assign(p.numel(), T(0));
        grad = zeros;
      }
      adamw_update<T>(p.mutable_data(), grad, state_.m[i], state_.v[i], state_.step,
                      state_.hyper, lr);
    }
  }

  void step() { step(state_.hyper.lr); }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  /// Rescales gradients so their global L2 norm is at most max_norm; returns
  /// the pre-clip norm.
  double clip_grad_norm(double max_norm) {
    double total = 0;
    for (const auto& p : params_)
      for (T g : p.tensor.grad()) total += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(total);
    if (norm > max_norm && norm > 0) {
      const T factor = static_cast<T>(max_norm / norm);
      for (auto& p : params_)
        for (T& g : p.tensor.mutable_grad()) g *= factor;
    }
    return norm;
  }

  const AdamWState<T>& state() const { return state_; }
  AdamWState<T>& state() { return state_; }
  const std::vector<NamedParam<T>>& params() const { return params_; }

 private:
  std::vector<NamedParam<T>> params_;
  AdamWState<T> state_;
};

}  // namespace storylab

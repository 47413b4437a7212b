#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "asp/errors.hpp"
#include "asp/tensor/tensor.hpp"

namespace asp::tensor {

/// Process-wide count of parameter tensors modified by an optimizer. Used
/// by instrumented runs to prove that a phase performed no updates.
inline std::atomic<std::uint64_t>& update_counter() {
  static std::atomic<std::uint64_t> count{0};
  return count;
}

/// p <- p - lr * g for one tensor with an explicit gradient.
template <class T>
void sgd_update(Tensor<T>& param, std::span<const T> grad, T lr) {
  if (!(lr > T{0})) throw ContractError("sgd_step: learning rate must be positive");
  if (grad.size() != param.numel()) {
    throw DimensionError("sgd_step: gradient of " + std::to_string(grad.size()) +
                         " values for parameter " + shape_string(param.shape()));
  }
  if (!param.requires_grad()) return;
  auto p = param.data();
  for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * grad[i];
  ++update_counter();
}

/// Plain SGD over every trainable tensor's accumulated gradient, then clears
/// the gradients. Frozen tensors and tensors without a gradient are skipped.
template <class T>
void sgd_step(std::span<Tensor<T>* const> params, T lr) {
  if (!(lr > T{0})) throw ContractError("sgd_step: learning rate must be positive");
  for (Tensor<T>* p : params) {
    if (!p->requires_grad() || !p->has_grad()) continue;
    sgd_update<T>(*p, p->grad(), lr);
    p->zero_grad();
  }
}

/// Adam, used only for the backbone pretraining stage.
template <class T>
class Adam {
 public:
  Adam(std::span<Tensor<T>* const> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8)
      : params_(params.begin(), params.end()), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (!(lr > 0.0)) throw ContractError("adam: learning rate must be positive");
    for (Tensor<T>* p : params_) {
      m_.emplace_back(p->numel(), 0.0);
      v_.emplace_back(p->numel(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, double(t_));
    const double c2 = 1.0 - std::pow(beta2_, double(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor<T>* p = params_[k];
      if (!p->requires_grad() || !p->has_grad()) continue;
      auto g = p->grad();
      auto x = p->data();
      for (std::size_t i = 0; i < x.size(); ++i) {
        m_[k][i] = beta1_ * m_[k][i] + (1.0 - beta1_) * g[i];
        v_[k][i] = beta2_ * v_[k][i] + (1.0 - beta2_) * double(g[i]) * g[i];
        x[i] -= static_cast<T>(lr_ * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps_));
      }
      p->zero_grad();
      ++update_counter();
    }
  }

 private:
  std::vector<Tensor<T>*> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
};

}  // namespace asp::tensor

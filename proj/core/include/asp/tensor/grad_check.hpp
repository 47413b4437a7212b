#pragma once

#include <cstddef>
#include <functional>
#include <span>

#include "asp/tensor/graph.hpp"

namespace asp::tensor {

struct GradCheckResult {
  /// max over coordinates of |analytic - numeric| / max(1, |analytic|)
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;

  bool passed(double tolerance) const { return max_rel_error < tolerance; }
};

/// Builds a scalar loss on a fresh graph. The builder is called repeatedly
/// and must be a pure function of the tensors it reads.
template <class T>
using LossBuilder = std::function<Var(Graph<T>&)>;

/// Compares reverse-mode gradients of `loss` w.r.t. every tensor in `inputs`
/// with central differences of step `h`. Each input must have
/// requires_grad set; existing gradient buffers are overwritten.
template <class T>
GradCheckResult grad_check(const LossBuilder<T>& loss, std::span<Tensor<T>* const> inputs, T h);

/// Single-tensor convenience form: `f` maps a leaf variable to a scalar.
template <class T>
GradCheckResult grad_check(const std::function<Var(Graph<T>&, Var)>& f, Tensor<T> x, T h);

}  // namespace asp::tensor

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "asp/tensor/rng.hpp"
#include "asp/tensor/tensor.hpp"

namespace asp::test {

using tensor::RngStream;
using tensor::Shape;
using tensor::Tensor;

template <class T = double>
Tensor<T> random_tensor(RngStream& rng, Shape shape, double scale = 1.0, bool grad = false) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.storage()) v = static_cast<T>(scale * rng.normal());
  t.set_requires_grad(grad);
  return t;
}

template <class T = double>
Tensor<T> uniform_tensor(RngStream& rng, Shape shape, double lo, double hi) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.storage()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

}  // namespace asp::test

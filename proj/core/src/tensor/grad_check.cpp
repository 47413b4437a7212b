#include "asp/tensor/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace asp::tensor {

namespace {

template <class T>
T evaluate(const LossBuilder<T>& loss) {
  Graph<T> g;
  const Var out = loss(g);
  if (g.value(out).numel() != 1) throw ContractError("grad_check: function is not scalar-valued");
  return g.value(out)[0];
}

}  // namespace

template <class T>
GradCheckResult grad_check(const LossBuilder<T>& loss, std::span<Tensor<T>* const> inputs, T h) {
  if (!(h > T{0})) throw ContractError("grad_check: step must be positive");
  for (Tensor<T>* t : inputs) {
    if (!t->requires_grad()) throw ContractError("grad_check: input does not require grad");
    t->zero_grad();
    t->ensure_grad();
  }
  {
    Graph<T> g;
    const Var out = loss(g);
    if (g.value(out).numel() != 1) throw ContractError("grad_check: function is not scalar-valued");
    g.backward(out);
  }
  GradCheckResult result;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor<T>& t = *inputs[ti];
    const std::vector<T> analytic(t.grad().begin(), t.grad().end());
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const T saved = t[i];
      t[i] = saved + h;
      const T up = evaluate(loss);
      t[i] = saved - h;
      const T down = evaluate(loss);
      t[i] = saved;
      const double numeric = (static_cast<double>(up) - static_cast<double>(down)) / (2.0 * h);
      const double a = analytic[i];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_tensor = ti;
        result.worst_index = i;
      }
      ++result.coordinates;
    }
  }
  return result;
}

template <class T>
GradCheckResult grad_check(const std::function<Var(Graph<T>&, Var)>& f, Tensor<T> x, T h) {
  x.set_requires_grad(true);
  Tensor<T>* ptr = &x;
  LossBuilder<T> loss = [&](Graph<T>& g) { return f(g, g.param(x)); };
  return grad_check<T>(loss, std::span<Tensor<T>* const>(&ptr, 1), h);
}

template GradCheckResult grad_check<float>(const LossBuilder<float>&, std::span<Tensor<float>* const>,
                                           float);
template GradCheckResult grad_check<double>(const LossBuilder<double>&,
                                            std::span<Tensor<double>* const>, double);
template GradCheckResult grad_check<float>(const std::function<Var(Graph<float>&, Var)>&,
                                           Tensor<float>, float);
template GradCheckResult grad_check<double>(const std::function<Var(Graph<double>&, Var)>&,
                                            Tensor<double>, double);

}  // namespace asp::tensor

#include "asp/tensor/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <string>

#include "kernels.hpp"

namespace asp::tensor {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

template <class T>
bool all_finite(std::span<const T> xs) {
  return std::all_of(xs.begin(), xs.end(), [](T x) { return std::isfinite(x); });
}

[[noreturn]] void dim_error(std::string_view op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " +
                       shape_string(b));
}

Shape matrix(std::size_t r, std::size_t c) { return Shape{r, c}; }

}  // namespace

template <class T>
const Tensor<T>& Graph<T>::value(Var v) const {
  if (v.id >= nodes_.size()) throw IndexError("Graph: unknown variable id " + std::to_string(v.id));
  const Node& n = nodes_[v.id];
  return n.leaf ? *n.leaf : n.value;
}

template <class T>
std::span<T> Graph<T>::grad_of(Var v) {
  Node& n = nodes_[v.id];
  const std::size_t count = (n.leaf ? n.leaf->numel() : n.value.numel());
  if (n.grad.size() != count) n.grad.assign(count, T{0});
  return n.grad;
}

template <class T>
Var Graph<T>::push(std::string_view op, Tensor<T> value, std::initializer_list<Var> inputs,
                   BackwardFn fn) {
  return push_many(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                   std::move(fn));
}

template <class T>
Var Graph<T>::push_many(std::string_view op, Tensor<T> value, std::span<const Var> inputs,
                        BackwardFn fn) {
  if (!all_finite<T>(value.data())) {
    throw NumericError(std::string(op) + ": non-finite value in output " +
                       shape_string(value.shape()));
  }
  Node node;
  node.value = std::move(value);
  node.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                   [this](Var v) { return nodes_[v.id].requires_grad; });
  if (node.requires_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

// -- leaves -------------------------------------------------------------------

template <class T>
Var Graph<T>::constant(Tensor<T> value) {
  if (!all_finite<T>(value.data())) throw NumericError("constant: non-finite input");
  Node node;
  node.value = std::move(value);
  node.value.set_requires_grad(false);
  nodes_.push_back(std::move(node));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <class T>
Var Graph<T>::param(Tensor<T>& leaf) {
  if (!all_finite<T>(leaf.data())) throw NumericError("param: non-finite input");
  Node node;
  node.leaf = &leaf;
  node.requires_grad = leaf.requires_grad();
  nodes_.push_back(std::move(node));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <class T>
Var Graph<T>::normal(RngStream& rng, Shape shape, T stddev) {
  Tensor<T> t(std::move(shape));
  for (auto& x : t.data()) x = static_cast<T>(rng.normal()) * stddev;
  return constant(std::move(t));
}

// -- linear algebra -------------------------------------------------------------

template <class T>
Var Graph<T>::matmul(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  if (A.rank() > 2 || B.rank() > 2 || A.cols() != B.rows()) dim_error("matmul", A.shape(), B.shape());
  const std::size_t n = A.rows(), k = A.cols(), m = B.cols();
  Tensor<T> out(matrix(n, m));
  kernels::gemm_nn(A.data().data(), B.data().data(), out.data().data(), n, k, m);
  return push("matmul", std::move(out), {a, b}, [a, b, n, k, m](Graph& g, std::span<const T> go) {
    if (g.needs(a)) {
      kernels::gemm_nt(go.data(), g.value(b).data().data(), g.grad_of(a).data(), n, m, k);
    }
    if (g.needs(b)) {
      kernels::gemm_tn(g.value(a).data().data(), go.data(), g.grad_of(b).data(), n, k, m);
    }
  });
}

template <class T>
Var Graph<T>::linear(Var x, Var w, Var bias) {
  return add_row(matmul(x, w), bias);
}

template <class T>
Var Graph<T>::add(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  if (A.shape() != B.shape()) dim_error("add", A.shape(), B.shape());
  Tensor<T> out(A.shape());
  for (std::size_t i = 0; i < A.numel(); ++i) out[i] = A[i] + B[i];
  return push("add", std::move(out), {a, b}, [a, b](Graph& g, std::span<const T> go) {
    for (Var v : {a, b}) {
      if (!g.needs(v)) continue;
      auto gv = g.grad_of(v);
      for (std::size_t i = 0; i < go.size(); ++i) gv[i] += go[i];
    }
  });
}

template <class T>
Var Graph<T>::sub(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  if (A.shape() != B.shape()) dim_error("sub", A.shape(), B.shape());
  Tensor<T> out(A.shape());
  for (std::size_t i = 0; i < A.numel(); ++i) out[i] = A[i] - B[i];
  return push("sub", std::move(out), {a, b}, [a, b](Graph& g, std::span<const T> go) {
    if (g.needs(a)) {
      auto ga = g.grad_of(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (g.needs(b)) {
      auto gb = g.grad_of(b);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
    }
  });
}

template <class T>
Var Graph<T>::mul(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  if (A.shape() != B.shape()) dim_error("mul", A.shape(), B.shape());
  Tensor<T> out(A.shape());
  for (std::size_t i = 0; i < A.numel(); ++i) out[i] = A[i] * B[i];
  return push("mul", std::move(out), {a, b}, [a, b](Graph& g, std::span<const T> go) {
    if (g.needs(a)) {
      auto ga = g.grad_of(a);
      const auto& B = g.value(b);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * B[i];
    }
    if (g.needs(b)) {
      auto gb = g.grad_of(b);
      const auto& A = g.value(a);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * A[i];
    }
  });
}

template <class T>
Var Graph<T>::scale(Var a, T factor) {
  const auto& A = value(a);
  Tensor<T> out(A.shape());
  for (std::size_t i = 0; i < A.numel(); ++i) out[i] = A[i] * factor;
  return push("scale", std::move(out), {a}, [a, factor](Graph& g, std::span<const T> go) {
    auto ga = g.grad_of(a);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * factor;
  });
}

template <class T>
Var Graph<T>::add_scalar(Var a, T offset) {
  const auto& A = value(a);
  Tensor<T> out(A.shape());
  for (std::size_t i = 0; i < A.numel(); ++i) out[i] = A[i] + offset;
  return push("add_scalar", std::move(out), {a}, [a](Graph& g, std::span<const T> go) {
    auto ga = g.grad_of(a);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
  });
}

template <class T>
Var Graph<T>::add_row(Var a, Var row) {
  const auto& A = value(a);
  const auto& R = value(row);
  if (R.numel() != A.cols() || R.rows() != 1) dim_error("add_row", A.shape(), R.shape());
  const std::size_t n = A.rows(), d = A.cols();
  Tensor<T> out(A.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = A[i * d + j] + R[j];
  return push("add_row", std::move(out), {a, row}, [a, row, n, d](Graph& g, std::span<const T> go) {
    if (g.needs(a)) {
      auto ga = g.grad_of(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (g.needs(row)) {
      auto gr = g.grad_of(row);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) gr[j] += go[i * d + j];
    }
  });
}

// -- structure -------------------------------------------------------------------

template <class T>
Var Graph<T>::concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t d = value(parts[0]).cols();
  std::size_t total = 0;
  std::vector<std::size_t> offsets;
  for (Var p : parts) {
    const auto& P = value(p);
    if (P.cols() != d || P.rank() > 2) dim_error("concat_rows", value(parts[0]).shape(), P.shape());
    offsets.push_back(total);
    total += P.numel();
  }
  Tensor<T> out(matrix(total / d, d));
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& P = value(parts[i]);
    std::copy(P.data().begin(), P.data().end(), out.data().begin() + offsets[i]);
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return push_many("concat_rows", std::move(out), parts,
                   [ins, offsets](Graph& g, std::span<const T> go) {
                     for (std::size_t i = 0; i < ins.size(); ++i) {
                       if (!g.needs(ins[i])) continue;
                       auto gi = g.grad_of(ins[i]);
                       for (std::size_t j = 0; j < gi.size(); ++j) gi[j] += go[offsets[i] + j];
                     }
                   });
}

template <class T>
Var Graph<T>::concat_cols(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  if (A.rows() != B.rows()) dim_error("concat_cols", A.shape(), B.shape());
  const std::size_t n = A.rows(), da = A.cols(), db = B.cols();
  Tensor<T> out(matrix(n, da + db));
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(A.data().begin() + i * da, da, out.data().begin() + i * (da + db));
    std::copy_n(B.data().begin() + i * db, db, out.data().begin() + i * (da + db) + da);
  }
  return push("concat_cols", std::move(out), {a, b}, [a, b, n, da, db](Graph& g, std::span<const T> go) {
    if (g.needs(a)) {
      auto ga = g.grad_of(a);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < da; ++j) ga[i * da + j] += go[i * (da + db) + j];
    }
    if (g.needs(b)) {
      auto gb = g.grad_of(b);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < db; ++j) gb[i * db + j] += go[i * (da + db) + da + j];
    }
  });
}

template <class T>
Var Graph<T>::gather_rows(Var a, std::vector<std::uint32_t> index) {
  const auto& A = value(a);
  const std::size_t d = A.cols();
  const std::size_t rows = A.rows();
  Tensor<T> out(matrix(index.size(), d));
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= rows) {
      throw IndexError("gather_rows: row " + std::to_string(index[i]) + " out of range for " +
                       shape_string(A.shape()));
    }
    std::copy_n(A.data().begin() + index[i] * d, d, out.data().begin() + i * d);
  }
  return push("gather_rows", std::move(out), {a},
              [a, d, index = std::move(index)](Graph& g, std::span<const T> go) {
                auto ga = g.grad_of(a);
                for (std::size_t i = 0; i < index.size(); ++i)
                  for (std::size_t j = 0; j < d; ++j) ga[index[i] * d + j] += go[i * d + j];
              });
}

template <class T>
Var Graph<T>::reshape(Var a, Shape shape) {
  Tensor<T> out = value(a).reshaped(std::move(shape));
  return push("reshape", std::move(out), {a}, [a](Graph& g, std::span<const T> go) {
    auto ga = g.grad_of(a);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
  });
}

// -- elementwise / normalisation --------------------------------------------------

template <class T>
Var Graph<T>::softmax_rows(Var a) {
  const auto& A = value(a);
  const std::size_t n = A.rows(), d = A.cols();
  if (d == 0) throw DimensionError("softmax_rows: empty axis");
  Tensor<T> out(A.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* x = A.data().data() + i * d;
    T* y = out.data().data() + i * d;
    T mx = *std::max_element(x, x + d);
    T total{0};
    for (std::size_t j = 0; j < d; ++j) total += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < d; ++j) y[j] /= total;
  }
  const Var self{static_cast<std::uint32_t>(nodes_.size())};
  return push("softmax_rows", std::move(out), {a}, [a, self, n, d](Graph& g, std::span<const T> go) {
    const auto& Y = g.value(self);
    auto ga = g.grad_of(a);
    for (std::size_t i = 0; i < n; ++i) {
      T dot{0};
      for (std::size_t j = 0; j < d; ++j) dot += go[i * d + j] * Y[i * d + j];
      for (std::size_t j = 0; j < d; ++j) ga[i * d + j] += Y[i * d + j] * (go[i * d + j] - dot);
    }
  });
}

template <class T>
Var Graph<T>::layer_norm_rows(Var x, Var gamma, Var beta, T eps) {
  const auto& X = value(x);
  const auto& G = value(gamma);
  const auto& B = value(beta);
  const std::size_t n = X.rows(), d = X.cols();
  if (G.numel() != d || B.numel() != d) dim_error("layer_norm_rows", X.shape(), G.shape());
  Tensor<T> out(X.shape());
  std::vector<T> xhat(X.numel());
  std::vector<T> rstd(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* r = X.data().data() + i * d;
    T mu{0};
    for (std::size_t j = 0; j < d; ++j) mu += r[j];
    mu /= static_cast<T>(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) var += (r[j] - mu) * (r[j] - mu);
    var /= static_cast<T>(d);
    rstd[i] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (r[j] - mu) * rstd[i];
      out[i * d + j] = xhat[i * d + j] * G[j] + B[j];
    }
  }
  return push("layer_norm_rows", std::move(out), {x, gamma, beta},
              [x, gamma, beta, n, d, xhat = std::move(xhat), rstd = std::move(rstd)](
                  Graph& g, std::span<const T> go) {
                const auto& G = g.value(gamma);
                if (g.needs(gamma)) {
                  auto gg = g.grad_of(gamma);
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < d; ++j) gg[j] += go[i * d + j] * xhat[i * d + j];
                }
                if (g.needs(beta)) {
                  auto gb = g.grad_of(beta);
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < d; ++j) gb[j] += go[i * d + j];
                }
                if (g.needs(x)) {
                  auto gx = g.grad_of(x);
                  std::vector<T> dxhat(d);
                  for (std::size_t i = 0; i < n; ++i) {
                    T s1{0}, s2{0};
                    for (std::size_t j = 0; j < d; ++j) {
                      dxhat[j] = go[i * d + j] * G[j];
                      s1 += dxhat[j];
                      s2 += dxhat[j] * xhat[i * d + j];
                    }
                    const T inv_d = T{1} / static_cast<T>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                      gx[i * d + j] += rstd[i] * (dxhat[j] - inv_d * s1 - xhat[i * d + j] * inv_d * s2);
                    }
                  }
                }
              });
}

template <class T>
Var Graph<T>::gelu(Var a) {
  const auto& A = value(a);
  Tensor<T> out(A.shape());
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (std::size_t i = 0; i < A.numel(); ++i) {
    out[i] = T(0.5) * A[i] * (T(1) + std::erf(A[i] * inv_sqrt2));
  }
  return push("gelu", std::move(out), {a}, [a, inv_sqrt2](Graph& g, std::span<const T> go) {
    const auto& A = g.value(a);
    auto ga = g.grad_of(a);
    const T inv_sqrt_2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<T>;
    for (std::size_t i = 0; i < go.size(); ++i) {
      const T x = A[i];
      const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
      ga[i] += go[i] * (cdf + x * pdf);
    }
  });
}

template <class T>
Var Graph<T>::exp(Var a) {
  const auto& A = value(a);
  Tensor<T> out(A.shape());
  for (std::size_t i = 0; i < A.numel(); ++i) out[i] = std::exp(A[i]);
  const Var self{static_cast<std::uint32_t>(nodes_.size())};
  return push("exp", std::move(out), {a}, [a, self](Graph& g, std::span<const T> go) {
    const auto& Y = g.value(self);
    auto ga = g.grad_of(a);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * Y[i];
  });
}

template <class T>
Var Graph<T>::log(Var a) {
  const auto& A = value(a);
  Tensor<T> out(A.shape());
  for (std::size_t i = 0; i < A.numel(); ++i) {
    if (!(A[i] > T{0})) throw NumericError("log: non-positive input");
    out[i] = std::log(A[i]);
  }
  return push("log", std::move(out), {a}, [a](Graph& g, std::span<const T> go) {
    const auto& A = g.value(a);
    auto ga = g.grad_of(a);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] / A[i];
  });
}

template <class T>
Var Graph<T>::square(Var a) {
  return mul(a, a);
}

// -- reductions ------------------------------------------------------------------

template <class T>
Var Graph<T>::sum(Var a) {
  const auto& A = value(a);
  T total{0};
  for (T x : A.data()) total += x;
  return push("sum", Tensor<T>(Shape{1}, total), {a}, [a](Graph& g, std::span<const T> go) {
    auto ga = g.grad_of(a);
    for (auto& x : ga) x += go[0];
  });
}

template <class T>
Var Graph<T>::mean(Var a) {
  const auto count = static_cast<T>(value(a).numel());
  if (value(a).numel() == 0) throw ContractError("mean: empty tensor");
  return scale(sum(a), T{1} / count);
}

template <class T>
Var Graph<T>::mean_rows(Var a) {
  const auto& A = value(a);
  const std::size_t n = A.rows(), d = A.cols();
  if (n == 0) throw ContractError("mean_rows: no rows");
  Tensor<T> out(matrix(1, d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[j] += A[i * d + j];
  for (auto& x : out.data()) x /= static_cast<T>(n);
  return push("mean_rows", std::move(out), {a}, [a, n, d](Graph& g, std::span<const T> go) {
    auto ga = g.grad_of(a);
    const T inv = T{1} / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) ga[i * d + j] += go[j] * inv;
  });
}

template <class T>
Var Graph<T>::l2_norm_rows(Var a) {
  const auto& A = value(a);
  const std::size_t n = A.rows(), d = A.cols();
  Tensor<T> out(matrix(n, 1));
  for (std::size_t i = 0; i < n; ++i) {
    T s{0};
    for (std::size_t j = 0; j < d; ++j) s += A[i * d + j] * A[i * d + j];
    out[i] = std::sqrt(s);
  }
  const Var self{static_cast<std::uint32_t>(nodes_.size())};
  return push("l2_norm_rows", std::move(out), {a}, [a, self, n, d](Graph& g, std::span<const T> go) {
    const auto& A = g.value(a);
    const auto& N = g.value(self);
    auto ga = g.grad_of(a);
    for (std::size_t i = 0; i < n; ++i) {
      if (N[i] == T{0}) throw NumericError("l2_norm_rows: gradient undefined at zero norm");
      for (std::size_t j = 0; j < d; ++j) ga[i * d + j] += go[i] * A[i * d + j] / N[i];
    }
  });
}

template <class T>
Var Graph<T>::reduce_max(Var a) {
  const auto& A = value(a);
  if (A.numel() == 0) throw ContractError("reduce_max: empty tensor");
  const auto it = std::max_element(A.data().begin(), A.data().end());
  const auto arg = static_cast<std::size_t>(it - A.data().begin());
  return push("reduce_max", Tensor<T>(Shape{1}, *it), {a}, [a, arg](Graph& g, std::span<const T> go) {
    g.grad_of(a)[arg] += go[0];
  });
}

// -- fused model ops --------------------------------------------------------------

template <class T>
Var Graph<T>::attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq, std::size_t heads,
                        std::vector<Tensor<T>>* probs_out) {
  const auto& Q = value(q);
  const auto& K = value(k);
  const auto& V = value(v);
  if (Q.shape() != K.shape()) dim_error("attention", Q.shape(), K.shape());
  if (Q.shape() != V.shape()) dim_error("attention", Q.shape(), V.shape());
  const std::size_t D = Q.cols();
  if (Q.rows() != batch * seq || heads == 0 || D % heads != 0) {
    throw DimensionError("attention: " + shape_string(Q.shape()) + " is not " +
                         std::to_string(batch) + "x" + std::to_string(seq) + " tokens split into " +
                         std::to_string(heads) + " heads");
  }
  const std::size_t dk = D / heads;
  const T inv_scale = T{1} / std::sqrt(static_cast<T>(dk));
  std::vector<T> probs(batch * heads * seq * seq);
  Tensor<T> out(Q.shape());
  const T* qd = Q.data().data();
  const T* kd = K.data().data();
  const T* vd = V.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      T* P = probs.data() + (b * heads + h) * seq * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        const T* qi = qd + (b * seq + i) * D + h * dk;
        T* prow = P + i * seq;
        for (std::size_t j = 0; j < seq; ++j) {
          const T* kj = kd + (b * seq + j) * D + h * dk;
          T s{0};
          for (std::size_t c = 0; c < dk; ++c) s += qi[c] * kj[c];
          prow[j] = s * inv_scale;
        }
        const T mx = *std::max_element(prow, prow + seq);
        T total{0};
        for (std::size_t j = 0; j < seq; ++j) total += (prow[j] = std::exp(prow[j] - mx));
        for (std::size_t j = 0; j < seq; ++j) prow[j] /= total;
        T* oi = out.data().data() + (b * seq + i) * D + h * dk;
        for (std::size_t j = 0; j < seq; ++j) {
          const T* vj = vd + (b * seq + j) * D + h * dk;
          const T p = prow[j];
          for (std::size_t c = 0; c < dk; ++c) oi[c] += p * vj[c];
        }
      }
    }
  }
  if (probs_out) {
    probs_out->clear();
    for (std::size_t bh = 0; bh < batch * heads; ++bh) {
      probs_out->emplace_back(matrix(seq, seq),
                              std::vector<T>(probs.begin() + bh * seq * seq,
                                             probs.begin() + (bh + 1) * seq * seq));
    }
  }
  return push("attention", std::move(out), {q, k, v},
              [q, k, v, batch, seq, heads, dk, D, inv_scale, probs = std::move(probs)](
                  Graph& g, std::span<const T> go) {
                const T* qd = g.value(q).data().data();
                const T* kd = g.value(k).data().data();
                const T* vd = g.value(v).data().data();
                T* gq = g.needs(q) ? g.grad_of(q).data() : nullptr;
                T* gk = g.needs(k) ? g.grad_of(k).data() : nullptr;
                T* gv = g.needs(v) ? g.grad_of(v).data() : nullptr;
                std::vector<T> dp(seq);
                for (std::size_t b = 0; b < batch; ++b) {
                  for (std::size_t h = 0; h < heads; ++h) {
                    const T* P = probs.data() + (b * heads + h) * seq * seq;
                    for (std::size_t i = 0; i < seq; ++i) {
                      const T* goi = go.data() + (b * seq + i) * D + h * dk;
                      const T* prow = P + i * seq;
                      T dot{0};
                      for (std::size_t j = 0; j < seq; ++j) {
                        const T* vj = vd + (b * seq + j) * D + h * dk;
                        T s{0};
                        for (std::size_t c = 0; c < dk; ++c) s += goi[c] * vj[c];
                        dp[j] = s;
                        dot += s * prow[j];
                        if (gv) {
                          T* gvj = gv + (b * seq + j) * D + h * dk;
                          for (std::size_t c = 0; c < dk; ++c) gvj[c] += prow[j] * goi[c];
                        }
                      }
                      const T* qi = qd + (b * seq + i) * D + h * dk;
                      for (std::size_t j = 0; j < seq; ++j) {
                        const T ds = prow[j] * (dp[j] - dot) * inv_scale;
                        const T* kj = kd + (b * seq + j) * D + h * dk;
                        if (gq) {
                          T* gqi = gq + (b * seq + i) * D + h * dk;
                          for (std::size_t c = 0; c < dk; ++c) gqi[c] += ds * kj[c];
                        }
                        if (gk) {
                          T* gkj = gk + (b * seq + j) * D + h * dk;
                          for (std::size_t c = 0; c < dk; ++c) gkj[c] += ds * qi[c];
                        }
                      }
                    }
                  }
                }
              });
}

template <class T>
Var Graph<T>::cosine_rows(Var f, Var w, T eps) {
  const auto& F = value(f);
  const auto& W = value(w);
  if (F.cols() != W.cols()) dim_error("cosine_rows", F.shape(), W.shape());
  const std::size_t n = F.rows(), kk = W.rows(), d = F.cols();
  std::vector<T> nf(n), nw(kk);
  auto norms = [d, eps](const Tensor<T>& X, std::vector<T>& out, const char* what) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      T s{0};
      for (std::size_t j = 0; j < d; ++j) s += X[i * d + j] * X[i * d + j];
      if (s == T{0}) throw NumericError(std::string("cosine_rows: zero-norm ") + what + " row");
      out[i] = std::sqrt(s + eps);
    }
  };
  norms(F, nf, "feature");
  norms(W, nw, "weight");
  Tensor<T> out(matrix(n, kk));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < kk; ++c) {
      T s{0};
      for (std::size_t j = 0; j < d; ++j) s += F[i * d + j] * W[c * d + j];
      out[i * kk + c] = s / (nf[i] * nw[c]);
    }
  }
  const Var self{static_cast<std::uint32_t>(nodes_.size())};
  return push("cosine_rows", std::move(out), {f, w},
              [f, w, self, n, kk, d, nf = std::move(nf), nw = std::move(nw)](Graph& g,
                                                                           std::span<const T> go) {
                const auto& F = g.value(f);
                const auto& W = g.value(w);
                const auto& C = g.value(self);
                T* gf = g.needs(f) ? g.grad_of(f).data() : nullptr;
                T* gw = g.needs(w) ? g.grad_of(w).data() : nullptr;
                for (std::size_t i = 0; i < n; ++i) {
                  for (std::size_t c = 0; c < kk; ++c) {
                    const T up = go[i * kk + c];
                    if (up == T{0}) continue;
                    const T cval = C[i * kk + c];
                    const T inv = T{1} / (nf[i] * nw[c]);
                    if (gf) {
                      const T self_f = cval / (nf[i] * nf[i]);
                      for (std::size_t j = 0; j < d; ++j)
                        gf[i * d + j] += up * (W[c * d + j] * inv - self_f * F[i * d + j]);
                    }
                    if (gw) {
                      const T self_w = cval / (nw[c] * nw[c]);
                      for (std::size_t j = 0; j < d; ++j)
                        gw[c * d + j] += up * (F[i * d + j] * inv - self_w * W[c * d + j]);
                    }
                  }
                }
              });
}

template <class T>
Var Graph<T>::cross_entropy(Var logits, std::span<const std::size_t> labels) {
  const auto& L = value(logits);
  const std::size_t n = L.rows(), kk = L.cols();
  if (labels.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         shape_string(L.shape()) + " logits");
  }
  std::vector<T> probs(n * kk);
  T total{0};
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= kk) throw ContractError("cross_entropy: label out of range");
    const T* r = L.data().data() + i * kk;
    const T mx = *std::max_element(r, r + kk);
    T z{0};
    for (std::size_t c = 0; c < kk; ++c) z += (probs[i * kk + c] = std::exp(r[c] - mx));
    for (std::size_t c = 0; c < kk; ++c) probs[i * kk + c] /= z;
    total += (mx + std::log(z)) - r[labels[i]];
  }
  total /= static_cast<T>(n);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return push("cross_entropy", Tensor<T>(Shape{1}, total), {logits},
              [logits, n, kk, probs = std::move(probs), lab = std::move(lab)](Graph& g,
                                                                               std::span<const T> go) {
                auto gl = g.grad_of(logits);
                const T s = go[0] / static_cast<T>(n);
                for (std::size_t i = 0; i < n; ++i) {
                  for (std::size_t c = 0; c < kk; ++c) {
                    gl[i * kk + c] += s * (probs[i * kk + c] - (c == lab[i] ? T{1} : T{0}));
                  }
                }
              });
}

template <class T>
Var Graph<T>::kl_std_normal_rows(Var mu, Var logvar) {
  const auto& M = value(mu);
  const auto& LV = value(logvar);
  if (M.shape() != LV.shape()) dim_error("kl_std_normal_rows", M.shape(), LV.shape());
  const std::size_t n = M.rows(), d = M.cols();
  Tensor<T> out(matrix(n, 1));
  for (std::size_t i = 0; i < n; ++i) {
    T s{0};
    for (std::size_t j = 0; j < d; ++j) {
      const T m = M[i * d + j], lv = LV[i * d + j];
      s += m * m + std::exp(lv) - T{1} - lv;
    }
    out[i] = T(0.5) * s;
  }
  return push("kl_std_normal_rows", std::move(out), {mu, logvar},
              [mu, logvar, n, d](Graph& g, std::span<const T> go) {
                if (g.needs(mu)) {
                  const auto& M = g.value(mu);
                  auto gm = g.grad_of(mu);
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < d; ++j) gm[i * d + j] += go[i] * M[i * d + j];
                }
                if (g.needs(logvar)) {
                  const auto& LV = g.value(logvar);
                  auto gl = g.grad_of(logvar);
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < d; ++j)
                      gl[i * d + j] += go[i] * T(0.5) * (std::exp(LV[i * d + j]) - T{1});
                }
              });
}

// -- differentiation ------------------------------------------------------------------

template <class T>
void Graph<T>::backward(Var loss) {
  if (value(loss).numel() != 1) {
    throw ContractError("backward: loss must be scalar, got " + shape_string(value(loss).shape()));
  }
  if (nodes_.empty()) throw ContractError("backward: empty graph");
  if (nodes_[loss.id].requires_grad) {
    grad_of(loss)[0] = T{1};
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& node = nodes_[id];
      if (node.grad.empty()) continue;
      if (node.backward) node.backward(*this, std::span<const T>(node.grad));
      if (node.leaf && node.leaf->requires_grad()) {
        auto dst = node.leaf->ensure_grad();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += node.grad[i];
        if (!all_finite<T>(dst)) throw NumericError("backward: non-finite gradient");
      }
    }
  }
  nodes_.clear();
}

template class Graph<float>;
template class Graph<double>;

}  // namespace asp::tensor

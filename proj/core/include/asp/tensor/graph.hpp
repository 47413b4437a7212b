#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "asp/tensor/rng.hpp"
#include "asp/tensor/tensor.hpp"

namespace asp::tensor {

/// Handle to a value recorded on a Graph.
struct Var {
  std::uint32_t id = 0;
};

/// Reverse-mode tape.
///
/// Nodes are appended in execution order, so the tape is topologically sorted
/// by construction; `backward` walks it once in reverse and then resets it.
/// An op records a backward closure only when at least one input requires a
/// gradient. Leaves created with `param` alias an external tensor and receive
/// accumulated gradients in that tensor's grad buffer.
///
/// Shapes: everything is a row-major matrix (rank 1 counts as one row).
/// Broadcasting is limited to scalar factors and row-vector bias adds.
template <class T>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // -- leaves ---------------------------------------------------------------
  Var constant(Tensor<T> value);
  Var param(Tensor<T>& leaf);
  /// Gaussian noise N(0, stddev^2) as a constant leaf drawn from `rng`.
  Var normal(RngStream& rng, Shape shape, T stddev = T{1});

  const Tensor<T>& value(Var v) const;
  const Shape& shape(Var v) const { return value(v).shape(); }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // -- linear algebra -------------------------------------------------------
  Var matmul(Var a, Var b);
  /// x * w + bias, bias a 1 x out row.
  Var linear(Var x, Var w, Var bias);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, T factor);
  Var add_scalar(Var a, T offset);
  /// Adds a 1 x cols row vector to every row of `a`.
  Var add_row(Var a, Var row);

  // -- structure ------------------------------------------------------------
  /// Stacks matrices with equal column count along the sequence axis.
  Var concat_rows(std::span<const Var> parts);
  Var concat_cols(Var a, Var b);
  /// out.row(i) = a.row(index[i]); backward scatter-adds in index order.
  Var gather_rows(Var a, std::vector<std::uint32_t> index);
  Var reshape(Var a, Shape shape);

  // -- elementwise / normalisation -----------------------------------------
  Var softmax_rows(Var a);
  Var layer_norm_rows(Var x, Var gamma, Var beta, T eps = T(1e-5));
  Var gelu(Var a);
  Var exp(Var a);
  Var log(Var a);
  Var square(Var a);

  // -- reductions -----------------------------------------------------------
  Var sum(Var a);
  Var mean(Var a);
  /// Mean along the row axis: n x d -> 1 x d.
  Var mean_rows(Var a);
  /// Euclidean norm of every row: n x d -> n x 1.
  Var l2_norm_rows(Var a);
  /// Maximum element; the subgradient goes to the first maximiser.
  Var reduce_max(Var a);

  // -- fused model ops -------------------------------------------------------
  /// Multi-head scaled dot-product attention over `batch` independent
  /// sequences of length `seq` stacked row-wise in q, k, v ((batch*seq) x D).
  /// When `probs_out` is non-null it receives batch*heads row-stochastic
  /// seq x seq matrices ordered [sample][head].
  Var attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq, std::size_t heads,
                std::vector<Tensor<T>>* probs_out = nullptr);
  /// Cosine similarity between every row of f (n x d) and w (k x d): n x k.
  Var cosine_rows(Var f, Var w, T eps = T(1e-8));
  /// Mean softmax cross-entropy of n x k logits against integer labels.
  Var cross_entropy(Var logits, std::span<const std::size_t> labels);
  /// Per-row KL(N(mu, diag(exp(logvar))) || N(0, I)): n x d -> n x 1.
  Var kl_std_normal_rows(Var mu, Var logvar);

  // -- differentiation ------------------------------------------------------
  /// Back-propagates from a scalar and accumulates into parameter leaves.
  /// The tape is cleared afterwards.
  void backward(Var loss);
  void clear() { nodes_.clear(); }

 private:
  using BackwardFn = std::function<void(Graph&, std::span<const T>)>;

  struct Node {
    Tensor<T> value;
    Tensor<T>* leaf = nullptr;
    std::vector<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(std::string_view op, Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var push_many(std::string_view op, Tensor<T> value, std::span<const Var> inputs, BackwardFn fn);
  std::span<T> grad_of(Var v);
  bool needs(Var v) const { return nodes_[v.id].requires_grad; }

  std::vector<Node> nodes_;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace asp::tensor

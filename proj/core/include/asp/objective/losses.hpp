#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "asp/tensor/graph.hpp"

namespace asp::objective {

using tensor::Graph;
using tensor::Tensor;
using tensor::Var;

struct LossConfig {
  double lambda = 0.1;      // anchor-loss weight
  double kl_weight = 1.0;   // coefficient of the KL term
  double temperature = 0.05;  // cosine logits are divided by this before the softmax

  void validate() const;
  bool operator==(const LossConfig&) const = default;
};

/// Cosine similarity of each feature row with each classifier row: n x K.
template <class T>
Var cosine_logits(Graph<T>& g, Var features, Var weights);

/// Mean cross-entropy of temperature-scaled cosine logits plus kl_weight
/// times the batch-mean KL(N(mu, sigma^2) || N(0, I)) summed over layers.
/// `mu[l]` and `logvar[l]` are (batch * tokens) x D blocks.
template <class T>
Var ib_loss(Graph<T>& g, Var cosine, std::span<const std::size_t> labels, std::span<const Var> mu,
            std::span<const Var> logvar, const LossConfig& config);

/// Batch mean of 1 - cos(f_i, anchor_{y_i}); `anchors` is a K x D table of
/// cached anchor features (no gradient flows into it).
template <class T>
Var anchor_loss(Graph<T>& g, Var features, const Tensor<T>& anchors,
                std::span<const std::size_t> labels);

/// L = L_IB + lambda * L_c.
template <class T>
Var total_loss(Graph<T>& g, Var ib, std::optional<Var> anchor, double lambda);

/// Index of the row of `features` (n x D) with the highest cosine to `mean`;
/// ties go to the lowest index.
template <class T>
std::size_t select_anchor(const Tensor<T>& features, std::span<const T> mean);

/// Closed-form KL(N(mu, diag(var)) || N(0, I)).
double gaussian_kl(std::span<const double> mu, std::span<const double> var);

/// Plain cosine similarity; throws NumericError for a zero vector.
template <class T>
double cosine(std::span<const T> a, std::span<const T> b);

}  // namespace asp::objective

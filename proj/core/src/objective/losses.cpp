#include "asp/objective/losses.hpp"

#include <cmath>
#include <optional>
#include <string>

namespace asp::objective {

void LossConfig::validate() const {
  if (!(lambda >= 0.0)) throw ConfigError("loss: lambda must be non-negative");
  if (!(kl_weight >= 0.0)) throw ConfigError("loss: kl_weight must be non-negative");
  if (!(temperature > 0.0)) throw ConfigError("loss: temperature must be positive");
}

template <class T>
Var cosine_logits(Graph<T>& g, Var features, Var weights) {
  return g.cosine_rows(features, weights);
}

template <class T>
Var ib_loss(Graph<T>& g, Var cosine, std::span<const std::size_t> labels, std::span<const Var> mu,
            std::span<const Var> logvar, const LossConfig& config) {
  if (mu.size() != logvar.size()) throw DimensionError("ib_loss: mu/logvar layer count mismatch");
  const std::size_t batch = labels.size();
  Var loss = g.cross_entropy(g.scale(cosine, static_cast<T>(1.0 / config.temperature)), labels);
  if (mu.empty() || config.kl_weight == 0.0) return loss;
  std::vector<Var> per_layer;
  for (std::size_t l = 0; l < mu.size(); ++l) {
    const auto& lv = g.value(logvar[l]);
    for (T x : lv.data()) {
      if (!(std::exp(x) > T{0})) throw ContractError("ib_loss: non-positive variance");
    }
    per_layer.push_back(g.sum(g.kl_std_normal_rows(mu[l], logvar[l])));
  }
  Var kl = per_layer.size() == 1 ? per_layer[0] : g.sum(g.concat_rows(per_layer));
  kl = g.scale(kl, static_cast<T>(config.kl_weight / static_cast<double>(batch)));
  return g.add(loss, kl);
}

template <class T>
Var anchor_loss(Graph<T>& g, Var features, const Tensor<T>& anchors,
                std::span<const std::size_t> labels) {
  const auto& F = g.value(features);
  if (labels.size() != F.rows()) throw DimensionError("anchor_loss: label count mismatch");
  std::vector<std::uint32_t> rows;
  for (std::size_t y : labels) {
    if (y >= anchors.rows()) throw ContractError("anchor_loss: no anchor for class " + std::to_string(y));
    rows.push_back(static_cast<std::uint32_t>(y));
  }
  // Each feature row is paired with the anchor of its own class: the
  // diagonal of the n x n cosine matrix.
  const Var paired = g.gather_rows(g.constant(anchors), std::move(rows));
  const Var cos = g.cosine_rows(features, paired);
  const std::size_t n = labels.size();
  Tensor<T> mask({n, n});
  for (std::size_t i = 0; i < n; ++i) mask.at(i, i) = T{1};
  const Var diag_sum = g.sum(g.mul(cos, g.constant(std::move(mask))));
  return g.add_scalar(g.scale(diag_sum, static_cast<T>(-1.0 / static_cast<double>(n))), T{1});
}

template <class T>
Var total_loss(Graph<T>& g, Var ib, std::optional<Var> anchor, double lambda) {
  if (!anchor || lambda == 0.0) return ib;
  return g.add(ib, g.scale(*anchor, static_cast<T>(lambda)));
}

template <class T>
double cosine(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw DimensionError("cosine: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += double(a[i]) * double(b[i]);
    na += double(a[i]) * double(a[i]);
    nb += double(b[i]) * double(b[i]);
  }
  if (na == 0.0 || nb == 0.0) throw NumericError("cosine: zero-norm vector");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

template <class T>
std::size_t select_anchor(const Tensor<T>& features, std::span<const T> mean) {
  if (features.rows() == 0 || features.numel() == 0) throw ContractError("select_anchor: empty class");
  std::size_t best = 0;
  double best_cos = -2.0;
  for (std::size_t i = 0; i < features.rows(); ++i) {
    const double c = cosine<T>(features.row(i), mean);
    if (c > best_cos) {
      best_cos = c;
      best = i;
    }
  }
  return best;
}

double gaussian_kl(std::span<const double> mu, std::span<const double> var) {
  if (mu.size() != var.size()) throw DimensionError("gaussian_kl: length mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    if (!(var[i] > 0.0)) throw ContractError("gaussian_kl: variance must be positive");
    kl += mu[i] * mu[i] + var[i] - 1.0 - std::log(var[i]);
  }
  return 0.5 * kl;
}

#define ASP_OBJECTIVE_INSTANTIATE(T)                                                               \
  template Var cosine_logits<T>(Graph<T>&, Var, Var);                                              \
  template Var ib_loss<T>(Graph<T>&, Var, std::span<const std::size_t>, std::span<const Var>,      \
                          std::span<const Var>, const LossConfig&);                                \
  template Var anchor_loss<T>(Graph<T>&, Var, const Tensor<T>&, std::span<const std::size_t>);     \
  template Var total_loss<T>(Graph<T>&, Var, std::optional<Var>, double);                          \
  template std::size_t select_anchor<T>(const Tensor<T>&, std::span<const T>);                     \
  template double cosine<T>(std::span<const T>, std::span<const T>);

ASP_OBJECTIVE_INSTANTIATE(float)
ASP_OBJECTIVE_INSTANTIATE(double)

}  // namespace asp::objective

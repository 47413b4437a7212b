#include "asp/classifier/prototype.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_set>

namespace asp::classifier {

template <class T>
ClassifierState<T>::ClassifierState(Mode mode, Tensor<T> weights, std::vector<std::int64_t> class_ids)
    : mode_(mode), weights_(std::move(weights)), class_ids_(std::move(class_ids)) {
  if (weights_.rows() != class_ids_.size() && !class_ids_.empty()) {
    throw DimensionError("classifier: " + std::to_string(weights_.rows()) + " rows for " +
                         std::to_string(class_ids_.size()) + " classes");
  }
  std::unordered_set<std::int64_t> seen(class_ids_.begin(), class_ids_.end());
  if (seen.size() != class_ids_.size()) throw ContractError("classifier: duplicate class id");
  weights_.set_requires_grad(mode_ == Mode::trainable);
}

template <class T>
ClassifierState<T> ClassifierState<T>::trainable(std::vector<std::int64_t> class_ids, std::size_t dim,
                                                 tensor::RngStream& rng) {
  Tensor<T> w({class_ids.size(), dim});
  for (auto& x : w.data()) x = static_cast<T>(rng.normal() / std::sqrt(double(dim)));
  return ClassifierState(Mode::trainable, std::move(w), std::move(class_ids));
}

template <class T>
std::optional<std::size_t> ClassifierState<T>::row_of(std::int64_t class_id) const {
  const auto it = std::find(class_ids_.begin(), class_ids_.end(), class_id);
  if (it == class_ids_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - class_ids_.begin());
}

template <class T>
void ClassifierState<T>::freeze_to_prototypes(const Tensor<T>& class_means) {
  if (mode_ != Mode::trainable) throw ContractError("freeze_to_prototypes: classifier already prototypical");
  if (class_means.shape() != weights_.shape()) {
    throw DimensionError("freeze_to_prototypes: means " + tensor::shape_string(class_means.shape()) +
                         " vs weights " + tensor::shape_string(weights_.shape()));
  }
  weights_ = class_means;
  weights_.set_requires_grad(false);
  mode_ = Mode::prototypical;
}

template <class T>
void ClassifierState<T>::append_prototypes(std::span<const std::int64_t> class_ids,
                                           const Tensor<T>& class_means) {
  if (mode_ != Mode::prototypical) throw ContractError("append_prototypes: classifier is not prototypical");
  if (class_ids.empty()) return;
  if (class_means.rows() != class_ids.size() || class_means.cols() != dim()) {
    throw DimensionError("append_prototypes: means " + tensor::shape_string(class_means.shape()) +
                         " for " + std::to_string(class_ids.size()) + " classes of width " +
                         std::to_string(dim()));
  }
  std::unordered_set<std::int64_t> seen(class_ids_.begin(), class_ids_.end());
  for (auto id : class_ids) {
    if (!seen.insert(id).second) {
      throw ContractError("append_prototypes: duplicate class id " + std::to_string(id));
    }
  }
  auto& data = weights_.storage();
  data.insert(data.end(), class_means.data().begin(), class_means.data().end());
  weights_ = Tensor<T>({class_ids_.size() + class_ids.size(), class_means.cols()}, std::move(data));
  class_ids_.insert(class_ids_.end(), class_ids.begin(), class_ids.end());
}

template <class T>
void ClassifierState<T>::replace_prototypes(std::span<const std::int64_t> class_ids,
                                            const Tensor<T>& class_means) {
  if (mode_ != Mode::prototypical) throw ContractError("replace_prototypes: classifier is not prototypical");
  if (class_means.rows() != class_ids.size() || class_means.cols() != dim()) {
    throw DimensionError("replace_prototypes: means " + tensor::shape_string(class_means.shape()) +
                         " for " + std::to_string(class_ids.size()) + " classes");
  }
  for (std::size_t i = 0; i < class_ids.size(); ++i) {
    const auto row = row_of(class_ids[i]);
    if (!row) throw ContractError("replace_prototypes: unknown class id " + std::to_string(class_ids[i]));
    const auto src = class_means.row(i);
    std::copy(src.begin(), src.end(), weights_.row(*row).begin());
  }
}

template <class T>
std::int64_t ClassifierState<T>::predict(std::span<const T> feature) const {
  if (class_ids_.empty()) throw ContractError("predict: classifier has no classes");
  if (feature.size() != dim()) throw DimensionError("predict: feature width mismatch");
  double nf = 0.0;
  for (T x : feature) nf += double(x) * double(x);
  if (nf == 0.0) throw NumericError("predict: zero feature");
  std::size_t best = 0;
  double best_score = -2.0;
  for (std::size_t k = 0; k < size(); ++k) {
    const auto w = weights_.row(k);
    double dot = 0.0, nw = 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      dot += double(w[j]) * double(feature[j]);
      nw += double(w[j]) * double(w[j]);
    }
    if (nw == 0.0) throw NumericError("predict: zero prototype");
    const double score = dot / (std::sqrt(nw) * std::sqrt(nf));
    if (score > best_score || (score == best_score && class_ids_[k] < class_ids_[best])) {
      best_score = score;
      best = k;
    }
  }
  return class_ids_[best];
}

template <class T>
Tensor<T> compute_prototypes(const Tensor<T>& features, std::span<const std::int64_t> labels,
                             std::span<const std::int64_t> classes) {
  if (labels.size() != features.rows()) throw DimensionError("compute_prototypes: label count mismatch");
  const std::size_t d = features.cols();
  Tensor<T> out({classes.size(), d});
  for (std::size_t k = 0; k < classes.size(); ++k) {
    std::vector<double> acc(d, 0.0);
    std::size_t count = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] != classes[k]) continue;
      const auto row = features.row(i);
      for (std::size_t j = 0; j < d; ++j) acc[j] += row[j];
      ++count;
    }
    if (count == 0) {
      throw ContractError("compute_prototypes: class " + std::to_string(classes[k]) + " has no samples");
    }
    for (std::size_t j = 0; j < d; ++j) out.at(k, j) = static_cast<T>(acc[j] / double(count));
  }
  return out;
}

template class ClassifierState<float>;
template class ClassifierState<double>;
template Tensor<float> compute_prototypes<float>(const Tensor<float>&, std::span<const std::int64_t>,
                                                 std::span<const std::int64_t>);
template Tensor<double> compute_prototypes<double>(const Tensor<double>&, std::span<const std::int64_t>,
                                                   std::span<const std::int64_t>);

}  // namespace asp::classifier

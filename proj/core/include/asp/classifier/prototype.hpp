#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "asp/errors.hpp"
#include "asp/tensor/rng.hpp"
#include "asp/tensor/tensor.hpp"

namespace asp::classifier {

using tensor::Tensor;

enum class Mode : std::uint8_t { trainable = 0, prototypical = 1 };

/// Cosine classifier whose rows are trainable weights during base training
/// and class-mean prototypes afterwards. Rows follow class insertion order.
template <class T>
class ClassifierState {
 public:
  ClassifierState() = default;
  ClassifierState(Mode mode, Tensor<T> weights, std::vector<std::int64_t> class_ids);

  /// Randomly initialised trainable rows for the given classes.
  static ClassifierState trainable(std::vector<std::int64_t> class_ids, std::size_t dim,
                                   tensor::RngStream& rng);

  Mode mode() const { return mode_; }
  std::size_t size() const { return class_ids_.size(); }
  std::size_t dim() const { return weights_.cols(); }
  Tensor<T>& weights() { return weights_; }
  const Tensor<T>& weights() const { return weights_; }
  const std::vector<std::int64_t>& class_ids() const { return class_ids_; }
  std::optional<std::size_t> row_of(std::int64_t class_id) const;

  /// Replaces the trained rows with class means (same row order) and freezes them.
  void freeze_to_prototypes(const Tensor<T>& class_means);

  /// Appends new-class prototypes; existing rows are left untouched.
  void append_prototypes(std::span<const std::int64_t> class_ids, const Tensor<T>& class_means);

  /// Overwrites the prototypes of existing classes (prototypical mode only).
  void replace_prototypes(std::span<const std::int64_t> class_ids, const Tensor<T>& class_means);

  /// Class id with the highest cosine similarity; ties go to the lowest id.
  std::int64_t predict(std::span<const T> feature) const;

 private:
  Mode mode_ = Mode::trainable;
  Tensor<T> weights_;
  std::vector<std::int64_t> class_ids_;
};

/// Mean feature per class, rows in `classes` order. Every class must occur.
template <class T>
Tensor<T> compute_prototypes(const Tensor<T>& features, std::span<const std::int64_t> labels,
                             std::span<const std::int64_t> classes);

extern template class ClassifierState<float>;
extern template class ClassifierState<double>;

}  // namespace asp::classifier

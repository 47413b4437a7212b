#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "asp/classifier/prototype.hpp"
#include "asp/objective/losses.hpp"
#include "asp/prompt/prompt.hpp"
#include "asp/tensor/graph.hpp"
#include "asp/vit/vit.hpp"

namespace asp::runner {

using tensor::Graph;
using tensor::RngStream;
using tensor::Tensor;
using tensor::Var;

/// Frozen backbone plus everything ASP trains or maintains on top of it:
/// invariant prompts, the variational prompt encoder, p_avg and the classifier.
template <class T>
class AspModel {
 public:
  AspModel() = default;
  AspModel(vit::VisionTransformer<T> backbone, prompt::PromptConfig prompt, objective::LossConfig loss,
           std::vector<std::int64_t> base_classes, RngStream& rng);

  struct Pass {
    Var features;
    prompt::EncodedPrompts encoded;
  };

  /// Prompted class-token features for a batch. `encoder_input` holds the
  /// backbone features the encoder conditions on (ignored without TSP). In
  /// train mode with reparameterisation the prompts are sampled from `rng`.
  Pass forward(Graph<T>& g, const Tensor<T>& images, const Tensor<T>* encoder_input, prompt::Mode mode,
               RngStream* rng, vit::ForwardTrace<T>* trace = nullptr);

  /// L_IB + lambda * L_c on one minibatch. Input noise and prompt noise are
  /// drawn from `rng`; `rows` are classifier rows; `anchors` may be null.
  Var training_loss(Graph<T>& g, const Tensor<T>& images, std::span<const std::size_t> rows,
                    const Tensor<T>* anchors, RngStream& rng);

  /// Eval-mode features (no noise, per-sample TSP), computed in chunks.
  Tensor<T> eval_features(const Tensor<T>& images, const Tensor<T>* backbone_features = nullptr,
                          std::size_t chunk = 64);
  /// Prompt-free frozen-backbone features, computed in chunks.
  Tensor<T> backbone_features(const Tensor<T>& images, std::size_t chunk = 64);

  /// Recomputes p_avg from clean backbone features of the base data.
  void refresh_p_avg(const Tensor<T>& backbone_features);
  /// EMA update of p_avg with the mean prompt features of task `task`.
  void ema_update(const Tensor<T>& backbone_features, std::size_t task);

  /// Tensors that receive gradients during base training.
  std::vector<Tensor<T>*> trainable();
  /// Freezes prompts and encoder after base training.
  void freeze_prompts();

  vit::VisionTransformer<T>& backbone() { return backbone_; }
  const prompt::PromptConfig& prompt_config() const { return prompt_; }
  const objective::LossConfig& loss_config() const { return loss_; }
  prompt::TipBlock<T>* tip() { return tip_ ? &*tip_ : nullptr; }
  prompt::EncoderHeads<T>* encoder() { return encoder_ ? &*encoder_ : nullptr; }
  prompt::PromptAverage<T>& p_avg() { return p_avg_; }
  classifier::ClassifierState<T>& classifier() { return classifier_; }
  const classifier::ClassifierState<T>& classifier() const { return classifier_; }

  /// Every stored tensor with a stable name ("vit.*", "tip.*", "encoder.*",
  /// "p_avg.*", "classifier.W").
  template <class F>
  void visit(F&& f) {
    backbone_.params().visit(f);
    if (tip_) {
      for (std::size_t s = 0; s < tip_->params().size(); ++s) f("tip." + std::to_string(s), tip_->params()[s]);
    }
    if (encoder_) encoder_->visit(f);
    for (std::size_t l = 0; l < p_avg_.layers.size(); ++l) f("p_avg." + std::to_string(l), p_avg_.layers[l]);
    f("classifier.W", classifier_.weights());
  }

 private:
  vit::VisionTransformer<T> backbone_;
  prompt::PromptConfig prompt_;
  objective::LossConfig loss_;
  std::optional<prompt::TipBlock<T>> tip_;
  std::optional<prompt::EncoderHeads<T>> encoder_;
  prompt::PromptAverage<T> p_avg_;
  classifier::ClassifierState<T> classifier_;
};

extern template class AspModel<float>;
extern template class AspModel<double>;

}  // namespace asp::runner

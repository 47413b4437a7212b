#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "asp/tensor/graph.hpp"
#include "asp/vit/vit.hpp"

namespace asp::prompt {

using tensor::Graph;
using tensor::RngStream;
using tensor::Tensor;
using tensor::Var;

/// Prompt hyperparameters. Defaults follow the reference configuration:
/// alpha 0.8, beta 0.99, prompt length 3 for both blocks.
struct PromptConfig {
  std::vector<std::size_t> layers{0, 1, 2, 3, 4};
  std::size_t tip_length = 3;
  std::size_t tsp_length = 3;
  bool use_tip = true;
  bool use_tsp = true;
  bool tied_tip = true;
  double alpha = 0.8;
  double beta = 0.99;
  double input_noise = 0.05;
  bool reparameterize = true;
  std::size_t encoder_hidden = 256;

  void validate() const;
  /// Tokens inserted per prompted layer.
  std::size_t prompt_length() const {
    return (use_tip ? tip_length : 0) + (use_tsp ? tsp_length : 0);
  }
  bool operator==(const PromptConfig&) const = default;
};

/// Task-invariant prompts. With `tied` set, each layer stores one D-vector
/// that is broadcast to all `length` token positions, so the tokens stay
/// identical under any gradient update. Untied blocks store length x D.
template <class T>
class TipBlock {
 public:
  TipBlock() = default;
  static TipBlock init(std::size_t layers, std::size_t length, std::size_t dim, bool tied,
                       RngStream& rng);

  std::size_t layers() const { return params_.size(); }
  std::size_t length() const { return length_; }
  std::size_t dim() const { return dim_; }
  bool tied() const { return tied_; }

  /// length x D prompt tokens of one layer slot on the graph.
  Var tokens(Graph<T>& g, std::size_t slot);
  /// length x D prompt tokens as a plain tensor.
  Tensor<T> materialize(std::size_t slot) const;

  std::vector<Tensor<T>>& params() { return params_; }
  const std::vector<Tensor<T>>& params() const { return params_; }
  void set_frozen(bool frozen);

 private:
  std::vector<Tensor<T>> params_;
  std::size_t length_ = 0;
  std::size_t dim_ = 0;
  bool tied_ = true;
};

/// Variational prompt encoder: a shared two-layer GELU trunk over
/// [flatten(p_I^l) ; f(x)] followed by per-layer mean and log-variance heads.
template <class T>
struct EncoderHeads {
  Tensor<T> w1, b1, w2, b2;
  std::vector<Tensor<T>> mu_w, mu_b, logvar_w, logvar_b;

  /// `tip_tokens` is L_pI (0 when prompts carry no invariant block).
  /// The log-variance heads start at zero, i.e. unit variance.
  static EncoderHeads init(std::size_t layers, std::size_t tip_tokens, std::size_t tsp_tokens,
                           std::size_t dim, std::size_t hidden, RngStream& rng);

  std::size_t layers() const { return mu_w.size(); }
  std::size_t tsp_tokens(std::size_t dim) const { return mu_w.empty() ? 0 : mu_w[0].cols() / dim; }

  template <class F>
  void visit(F&& f) {
    f("encoder.w1", w1);
    f("encoder.b1", b1);
    f("encoder.w2", w2);
    f("encoder.b2", b2);
    for (std::size_t l = 0; l < mu_w.size(); ++l) {
      const std::string s = std::to_string(l);
      f("encoder.mu_w" + s, mu_w[l]);
      f("encoder.mu_b" + s, mu_b[l]);
      f("encoder.logvar_w" + s, logvar_w[l]);
      f("encoder.logvar_b" + s, logvar_b[l]);
    }
  }
  std::vector<Tensor<T>*> tensors();
  void set_frozen(bool frozen);
};

/// Per-layer mean and log-variance blocks, each (batch * L_pS) x D.
struct EncodedPrompts {
  std::vector<Var> mu;
  std::vector<Var> logvar;
};

/// Runs the encoder on precomputed backbone features (batch x D).
/// `tip` may be null when the invariant block is disabled.
template <class T>
EncodedPrompts encode(Graph<T>& g, EncoderHeads<T>& heads, TipBlock<T>* tip, Var features);

/// Base-task prompt-feature average, one L_pS x D block per prompted layer.
template <class T>
struct PromptAverage {
  std::vector<Tensor<T>> layers;
  std::size_t sample_count = 0;
  std::size_t task_index = 0;
};

enum class Mode { train, eval };

/// Per-layer mu^l for a batch of images (one image per row). In training
/// mode `input_noise` (same shape as `images`) perturbs the images before
/// the frozen backbone; eval mode rejects any noise.
template <class T>
std::vector<Tensor<T>> encode_mean(vit::VisionTransformer<T>& backbone, TipBlock<T>* tip,
                                   EncoderHeads<T>& heads, const Tensor<T>& images, Mode mode,
                                   const std::optional<Tensor<T>>& input_noise = std::nullopt);

/// Per-layer diagonal variances exp(logvar), each (batch * L_pS) x D.
template <class T>
std::vector<Tensor<T>> encode_sigma(vit::VisionTransformer<T>& backbone, TipBlock<T>* tip,
                                    EncoderHeads<T>& heads, const Tensor<T>& images);

/// Per-layer mean of mu^l over precomputed clean backbone features
/// (n x D), accumulated in dataset order.
template <class T>
std::vector<Tensor<T>> mean_prompt_features(TipBlock<T>* tip, EncoderHeads<T>& heads,
                                            const Tensor<T>& features, std::size_t chunk = 64);

/// p_avg^l = mean over the images of mu^l (eval mode, no noise).
template <class T>
PromptAverage<T> compute_p_avg(vit::VisionTransformer<T>& backbone, TipBlock<T>* tip,
                               EncoderHeads<T>& heads, const Tensor<T>& images);

/// p_avg^l <- beta * p_avg^l + (1 - beta) * task_mean^l.
template <class T>
void ema_blend(PromptAverage<T>& avg, const std::vector<Tensor<T>>& task_mean, double beta);

/// Computes the task mean of mu^l over `images` and applies ema_blend.
template <class T>
void ema_update(PromptAverage<T>& avg, vit::VisionTransformer<T>& backbone, TipBlock<T>* tip,
                EncoderHeads<T>& heads, const Tensor<T>& images, double beta, std::size_t task);

/// p_S = alpha * p_avg + (1 - alpha) * mu, blockwise.
template <class T>
Tensor<T> make_tsp(const Tensor<T>& mu, const Tensor<T>& p_avg, double alpha);

/// Graph form for a batch: mu is (batch * L) x D, p_avg is L x D.
template <class T>
Var make_tsp(Graph<T>& g, Var mu, const Tensor<T>& p_avg, double alpha, std::size_t batch);

/// [p_I ; p_S] per sample for a batch: tip is L_pI x D (shared), tsp is
/// (batch * L_pS) x D. Either part may be absent.
template <class T>
Var assemble_prompts(Graph<T>& g, std::optional<Var> tip, std::optional<Var> tsp, std::size_t batch);

}  // namespace asp::prompt

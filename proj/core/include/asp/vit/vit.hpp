#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "asp/tensor/graph.hpp"
#include "asp/tensor/rng.hpp"
#include "asp/tensor/tensor.hpp"

namespace asp::vit {

using tensor::Graph;
using tensor::RngStream;
using tensor::Tensor;
using tensor::Var;

struct ViTConfig {
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t patch_size = 8;
  std::size_t embed_dim = 64;
  std::size_t num_layers = 6;
  std::size_t num_heads = 4;
  std::size_t mlp_ratio = 2;

  /// Throws ConfigError on an inconsistent geometry.
  void validate() const;
  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t pixels() const { return image_size * image_size * channels; }
  bool operator==(const ViTConfig&) const = default;
};

template <class T>
struct BlockParams {
  Tensor<T> ln1_gamma, ln1_beta;
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<T> ln2_gamma, ln2_beta;
  Tensor<T> w1, b1, w2, b2;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "ln1_gamma", ln1_gamma);
    f(prefix + "ln1_beta", ln1_beta);
    f(prefix + "wq", wq);
    f(prefix + "bq", bq);
    f(prefix + "wk", wk);
    f(prefix + "bk", bk);
    f(prefix + "wv", wv);
    f(prefix + "bv", bv);
    f(prefix + "wo", wo);
    f(prefix + "bo", bo);
    f(prefix + "ln2_gamma", ln2_gamma);
    f(prefix + "ln2_beta", ln2_beta);
    f(prefix + "w1", w1);
    f(prefix + "b1", b1);
    f(prefix + "w2", w2);
    f(prefix + "b2", b2);
  }
};

/// Backbone weights. Positional embeddings cover the class token and the
/// patch tokens only; prompt tokens never receive one.
template <class T>
struct ViTParams {
  Tensor<T> patch_w, patch_b;
  Tensor<T> cls;
  Tensor<T> pos;
  std::vector<BlockParams<T>> blocks;
  Tensor<T> ln_gamma, ln_beta;

  static ViTParams init(const ViTConfig& config, RngStream& rng);

  template <class F>
  void visit(F&& f) {
    f("vit.patch_w", patch_w);
    f("vit.patch_b", patch_b);
    f("vit.cls", cls);
    f("vit.pos", pos);
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      blocks[l].visit("vit.block" + std::to_string(l) + ".", f);
    }
    f("vit.ln_gamma", ln_gamma);
    f("vit.ln_beta", ln_beta);
  }

  std::vector<Tensor<T>*> tensors();
  void set_frozen(bool frozen);
  bool all_frozen();
};

/// Input sequence and attention of one transformer layer for one sample.
template <class T>
struct LayerActivation {
  Tensor<T> tokens;                  // seq x D, prompts included
  std::vector<Tensor<T>> attention;  // one seq x seq matrix per head
  std::size_t prompt_begin = 1;
  std::size_t prompt_count = 0;
};

/// activations[layer][sample]
template <class T>
using ForwardTrace = std::vector<std::vector<LayerActivation<T>>>;

/// Prompts to prepend per layer. `prompts[i]` is a (batch * length) x D
/// variable for layer `layers[i]`; all blocks share the same `length`.
struct PromptInjection {
  std::vector<std::size_t> layers;
  std::vector<Var> prompts;
  std::size_t length = 0;
};

template <class T>
class VisionTransformer {
 public:
  VisionTransformer() = default;
  VisionTransformer(ViTConfig config, ViTParams<T> params);
  static VisionTransformer init(const ViTConfig& config, RngStream& rng);

  const ViTConfig& config() const { return config_; }
  ViTParams<T>& params() { return params_; }
  const ViTParams<T>& params() const { return params_; }

  /// Rearranges a batch of H x W x C images (one image per row of
  /// `images`) into (batch * L_x) x patch_dim patch rows.
  Tensor<T> patchify(const Tensor<T>& images) const;

  /// Linear patch projection plus positional embedding: (batch*L_x) x D.
  Var patch_embed(Graph<T>& g, const Tensor<T>& images);

  /// [cls ; x^e] per sample with positional embeddings: (batch*(1+L_x)) x D.
  Var embed(Graph<T>& g, const Tensor<T>& images);

  /// One pre-norm transformer block. When `prompts` is set, the prompt rows
  /// are inserted right after the class token of every sample, attended
  /// over, and dropped again from the output.
  Var block(Graph<T>& g, std::size_t layer, Var h, std::size_t batch, std::optional<Var> prompts,
            std::size_t prompt_len, std::vector<LayerActivation<T>>* trace = nullptr);

  /// Class-token feature (batch x D) after the final layer norm.
  Var forward(Graph<T>& g, const Tensor<T>& images, const PromptInjection& injection,
              ForwardTrace<T>* trace = nullptr);

  /// Prompt-free features without recording gradients.
  Tensor<T> features(const Tensor<T>& images);

 private:
  ViTConfig config_;
  ViTParams<T> params_;
};

/// [cls ; prompts ; x^e] for a single sample. `prompts` may be absent.
template <class T>
Var assemble_input(Graph<T>& g, Var cls, std::optional<Var> prompts, Var patches);

/// Attention weights A[i][j] for every query i onto the prompt tokens
/// [begin, begin + count): result[head] is seq x count.
template <class T>
std::vector<Tensor<T>> attention_to_prompts(const LayerActivation<T>& activation, std::size_t begin,
                                            std::size_t count);

extern template class VisionTransformer<float>;
extern template class VisionTransformer<double>;

}  // namespace asp::vit

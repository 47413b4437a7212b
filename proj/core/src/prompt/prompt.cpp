#include "asp/prompt/prompt.hpp"

#include <algorithm>
#include <cmath>

namespace asp::prompt {

void PromptConfig::validate() const {
  if (use_tip && use_tsp && tip_length != tsp_length) {
    throw ConfigError("prompt: invariant and specific prompt lengths must match (" +
                      std::to_string(tip_length) + " vs " + std::to_string(tsp_length) + ")");
  }
  if ((use_tip && tip_length == 0) || (use_tsp && tsp_length == 0)) {
    throw ConfigError("prompt: enabled prompt blocks need a positive length");
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("prompt: alpha must lie in [0, 1]");
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("prompt: beta must lie in [0, 1]");
  if (!(input_noise >= 0.0)) throw ConfigError("prompt: input noise must be non-negative");
  if (use_tsp && encoder_hidden == 0) throw ConfigError("prompt: encoder hidden width must be positive");
}

// -- TipBlock -------------------------------------------------------------------------

template <class T>
TipBlock<T> TipBlock<T>::init(std::size_t layers, std::size_t length, std::size_t dim, bool tied,
                              RngStream& rng) {
  TipBlock b;
  b.length_ = length;
  b.dim_ = dim;
  b.tied_ = tied;
  for (std::size_t l = 0; l < layers; ++l) {
    Tensor<T> t({tied ? std::size_t{1} : length, dim});
    for (auto& x : t.data()) x = static_cast<T>(0.02 * rng.normal());
    t.set_requires_grad(true);
    b.params_.push_back(std::move(t));
  }
  return b;
}

template <class T>
Var TipBlock<T>::tokens(Graph<T>& g, std::size_t slot) {
  const Var p = g.param(params_.at(slot));
  if (!tied_) return p;
  return g.gather_rows(p, std::vector<std::uint32_t>(length_, 0));
}

template <class T>
Tensor<T> TipBlock<T>::materialize(std::size_t slot) const {
  const auto& p = params_.at(slot);
  if (!tied_) return p;
  Tensor<T> out({length_, dim_});
  for (std::size_t i = 0; i < length_; ++i) std::copy(p.data().begin(), p.data().end(), out.row(i).begin());
  return out;
}

template <class T>
void TipBlock<T>::set_frozen(bool frozen) {
  for (auto& p : params_) {
    p.set_requires_grad(!frozen);
    p.clear_grad();
  }
}

// -- EncoderHeads -----------------------------------------------------------------------

template <class T>
EncoderHeads<T> EncoderHeads<T>::init(std::size_t layers, std::size_t tip_tokens,
                                      std::size_t tsp_tokens, std::size_t dim, std::size_t hidden,
                                      RngStream& rng) {
  auto gaussian = [&rng](std::size_t r, std::size_t c, double sd) {
    Tensor<T> t({r, c});
    for (auto& x : t.data()) x = static_cast<T>(sd * rng.normal());
    t.set_requires_grad(true);
    return t;
  };
  auto zeros = [](std::size_t r, std::size_t c) {
    Tensor<T> t({r, c});
    t.set_requires_grad(true);
    return t;
  };
  const std::size_t in = tip_tokens * dim + dim;
  const std::size_t out = tsp_tokens * dim;
  EncoderHeads h;
  h.w1 = gaussian(in, hidden, 1.0 / std::sqrt(double(in)));
  h.b1 = zeros(1, hidden);
  h.w2 = gaussian(hidden, hidden, 1.0 / std::sqrt(double(hidden)));
  h.b2 = zeros(1, hidden);
  for (std::size_t l = 0; l < layers; ++l) {
    h.mu_w.push_back(gaussian(hidden, out, 1.0 / std::sqrt(double(hidden))));
    h.mu_b.push_back(zeros(1, out));
    h.logvar_w.push_back(zeros(hidden, out));
    h.logvar_b.push_back(zeros(1, out));
  }
  return h;
}

template <class T>
std::vector<Tensor<T>*> EncoderHeads<T>::tensors() {
  std::vector<Tensor<T>*> out;
  visit([&](const std::string&, Tensor<T>& t) { out.push_back(&t); });
  return out;
}

template <class T>
void EncoderHeads<T>::set_frozen(bool frozen) {
  for (auto* t : tensors()) {
    t->set_requires_grad(!frozen);
    t->clear_grad();
  }
}

template <class T>
EncodedPrompts encode(Graph<T>& g, EncoderHeads<T>& heads, TipBlock<T>* tip, Var features) {
  const std::size_t batch = g.value(features).rows();
  const std::size_t dim = g.value(features).cols();
  const std::size_t slots = heads.layers();
  if (tip && tip->layers() != slots) {
    throw DimensionError("encode: " + std::to_string(tip->layers()) + " prompt layers vs " +
                         std::to_string(slots) + " encoder heads");
  }
  const std::size_t expected_in = (tip ? tip->length() * tip->dim() : 0) + dim;
  if (heads.w1.rows() != expected_in) {
    throw DimensionError("encode: trunk expects " + std::to_string(heads.w1.rows()) +
                         " inputs, got " + std::to_string(expected_in));
  }
  std::vector<Var> inputs;
  for (std::size_t s = 0; s < slots; ++s) {
    if (tip) {
      const Var flat = g.reshape(tip->tokens(g, s), {1, tip->length() * tip->dim()});
      const Var tiled = g.gather_rows(flat, std::vector<std::uint32_t>(batch, 0));
      inputs.push_back(g.concat_cols(tiled, features));
    } else {
      inputs.push_back(features);
    }
  }
  const Var x = slots == 1 ? inputs[0] : g.concat_rows(inputs);
  const Var h1 = g.gelu(g.linear(x, g.param(heads.w1), g.param(heads.b1)));
  const Var h2 = g.gelu(g.linear(h1, g.param(heads.w2), g.param(heads.b2)));
  const std::size_t tokens = heads.tsp_tokens(dim);
  EncodedPrompts out;
  for (std::size_t s = 0; s < slots; ++s) {
    Var hs = h2;
    if (slots > 1) {
      std::vector<std::uint32_t> rows(batch);
      for (std::size_t b = 0; b < batch; ++b) rows[b] = static_cast<std::uint32_t>(s * batch + b);
      hs = g.gather_rows(h2, std::move(rows));
    }
    const Var mu = g.linear(hs, g.param(heads.mu_w[s]), g.param(heads.mu_b[s]));
    const Var lv = g.linear(hs, g.param(heads.logvar_w[s]), g.param(heads.logvar_b[s]));
    out.mu.push_back(g.reshape(mu, {batch * tokens, dim}));
    out.logvar.push_back(g.reshape(lv, {batch * tokens, dim}));
  }
  return out;
}

namespace {

template <class T>
Tensor<T> perturbed(const Tensor<T>& images, prompt::Mode mode, const std::optional<Tensor<T>>& noise) {
  if (!noise) return images;
  if (mode == Mode::eval) {
    for (T x : noise->data()) {
      if (x != T{0}) throw ContractError("encode_mean: input noise requested in eval mode");
    }
    return images;
  }
  if (noise->shape() != images.shape()) {
    throw DimensionError("encode_mean: noise " + tensor::shape_string(noise->shape()) + " vs images " +
                         tensor::shape_string(images.shape()));
  }
  Tensor<T> out = images;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += (*noise)[i];
  return out;
}

}  // namespace

template <class T>
std::vector<Tensor<T>> encode_mean(vit::VisionTransformer<T>& backbone, TipBlock<T>* tip,
                                   EncoderHeads<T>& heads, const Tensor<T>& images, Mode mode,
                                   const std::optional<Tensor<T>>& input_noise) {
  const Tensor<T> x = perturbed(images, mode, input_noise);
  Graph<T> g;
  const Var feats = g.constant(backbone.features(x));
  const EncodedPrompts enc = encode(g, heads, tip, feats);
  std::vector<Tensor<T>> out;
  for (Var v : enc.mu) out.push_back(g.value(v));
  return out;
}

template <class T>
std::vector<Tensor<T>> encode_sigma(vit::VisionTransformer<T>& backbone, TipBlock<T>* tip,
                                    EncoderHeads<T>& heads, const Tensor<T>& images) {
  Graph<T> g;
  const Var feats = g.constant(backbone.features(images));
  const EncodedPrompts enc = encode(g, heads, tip, feats);
  std::vector<Tensor<T>> out;
  for (Var v : enc.logvar) {
    Tensor<T> s = g.value(v);
    for (auto& x : s.data()) x = std::exp(x);
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

template <class T>
Tensor<T> backbone_features(vit::VisionTransformer<T>& backbone, const Tensor<T>& images,
                            std::size_t chunk = 64) {
  const std::size_t n = images.rows();
  const std::size_t dim = backbone.config().embed_dim;
  Tensor<T> out({n, dim});
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t count = std::min(chunk, n - start);
    Tensor<T> part({count, images.cols()},
                   std::vector<T>(images.data().begin() + start * images.cols(),
                                  images.data().begin() + (start + count) * images.cols()));
    const Tensor<T> f = backbone.features(part);
    std::copy(f.data().begin(), f.data().end(), out.data().begin() + start * dim);
  }
  return out;
}

}  // namespace

template <class T>
std::vector<Tensor<T>> mean_prompt_features(TipBlock<T>* tip, EncoderHeads<T>& heads,
                                            const Tensor<T>& features, std::size_t chunk) {
  const std::size_t n = features.rows();
  if (n == 0 || features.numel() == 0) throw ContractError("mean_prompt_features: empty input");
  const std::size_t dim = features.cols();
  const std::size_t block = heads.tsp_tokens(dim) * dim;
  std::vector<std::vector<double>> sums(heads.layers(), std::vector<double>(block, 0.0));
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t count = std::min(chunk, n - start);
    Tensor<T> part({count, dim}, std::vector<T>(features.data().begin() + start * dim,
                                                features.data().begin() + (start + count) * dim));
    Graph<T> g;
    const EncodedPrompts enc = encode(g, heads, tip, g.constant(std::move(part)));
    for (std::size_t l = 0; l < enc.mu.size(); ++l) {
      const auto& mu = g.value(enc.mu[l]);
      for (std::size_t b = 0; b < count; ++b)
        for (std::size_t i = 0; i < block; ++i) sums[l][i] += mu[b * block + i];
    }
  }
  std::vector<Tensor<T>> out;
  for (const auto& s : sums) {
    Tensor<T> t({block / dim, dim});
    for (std::size_t i = 0; i < block; ++i) t[i] = static_cast<T>(s[i] / double(n));
    out.push_back(std::move(t));
  }
  return out;
}

template <class T>
PromptAverage<T> compute_p_avg(vit::VisionTransformer<T>& backbone, TipBlock<T>* tip,
                               EncoderHeads<T>& heads, const Tensor<T>& images) {
  if (images.rows() == 0 || images.numel() == 0) throw ContractError("compute_p_avg: empty dataset");
  PromptAverage<T> avg;
  avg.layers = mean_prompt_features(tip, heads, backbone_features(backbone, images));
  avg.sample_count = images.rows();
  avg.task_index = 0;
  return avg;
}

template <class T>
void ema_blend(PromptAverage<T>& avg, const std::vector<Tensor<T>>& task_mean, double beta) {
  if (task_mean.size() != avg.layers.size()) {
    throw DimensionError("ema_update: " + std::to_string(task_mean.size()) + " layers vs " +
                         std::to_string(avg.layers.size()));
  }
  if (!(beta >= 0.0 && beta <= 1.0)) throw ContractError("ema_update: beta must lie in [0, 1]");
  const T keep = static_cast<T>(beta);
  const T take = static_cast<T>(1.0 - beta);
  for (std::size_t l = 0; l < avg.layers.size(); ++l) {
    if (task_mean[l].shape() != avg.layers[l].shape()) {
      throw DimensionError("ema_update: layer block " + tensor::shape_string(task_mean[l].shape()) +
                           " vs " + tensor::shape_string(avg.layers[l].shape()));
    }
    if (beta == 1.0) continue;
    for (std::size_t i = 0; i < avg.layers[l].numel(); ++i) {
      avg.layers[l][i] = keep * avg.layers[l][i] + take * task_mean[l][i];
    }
  }
}

template <class T>
void ema_update(PromptAverage<T>& avg, vit::VisionTransformer<T>& backbone, TipBlock<T>* tip,
                EncoderHeads<T>& heads, const Tensor<T>& images, double beta, std::size_t task) {
  if (task == 0) throw ContractError("ema_update: only incremental tasks (t >= 1) update p_avg");
  if (images.rows() == 0 || images.numel() == 0) throw ContractError("ema_update: empty task data");
  ema_blend(avg, mean_prompt_features(tip, heads, backbone_features(backbone, images)), beta);
  avg.task_index = task;
}

template <class T>
Tensor<T> make_tsp(const Tensor<T>& mu, const Tensor<T>& p_avg, double alpha) {
  if (mu.shape() != p_avg.shape()) {
    throw DimensionError("make_tsp: mu " + tensor::shape_string(mu.shape()) + " vs p_avg " +
                         tensor::shape_string(p_avg.shape()));
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractError("make_tsp: alpha must lie in [0, 1]");
  if (alpha == 1.0) return p_avg;
  if (alpha == 0.0) return mu;
  Tensor<T> out(mu.shape());
  const T a = static_cast<T>(alpha);
  const T b = static_cast<T>(1.0 - alpha);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a * p_avg[i] + b * mu[i];
  return out;
}

template <class T>
Var make_tsp(Graph<T>& g, Var mu, const Tensor<T>& p_avg, double alpha, std::size_t batch) {
  const auto& M = g.value(mu);
  if (M.cols() != p_avg.cols() || M.rows() != batch * p_avg.rows()) {
    throw DimensionError("make_tsp: mu " + tensor::shape_string(M.shape()) + " vs p_avg " +
                         tensor::shape_string(p_avg.shape()) + " for batch " + std::to_string(batch));
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractError("make_tsp: alpha must lie in [0, 1]");
  if (alpha == 0.0) return mu;
  std::vector<std::uint32_t> tile;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < p_avg.rows(); ++j) tile.push_back(static_cast<std::uint32_t>(j));
  const Var avg = g.gather_rows(g.constant(p_avg), std::move(tile));
  if (alpha == 1.0) return avg;
  return g.add(g.scale(avg, static_cast<T>(alpha)), g.scale(mu, static_cast<T>(1.0 - alpha)));
}

template <class T>
Var assemble_prompts(Graph<T>& g, std::optional<Var> tip, std::optional<Var> tsp, std::size_t batch) {
  if (!tip && !tsp) throw ContractError("assemble_prompts: no prompt blocks");
  if (!tip) return *tsp;
  const std::size_t li = g.value(*tip).rows();
  if (!tsp) {
    std::vector<std::uint32_t> tile;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t j = 0; j < li; ++j) tile.push_back(static_cast<std::uint32_t>(j));
    return g.gather_rows(*tip, std::move(tile));
  }
  if (g.value(*tip).cols() != g.value(*tsp).cols()) {
    throw DimensionError("assemble_prompts: width " + std::to_string(g.value(*tip).cols()) + " vs " +
                         std::to_string(g.value(*tsp).cols()));
  }
  const std::size_t ls = g.value(*tsp).rows() / batch;
  const Var both[] = {*tip, *tsp};
  const Var stacked = g.concat_rows(both);
  std::vector<std::uint32_t> order;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = 0; j < li; ++j) order.push_back(static_cast<std::uint32_t>(j));
    for (std::size_t j = 0; j < ls; ++j) order.push_back(static_cast<std::uint32_t>(li + b * ls + j));
  }
  return g.gather_rows(stacked, std::move(order));
}

#define ASP_PROMPT_INSTANTIATE(T)                                                                    \
  template class TipBlock<T>;                                                                        \
  template struct EncoderHeads<T>;                                                                   \
  template EncodedPrompts encode<T>(Graph<T>&, EncoderHeads<T>&, TipBlock<T>*, Var);                 \
  template std::vector<Tensor<T>> encode_mean<T>(vit::VisionTransformer<T>&, TipBlock<T>*,           \
                                                 EncoderHeads<T>&, const Tensor<T>&, Mode,           \
                                                 const std::optional<Tensor<T>>&);                   \
  template std::vector<Tensor<T>> encode_sigma<T>(vit::VisionTransformer<T>&, TipBlock<T>*,          \
                                                  EncoderHeads<T>&, const Tensor<T>&);               \
  template std::vector<Tensor<T>> mean_prompt_features<T>(TipBlock<T>*, EncoderHeads<T>&,             \
                                                          const Tensor<T>&, std::size_t);           \
  template PromptAverage<T> compute_p_avg<T>(vit::VisionTransformer<T>&, TipBlock<T>*,               \
                                             EncoderHeads<T>&, const Tensor<T>&);                    \
  template void ema_blend<T>(PromptAverage<T>&, const std::vector<Tensor<T>>&, double);              \
  template void ema_update<T>(PromptAverage<T>&, vit::VisionTransformer<T>&, TipBlock<T>*,           \
                              EncoderHeads<T>&, const Tensor<T>&, double, std::size_t);              \
  template Tensor<T> make_tsp<T>(const Tensor<T>&, const Tensor<T>&, double);                        \
  template Var make_tsp<T>(Graph<T>&, Var, const Tensor<T>&, double, std::size_t);                   \
  template Var assemble_prompts<T>(Graph<T>&, std::optional<Var>, std::optional<Var>, std::size_t);

ASP_PROMPT_INSTANTIATE(float)
ASP_PROMPT_INSTANTIATE(double)

}  // namespace asp::prompt

#include "asp/runner/model.hpp"

#include <algorithm>

namespace asp::runner {

namespace {

template <class T>
Tensor<T> slice_rows(const Tensor<T>& t, std::size_t begin, std::size_t count) {
  const std::size_t c = t.cols();
  return Tensor<T>({count, c}, std::vector<T>(t.data().begin() + begin * c, t.data().begin() + (begin + count) * c));
}

template <class T>
void place_rows(Tensor<T>& dst, std::size_t begin, const Tensor<T>& src) {
  std::copy(src.data().begin(), src.data().end(), dst.data().begin() + begin * dst.cols());
}

}  // namespace

template <class T>
AspModel<T>::AspModel(vit::VisionTransformer<T> backbone, prompt::PromptConfig prompt,
                      objective::LossConfig loss, std::vector<std::int64_t> base_classes, RngStream& rng)
    : backbone_(std::move(backbone)), prompt_(std::move(prompt)), loss_(loss) {
  prompt_.validate();
  loss_.validate();
  const std::size_t dim = backbone_.config().embed_dim;
  const std::size_t slots = prompt_.layers.size();
  RngStream tip_rng = rng.split(1), enc_rng = rng.split(2), cls_rng = rng.split(3);
  if (prompt_.use_tip) tip_ = prompt::TipBlock<T>::init(slots, prompt_.tip_length, dim, prompt_.tied_tip, tip_rng);
  if (prompt_.use_tsp) {
    encoder_ = prompt::EncoderHeads<T>::init(slots, prompt_.use_tip ? prompt_.tip_length : 0, prompt_.tsp_length,
                                             dim, prompt_.encoder_hidden, enc_rng);
    p_avg_.layers.assign(slots, Tensor<T>({prompt_.tsp_length, dim}));
  }
  classifier_ = classifier::ClassifierState<T>::trainable(std::move(base_classes), dim, cls_rng);
}

template <class T>
typename AspModel<T>::Pass AspModel<T>::forward(Graph<T>& g, const Tensor<T>& images,
                                                const Tensor<T>* encoder_input, prompt::Mode mode,
                                                RngStream* rng, vit::ForwardTrace<T>* trace) {
  const std::size_t batch = images.rows();
  Pass pass;
  vit::PromptInjection injection;
  injection.layers = prompt_.layers;
  injection.length = prompt_.prompt_length();
  if (encoder_) {
    if (!encoder_input) throw ContractError("AspModel: task-specific prompts need encoder input features");
    pass.encoded = prompt::encode(g, *encoder_, tip(), g.constant(*encoder_input));
  }
  for (std::size_t s = 0; s < prompt_.layers.size(); ++s) {
    std::optional<Var> tip_tokens, tsp;
    if (tip_) tip_tokens = tip_->tokens(g, s);
    if (encoder_) {
      Var p = pass.encoded.mu[s];
      if (mode == prompt::Mode::train && prompt_.reparameterize) {
        if (!rng) throw ContractError("AspModel: training forward needs a random stream");
        const Var sigma = g.exp(g.scale(pass.encoded.logvar[s], T(0.5)));
        p = g.add(p, g.mul(sigma, g.normal(*rng, g.shape(p))));
      }
      tsp = prompt::make_tsp(g, p, p_avg_.layers.at(s), prompt_.alpha, batch);
    }
    injection.prompts.push_back(prompt::assemble_prompts(g, tip_tokens, tsp, batch));
  }
  pass.features = backbone_.forward(g, images, injection, trace);
  return pass;
}

template <class T>
Var AspModel<T>::training_loss(Graph<T>& g, const Tensor<T>& images, std::span<const std::size_t> rows,
                               const Tensor<T>* anchors, RngStream& rng) {
  Tensor<T> noisy = images;
  if (prompt_.input_noise > 0.0) {
    for (auto& x : noisy.data()) x += static_cast<T>(prompt_.input_noise * rng.normal());
  }
  std::optional<Tensor<T>> enc_in;
  if (encoder_) enc_in = backbone_.features(noisy);
  const Pass pass = forward(g, noisy, enc_in ? &*enc_in : nullptr, prompt::Mode::train, &rng);
  const Var cos = objective::cosine_logits(g, pass.features, g.param(classifier_.weights()));
  const Var ib = objective::ib_loss(g, cos, rows, pass.encoded.mu, pass.encoded.logvar, loss_);
  std::optional<Var> anchor;
  if (anchors && loss_.lambda > 0.0) anchor = objective::anchor_loss(g, pass.features, *anchors, rows);
  return objective::total_loss(g, ib, anchor, loss_.lambda);
}

template <class T>
Tensor<T> AspModel<T>::backbone_features(const Tensor<T>& images, std::size_t chunk) {
  Tensor<T> out({images.rows(), backbone_.config().embed_dim});
  for (std::size_t start = 0; start < images.rows(); start += chunk) {
    const std::size_t count = std::min(chunk, images.rows() - start);
    place_rows(out, start, backbone_.features(slice_rows(images, start, count)));
  }
  return out;
}

template <class T>
Tensor<T> AspModel<T>::eval_features(const Tensor<T>& images, const Tensor<T>* backbone_features,
                                     std::size_t chunk) {
  Tensor<T> out({images.rows(), backbone_.config().embed_dim});
  for (std::size_t start = 0; start < images.rows(); start += chunk) {
    const std::size_t count = std::min(chunk, images.rows() - start);
    const Tensor<T> part = slice_rows(images, start, count);
    std::optional<Tensor<T>> enc_in;
    if (encoder_) enc_in = backbone_features ? slice_rows(*backbone_features, start, count) : backbone_.features(part);
    Graph<T> g;
    const Pass pass = forward(g, part, enc_in ? &*enc_in : nullptr, prompt::Mode::eval, nullptr);
    place_rows(out, start, g.value(pass.features));
  }
  return out;
}

template <class T>
void AspModel<T>::refresh_p_avg(const Tensor<T>& backbone_features) {
  if (!encoder_) return;
  p_avg_.layers = prompt::mean_prompt_features(tip(), *encoder_, backbone_features);
  p_avg_.sample_count = backbone_features.rows();
  p_avg_.task_index = 0;
}

template <class T>
void AspModel<T>::ema_update(const Tensor<T>& backbone_features, std::size_t task) {
  if (!encoder_) return;
  if (task == 0) throw ContractError("ema_update: only incremental tasks (t >= 1) update p_avg");
  prompt::ema_blend(p_avg_, prompt::mean_prompt_features(tip(), *encoder_, backbone_features), prompt_.beta);
  p_avg_.task_index = task;
}

template <class T>
std::vector<Tensor<T>*> AspModel<T>::trainable() {
  std::vector<Tensor<T>*> out;
  if (tip_)
    for (auto& p : tip_->params()) out.push_back(&p);
  if (encoder_)
    for (auto* p : encoder_->tensors()) out.push_back(p);
  out.push_back(&classifier_.weights());
  return out;
}

template <class T>
void AspModel<T>::freeze_prompts() {
  if (tip_) tip_->set_frozen(true);
  if (encoder_) encoder_->set_frozen(true);
}

template class AspModel<float>;
template class AspModel<double>;

}  // namespace asp::runner

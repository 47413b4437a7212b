#include "asp/vit/vit.hpp"

#include <cmath>

namespace asp::vit {

void ViTConfig::validate() const {
  if (image_size == 0 || patch_size == 0 || channels == 0) {
    throw ConfigError("vit: image_size, patch_size and channels must be positive");
  }
  if (image_size % patch_size != 0) {
    throw ConfigError("vit: image_size " + std::to_string(image_size) +
                      " is not divisible by patch_size " + std::to_string(patch_size));
  }
  if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0) {
    throw ConfigError("vit: embed_dim " + std::to_string(embed_dim) +
                      " is not divisible by num_heads " + std::to_string(num_heads));
  }
  if (num_layers == 0 || mlp_ratio == 0) throw ConfigError("vit: num_layers and mlp_ratio must be positive");
}

namespace {

template <class T>
Tensor<T> gaussian(tensor::Shape shape, double stddev, RngStream& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& x : t.data()) x = static_cast<T>(rng.normal() * stddev);
  return t;
}

template <class T>
Tensor<T> ones(std::size_t d) {
  return Tensor<T>({1, d}, T{1});
}

template <class T>
Tensor<T> zeros(std::size_t d) {
  return Tensor<T>({1, d}, T{0});
}

}  // namespace

template <class T>
ViTParams<T> ViTParams<T>::init(const ViTConfig& c, RngStream& rng) {
  c.validate();
  const std::size_t D = c.embed_dim;
  const std::size_t H = D * c.mlp_ratio;
  ViTParams p;
  p.patch_w = gaussian<T>({c.patch_dim(), D}, 1.0 / std::sqrt(double(c.patch_dim())), rng);
  p.patch_b = zeros<T>(D);
  p.cls = gaussian<T>({1, D}, 0.02, rng);
  p.pos = gaussian<T>({1 + c.num_patches(), D}, 0.02, rng);
  const double sd = 1.0 / std::sqrt(double(D));
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    BlockParams<T> b;
    b.ln1_gamma = ones<T>(D);
    b.ln1_beta = zeros<T>(D);
    b.wq = gaussian<T>({D, D}, sd, rng);
    b.bq = zeros<T>(D);
    b.wk = gaussian<T>({D, D}, sd, rng);
    b.bk = zeros<T>(D);
    b.wv = gaussian<T>({D, D}, sd, rng);
    b.bv = zeros<T>(D);
    b.wo = gaussian<T>({D, D}, sd, rng);
    b.bo = zeros<T>(D);
    b.ln2_gamma = ones<T>(D);
    b.ln2_beta = zeros<T>(D);
    b.w1 = gaussian<T>({D, H}, sd, rng);
    b.b1 = zeros<T>(H);
    b.w2 = gaussian<T>({H, D}, 1.0 / std::sqrt(double(H)), rng);
    b.b2 = zeros<T>(D);
    p.blocks.push_back(std::move(b));
  }
  p.ln_gamma = ones<T>(D);
  p.ln_beta = zeros<T>(D);
  return p;
}

template <class T>
std::vector<Tensor<T>*> ViTParams<T>::tensors() {
  std::vector<Tensor<T>*> out;
  visit([&](const std::string&, Tensor<T>& t) { out.push_back(&t); });
  return out;
}

template <class T>
void ViTParams<T>::set_frozen(bool frozen) {
  for (auto* t : tensors()) {
    t->set_requires_grad(!frozen);
    t->clear_grad();
  }
}

template <class T>
bool ViTParams<T>::all_frozen() {
  for (auto* t : tensors())
    if (t->requires_grad()) return false;
  return true;
}

template <class T>
VisionTransformer<T>::VisionTransformer(ViTConfig config, ViTParams<T> params)
    : config_(config), params_(std::move(params)) {
  config_.validate();
}

template <class T>
VisionTransformer<T> VisionTransformer<T>::init(const ViTConfig& config, RngStream& rng) {
  return VisionTransformer(config, ViTParams<T>::init(config, rng));
}

template <class T>
Tensor<T> VisionTransformer<T>::patchify(const Tensor<T>& images) const {
  const auto& c = config_;
  if (images.cols() != c.pixels()) {
    throw DimensionError("patch_embed: image of " + std::to_string(images.cols()) +
                         " values, expected " + std::to_string(c.image_size) + "x" +
                         std::to_string(c.image_size) + "x" + std::to_string(c.channels));
  }
  const std::size_t batch = images.rows();
  const std::size_t grid = c.grid(), ps = c.patch_size, ch = c.channels, side = c.image_size;
  Tensor<T> out({batch * c.num_patches(), c.patch_dim()});
  for (std::size_t b = 0; b < batch; ++b) {
    const T* img = images.data().data() + b * c.pixels();
    for (std::size_t gy = 0; gy < grid; ++gy) {
      for (std::size_t gx = 0; gx < grid; ++gx) {
        T* dst = out.data().data() + (b * c.num_patches() + gy * grid + gx) * c.patch_dim();
        for (std::size_t y = 0; y < ps; ++y) {
          const T* src = img + ((gy * ps + y) * side + gx * ps) * ch;
          std::copy_n(src, ps * ch, dst + y * ps * ch);
        }
      }
    }
  }
  return out;
}

template <class T>
Var VisionTransformer<T>::patch_embed(Graph<T>& g, const Tensor<T>& images) {
  const std::size_t batch = images.rows();
  const std::size_t lx = config_.num_patches();
  const Var x = g.linear(g.constant(patchify(images)), g.param(params_.patch_w), g.param(params_.patch_b));
  std::vector<std::uint32_t> pos_index;
  pos_index.reserve(batch * lx);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < lx; ++i) pos_index.push_back(static_cast<std::uint32_t>(1 + i));
  return g.add(x, g.gather_rows(g.param(params_.pos), std::move(pos_index)));
}

template <class T>
Var VisionTransformer<T>::embed(Graph<T>& g, const Tensor<T>& images) {
  const std::size_t batch = images.rows();
  const std::size_t lx = config_.num_patches();
  const Var patches = patch_embed(g, images);
  const Var cls = g.add(g.param(params_.cls), g.gather_rows(g.param(params_.pos), {0}));
  const Var both[] = {cls, patches};
  const Var stacked = g.concat_rows(both);
  std::vector<std::uint32_t> order;
  order.reserve(batch * (1 + lx));
  for (std::size_t b = 0; b < batch; ++b) {
    order.push_back(0);
    for (std::size_t i = 0; i < lx; ++i) order.push_back(static_cast<std::uint32_t>(1 + b * lx + i));
  }
  return g.gather_rows(stacked, std::move(order));
}

template <class T>
Var VisionTransformer<T>::block(Graph<T>& g, std::size_t layer, Var h, std::size_t batch,
                                std::optional<Var> prompts, std::size_t prompt_len,
                                std::vector<LayerActivation<T>>* trace) {
  auto& p = params_.blocks.at(layer);
  const std::size_t D = config_.embed_dim;
  if (g.value(h).cols() != D || g.value(h).rows() % batch != 0) {
    throw DimensionError("msa_layer: token matrix " + tensor::shape_string(g.shape(h)) +
                         " does not hold " + std::to_string(batch) + " sequences of width " +
                         std::to_string(D));
  }
  const std::size_t sh = g.value(h).rows() / batch;
  std::size_t lp = 0;
  Var x = h;
  if (prompts) {
    lp = prompt_len;
    const auto& P = g.value(*prompts);
    if (P.cols() != D || P.rows() != batch * lp) {
      throw DimensionError("msa_layer: prompt block " + tensor::shape_string(P.shape()) +
                           " does not match " + std::to_string(batch) + " x " + std::to_string(lp) +
                           " tokens of width " + std::to_string(D));
    }
    const Var both[] = {h, *prompts};
    const Var stacked = g.concat_rows(both);
    std::vector<std::uint32_t> order;
    order.reserve(batch * (sh + lp));
    for (std::size_t b = 0; b < batch; ++b) {
      order.push_back(static_cast<std::uint32_t>(b * sh));
      for (std::size_t j = 0; j < lp; ++j) order.push_back(static_cast<std::uint32_t>(batch * sh + b * lp + j));
      for (std::size_t i = 1; i < sh; ++i) order.push_back(static_cast<std::uint32_t>(b * sh + i));
    }
    x = g.gather_rows(stacked, std::move(order));
  }
  const std::size_t seq = sh + lp;

  const Var a = g.layer_norm_rows(x, g.param(p.ln1_gamma), g.param(p.ln1_beta));
  const Var q = g.linear(a, g.param(p.wq), g.param(p.bq));
  const Var k = g.linear(a, g.param(p.wk), g.param(p.bk));
  const Var v = g.linear(a, g.param(p.wv), g.param(p.bv));
  std::vector<Tensor<T>> probs;
  const Var att = g.attention(q, k, v, batch, seq, config_.num_heads, trace ? &probs : nullptr);
  Var y = g.add(x, g.linear(att, g.param(p.wo), g.param(p.bo)));
  const Var m = g.layer_norm_rows(y, g.param(p.ln2_gamma), g.param(p.ln2_beta));
  const Var hidden = g.gelu(g.linear(m, g.param(p.w1), g.param(p.b1)));
  y = g.add(y, g.linear(hidden, g.param(p.w2), g.param(p.b2)));

  if (trace) {
    const auto& X = g.value(x);
    for (std::size_t b = 0; b < batch; ++b) {
      LayerActivation<T> act;
      act.tokens = Tensor<T>({seq, D}, std::vector<T>(X.data().begin() + b * seq * D,
                                                      X.data().begin() + (b + 1) * seq * D));
      for (std::size_t hh = 0; hh < config_.num_heads; ++hh) {
        act.attention.push_back(std::move(probs[b * config_.num_heads + hh]));
      }
      act.prompt_begin = 1;
      act.prompt_count = lp;
      trace->push_back(std::move(act));
    }
  }

  if (lp == 0) return y;
  std::vector<std::uint32_t> keep;
  keep.reserve(batch * sh);
  for (std::size_t b = 0; b < batch; ++b) {
    keep.push_back(static_cast<std::uint32_t>(b * seq));
    for (std::size_t i = 1; i < sh; ++i) keep.push_back(static_cast<std::uint32_t>(b * seq + lp + i));
  }
  return g.gather_rows(y, std::move(keep));
}

template <class T>
Var VisionTransformer<T>::forward(Graph<T>& g, const Tensor<T>& images,
                                  const PromptInjection& injection, ForwardTrace<T>* trace) {
  if (injection.prompts.size() != injection.layers.size()) {
    throw ConfigError("vit_forward: " + std::to_string(injection.layers.size()) +
                      " prompted layers configured but " + std::to_string(injection.prompts.size()) +
                      " prompt blocks supplied");
  }
  for (std::size_t l : injection.layers) {
    if (l >= config_.num_layers) {
      throw ConfigError("vit_forward: prompt layer " + std::to_string(l) + " beyond depth " +
                        std::to_string(config_.num_layers));
    }
  }
  const std::size_t batch = images.rows();
  Var h = embed(g, images);
  if (trace) trace->assign(config_.num_layers, {});
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    std::optional<Var> prompts;
    for (std::size_t i = 0; i < injection.layers.size(); ++i) {
      if (injection.layers[i] == l) prompts = injection.prompts[i];
    }
    h = block(g, l, h, batch, prompts, injection.length, trace ? &(*trace)[l] : nullptr);
  }
  const std::size_t sh = 1 + config_.num_patches();
  std::vector<std::uint32_t> cls_rows;
  for (std::size_t b = 0; b < batch; ++b) cls_rows.push_back(static_cast<std::uint32_t>(b * sh));
  return g.layer_norm_rows(g.gather_rows(h, std::move(cls_rows)), g.param(params_.ln_gamma),
                           g.param(params_.ln_beta));
}

template <class T>
Tensor<T> VisionTransformer<T>::features(const Tensor<T>& images) {
  Graph<T> g;
  const Var f = forward(g, images, PromptInjection{});
  return g.value(f);
}

template <class T>
Var assemble_input(Graph<T>& g, Var cls, std::optional<Var> prompts, Var patches) {
  const std::size_t d = g.value(cls).cols();
  if (g.value(patches).cols() != d) {
    throw DimensionError("assemble_input: cls width " + std::to_string(d) + " vs patch width " +
                         std::to_string(g.value(patches).cols()));
  }
  std::vector<Var> parts{cls};
  if (prompts) {
    if (g.value(*prompts).cols() != d) {
      throw DimensionError("assemble_input: cls width " + std::to_string(d) + " vs prompt width " +
                           std::to_string(g.value(*prompts).cols()));
    }
    parts.push_back(*prompts);
  }
  parts.push_back(patches);
  return g.concat_rows(parts);
}

template <class T>
std::vector<Tensor<T>> attention_to_prompts(const LayerActivation<T>& activation, std::size_t begin,
                                            std::size_t count) {
  std::vector<Tensor<T>> out;
  for (const auto& a : activation.attention) {
    const std::size_t seq = a.cols();
    if (begin + count > seq) {
      throw IndexError("attention_to_prompts: range [" + std::to_string(begin) + ", " +
                       std::to_string(begin + count) + ") exceeds sequence length " +
                       std::to_string(seq));
    }
    Tensor<T> sel({a.rows(), count});
    for (std::size_t i = 0; i < a.rows(); ++i)
      for (std::size_t j = 0; j < count; ++j) sel.at(i, j) = a.at(i, begin + j);
    out.push_back(std::move(sel));
  }
  return out;
}

template struct ViTParams<float>;
template struct ViTParams<double>;
template class VisionTransformer<float>;
template class VisionTransformer<double>;
template Var assemble_input<float>(Graph<float>&, Var, std::optional<Var>, Var);
template Var assemble_input<double>(Graph<double>&, Var, std::optional<Var>, Var);
template std::vector<Tensor<float>> attention_to_prompts<float>(const LayerActivation<float>&,
                                                                std::size_t, std::size_t);
template std::vector<Tensor<double>> attention_to_prompts<double>(const LayerActivation<double>&,
                                                                  std::size_t, std::size_t);

}  // namespace asp::vit

#include <doctest.h>

#include <cmath>
#include <vector>

#include "asp/prompt/prompt.hpp"
#include "asp/tensor/optim.hpp"
#include "support.hpp"

using namespace asp;
using namespace asp::prompt;
using asp::test::random_tensor;
using asp::test::uniform_tensor;

namespace {

constexpr std::size_t kDim = 8;

vit::ViTConfig micro_vit() {
  vit::ViTConfig c;
  c.image_size = 8;
  c.channels = 1;
  c.patch_size = 4;
  c.embed_dim = kDim;
  c.num_layers = 2;
  c.num_heads = 2;
  c.mlp_ratio = 2;
  return c;
}

struct Fixture {
  RngStream rng{21};
  vit::VisionTransformer<double> backbone = vit::VisionTransformer<double>::init(micro_vit(), rng);
  TipBlock<double> tip = TipBlock<double>::init(2, 3, kDim, true, rng);
  EncoderHeads<double> heads = EncoderHeads<double>::init(2, 3, 3, kDim, 16, rng);

  Fixture() {
    // Non-zero log-variance heads so sigma is not trivially one.
    for (auto& w : heads.logvar_w) w = random_tensor(rng, w.shape(), 0.1);
    for (auto& b : heads.mu_b) b = random_tensor(rng, b.shape(), 0.1);
  }
};

std::vector<double> gelu(std::vector<double> v) {
  for (auto& x : v) x = 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
  return v;
}

std::vector<double> affine(const std::vector<double>& x, const Tensor<double>& w, const Tensor<double>& b) {
  std::vector<double> y(w.cols());
  for (std::size_t j = 0; j < w.cols(); ++j) {
    double s = b[j];
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * w.at(i, j);
    y[j] = s;
  }
  return y;
}

}  // namespace

TEST_CASE("init_tip: tied rows, shape and untied variant") {
  RngStream rng(1);
  auto tip = TipBlock<float>::init(5, 3, 64, true, rng);
  for (std::size_t s = 0; s < 5; ++s) {
    const auto t = tip.materialize(s);
    CHECK(t.shape() == tensor::Shape{3, 64});
    for (std::size_t r = 1; r < 3; ++r) CHECK(std::equal(t.row(r).begin(), t.row(r).end(), t.row(0).begin()));
  }
  CHECK(tip.params()[0].numel() == 64);
  auto diff = TipBlock<float>::init(1, 3, 64, false, rng);
  const auto d = diff.materialize(0);
  CHECK_FALSE(std::equal(d.row(1).begin(), d.row(1).end(), d.row(0).begin()));
}

TEST_CASE("tied TIP rows stay identical under gradient steps") {
  Fixture f;
  RngStream rng(2);
  const auto images = uniform_tensor<double>(rng, {4, 64}, 0.0, 1.0);
  const auto feats = f.backbone.features(images);
  std::vector<Tensor<double>*> params{&f.tip.params()[0], &f.tip.params()[1]};
  for (auto* t : f.heads.tensors()) params.push_back(t);
  for (int step = 0; step < 10; ++step) {
    Graph<double> g;
    const auto enc = encode(g, f.heads, &f.tip, g.constant(feats));
    vit::PromptInjection inj;
    inj.layers = {0, 1};
    inj.length = 6;
    for (std::size_t s = 0; s < 2; ++s) {
      inj.prompts.push_back(assemble_prompts(g, std::optional<Var>(f.tip.tokens(g, s)), std::optional<Var>(enc.mu[s]), 4));
    }
    const Var out = f.backbone.forward(g, images, inj);
    g.backward(g.sum(g.square(g.sub(out, g.constant(random_tensor(rng, {4, kDim}))))));
    tensor::sgd_step<double>(params, 0.1);
  }
  for (std::size_t s = 0; s < 2; ++s) {
    const auto t = f.tip.materialize(s);
    for (std::size_t r = 1; r < 3; ++r) CHECK(std::equal(t.row(r).begin(), t.row(r).end(), t.row(0).begin()));
  }
}

TEST_CASE("encode_mean: shape, determinism and dense oracle") {
  Fixture f;
  RngStream rng(3);
  const auto images = uniform_tensor<double>(rng, {2, 64}, 0.0, 1.0);
  const auto a = encode_mean(f.backbone, &f.tip, f.heads, images, Mode::eval);
  const auto b = encode_mean(f.backbone, &f.tip, f.heads, images, Mode::eval);
  REQUIRE(a.size() == 2);
  CHECK(a[0].shape() == tensor::Shape{2 * 3, kDim});
  for (std::size_t l = 0; l < 2; ++l) CHECK(a[l].same_values(b[l]));

  const auto feats = f.backbone.features(images);
  for (std::size_t l = 0; l < 2; ++l) {
    const auto p = f.tip.materialize(l);
    for (std::size_t n = 0; n < 2; ++n) {
      std::vector<double> x(p.storage());
      x.insert(x.end(), feats.row(n).begin(), feats.row(n).end());
      const auto h = gelu(affine(gelu(affine(x, f.heads.w1, f.heads.b1)), f.heads.w2, f.heads.b2));
      const auto mu = affine(h, f.heads.mu_w[l], f.heads.mu_b[l]);
      for (std::size_t i = 0; i < mu.size(); ++i) CHECK(std::abs(a[l][n * mu.size() + i] - mu[i]) < 1e-10);
    }
  }

  const Tensor<double> noise({2, 64}, 0.01);
  CHECK_THROWS_AS(encode_mean(f.backbone, &f.tip, f.heads, images, Mode::eval, std::optional<Tensor<double>>(noise)), ContractError);
  const Tensor<double> zero({2, 64}, 0.0);
  const auto c = encode_mean(f.backbone, &f.tip, f.heads, images, Mode::train, std::optional<Tensor<double>>(zero));
  for (std::size_t l = 0; l < 2; ++l) CHECK(c[l].same_values(a[l]));
}

TEST_CASE("encode_sigma: unit variance at init and positivity") {
  RngStream rng(4);
  auto backbone = vit::VisionTransformer<double>::init(micro_vit(), rng);
  auto tip = TipBlock<double>::init(1, 3, kDim, true, rng);
  auto heads = EncoderHeads<double>::init(1, 3, 3, kDim, 16, rng);
  const auto images = uniform_tensor<double>(rng, {3, 64}, 0.0, 1.0);
  const auto unit = encode_sigma(backbone, &tip, heads, images);
  for (double v : unit[0].storage()) CHECK(v == 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    heads.logvar_w[0] = random_tensor(rng, heads.logvar_w[0].shape(), 2.0);
    heads.logvar_b[0] = random_tensor(rng, heads.logvar_b[0].shape(), 2.0);
    const auto sigma = encode_sigma(backbone, &tip, heads, images);
    for (double v : sigma[0].storage()) CHECK(v > 0.0);
  }
}

TEST_CASE("compute_p_avg: single sample, pair mean and streaming oracle") {
  Fixture f;
  RngStream rng(5);
  const auto one = uniform_tensor<double>(rng, {1, 64}, 0.0, 1.0);
  const auto avg1 = compute_p_avg(f.backbone, &f.tip, f.heads, one);
  const auto mu1 = encode_mean(f.backbone, &f.tip, f.heads, one, Mode::eval);
  CHECK(avg1.sample_count == 1);
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t i = 0; i < mu1[l].numel(); ++i) CHECK(std::abs(avg1.layers[l][i] - mu1[l][i]) < 1e-12);

  const auto many = uniform_tensor<double>(rng, {50, 64}, 0.0, 1.0);
  const auto avg = compute_p_avg(f.backbone, &f.tip, f.heads, many);
  CHECK(avg.sample_count == 50);
  const auto mu = encode_mean(f.backbone, &f.tip, f.heads, many, Mode::eval);
  const std::size_t block = 3 * kDim;
  for (std::size_t l = 0; l < 2; ++l) {
    // Welford-style running mean, a different summation than the library's.
    std::vector<double> running(block, 0.0);
    for (std::size_t n = 0; n < 50; ++n)
      for (std::size_t i = 0; i < block; ++i) running[i] += (mu[l][n * block + i] - running[i]) / double(n + 1);
    for (std::size_t i = 0; i < block; ++i) CHECK(std::abs(avg.layers[l][i] - running[i]) < 1e-6);
  }

  // Permutation invariance over the dataset.
  Tensor<double> reversed(many.shape());
  for (std::size_t n = 0; n < 50; ++n) std::copy(many.row(49 - n).begin(), many.row(49 - n).end(), reversed.row(n).begin());
  const auto rev = compute_p_avg(f.backbone, &f.tip, f.heads, reversed);
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t i = 0; i < block; ++i) CHECK(std::abs(rev.layers[l][i] - avg.layers[l][i]) < 1e-12);

  CHECK_THROWS_AS(compute_p_avg(f.backbone, &f.tip, f.heads, Tensor<double>({0, 64})), ContractError);
}

TEST_CASE("ema_update: identity, replacement and convex blend") {
  Fixture f;
  RngStream rng(6);
  const auto base = uniform_tensor<double>(rng, {6, 64}, 0.0, 1.0);
  const auto task = uniform_tensor<double>(rng, {4, 64}, 0.0, 1.0);
  const auto start = compute_p_avg(f.backbone, &f.tip, f.heads, base);
  const auto task_mean = compute_p_avg(f.backbone, &f.tip, f.heads, task);

  auto same = start;
  ema_update(same, f.backbone, &f.tip, f.heads, task, 1.0, 1);
  for (std::size_t l = 0; l < 2; ++l) CHECK(same.layers[l].same_values(start.layers[l]));

  auto replaced = start;
  ema_update(replaced, f.backbone, &f.tip, f.heads, task, 0.0, 1);
  for (std::size_t l = 0; l < 2; ++l) CHECK(replaced.layers[l].same_values(task_mean.layers[l]));

  auto blended = start;
  ema_update(blended, f.backbone, &f.tip, f.heads, task, 0.99, 2);
  CHECK(blended.task_index == 2);
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t i = 0; i < blended.layers[l].numel(); ++i) {
      const double want = 0.99 * start.layers[l][i] + 0.01 * task_mean.layers[l][i];
      CHECK(std::abs(blended.layers[l][i] - want) < 1e-7);
    }

  // Two updates with the same data leave beta^2 of the stale part.
  auto twice = start;
  ema_update(twice, f.backbone, &f.tip, f.heads, task, 0.7, 1);
  ema_update(twice, f.backbone, &f.tip, f.heads, task, 0.7, 2);
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t i = 0; i < twice.layers[l].numel(); ++i) {
      const double want = 0.49 * start.layers[l][i] + 0.51 * task_mean.layers[l][i];
      CHECK(std::abs(twice.layers[l][i] - want) < 1e-12);
    }

  auto bad = start;
  CHECK_THROWS_AS(ema_update(bad, f.backbone, &f.tip, f.heads, task, 0.9, 0), ContractError);
  CHECK_THROWS_AS(ema_update(bad, f.backbone, &f.tip, f.heads, Tensor<double>({0, 64}), 0.9, 1), ContractError);
}

TEST_CASE("make_tsp: endpoints, default alpha and affinity") {
  RngStream rng(7);
  const auto mu = random_tensor<float>(rng, {3, 8});
  const auto avg = random_tensor<float>(rng, {3, 8});
  CHECK(make_tsp(mu, avg, 1.0).same_values(avg));
  CHECK(make_tsp(mu, avg, 0.0).same_values(mu));
  const auto p = make_tsp(mu, avg, 0.8);
  for (std::size_t i = 0; i < p.numel(); ++i) {
    CHECK(std::abs(p[i] - (0.8f * avg[i] + 0.2f * mu[i])) < 1e-6);
  }
  CHECK_THROWS_AS(make_tsp(mu, random_tensor<float>(rng, {2, 8}), 0.5), DimensionError);

  const auto m1 = random_tensor(rng, {3, 8});
  const auto m2 = random_tensor(rng, {3, 8});
  const auto pd = random_tensor(rng, {3, 8});
  const double a = 0.3;
  Tensor<double> mix(m1.shape());
  for (std::size_t i = 0; i < mix.numel(); ++i) mix[i] = a * m1[i] + (1 - a) * m2[i];
  const auto lhs = make_tsp(mix, pd, 0.8);
  const auto r1 = make_tsp(m1, pd, 0.8);
  const auto r2 = make_tsp(m2, pd, 0.8);
  for (std::size_t i = 0; i < lhs.numel(); ++i) CHECK(std::abs(lhs[i] - (a * r1[i] + (1 - a) * r2[i])) < 1e-12);
}

TEST_CASE("assemble_prompts: length, order and tip-only form") {
  RngStream rng(8);
  Graph<double> g;
  const auto tip = random_tensor(rng, {3, 4});
  const auto tsp = random_tensor(rng, {6, 4});
  const auto both = g.value(assemble_prompts(g, std::optional<Var>(g.constant(tip)), std::optional<Var>(g.constant(tsp)), 2));
  CHECK(both.rows() == 12);
  for (std::size_t r = 0; r < 3; ++r) {
    CHECK(std::equal(both.row(r).begin(), both.row(r).end(), tip.row(r).begin()));
    CHECK(std::equal(both.row(6 + r).begin(), both.row(6 + r).end(), tip.row(r).begin()));
  }
  CHECK(std::equal(both.row(3).begin(), both.row(3).end(), tsp.row(0).begin()));
  CHECK(std::equal(both.row(9).begin(), both.row(9).end(), tsp.row(3).begin()));
  const auto only = g.value(assemble_prompts(g, std::optional<Var>(g.constant(tip)), std::nullopt, 2));
  CHECK(only.rows() == 6);
  CHECK_THROWS_AS(assemble_prompts(g, std::optional<Var>(g.constant(tip)),
                                   std::optional<Var>(g.constant(random_tensor(rng, {6, 5}))), 2),
                  DimensionError);
}

TEST_CASE("prompt config validation") {
  PromptConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.prompt_length() == 6);
  c.tsp_length = 2;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = PromptConfig{};
  c.alpha = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

#include <benchmark/benchmark.h>

#include <vector>

#include "asp/runner/model.hpp"
#include "asp/tensor/graph.hpp"
#include "asp/tensor/optim.hpp"
#include "asp/vit/vit.hpp"

using namespace asp;
using tensor::Graph;
using tensor::RngStream;
using tensor::Tensor;

namespace {

Tensor<float> random(RngStream& rng, std::size_t rows, std::size_t cols, bool grad = false) {
  Tensor<float> t({rows, cols});
  for (auto& v : t.storage()) v = static_cast<float>(rng.normal());
  t.set_requires_grad(grad);
  return t;
}

void BM_MatmulForwardBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  RngStream rng(1);
  auto a = random(rng, n, n, true), b = random(rng, n, n, true);
  for (auto _ : state) {
    Graph<float> g;
    const auto y = g.sum(g.matmul(g.param(a), g.param(b)));
    g.backward(y);
    benchmark::DoNotOptimize(a.grad().data());
  }
  state.SetItemsProcessed(state.iterations() * 3 * 2 * n * n * n);
}
BENCHMARK(BM_MatmulForwardBackward)->Arg(32)->Arg(64)->Arg(128);

// Desk backbone, prompt-free features for a batch of images.
void BM_VitFeatures(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  vit::ViTConfig c;
  RngStream rng(2);
  auto vit = vit::VisionTransformer<float>::init(c, rng);
  Tensor<float> images({batch, c.pixels()});
  for (auto& v : images.storage()) v = static_cast<float>(rng.uniform());
  for (auto _ : state) benchmark::DoNotOptimize(vit.features(images));
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_VitFeatures)->Arg(1)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

// One base-training step on the desk model: prompted forward, loss, backward, SGD.
void BM_TrainingStep(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  vit::ViTConfig c;
  RngStream rng(3);
  std::vector<std::int64_t> classes(12);
  for (std::size_t k = 0; k < classes.size(); ++k) classes[k] = static_cast<std::int64_t>(k);
  runner::AspModel<float> m(vit::VisionTransformer<float>::init(c, rng), prompt::PromptConfig{},
                            objective::LossConfig{}, classes, rng);
  Tensor<float> images({batch, c.pixels()});
  for (auto& v : images.storage()) v = static_cast<float>(rng.uniform());
  std::vector<std::size_t> rows(batch);
  for (std::size_t i = 0; i < batch; ++i) rows[i] = i % classes.size();
  const auto anchors = random(rng, classes.size(), c.embed_dim);
  const auto params = m.trainable();
  for (auto _ : state) {
    Graph<float> g;
    g.backward(m.training_loss(g, images, rows, &anchors, rng));
    tensor::sgd_step<float>(params, 1e-3f);
  }
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_TrainingStep)->Arg(16)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();

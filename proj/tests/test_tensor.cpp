#include <doctest.h>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "asp/tensor/grad_check.hpp"
#include "asp/tensor/graph.hpp"
#include "asp/tensor/optim.hpp"
#include "support.hpp"

using namespace asp;
using namespace asp::tensor;
using asp::test::random_tensor;

namespace {

// Contracts an op's output with a fixed random matrix so every output
// element contributes a distinct weight to the scalar being checked.
Var contract(Graph<double>& g, Var out, const Tensor<double>& weights) {
  return g.sum(g.mul(out, g.constant(weights)));
}

struct OpCase {
  std::string name;
  std::vector<Tensor<double>> inputs;
  std::function<Var(Graph<double>&, std::vector<Var>&)> op;
};

OpCase make_case(std::size_t which, RngStream& rng) {
  const std::size_t n = 2 + rng.below(3);
  const std::size_t d = 2 + rng.below(4);
  const std::size_t k = 2 + rng.below(3);
  auto r = [&](Shape s, double scale = 1.0) { return random_tensor(rng, std::move(s), scale, true); };
  switch (which % 26) {
    case 0: return {"matmul", {r({n, d}), r({d, k})}, [](auto& g, auto& v) { return g.matmul(v[0], v[1]); }};
    case 1:
      return {"linear", {r({n, d}), r({d, k}), r({1, k})},
              [](auto& g, auto& v) { return g.linear(v[0], v[1], v[2]); }};
    case 2: return {"add", {r({n, d}), r({n, d})}, [](auto& g, auto& v) { return g.add(v[0], v[1]); }};
    case 3: return {"sub", {r({n, d}), r({n, d})}, [](auto& g, auto& v) { return g.sub(v[0], v[1]); }};
    case 4: return {"mul", {r({n, d}), r({n, d})}, [](auto& g, auto& v) { return g.mul(v[0], v[1]); }};
    case 5: return {"scale", {r({n, d})}, [](auto& g, auto& v) { return g.scale(v[0], -1.7); }};
    case 6: return {"add_scalar", {r({n, d})}, [](auto& g, auto& v) { return g.add_scalar(v[0], 0.3); }};
    case 7: return {"add_row", {r({n, d}), r({1, d})}, [](auto& g, auto& v) { return g.add_row(v[0], v[1]); }};
    case 8:
      return {"concat_rows", {r({n, d}), r({k, d}), r({1, d})}, [](auto& g, auto& v) {
                const std::vector<Var> parts{v[0], v[1], v[2]};
                return g.concat_rows(parts);
              }};
    case 9:
      return {"concat_cols", {r({n, d}), r({n, k})}, [](auto& g, auto& v) { return g.concat_cols(v[0], v[1]); }};
    case 10:
      return {"gather_rows", {r({n, d})}, [n](auto& g, auto& v) {
                return g.gather_rows(v[0], {0, static_cast<std::uint32_t>(n - 1), 0, 1});
              }};
    case 11: return {"reshape", {r({n, d})}, [n, d](auto& g, auto& v) { return g.reshape(v[0], {d, n}); }};
    case 12: return {"softmax_rows", {r({n, d})}, [](auto& g, auto& v) { return g.softmax_rows(v[0]); }};
    case 13:
      return {"layer_norm_rows", {r({n, d}), r({1, d}), r({1, d})},
              [](auto& g, auto& v) { return g.layer_norm_rows(v[0], v[1], v[2]); }};
    case 14: return {"gelu", {r({n, d})}, [](auto& g, auto& v) { return g.gelu(v[0]); }};
    case 15: return {"exp", {r({n, d}, 0.5)}, [](auto& g, auto& v) { return g.exp(v[0]); }};
    case 16: {
      auto x = r({n, d});
      for (auto& e : x.storage()) e = 0.5 + std::abs(e);
      return {"log", {x}, [](auto& g, auto& v) { return g.log(v[0]); }};
    }
    case 17: return {"square", {r({n, d})}, [](auto& g, auto& v) { return g.square(v[0]); }};
    case 18: return {"sum", {r({n, d})}, [](auto& g, auto& v) { return g.sum(g.square(v[0])); }};
    case 19: return {"mean", {r({n, d})}, [](auto& g, auto& v) { return g.mean(g.square(v[0])); }};
    case 20: return {"mean_rows", {r({n, d})}, [](auto& g, auto& v) { return g.mean_rows(v[0]); }};
    case 21: return {"l2_norm_rows", {r({n, d})}, [](auto& g, auto& v) { return g.l2_norm_rows(v[0]); }};
    case 22: {
      const std::size_t seq = 3, batch = 2, heads = 2, dim = 4;
      return {"attention", {r({batch * seq, dim}), r({batch * seq, dim}), r({batch * seq, dim})},
              [=](auto& g, auto& v) { return g.attention(v[0], v[1], v[2], batch, seq, heads); }};
    }
    case 23: return {"cosine_rows", {r({n, d}), r({k, d})}, [](auto& g, auto& v) { return g.cosine_rows(v[0], v[1]); }};
    case 24:
      return {"cross_entropy", {r({n, k})}, [n, k](auto& g, auto& v) {
                std::vector<std::size_t> labels(n);
                for (std::size_t i = 0; i < n; ++i) labels[i] = i % k;
                return g.cross_entropy(v[0], labels);
              }};
    default:
      return {"kl_std_normal_rows", {r({n, d}), r({n, d}, 0.5)},
              [](auto& g, auto& v) { return g.kl_std_normal_rows(v[0], v[1]); }};
  }
}

}  // namespace

TEST_CASE("grad_check: sum of squares is exact") {
  const std::function<Var(Graph<double>&, Var)> f = [](Graph<double>& g, Var x) { return g.sum(g.square(x)); };
  Tensor<double> x({1}, std::vector<double>{3.0});
  x.set_requires_grad(true);
  CHECK(grad_check<double>(f, x, 1e-5).max_rel_error < 1e-7);
}

TEST_CASE("grad_check: softmax cross-entropy on three logits") {
  const std::function<Var(Graph<double>&, Var)> f = [](Graph<double>& g, Var x) {
    const std::vector<std::size_t> label{1};
    return g.cross_entropy(x, label);
  };
  Tensor<double> x({1, 3}, std::vector<double>{0.2, -1.3, 0.7});
  x.set_requires_grad(true);
  CHECK(grad_check<double>(f, x, 1e-6).max_rel_error < 1e-5);
}

TEST_CASE("grad_check: a hard max at a tie is flagged") {
  // Both arguments are maximisers; the subgradient goes to the first one,
  // while central differences see slope 1/2 on each.
  const std::function<Var(Graph<double>&, Var)> f = [](Graph<double>& g, Var x) { return g.reduce_max(x); };
  Tensor<double> x({1, 2}, std::vector<double>{1.0, 1.0});
  x.set_requires_grad(true);
  const auto r = grad_check<double>(f, x, 1e-6);
  CHECK_FALSE(r.passed(1e-4));
  CHECK(r.max_rel_error == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("grad_check: every differentiable op over randomized trials") {
  RngStream rng(7);
  std::vector<std::size_t> failures(26, 0);
  std::size_t trials = 0;
  for (std::size_t trial = 0; trial < 130; ++trial) {
    auto c = make_case(trial, rng);
    Tensor<double> weights;
    {
      Graph<double> probe;
      std::vector<Var> vars;
      for (auto& t : c.inputs) vars.push_back(probe.constant(t));
      weights = random_tensor(rng, probe.shape(c.op(probe, vars)));
    }
    std::vector<Tensor<double>*> ptrs;
    for (auto& t : c.inputs) ptrs.push_back(&t);
    const LossBuilder<double> loss = [&](Graph<double>& g) {
      std::vector<Var> vars;
      for (auto& t : c.inputs) vars.push_back(g.param(t));
      return contract(g, c.op(g, vars), weights);
    };
    const auto r = grad_check<double>(loss, ptrs, 1e-6);
    INFO(c.name, " trial ", trial, " error ", r.max_rel_error);
    CHECK(r.passed(1e-4));
    ++trials;
  }
  CHECK(trials >= 100);
}

TEST_CASE("sgd_step: update rule and freeze contract") {
  Tensor<double> p({1}, std::vector<double>{1.0});
  p.set_requires_grad(true);
  p.ensure_grad()[0] = 2.0;
  std::vector<Tensor<double>*> params{&p};
  sgd_step<double>(params, 0.5);
  CHECK(p[0] == 0.0);
  CHECK(p.grad()[0] == 0.0);

  Tensor<double> frozen({3}, std::vector<double>{1, 2, 3});
  frozen.ensure_grad();
  for (auto& gv : frozen.grad()) gv = 1e3;
  const auto before = frozen;
  std::vector<Tensor<double>*> fp{&frozen};
  const auto updates = update_counter().load();
  sgd_step<double>(fp, 0.01);
  CHECK(frozen.same_values(before));
  CHECK(update_counter().load() == updates);

  Tensor<double> q({2});
  q.set_requires_grad(true);
  const std::vector<double> wrong(3, 1.0);
  CHECK_THROWS_AS(sgd_update<double>(q, wrong, 0.1), DimensionError);
  CHECK_THROWS_AS(sgd_step<double>(params, 0.0), ContractError);
}

TEST_CASE("softmax rows sum to one and stay inside (0, 1)") {
  RngStream rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Graph<float> g;
    const auto x = random_tensor<float>(rng, {5, 7}, 4.0);
    const auto s = g.value(g.softmax_rows(g.constant(x)));
    for (std::size_t r = 0; r < s.rows(); ++r) {
      double total = 0.0;
      for (float v : s.row(r)) {
        CHECK(v > 0.0f);
        CHECK(v < 1.0f);
        total += v;
      }
      CHECK(std::abs(total - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("concat backward splits the gradient exactly") {
  RngStream rng(3);
  auto a = random_tensor(rng, {2, 3}, 1.0, true);
  auto b = random_tensor(rng, {4, 3}, 1.0, true);
  const auto w = random_tensor(rng, {6, 3});
  Graph<double> g;
  const std::vector<Var> parts{g.param(a), g.param(b)};
  g.backward(g.sum(g.mul(g.concat_rows(parts), g.constant(w))));
  // d(sum(w * [a; b])) / d[a; b] = w, so the parts reassemble into w.
  std::vector<double> joined(a.grad().begin(), a.grad().end());
  joined.insert(joined.end(), b.grad().begin(), b.grad().end());
  CHECK(joined == w.storage());
}

TEST_CASE("graph outputs are bitwise deterministic") {
  auto run = [] {
    RngStream rng(42);
    auto x = random_tensor<float>(rng, {6, 8}, 1.0, true);
    auto w = random_tensor<float>(rng, {8, 8}, 1.0, true);
    Graph<float> g;
    RngStream noise(5);
    const Var h = g.gelu(g.matmul(g.add(g.param(x), g.normal(noise, {6, 8}, 0.1f)), g.param(w)));
    const Var loss = g.sum(g.softmax_rows(h));
    const auto out = g.value(h);
    g.backward(loss);
    return std::make_pair(out, std::vector<float>(w.grad().begin(), w.grad().end()));
  };
  const auto a = run();
  const auto b = run();
  CHECK(a.first.same_values(b.first));
  CHECK(a.second == b.second);
}

TEST_CASE("rng streams are counter based and splittable") {
  RngStream a(9);
  const auto saved = a.state();
  const double x = a.normal();
  RngStream resumed(saved);
  CHECK(resumed.normal() == x);
  CHECK(a.split(1).next_u64() == RngStream(9).split(1).next_u64());
  CHECK(a.split(1).next_u64() != a.split(2).next_u64());
  std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7};
  RngStream(4).shuffle(v.begin(), v.end());
  std::vector<int> w{0, 1, 2, 3, 4, 5, 6, 7};
  RngStream(4).shuffle(w.begin(), w.end());
  CHECK(v == w);
}

TEST_CASE("shape errors are reported as dimension errors") {
  Graph<double> g;
  const Var a = g.constant(Tensor<double>({2, 3}));
  const Var b = g.constant(Tensor<double>({2, 4}));
  CHECK_THROWS_AS(g.add(a, b), DimensionError);
  CHECK_THROWS_AS(g.matmul(a, a), DimensionError);
  CHECK_THROWS_AS(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
}

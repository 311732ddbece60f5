#include <doctest.h>

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "iavae/autodiff.hpp"
#include "support.hpp"

using namespace iavae;
using ad::Graph;
using ad::Shape;
using ad::Tensor;
using ad::Var;
using ad::concat;

namespace {

using Builder = std::function<Var(Graph&, const std::vector<Var>&)>;

std::vector<Tensor> backward_grads(const Builder& build, const std::vector<Tensor>& inputs) {
  Graph g;
  std::vector<Var> leaves;
  for (const Tensor& t : inputs) leaves.push_back(g.leaf(t));
  Var loss = build(g, leaves);
  g.backward(loss);
  std::vector<Tensor> out;
  for (Var v : leaves) out.push_back(v.grad());
  return out;
}

double evaluate(const Builder& build, std::span<const Tensor> inputs) {
  Graph g;
  std::vector<Var> leaves;
  for (const Tensor& t : inputs) leaves.push_back(g.constant(t));
  return build(g, leaves).value().item();
}

std::string check(const Builder& build, const std::vector<Tensor>& inputs) {
  const auto analytic = backward_grads(build, inputs);
  const auto numeric =
      ad::finite_diff_grad([&](std::span<const Tensor> p) { return evaluate(build, p); }, inputs, 1e-6);
  return testing::compare_grads(analytic, numeric);
}

// Contract a non-scalar output with fixed weights so every entry matters.
Var contract(Graph& g, Var v, const Tensor& weights) {
  return sum(mul(v, g.constant(weights)));
}

}  // namespace

TEST_CASE("forward examples") {
  CHECK(relu(Tensor::vector({-1, 0, 2})).values() == std::vector<double>{0, 0, 2});
  CHECK(matvec(Tensor::matrix(2, 2, {1, 0, 0, 1}), Tensor::vector({3, 4})).values() == std::vector<double>{3, 4});
  CHECK(concat({Tensor::vector({1, 2}), Tensor::vector({5})}).values() == std::vector<double>{1, 2, 5});
  CHECK(transpose(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6})).values() == std::vector<double>{1, 4, 2, 5, 3, 6});
  CHECK(slice(Tensor::vector({1, 2, 3, 4}), 1, 2).values() == std::vector<double>{2, 3});
  CHECK(mean(Tensor::vector({1, 2, 3, 6})).item() == 3.0);
}

TEST_CASE("shape mismatch names both shapes") {
  try {
    add(Tensor::vector({1, 2}), Tensor::vector({1, 2, 3}));
    FAIL("expected a throw");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2]") != std::string::npos);
    CHECK(msg.find("[3]") != std::string::npos);
  }
  CHECK_THROWS_AS(matvec(Tensor::matrix(2, 3, std::vector<double>(6, 1.0)), Tensor::vector({1, 2})),
                  std::invalid_argument);
  CHECK_THROWS_AS(slice(Tensor::vector({1, 2}), 1, 2), std::invalid_argument);
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), std::invalid_argument);
}

TEST_CASE("backward examples") {
  {
    Graph g;
    Var x = g.leaf(Tensor::vector({1, 2}));
    g.backward(sum(square(x)));
    CHECK(x.grad().values() == std::vector<double>{2, 4});
  }
  {
    Graph g;
    Var x = g.leaf(Tensor::scalar(-1.0));
    g.backward(relu(x));
    CHECK(x.grad().item() == 0.0);
  }
  {
    Graph g;
    Var x = g.leaf(Tensor::scalar(0.0));
    g.backward(relu(x));
    CHECK(x.grad().item() == 0.0);  // subgradient at the kink
  }
  {
    Graph g;
    Var x = g.leaf(Tensor::scalar(0.7));
    g.backward(log(exp(x)));
    CHECK(x.grad().item() == doctest::Approx(1.0).epsilon(1e-15));
  }
}

TEST_CASE("backward rejects non-scalar loss") {
  Graph g;
  Var x = g.leaf(Tensor::vector({1, 2}));
  CHECK_THROWS_AS(g.backward(square(x)), std::invalid_argument);
}

TEST_CASE("fan-out sums both adjoints") {
  Graph g;
  Var x = g.leaf(Tensor::vector({1.5, -0.5}));
  Var y = add(mul(x, x), scale(x, 3.0));  // x feeds three consumers
  g.backward(sum(y));
  CHECK(x.grad()[0] == doctest::Approx(2 * 1.5 + 3));
  CHECK(x.grad()[1] == doctest::Approx(2 * -0.5 + 3));
}

TEST_CASE("repeated backward resets accumulators") {
  Graph g;
  Var x = g.leaf(Tensor::vector({1, 2}));
  Var loss = sum(square(x));
  g.backward(loss);
  g.backward(loss);
  CHECK(x.grad().values() == std::vector<double>{2, 4});
}

TEST_CASE("constants receive no gradient") {
  Graph g;
  Var c = g.constant(Tensor::vector({1, 2}));
  Var x = g.leaf(Tensor::vector({3, 4}));
  g.backward(sum(mul(c, x)));
  CHECK_FALSE(g.requires_grad(c));
  CHECK(c.grad().values() == std::vector<double>{0, 0});
  CHECK(x.grad().values() == std::vector<double>{1, 2});
}

TEST_CASE("finite_diff_grad examples") {
  auto sq = [](std::span<const Tensor> p) { return p[0].item() * p[0].item(); };
  CHECK(ad::finite_diff_grad(sq, {Tensor::scalar(3.0)}, 1e-4)[0].item() == doctest::Approx(6.0).epsilon(1e-6));
  auto constant = [](std::span<const Tensor>) { return 4.2; };
  CHECK(ad::finite_diff_grad(constant, {Tensor::vector({1, 2})}, 1e-4)[0].values() == std::vector<double>{0, 0});
  auto total = [](std::span<const Tensor> p) { return sum(p[0]).item(); };
  const auto ones = ad::finite_diff_grad(total, {Tensor::vector({0.3, -7, 12})}, 1e-3);
  for (double v : ones[0].values())
    CHECK(v == doctest::Approx(1.0).epsilon(1e-9));
  CHECK_THROWS_AS(ad::finite_diff_grad(total, {Tensor::scalar(1)}, 0.0), std::invalid_argument);
}

TEST_CASE("randomized gradient checks per operation") {
  Rng rng(2024);
  const int trials = 100;
  struct Family {
    const char* name;
    std::function<std::pair<Builder, std::vector<Tensor>>(Rng&)> make;
  };
  const std::vector<Family> families = {
      {"add", [](Rng& r) {
         Tensor w = testing::random_tensor(r, Shape{3});
         return std::pair{Builder([w](Graph& g, const std::vector<Var>& v) { return contract(g, add(v[0], v[1]), w); }),
                          std::vector<Tensor>{testing::random_tensor(r, Shape{3}), testing::random_tensor(r, Shape{3})}};
       }},
      {"sub", [](Rng& r) {
         Tensor w = testing::random_tensor(r, Shape{3});
         return std::pair{Builder([w](Graph& g, const std::vector<Var>& v) { return contract(g, sub(v[0], v[1]), w); }),
                          std::vector<Tensor>{testing::random_tensor(r, Shape{3}), testing::random_tensor(r, Shape{3})}};
       }},
      {"mul", [](Rng& r) {
         Tensor w = testing::random_tensor(r, Shape{4});
         return std::pair{Builder([w](Graph& g, const std::vector<Var>& v) { return contract(g, mul(v[0], v[1]), w); }),
                          std::vector<Tensor>{testing::random_tensor(r, Shape{4}), testing::random_tensor(r, Shape{4})}};
       }},
      {"matvec", [](Rng& r) {
         Tensor w = testing::random_tensor(r, Shape{3});
         return std::pair{Builder([w](Graph& g, const std::vector<Var>& v) { return contract(g, matvec(v[0], v[1]), w); }),
                          std::vector<Tensor>{testing::random_tensor(r, Shape{3, 4}), testing::random_tensor(r, Shape{4})}};
       }},
      {"concat", [](Rng& r) {
         Tensor w = testing::random_tensor(r, Shape{5});
         return std::pair{Builder([w](Graph& g, const std::vector<Var>& v) { return contract(g, concat({v[0], v[1]}), w); }),
                          std::vector<Tensor>{testing::random_tensor(r, Shape{2}), testing::random_tensor(r, Shape{3})}};
       }},
      {"relu", [](Rng& r) {
         Tensor w = testing::random_tensor(r, Shape{5});
         Tensor x = testing::random_tensor(r, Shape{5});
         for (std::size_t i = 0; i < x.size(); ++i)
           if (std::abs(x[i]) < 1e-3) x[i] = 0.5;  // keep clear of the kink
         return std::pair{Builder([w](Graph& g, const std::vector<Var>& v) { return contract(g, relu(v[0]), w); }),
                          std::vector<Tensor>{x}};
       }},
      {"exp", [](Rng& r) {
         Tensor w = testing::random_tensor(r, Shape{3});
         return std::pair{Builder([w](Graph& g, const std::vector<Var>& v) { return contract(g, exp(v[0]), w); }),
                          std::vector<Tensor>{testing::random_tensor(r, Shape{3})}};
       }},
      {"log", [](Rng& r) {
         Tensor w = testing::random_tensor(r, Shape{3});
         return std::pair{Builder([w](Graph& g, const std::vector<Var>& v) { return contract(g, log(v[0]), w); }),
                          std::vector<Tensor>{testing::random_tensor(r, Shape{3}, 0.1, 2.0)}};
       }},
      {"square", [](Rng& r) {
         Tensor w = testing::random_tensor(r, Shape{3});
         return std::pair{Builder([w](Graph& g, const std::vector<Var>& v) { return contract(g, square(v[0]), w); }),
                          std::vector<Tensor>{testing::random_tensor(r, Shape{3})}};
       }},
      {"sum", [](Rng& r) {
         return std::pair{Builder([](Graph&, const std::vector<Var>& v) { return square(sum(v[0])); }),
                          std::vector<Tensor>{testing::random_tensor(r, Shape{2, 3})}};
       }},
      {"mean", [](Rng& r) {
         return std::pair{Builder([](Graph&, const std::vector<Var>& v) { return square(mean(v[0])); }),
                          std::vector<Tensor>{testing::random_tensor(r, Shape{4})}};
       }},
      {"scale", [](Rng& r) {
         Tensor w = testing::random_tensor(r, Shape{3});
         const double f = r.uniform() * 4 - 2;
         return std::pair{Builder([w, f](Graph& g, const std::vector<Var>& v) { return contract(g, scale(v[0], f), w); }),
                          std::vector<Tensor>{testing::random_tensor(r, Shape{3})}};
       }},
      {"add_scalar", [](Rng& r) {
         const double c = r.uniform() * 4 - 2;
         return std::pair{Builder([c](Graph&, const std::vector<Var>& v) { return sum(square(add_scalar(v[0], c))); }),
                          std::vector<Tensor>{testing::random_tensor(r, Shape{3})}};
       }},
      {"slice", [](Rng& r) {
         Tensor w = testing::random_tensor(r, Shape{3});
         return std::pair{Builder([w](Graph& g, const std::vector<Var>& v) { return contract(g, slice(v[0], 2, 3), w); }),
                          std::vector<Tensor>{testing::random_tensor(r, Shape{6})}};
       }},
      {"reshape+transpose", [](Rng& r) {
         Tensor w = testing::random_tensor(r, Shape{3, 2});
         return std::pair{Builder([w](Graph& g, const std::vector<Var>& v) {
                            return contract(g, transpose(reshape(v[0], Shape{2, 3})), w);
                          }),
                          std::vector<Tensor>{testing::random_tensor(r, Shape{6})}};
       }},
  };
  for (const Family& f : families) {
    int failures = 0;
    std::string first;
    for (int t = 0; t < trials; ++t) {
      auto [build, inputs] = f.make(rng);
      const std::string msg = check(build, inputs);
      if (!msg.empty()) {
        ++failures;
        if (first.empty()) first = msg;
      }
    }
    INFO(f.name << ": " << first);
    CHECK(failures == 0);
  }
}

TEST_CASE("forward is deterministic") {
  Rng rng(5);
  const Tensor m = testing::random_tensor(rng, Shape{4, 3});
  const Tensor x = testing::random_tensor(rng, Shape{3});
  auto run = [&] { return exp(relu(matvec(m, x))).values(); };
  const auto a = run();
  const auto b = run();
  CHECK(a == b);
}

#include <doctest.h>

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "iavae/optim.hpp"
#include "support.hpp"

using namespace iavae;
using ad::Shape;
using ad::Tensor;

TEST_CASE("zero gradient leaves parameters unchanged") {
  std::vector<Tensor> p{Tensor::vector({1.0, -2.0, 3.0})};
  const std::vector<Tensor> g{Tensor(Shape{3})};
  AdamState adam({}, p);
  for (int i = 0; i < 5; ++i) adam.step(p, g);
  CHECK(p[0].values() == std::vector<double>{1.0, -2.0, 3.0});
  CHECK(adam.steps() == 5);
}

TEST_CASE("first step moves by the learning rate") {
  std::vector<Tensor> p{Tensor::vector({1.0, -2.0, 0.5})};
  const std::vector<Tensor> g{Tensor::vector({3.0, -0.01, 100.0})};
  AdamState adam(AdamOptions{1e-2}, p);
  adam.step(p, g);
  CHECK(p[0][0] == doctest::Approx(1.0 - 1e-2).epsilon(1e-9));
  CHECK(p[0][1] == doctest::Approx(-2.0 + 1e-2).epsilon(1e-6));
  CHECK(p[0][2] == doctest::Approx(0.5 - 1e-2).epsilon(1e-9));
}

TEST_CASE("adam matches a scalar reference") {
  // scalar Adam written out directly
  double x = 0.7, m = 0.0, v = 0.0;
  std::vector<Tensor> p{Tensor::vector({0.7})};
  const AdamOptions opt{1e-3, 0.9, 0.999, 1e-8};
  AdamState adam(opt, p);
  for (int t = 1; t <= 50; ++t) {
    const double g = 2 * x - 1;
    m = opt.beta1 * m + (1 - opt.beta1) * g;
    v = opt.beta2 * v + (1 - opt.beta2) * g * g;
    const double mh = m / (1 - std::pow(opt.beta1, t));
    const double vh = v / (1 - std::pow(opt.beta2, t));
    x -= opt.learning_rate * mh / (std::sqrt(vh) + opt.epsilon);
    const std::vector<Tensor> grad{Tensor::vector({2 * p[0][0] - 1})};
    adam.step(p, grad);
    CHECK(p[0][0] == doctest::Approx(x).epsilon(1e-12));
  }
}

TEST_CASE("adam is deterministic and leaf order does not matter") {
  Rng rng(4);
  const Tensor a0 = testing::random_tensor(rng, Shape{2, 3});
  const Tensor b0 = testing::random_tensor(rng, Shape{4});
  std::vector<Tensor> ga, gb;
  for (int t = 0; t < 20; ++t) {
    ga.push_back(testing::random_tensor(rng, Shape{2, 3}));
    gb.push_back(testing::random_tensor(rng, Shape{4}));
  }
  std::vector<Tensor> p1{a0, b0}, p2{a0, b0}, p3{b0, a0};
  AdamState s1({}, p1), s2({}, p2), s3({}, p3);
  for (int t = 0; t < 20; ++t) {
    s1.step(p1, std::vector<Tensor>{ga[t], gb[t]});
    s2.step(p2, std::vector<Tensor>{ga[t], gb[t]});
    s3.step(p3, std::vector<Tensor>{gb[t], ga[t]});
  }
  CHECK(p1[0].values() == p2[0].values());
  CHECK(p1[1].values() == p2[1].values());
  CHECK(p1[0].values() == p3[1].values());
  CHECK(p1[1].values() == p3[0].values());
}

TEST_CASE("non-finite gradients are rejected before any update") {
  std::vector<Tensor> p{Tensor::vector({1.0}), Tensor::vector({2.0, 3.0})};
  AdamState adam({}, p);
  const std::vector<std::string> names{"W1", "b1"};
  const std::vector<Tensor> bad{Tensor::vector({0.5}), Tensor::vector({1.0, std::numeric_limits<double>::quiet_NaN()})};
  try {
    adam.step(p, bad, names);
    FAIL("expected NonFiniteGradient");
  } catch (const NonFiniteGradient& e) {
    CHECK(e.leaf() == "b1");
    CHECK(std::string(e.what()).find("b1") != std::string::npos);
  }
  CHECK(p[0][0] == 1.0);
  CHECK(adam.steps() == 0);
  const std::vector<Tensor> inf{Tensor::vector({std::numeric_limits<double>::infinity()}), Tensor::vector({0.0, 0.0})};
  CHECK_THROWS_AS(adam.step(p, inf), NonFiniteGradient);
}

TEST_CASE("adam argument checks") {
  std::vector<Tensor> p{Tensor::vector({1.0})};
  CHECK_THROWS_AS(AdamState(AdamOptions{0.0}, p), std::invalid_argument);
  AdamState adam({}, p);
  CHECK_THROWS_AS(adam.step(p, std::vector<Tensor>{}), std::invalid_argument);
  CHECK_THROWS_AS(adam.step(p, std::vector<Tensor>{Tensor::vector({1.0, 2.0})}), std::invalid_argument);
}

TEST_CASE("early stopping on an improving metric never stops") {
  EarlyStopping<int> es(3);
  for (int i = 0; i < 50; ++i) CHECK(es.update(i, i) == StopDecision::kContinue);
  CHECK(es.best_snapshot() == 49);
  CHECK(es.best_index() == 49);
}

TEST_CASE("early stopping on a flat metric") {
  EarlyStopping<int> es(5);
  int updates = 0;
  while (es.update(1.0, updates) == StopDecision::kContinue) ++updates;
  // first update sets the best, then patience + 1 misses stop it
  CHECK(updates + 1 == 5 + 2);
  CHECK(es.best_snapshot() == 0);
  CHECK(es.best_metric() == 1.0);
}

TEST_CASE("early stopping keeps the late spike") {
  EarlyStopping<int> es(4);
  const std::vector<double> metric{1, 2, 3, 2, 2, 2, 5, 1, 1, 1, 1, 1};
  std::size_t i = 0;
  for (; i < metric.size(); ++i)
    if (es.update(metric[i], static_cast<int>(i)) == StopDecision::kStop) break;
  CHECK(es.best_index() == 6);
  CHECK(es.best_snapshot() == 6);
  CHECK(es.best_metric() == 5.0);
  CHECK(i == 11);
  CHECK(es.epochs_since_improvement() == 5);
}

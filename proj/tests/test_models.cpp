#include <doctest.h>

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "iavae/models.hpp"
#include "iavae/synthetic.hpp"
#include "support.hpp"

using namespace iavae;
using ad::Graph;
using ad::Shape;
using ad::Tensor;
using ad::Var;

namespace {

// Plain loops over the block values; shares nothing with encoder_forward.
PosteriorParams hand_encode(const std::array<double, 3>& x, const EncoderParams& p) {
  const std::size_t h = p.arch.hidden_width;
  const auto& w1 = p.blocks[0].values;
  const auto& b1 = p.blocks[1].values;
  const auto& w2 = p.blocks[2].values;
  const auto& b2 = p.blocks[3].values;
  std::vector<double> hidden(h);
  for (std::size_t i = 0; i < h; ++i) {
    double a = b1[i];
    for (std::size_t j = 0; j < 3; ++j) a += w1.at(i, j) * x[j];
    hidden[i] = std::max(a, 0.0);
  }
  PosteriorParams q;
  for (std::size_t i = 0; i < 4; ++i) {
    double a = b2[i];
    for (std::size_t j = 0; j < h; ++j) a += w2.at(i, j) * hidden[j];
    (i < 2 ? q.mean : q.log_variance).push_back(a);
  }
  return q;
}

}  // namespace

TEST_CASE("reference encoder layout") {
  const EncoderParams p = make_encoder(2, 0);
  REQUIRE(p.blocks.size() == 4);
  const char* names[] = {"W1", "b1", "W2", "b2"};
  const std::vector<std::vector<std::size_t>> shapes = {{2, 3}, {2}, {4, 2}, {4}};
  for (std::size_t l = 0; l < 4; ++l) {
    CHECK(p.blocks[l].index == l);
    CHECK(p.blocks[l].name == names[l]);
    CHECK(p.blocks[l].shape().dims() == shapes[l]);
  }
  CHECK(p.parameter_count() == 20);
  CHECK(p.max_block_size() == 8);
}

TEST_CASE("parameter count is 8h + 4") {
  CHECK(make_encoder(2, 0).parameter_count() == 20);
  CHECK(make_encoder(14, 0).parameter_count() == 116);
  CHECK(make_encoder(20, 0).parameter_count() == 164);
  for (std::size_t h = 1; h <= 20; ++h) {
    const EncoderParams p = make_encoder(h, 3);
    std::size_t total = 0;
    for (const ParamBlock& b : p.blocks) total += b.size();
    CHECK(total == 8 * h + 4);
    CHECK(p.parameter_count() == 8 * h + 4);
    CHECK(p.arch.parameter_count() == 8 * h + 4);
  }
}

TEST_CASE("encoder initialization") {
  const EncoderParams p = make_encoder(20, 11);
  for (double b : p.blocks[1].values.values()) CHECK(b == 0.0);
  for (double b : p.blocks[3].values.values()) CHECK(b == 0.0);
  double ss = 0.0;
  std::size_t n = 0;
  for (std::size_t s = 0; s < 40; ++s) {
    const EncoderParams q = make_encoder(20, s);
    for (std::size_t l : {0, 2})
      for (double w : q.blocks[l].values.values()) {
        ss += w * w;
        ++n;
      }
  }
  CHECK(std::sqrt(ss / n) == doctest::Approx(0.1).epsilon(0.05));
  CHECK(make_encoder(2, 5).blocks[0].values.values() == make_encoder(2, 5).blocks[0].values.values());
  CHECK(make_encoder(2, 5).blocks[0].values.values() != make_encoder(2, 6).blocks[0].values.values());
}

TEST_CASE("encode examples") {
  const EncoderParams zero = zero_encoder(EncoderArch{});
  const std::array<double, 3> x{0.3, -1.2, 4.0};
  const PosteriorParams q = encode(x, zero);
  CHECK(q.mean == std::vector<double>{0, 0});
  CHECK(q.log_variance == std::vector<double>{0, 0});
  CHECK(q.variance(0) == 1.0);

  Rng rng(17);
  for (int t = 0; t < 50; ++t) {
    const EncoderParams p = make_encoder(1 + t % 6, t);
    // Non-zero biases so the hidden layer is not trivially symmetric.
    EncoderParams biased = p;
    for (double& v : biased.blocks[1].values.data()) v = rng.normal(0.0, 0.5);
    for (double& v : biased.blocks[3].values.data()) v = rng.normal(0.0, 0.5);
    const std::array<double, 3> xi{rng.normal(), rng.normal(), rng.normal()};
    const PosteriorParams a = encode(xi, biased);
    const PosteriorParams b = encode(xi, biased);
    CHECK(a.mean == b.mean);
    CHECK(a.log_variance == b.log_variance);
    const PosteriorParams h = hand_encode(xi, biased);
    for (std::size_t i = 0; i < 2; ++i) {
      CHECK(a.mean[i] == doctest::Approx(h.mean[i]).epsilon(1e-14));
      CHECK(a.log_variance[i] == doctest::Approx(h.log_variance[i]).epsilon(1e-14));
    }
  }
}

TEST_CASE("encode rejects wrong dimension") {
  const std::array<double, 2> x{1, 2};
  CHECK_THROWS_AS(encode(x, make_encoder(2, 0)), std::invalid_argument);
  EncoderParams broken = make_encoder(2, 0);
  broken.blocks.pop_back();
  CHECK_THROWS_AS(broken.validate(), std::invalid_argument);
}

TEST_CASE("decoder_true examples") {
  CHECK(decoder_true(std::array<double, 2>{0, 0}) == std::array<double, 3>{0, 0, 0});
  CHECK(decoder_true(std::array<double, 2>{1, 1}) == std::array<double, 3>{1, 1, 3});
  CHECK(decoder_true(std::array<double, 2>{2, -1}) == std::array<double, 3>{2, -1, -1});
  CHECK(decoder_linear(std::array<double, 2>{2, -1}) == std::array<double, 3>{2, -1, 1});
  CHECK_THROWS_AS(decoder_true(std::array<double, 3>{1, 2, 3}), std::invalid_argument);
}

TEST_CASE("decoder_true matches the noiseless generator") {
  const SyntheticDataset d = generate(1000, 0.0, 42);
  for (std::size_t i = 0; i < d.size(); ++i) CHECK(decoder_true(d.z_true[i]) == d.x[i]);
}

TEST_CASE("decoder graph matches eager decoder") {
  Rng rng(8);
  for (int t = 0; t < 20; ++t) {
    const std::array<double, 2> z{rng.normal(), rng.normal()};
    const Tensor out = decoder_forward(Tensor::vector({z[0], z[1]}));
    const auto ref = decoder_true(z);
    for (std::size_t i = 0; i < 3; ++i) CHECK(out[i] == ref[i]);
  }
}

TEST_CASE("encoder gradients match finite differences") {
  Rng rng(99);
  int failures = 0;
  std::string first;
  for (int t = 0; t < 100; ++t) {
    const std::size_t h = 1 + t % 5;
    EncoderParams p = make_encoder(h, t);
    for (ParamBlock& b : p.blocks)
      for (double& v : b.values.data()) v = rng.uniform() * 2 - 1;
    const Tensor x = testing::random_tensor(rng, Shape{3});
    const Tensor wm = testing::random_tensor(rng, Shape{2});
    const Tensor wv = testing::random_tensor(rng, Shape{2});
    auto build = [&](Graph& g, const std::vector<Var>& leaves) {
      const Posterior<Var> q = encoder_forward<Var>(g.constant(x), leaves, 2);
      return add(sum(mul(q.mean, g.constant(wm))), sum(mul(exp(q.log_variance), g.constant(wv))));
    };
    Graph g;
    std::vector<Var> leaves;
    for (const Tensor& b : p.tensors()) leaves.push_back(g.leaf(b));
    g.backward(build(g, leaves));
    std::vector<Tensor> analytic;
    for (Var v : leaves) analytic.push_back(v.grad());
    const auto numeric = ad::finite_diff_grad(
        [&](std::span<const Tensor> params) {
          Graph f;
          std::vector<Var> c;
          for (const Tensor& b : params) c.push_back(f.constant(b));
          return build(f, c).value().item();
        },
        p.tensors(), 1e-6);
    const std::string msg = testing::compare_grads(analytic, numeric);
    if (!msg.empty() && failures++ == 0) first = msg;
  }
  INFO(first);
  CHECK(failures == 0);
}

#pragma once

// The encoder as a registry of parameter blocks, and the fixed decoder of
// the synthetic benchmark.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "iavae/autodiff.hpp"

namespace iavae {

struct ParamBlock {
  std::size_t index = 0;
  std::string name;
  ad::Tensor values;

  const ad::Shape& shape() const { return values.shape(); }
  std::size_t size() const { return values.size(); }
};

// input -> hidden (relu) -> [mean; log_variance].
struct EncoderArch {
  std::size_t input_dim = 3;
  std::size_t hidden_width = 2;
  std::size_t latent_dim = 2;
  std::string activation = "relu";

  std::size_t output_dim() const { return 2 * latent_dim; }
  std::size_t parameter_count() const {
    return hidden_width * input_dim + hidden_width + output_dim() * hidden_width + output_dim();
  }
  friend bool operator==(const EncoderArch&, const EncoderArch&) = default;
};

// Blocks are ordered {W1, b1, W2, b2} with indices 0..3.
struct EncoderParams {
  EncoderArch arch;
  std::vector<ParamBlock> blocks;

  std::size_t parameter_count() const;
  std::size_t max_block_size() const;
  std::vector<ad::Tensor> tensors() const;
  // Throws std::invalid_argument when the blocks do not fit `arch`.
  void validate() const;
};

struct PosteriorParams {
  std::vector<double> mean;
  std::vector<double> log_variance;

  std::size_t dim() const { return mean.size(); }
  double variance(std::size_t i) const;
};

std::vector<ParamBlock> encoder_layout(const EncoderArch& arch);

// W ~ N(0, 0.1^2), biases zero.
EncoderParams make_encoder(const EncoderArch& arch, std::uint64_t seed);
EncoderParams make_encoder(std::size_t hidden_width, std::uint64_t seed);
EncoderParams zero_encoder(const EncoderArch& arch);

template <typename T>
struct Posterior {
  T mean;
  T log_variance;
};

// Shared forward pass for Tensor (eager) and Var (recorded) values.
template <typename T>
Posterior<T> encoder_forward(const T& x, std::span<const T> blocks, std::size_t latent_dim) {
  const T hidden = relu(add(matvec(blocks[0], x), blocks[1]));
  const T out = add(matvec(blocks[2], hidden), blocks[3]);
  return {slice(out, 0, latent_dim), slice(out, latent_dim, latent_dim)};
}

PosteriorParams encode(std::span<const double> x, const EncoderParams& params);

// The oracle decoder f(z) = A z + g(z), A = [[1,0],[0,1],[1,1]], g(z) = [0, 0, z1 z2].
inline constexpr std::array<std::array<double, 2>, 3> kMixingMatrix{{{1.0, 0.0}, {0.0, 1.0}, {1.0, 1.0}}};

std::array<double, 3> decoder_true(std::span<const double> z);
// A z only; the conjugate linear-Gaussian reference model.
std::array<double, 3> decoder_linear(std::span<const double> z);

template <typename T>
T decoder_forward(const T& z) {
  using ad::concat;
  const T z1 = slice(z, 0, 1);
  const T z2 = slice(z, 1, 1);
  return concat({z1, z2, add(add(z1, z2), mul(z1, z2))});
}

}  // namespace iavae

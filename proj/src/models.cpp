#include "iavae/models.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "iavae/rng.hpp"

namespace iavae {

namespace {

constexpr double kEncoderInitStd = 0.1;

}  // namespace

std::size_t EncoderParams::parameter_count() const {
  std::size_t n = 0;
  for (const ParamBlock& b : blocks) n += b.size();
  return n;
}

std::size_t EncoderParams::max_block_size() const {
  std::size_t n = 0;
  for (const ParamBlock& b : blocks) n = std::max(n, b.size());
  return n;
}

std::vector<ad::Tensor> EncoderParams::tensors() const {
  std::vector<ad::Tensor> out;
  out.reserve(blocks.size());
  for (const ParamBlock& b : blocks) out.push_back(b.values);
  return out;
}

void EncoderParams::validate() const {
  const std::vector<ParamBlock> layout = encoder_layout(arch);
  if (blocks.size() != layout.size())
    throw std::invalid_argument("encoder: expected " + std::to_string(layout.size()) +
                                " blocks, got " + std::to_string(blocks.size()));
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (blocks[i].index != i)
      throw std::invalid_argument("encoder: block " + blocks[i].name + " has index " +
                                  std::to_string(blocks[i].index) + ", expected " +
                                  std::to_string(i));
    if (!(blocks[i].shape() == layout[i].shape()))
      throw std::invalid_argument("encoder: block " + layout[i].name + " has shape " +
                                  blocks[i].shape().to_string() + ", expected " +
                                  layout[i].shape().to_string());
  }
}

double PosteriorParams::variance(std::size_t i) const { return std::exp(log_variance[i]); }

std::vector<ParamBlock> encoder_layout(const EncoderArch& arch) {
  if (arch.hidden_width == 0 || arch.input_dim == 0 || arch.latent_dim == 0)
    throw std::invalid_argument("encoder: dimensions must be positive");
  const std::size_t h = arch.hidden_width;
  const std::size_t out = arch.output_dim();
  return {
      {0, "W1", ad::Tensor(ad::Shape{h, arch.input_dim})},
      {1, "b1", ad::Tensor(ad::Shape{h})},
      {2, "W2", ad::Tensor(ad::Shape{out, h})},
      {3, "b2", ad::Tensor(ad::Shape{out})},
  };
}

EncoderParams zero_encoder(const EncoderArch& arch) { return {arch, encoder_layout(arch)}; }

EncoderParams make_encoder(const EncoderArch& arch, std::uint64_t seed) {
  EncoderParams params = zero_encoder(arch);
  Rng rng(seed, Stream::kEncoderInit);
  for (ParamBlock& block : params.blocks) {
    if (block.shape().rank() != 2) continue;
    for (double& v : block.values.data()) v = rng.normal(0.0, kEncoderInitStd);
  }
  return params;
}

EncoderParams make_encoder(std::size_t hidden_width, std::uint64_t seed) {
  EncoderArch arch;
  arch.hidden_width = hidden_width;
  return make_encoder(arch, seed);
}

PosteriorParams encode(std::span<const double> x, const EncoderParams& params) {
  if (x.size() != params.arch.input_dim)
    throw std::invalid_argument("encode: observation has dimension " + std::to_string(x.size()) +
                                ", encoder expects " + std::to_string(params.arch.input_dim));
  const std::vector<ad::Tensor> blocks = params.tensors();
  const ad::Tensor input = ad::Tensor::vector({x.begin(), x.end()});
  const Posterior<ad::Tensor> out =
      encoder_forward<ad::Tensor>(input, blocks, params.arch.latent_dim);
  return {out.mean.values(), out.log_variance.values()};
}

std::array<double, 3> decoder_true(std::span<const double> z) {
  if (z.size() != 2)
    throw std::invalid_argument("decoder: latent has dimension " + std::to_string(z.size()) +
                                ", expected 2");
  return {z[0], z[1], (z[0] + z[1]) + z[0] * z[1]};
}

std::array<double, 3> decoder_linear(std::span<const double> z) {
  if (z.size() != 2)
    throw std::invalid_argument("decoder: latent has dimension " + std::to_string(z.size()) +
                                ", expected 2");
  std::array<double, 3> out{};
  for (std::size_t i = 0; i < 3; ++i) out[i] = kMixingMatrix[i][0] * z[0] + kMixingMatrix[i][1] * z[1];
  return out;
}

}  // namespace iavae

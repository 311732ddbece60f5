#include "iavae/hypernet.hpp"

#include <stdexcept>
#include <string>

#include "iavae/rng.hpp"

namespace iavae {

std::size_t ColumnwiseHead::parameter_count() const {
  std::size_t n = weight.size() + bias.size();
  for (const ad::Tensor& e : input_embeddings) n += e.size();
  return n;
}

std::size_t HypernetParams::embedding_dim() const {
  return block_embeddings.empty() ? 0 : block_embeddings.front().size();
}

std::size_t HypernetParams::embedding_parameter_count() const {
  std::size_t n = 0;
  for (const ad::Tensor& e : block_embeddings) n += e.size();
  return n;
}

std::vector<ad::Tensor> HypernetParams::tensors() const {
  std::vector<ad::Tensor> out{weight, bias};
  out.insert(out.end(), block_embeddings.begin(), block_embeddings.end());
  return out;
}

void HypernetParams::set_tensors(std::span<const ad::Tensor> leaves) {
  if (leaves.size() != 2 + block_embeddings.size())
    throw std::invalid_argument("hypernet: expected " + std::to_string(2 + block_embeddings.size()) +
                                " leaves, got " + std::to_string(leaves.size()));
  weight = leaves[0];
  bias = leaves[1];
  for (std::size_t l = 0; l < block_embeddings.size(); ++l) block_embeddings[l] = leaves[2 + l];
}

void HypernetParams::check_layout(const EncoderParams& base) const {
  if (block_embeddings.size() != base.blocks.size())
    throw std::invalid_argument("hypernet: " + std::to_string(block_embeddings.size()) +
                                " block embeddings for " + std::to_string(base.blocks.size()) +
                                " encoder blocks");
  if (max_block_size() < base.max_block_size())
    throw std::invalid_argument("hypernet: output width " + std::to_string(max_block_size()) +
                                " below largest block " + std::to_string(base.max_block_size()));
  if (input_dim() != base.arch.input_dim)
    throw std::invalid_argument("hypernet: observation width " + std::to_string(input_dim()) +
                                ", encoder expects " + std::to_string(base.arch.input_dim));
}

HypernetParams make_hypernet(const EncoderParams& base, std::size_t embedding_dim,
                             double init_std, std::uint64_t seed) {
  const std::size_t d_max = base.max_block_size();
  HypernetParams psi;
  psi.weight = ad::Tensor(ad::Shape{d_max, base.arch.input_dim + embedding_dim});
  psi.bias = ad::Tensor(ad::Shape{d_max});
  Rng rng(seed, Stream::kEmbeddingInit);
  for (std::size_t l = 0; l < base.blocks.size(); ++l) {
    ad::Tensor e(ad::Shape{embedding_dim});
    for (double& v : e.data()) v = rng.normal();
    psi.block_embeddings.push_back(std::move(e));
  }
  return zero_output_init(std::move(psi), init_std, seed);
}

HypernetParams zero_output_init(HypernetParams psi, double std, std::uint64_t seed) {
  if (std < 0.0) throw std::invalid_argument("zero_output_init: negative std");
  Rng rng(seed, Stream::kHypernetInit);
  for (double& w : psi.weight.data()) w = std == 0.0 ? 0.0 : rng.normal(0.0, std);
  for (double& b : psi.bias.data()) b = 0.0;
  return psi;
}

ColumnwiseHead make_columnwise_head(std::size_t obs_dim, std::size_t block_embedding_dim,
                                    std::size_t input_embedding_dim, std::size_t max_in,
                                    std::size_t max_out, double init_std, std::uint64_t seed) {
  ColumnwiseHead head;
  head.weight = ad::Tensor(ad::Shape{max_out, obs_dim + block_embedding_dim + input_embedding_dim});
  head.bias = ad::Tensor(ad::Shape{max_out});
  Rng weights(seed, Stream::kHypernetInit);
  for (double& w : head.weight.data()) w = init_std == 0.0 ? 0.0 : weights.normal(0.0, init_std);
  Rng embeddings(seed, Stream::kEmbeddingInit);
  for (std::size_t j = 0; j < max_in; ++j) {
    ad::Tensor e(ad::Shape{input_embedding_dim});
    for (double& v : e.data()) v = embeddings.normal();
    head.input_embeddings.push_back(std::move(e));
  }
  return head;
}

ad::Tensor h_linear(std::span<const double> x, const ParamBlock& block, const HypernetParams& psi) {
  if (x.size() != psi.input_dim())
    throw std::invalid_argument("h_linear: observation has dimension " + std::to_string(x.size()) +
                                ", hypernet expects " + std::to_string(psi.input_dim()));
  if (block.index >= psi.block_count())
    throw std::invalid_argument("h_linear: block index " + std::to_string(block.index) +
                                " without an embedding");
  if (block.size() > psi.max_block_size())
    throw std::invalid_argument("h_linear: block " + block.name + " larger than hypernet output");
  const ad::Tensor input = ad::Tensor::vector({x.begin(), x.end()});
  return h_linear_forward(input, psi.weight, psi.bias, psi.block_embeddings[block.index],
                          block.shape());
}

EncoderParams modulate(const EncoderParams& base, std::span<const double> x,
                       const HypernetParams& psi) {
  psi.check_layout(base);
  if (x.size() != base.arch.input_dim)
    throw std::invalid_argument("modulate: observation has dimension " + std::to_string(x.size()));
  const ad::Tensor input = ad::Tensor::vector({x.begin(), x.end()});
  const std::vector<ad::Tensor> blocks = base.tensors();
  const std::vector<ad::Tensor> adapted = modulated_blocks<ad::Tensor>(
      input, blocks, psi.weight, psi.bias, psi.block_embeddings);
  EncoderParams out = base;
  for (std::size_t l = 0; l < adapted.size(); ++l) out.blocks[l].values = adapted[l];
  return out;
}

ad::Tensor columnwise_fc_modulation(std::span<const double> x, const ParamBlock& block,
                                    const HypernetParams& psi) {
  if (!psi.columnwise) throw std::invalid_argument("columnwise: hypernet has no column-wise head");
  const ColumnwiseHead& head = *psi.columnwise;
  if (block.shape().rank() != 2)
    throw std::invalid_argument("columnwise: block " + block.name + " is not a dense weight");
  const std::size_t rows = block.shape()[0];
  const std::size_t cols = block.shape()[1];
  if (head.input_embeddings.size() < cols)
    throw std::invalid_argument("columnwise: missing input embedding for column " +
                                std::to_string(head.input_embeddings.size()) + " of block " +
                                block.name);
  if (rows > head.out_max())
    throw std::invalid_argument("columnwise: block " + block.name + " has " +
                                std::to_string(rows) + " rows, head emits " +
                                std::to_string(head.out_max()));
  if (block.index >= psi.block_count())
    throw std::invalid_argument("columnwise: block index " + std::to_string(block.index) +
                                " without an embedding");
  const ad::Tensor input = ad::Tensor::vector({x.begin(), x.end()});
  return columnwise_forward<ad::Tensor>(input, head.weight, head.bias,
                                        psi.block_embeddings[block.index], head.input_embeddings,
                                        rows, cols);
}

EncoderParams modulate_columnwise(const EncoderParams& base, std::span<const double> x,
                                  const HypernetParams& psi) {
  psi.check_layout(base);
  EncoderParams out = base;
  for (ParamBlock& block : out.blocks) {
    const ad::Tensor delta = block.shape().rank() == 2 ? columnwise_fc_modulation(x, block, psi)
                                                       : h_linear(x, block, psi);
    block.values = ad::add(block.values, delta);
  }
  return out;
}

}  // namespace iavae

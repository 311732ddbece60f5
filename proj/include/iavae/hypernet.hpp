#pragma once

// Instance-conditioned modulation of encoder parameter blocks.
//
// Linear scheme: one projection shared by every block,
//   delta_l = (W [x; e_l] + b)[0 : d_l]   reshaped row-major to block l,
// so a single hypernetwork sized by the largest block serves all of them.
//
// Column-wise scheme for dense weights: column j of delta_l is
//   (W_out [x; e_l; e_in_j] + b_out)[0 : d_out].

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "iavae/autodiff.hpp"
#include "iavae/models.hpp"

namespace iavae {

struct ColumnwiseHead {
  ad::Tensor weight;  // out_max x (d + l + n)
  ad::Tensor bias;    // out_max
  std::vector<ad::Tensor> input_embeddings;

  std::size_t out_max() const { return weight.shape()[0]; }
  std::size_t input_embedding_dim() const {
    return input_embeddings.empty() ? 0 : input_embeddings.front().size();
  }
  std::size_t parameter_count() const;
};

struct HypernetParams {
  ad::Tensor weight;  // d_max x (d + l)
  ad::Tensor bias;    // d_max
  std::vector<ad::Tensor> block_embeddings;
  std::optional<ColumnwiseHead> columnwise;

  std::size_t max_block_size() const { return weight.shape()[0]; }
  std::size_t embedding_dim() const;
  std::size_t input_dim() const { return weight.shape()[1] - embedding_dim(); }
  std::size_t block_count() const { return block_embeddings.size(); }
  // W and b only.
  std::size_t projection_parameter_count() const { return weight.size() + bias.size(); }
  std::size_t embedding_parameter_count() const;

  // Trainable leaves in a fixed order: W, b, e_0 .. e_{L-1}.
  std::vector<ad::Tensor> tensors() const;
  void set_tensors(std::span<const ad::Tensor> leaves);

  // Throws std::invalid_argument when the layout does not serve `base`.
  void check_layout(const EncoderParams& base) const;
};

// Block embeddings ~ N(0, 1); W ~ N(0, init_std^2); b = 0.
HypernetParams make_hypernet(const EncoderParams& base, std::size_t embedding_dim,
                             double init_std, std::uint64_t seed);

// Redraws W ~ N(0, std^2) and zeroes b, leaving embeddings untouched.
// std = 0 gives the exact zero-modulation configuration.
HypernetParams zero_output_init(HypernetParams psi, double std, std::uint64_t seed);

ColumnwiseHead make_columnwise_head(std::size_t obs_dim, std::size_t block_embedding_dim,
                                    std::size_t input_embedding_dim, std::size_t max_in,
                                    std::size_t max_out, double init_std, std::uint64_t seed);

template <typename T>
T h_linear_forward(const T& x, const T& weight, const T& bias, const T& embedding,
                   const ad::Shape& block_shape) {
  using ad::concat;
  const T projection = add(matvec(weight, concat({x, embedding})), bias);
  return reshape(slice(projection, 0, block_shape.numel()), block_shape);
}

template <typename T>
std::vector<T> modulated_blocks(const T& x, std::span<const T> base, const T& weight,
                                const T& bias, std::span<const T> embeddings) {
  std::vector<T> out;
  out.reserve(base.size());
  for (std::size_t l = 0; l < base.size(); ++l) {
    const T& block = base[l];
    out.push_back(add(block, h_linear_forward(x, weight, bias, embeddings[l], block.shape())));
  }
  return out;
}

template <typename T>
T columnwise_forward(const T& x, const T& weight_out, const T& bias_out,
                     const T& block_embedding, std::span<const T> input_embeddings,
                     std::size_t rows, std::size_t cols) {
  using ad::concat;
  std::vector<T> columns;
  columns.reserve(cols);
  for (std::size_t j = 0; j < cols; ++j) {
    const T projection =
        add(matvec(weight_out, concat({x, block_embedding, input_embeddings[j]})), bias_out);
    columns.push_back(slice(projection, 0, rows));
  }
  // Concatenated columns are the transpose in row-major order.
  return transpose(reshape(concat(std::span<const T>(columns)), ad::Shape{cols, rows}));
}

ad::Tensor h_linear(std::span<const double> x, const ParamBlock& block, const HypernetParams& psi);

// Fresh instance-specific parameters phi_l = base_l + h(x, e_l).
EncoderParams modulate(const EncoderParams& base, std::span<const double> x,
                       const HypernetParams& psi);

ad::Tensor columnwise_fc_modulation(std::span<const double> x, const ParamBlock& block,
                                    const HypernetParams& psi);

// Dense weight blocks modulated column-wise, bias blocks by the linear scheme.
EncoderParams modulate_columnwise(const EncoderParams& base, std::span<const double> x,
                                  const HypernetParams& psi);

}  // namespace iavae

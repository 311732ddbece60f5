#pragma once

// Allocation-free forward and backward passes for the one-hidden-layer
// encoder, plain or modulated by the linear hypernetwork. The recorded graph
// (encoder_forward / modulated_blocks / elbo_graph) is the reference; this
// computes the same quantities with flat arrays so long training runs stay
// cheap. Forward values are bit-identical to InferenceModel::posterior.

#include <cstddef>
#include <span>
#include <vector>

#include "iavae/autodiff.hpp"
#include "iavae/vae.hpp"

namespace iavae {

// Monte Carlo ELBO for k = 2 from posterior moments and S x 2 noise rows.
// elbo_estimate is implemented on top of this.
ElboEstimate mc_elbo(std::span<const double> x, const double mean[2], const double log_variance[2],
                     const double* noise, std::size_t samples, double sigma);

class FlatInference {
 public:
  explicit FlatInference(const InferenceModel& model);

  bool modulated() const { return modulated_; }
  // Flat size of the trainable leaves (encoder blocks, or W, b, e_0..e_{L-1}).
  std::size_t trainable_size() const { return trainable_size_; }
  // Replace trainable values; same order and shapes as the training leaves.
  void load(std::span<const ad::Tensor> leaves);
  // Split a flat gradient into tensors shaped like `leaves`.
  static std::vector<ad::Tensor> unflatten(std::span<const double> flat,
                                           std::span<const ad::Tensor> leaves);

  void posterior(std::span<const double> x, double mean[2], double log_variance[2]);

  // ELBO of one point under the given noise (S x 2, row-major); adds
  // weight * dELBO/d(trainable) into `grad` (length trainable_size()).
  double accumulate_gradient(std::span<const double> x, const double* noise, std::size_t samples,
                             double sigma, double weight, std::span<double> grad);

 private:
  void effective(std::span<const double> x);
  void encoder_pass(std::span<const double> x);

  std::size_t d_ = 0;
  std::size_t h_ = 0;
  std::size_t out_ = 0;
  std::size_t blocks_ = 0;
  std::vector<std::size_t> offset_;
  std::vector<std::size_t> size_;
  std::vector<double> base_;

  bool modulated_ = false;
  std::size_t e_dim_ = 0;
  std::size_t d_max_ = 0;
  std::vector<double> weight_;  // d_max x (d + e_dim)
  std::vector<double> bias_;
  std::vector<double> embeddings_;  // L x e_dim

  std::size_t trainable_size_ = 0;

  // Scratch.
  std::vector<double> phi_;
  std::vector<double> u_;
  std::vector<double> pre_;
  std::vector<double> hidden_;
  std::vector<double> out_buf_;
  std::vector<double> dphi_;
  std::vector<double> dhidden_;
};

}  // namespace iavae

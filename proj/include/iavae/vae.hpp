#pragma once

// The variational objective and the training loop for the plain VAE and the
// instance-adaptive variant.
//
// The generative model is fixed: p(z) = N(0, I), p(x|z) = N(decoder_true(z), sigma^2 I).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "iavae/autodiff.hpp"
#include "iavae/hypernet.hpp"
#include "iavae/models.hpp"
#include "iavae/synthetic.hpp"

namespace iavae {

struct ElboEstimate {
  double elbo = 0.0;
  double reconstruction = 0.0;
  double kl = 0.0;
  std::size_t num_samples = 0;
};

// KL(N(mean, exp(log_variance)) || N(0, I)), closed form.
double kl_diag_gaussian(const PosteriorParams& q);

// z = mean + exp(log_variance / 2) * eps.
std::vector<double> reparameterize(const PosteriorParams& q, std::span<const double> eps);

// log N(x; mean, sigma^2 I).
double gaussian_loglik(std::span<const double> x, std::span<const double> mean, double sigma);

template <typename T>
T kl_forward(const T& mean, const T& log_variance) {
  return scale(sum(add_scalar(sub(add(square(mean), exp(log_variance)), log_variance), -1.0)), 0.5);
}

template <typename T>
T reparameterize_forward(const T& mean, const T& log_variance, const T& eps) {
  return add(mean, mul(exp(scale(log_variance, 0.5)), eps));
}

template <typename T>
T gaussian_loglik_forward(const T& x, const T& mean, double sigma) {
  const double d = static_cast<double>(x.shape().numel());
  const double log_norm = -0.5 * d * std::log(2.0 * std::numbers::pi * sigma * sigma);
  return add_scalar(scale(sum(square(sub(x, mean))), -0.5 / (sigma * sigma)), log_norm);
}

template <typename T>
struct ElboTerms {
  T elbo;
  T reconstruction;
  T kl;
};

// Monte Carlo ELBO recorded on a graph; `noise` holds one standard-normal
// row per sample (S x k).
ElboTerms<ad::Var> elbo_graph(ad::Var x, const Posterior<ad::Var>& q, const ad::Tensor& noise,
                              double sigma);

// Same estimator evaluated directly.
ElboEstimate elbo_estimate(std::span<const double> x, const PosteriorParams& q,
                           const ad::Tensor& noise, double sigma);
ElboEstimate elbo_estimate(std::span<const double> x, const EncoderParams& effective,
                           const ad::Tensor& noise, double sigma);

// S x k standard normals.
ad::Tensor draw_noise(std::uint64_t seed, std::uint64_t index, std::size_t samples,
                      std::size_t latent_dim);

enum class Mode { kVae, kIaVae };
const char* mode_name(Mode mode);

// A plain encoder, or a frozen base encoder plus a hypernetwork.
struct InferenceModel {
  EncoderParams encoder;
  std::optional<HypernetParams> hypernet;

  Mode mode() const { return hypernet ? Mode::kIaVae : Mode::kVae; }
  EncoderParams effective_params(std::span<const double> x) const;
  PosteriorParams posterior(std::span<const double> x) const;
  // Base encoder plus hypernetwork projection (W, b); embeddings excluded.
  std::size_t inference_parameter_count() const;
  std::size_t embedding_parameter_count() const;
};

// kFused uses the flat kernel (kernel.hpp); kGraph records an autodiff graph
// per minibatch. Both draw the same noise and agree to rounding.
enum class GradientEngine { kFused, kGraph };

struct TrainConfig {
  double learning_rate = 1e-4;
  // Only meaningful with a learnable decoder; the oracle decoder has none.
  double decoder_learning_rate = 5e-5;
  bool train_decoder = false;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 1000;
  std::size_t patience = 100;
  std::size_t num_mc_samples = 1;
  // Samples per point for the early-stopping ELBO (fixed noise).
  std::size_t eval_samples = 64;
  std::uint64_t seed = 0;
  std::uint64_t eval_seed = 12345;
  double hypernet_init_std = 1e-3;
  std::size_t embedding_dim = 2;
  std::size_t hidden_width = 2;
  GradientEngine engine = GradientEngine::kFused;

  void validate() const;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double elbo = 0.0;
  double reconstruction = 0.0;
  double kl = 0.0;
  double wall_ms = 0.0;
};

struct TrainResult {
  InferenceModel model;  // best-ELBO snapshot
  std::vector<EpochMetrics> history;  // history[0] is the untrained model
  std::size_t best_epoch = 0;
  bool stopped_early = false;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

// VAE mode trains the encoder (starting from `base` if given, otherwise a
// fresh encoder). IA-VAE mode freezes `base` and trains W, b and the block
// embeddings.
TrainResult train(const SyntheticDataset& data, Mode mode, const std::optional<EncoderParams>& base,
                  const TrainConfig& cfg, const EpochCallback& on_epoch = {});

struct DatasetEvaluation {
  double elbo = 0.0;
  double reconstruction = 0.0;
  double kl = 0.0;
  std::vector<ElboEstimate> points;
};

// Dataset-mean ELBO; point i uses draw_noise(seed, i, samples, 2).
DatasetEvaluation evaluate(const SyntheticDataset& data, const InferenceModel& model,
                           std::size_t samples, std::uint64_t seed);

struct LocalOptimum {
  PosteriorParams params;
  double elbo = 0.0;
  std::size_t best_step = 0;
};

// Optimizes the single-point ELBO over (mean, log_variance) directly with
// Adam under fixed noise; returns the best iterate, never worse than the start.
LocalOptimum per_instance_optimal_elbo(std::span<const double> x, const PosteriorParams& init,
                                       std::size_t steps, double lr, const ad::Tensor& noise,
                                       double sigma);

}  // namespace iavae

#include "iavae/kernel.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace iavae {

ElboEstimate mc_elbo(std::span<const double> x, const double mean[2], const double log_variance[2],
                     const double* noise, std::size_t samples, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_loglik: sigma must be positive");
  if (x.size() != 3)
    throw std::invalid_argument("gaussian_loglik: dimension mismatch " + std::to_string(x.size()) +
                                " vs 3");
  // Same arithmetic as gaussian_loglik(x, decoder_true(z), sigma).
  const double log_norm = -0.5 * 3.0 * std::log(2.0 * std::numbers::pi * sigma * sigma);
  const double coef = -0.5 / (sigma * sigma);
  const double s0 = std::exp(0.5 * log_variance[0]);
  const double s1 = std::exp(0.5 * log_variance[1]);
  double recon = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    const double z0 = mean[0] + s0 * noise[2 * s];
    const double z1 = mean[1] + s1 * noise[2 * s + 1];
    const double r0 = x[0] - z0;
    const double r1 = x[1] - z1;
    const double r2 = x[2] - ((z0 + z1) + z0 * z1);
    double sq = 0.0;
    sq += r0 * r0;
    sq += r1 * r1;
    sq += r2 * r2;
    recon += sq * coef + log_norm;
  }
  ElboEstimate out;
  out.num_samples = samples;
  out.reconstruction = recon / static_cast<double>(samples);
  double kl = 0.0;
  for (std::size_t i = 0; i < 2; ++i)
    kl += (mean[i] * mean[i] + std::exp(log_variance[i])) - log_variance[i] - 1.0;
  out.kl = 0.5 * kl;
  out.elbo = out.reconstruction - out.kl;
  return out;
}

FlatInference::FlatInference(const InferenceModel& model) {
  const EncoderParams& enc = model.encoder;
  enc.validate();
  if (enc.arch.latent_dim != 2)
    throw std::invalid_argument("FlatInference: latent dimension must be 2");
  d_ = enc.arch.input_dim;
  h_ = enc.arch.hidden_width;
  out_ = enc.arch.output_dim();
  blocks_ = enc.blocks.size();
  for (const ParamBlock& b : enc.blocks) {
    offset_.push_back(base_.size());
    size_.push_back(b.size());
    base_.insert(base_.end(), b.values.values().begin(), b.values.values().end());
  }
  if (model.hypernet) {
    const HypernetParams& psi = *model.hypernet;
    psi.check_layout(enc);
    modulated_ = true;
    e_dim_ = psi.embedding_dim();
    d_max_ = psi.max_block_size();
    weight_ = psi.weight.values();
    bias_ = psi.bias.values();
    for (const ad::Tensor& e : psi.block_embeddings)
      embeddings_.insert(embeddings_.end(), e.values().begin(), e.values().end());
    trainable_size_ = weight_.size() + bias_.size() + embeddings_.size();
  } else {
    trainable_size_ = base_.size();
  }
  phi_.resize(base_.size());
  u_.resize(d_ + e_dim_);
  pre_.resize(h_);
  hidden_.resize(h_);
  out_buf_.resize(out_);
  dphi_.resize(base_.size());
  dhidden_.resize(h_);
}

void FlatInference::load(std::span<const ad::Tensor> leaves) {
  std::vector<double>* targets[] = {&weight_, &bias_};
  if (!modulated_) {
    if (leaves.size() != blocks_) throw std::invalid_argument("FlatInference: leaf count mismatch");
    for (std::size_t l = 0; l < blocks_; ++l)
      std::copy(leaves[l].values().begin(), leaves[l].values().end(), base_.begin() + offset_[l]);
    return;
  }
  if (leaves.size() != 2 + blocks_) throw std::invalid_argument("FlatInference: leaf count mismatch");
  for (std::size_t k = 0; k < 2; ++k) *targets[k] = leaves[k].values();
  for (std::size_t l = 0; l < blocks_; ++l)
    std::copy(leaves[2 + l].values().begin(), leaves[2 + l].values().end(),
              embeddings_.begin() + l * e_dim_);
}

std::vector<ad::Tensor> FlatInference::unflatten(std::span<const double> flat,
                                                 std::span<const ad::Tensor> leaves) {
  std::vector<ad::Tensor> out;
  out.reserve(leaves.size());
  std::size_t pos = 0;
  for (const ad::Tensor& leaf : leaves) {
    ad::Tensor t(leaf.shape());
    std::copy(flat.begin() + pos, flat.begin() + pos + leaf.size(), t.data().begin());
    pos += leaf.size();
    out.push_back(std::move(t));
  }
  return out;
}

void FlatInference::effective(std::span<const double> x) {
  if (x.size() != d_)
    throw std::invalid_argument("encode: observation has dimension " + std::to_string(x.size()) +
                                ", encoder expects " + std::to_string(d_));
  if (!modulated_) {
    std::copy(base_.begin(), base_.end(), phi_.begin());
    return;
  }
  const std::size_t cols = d_ + e_dim_;
  std::copy(x.begin(), x.end(), u_.begin());
  for (std::size_t l = 0; l < blocks_; ++l) {
    std::copy(embeddings_.begin() + l * e_dim_, embeddings_.begin() + (l + 1) * e_dim_, u_.begin() + d_);
    for (std::size_t i = 0; i < size_[l]; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < cols; ++j) acc += weight_[i * cols + j] * u_[j];
      phi_[offset_[l] + i] = base_[offset_[l] + i] + (acc + bias_[i]);
    }
  }
}

void FlatInference::encoder_pass(std::span<const double> x) {
  const double* w1 = phi_.data() + offset_[0];
  const double* b1 = phi_.data() + offset_[1];
  const double* w2 = phi_.data() + offset_[2];
  const double* b2 = phi_.data() + offset_[3];
  for (std::size_t i = 0; i < h_; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d_; ++j) acc += w1[i * d_ + j] * x[j];
    pre_[i] = acc + b1[i];
    hidden_[i] = pre_[i] > 0.0 ? pre_[i] : 0.0;
  }
  for (std::size_t i = 0; i < out_; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < h_; ++j) acc += w2[i * h_ + j] * hidden_[j];
    out_buf_[i] = acc + b2[i];
  }
}

void FlatInference::posterior(std::span<const double> x, double mean[2], double log_variance[2]) {
  effective(x);
  encoder_pass(x);
  mean[0] = out_buf_[0];
  mean[1] = out_buf_[1];
  log_variance[0] = out_buf_[2];
  log_variance[1] = out_buf_[3];
}

double FlatInference::accumulate_gradient(std::span<const double> x, const double* noise,
                                          std::size_t samples, double sigma, double weight,
                                          std::span<double> grad) {
  if (grad.size() != trainable_size_) throw std::invalid_argument("FlatInference: gradient size mismatch");
  double mean[2];
  double logvar[2];
  posterior(x, mean, logvar);
  const ElboEstimate e = mc_elbo(x, mean, logvar, noise, samples, sigma);

  // dELBO / d(mean, log_variance).
  const double inv_var = 1.0 / (sigma * sigma);
  const double s0 = std::exp(0.5 * logvar[0]);
  const double s1 = std::exp(0.5 * logvar[1]);
  double g[4] = {0.0, 0.0, 0.0, 0.0};
  for (std::size_t s = 0; s < samples; ++s) {
    const double e0 = noise[2 * s];
    const double e1 = noise[2 * s + 1];
    const double z0 = mean[0] + s0 * e0;
    const double z1 = mean[1] + s1 * e1;
    const double r2 = x[2] - ((z0 + z1) + z0 * z1);
    const double dz0 = ((x[0] - z0) + (1.0 + z1) * r2) * inv_var;
    const double dz1 = ((x[1] - z1) + (1.0 + z0) * r2) * inv_var;
    g[0] += dz0;
    g[1] += dz1;
    g[2] += dz0 * 0.5 * s0 * e0;
    g[3] += dz1 * 0.5 * s1 * e1;
  }
  const double n = static_cast<double>(samples);
  double dout[4];
  dout[0] = weight * (g[0] / n - mean[0]);
  dout[1] = weight * (g[1] / n - mean[1]);
  dout[2] = weight * (g[2] / n - 0.5 * (std::exp(logvar[0]) - 1.0));
  dout[3] = weight * (g[3] / n - 0.5 * (std::exp(logvar[1]) - 1.0));

  // Encoder backward into dphi.
  const double* w2 = phi_.data() + offset_[2];
  double* dw1 = dphi_.data() + offset_[0];
  double* db1 = dphi_.data() + offset_[1];
  double* dw2 = dphi_.data() + offset_[2];
  double* db2 = dphi_.data() + offset_[3];
  std::fill(dhidden_.begin(), dhidden_.end(), 0.0);
  for (std::size_t i = 0; i < out_; ++i) {
    db2[i] = dout[i];
    for (std::size_t j = 0; j < h_; ++j) {
      dw2[i * h_ + j] = dout[i] * hidden_[j];
      dhidden_[j] += w2[i * h_ + j] * dout[i];
    }
  }
  for (std::size_t i = 0; i < h_; ++i) {
    const double da = pre_[i] > 0.0 ? dhidden_[i] : 0.0;
    db1[i] = da;
    for (std::size_t j = 0; j < d_; ++j) dw1[i * d_ + j] = da * x[j];
  }

  if (!modulated_) {
    for (std::size_t k = 0; k < dphi_.size(); ++k) grad[k] += dphi_[k];
    return e.elbo;
  }
  const std::size_t cols = d_ + e_dim_;
  double* gw = grad.data();
  double* gb = gw + weight_.size();
  double* ge = gb + bias_.size();
  std::copy(x.begin(), x.end(), u_.begin());
  for (std::size_t l = 0; l < blocks_; ++l) {
    std::copy(embeddings_.begin() + l * e_dim_, embeddings_.begin() + (l + 1) * e_dim_, u_.begin() + d_);
    const double* dl = dphi_.data() + offset_[l];
    for (std::size_t i = 0; i < size_[l]; ++i) {
      const double gi = dl[i];
      gb[i] += gi;
      for (std::size_t j = 0; j < cols; ++j) gw[i * cols + j] += gi * u_[j];
      for (std::size_t k = 0; k < e_dim_; ++k) ge[l * e_dim_ + k] += weight_[i * cols + d_ + k] * gi;
    }
  }
  return e.elbo;
}

}  // namespace iavae

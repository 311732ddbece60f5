#include "iavae/vae.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>
#include <stdexcept>
#include <string>

#include "iavae/kernel.hpp"
#include "iavae/optim.hpp"
#include "iavae/rng.hpp"

namespace iavae {

double kl_diag_gaussian(const PosteriorParams& q) {
  double acc = 0.0;
  for (std::size_t i = 0; i < q.dim(); ++i)
    acc += (q.mean[i] * q.mean[i] + std::exp(q.log_variance[i])) - q.log_variance[i] - 1.0;
  return 0.5 * acc;
}

std::vector<double> reparameterize(const PosteriorParams& q, std::span<const double> eps) {
  if (eps.size() != q.dim())
    throw std::invalid_argument("reparameterize: noise has dimension " + std::to_string(eps.size()) +
                                ", posterior has " + std::to_string(q.dim()));
  std::vector<double> z(q.dim());
  for (std::size_t i = 0; i < z.size(); ++i)
    z[i] = q.mean[i] + std::exp(0.5 * q.log_variance[i]) * eps[i];
  return z;
}

double gaussian_loglik(std::span<const double> x, std::span<const double> mean, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_loglik: sigma must be positive");
  if (x.size() != mean.size())
    throw std::invalid_argument("gaussian_loglik: dimension mismatch " + std::to_string(x.size()) +
                                " vs " + std::to_string(mean.size()));
  double sq = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) sq += (x[i] - mean[i]) * (x[i] - mean[i]);
  const double d = static_cast<double>(x.size());
  return sq * (-0.5 / (sigma * sigma)) + -0.5 * d * std::log(2.0 * std::numbers::pi * sigma * sigma);
}

ElboTerms<ad::Var> elbo_graph(ad::Var x, const Posterior<ad::Var>& q, const ad::Tensor& noise,
                              double sigma) {
  ad::Graph& g = x.graph();
  const std::size_t samples = noise.shape()[0];
  const std::size_t k = noise.shape()[1];
  std::vector<ad::Var> logliks;
  logliks.reserve(samples);
  for (std::size_t s = 0; s < samples; ++s) {
    const ad::Var eps = g.constant(ad::slice(noise, s * k, k));
    const ad::Var z = reparameterize_forward(q.mean, q.log_variance, eps);
    logliks.push_back(gaussian_loglik_forward(x, decoder_forward(z), sigma));
  }
  const ad::Var recon = samples == 1 ? logliks.front() : ad::mean(ad::concat(logliks));
  const ad::Var kl = kl_forward(q.mean, q.log_variance);
  return {ad::sub(recon, kl), recon, kl};
}

ElboEstimate elbo_estimate(std::span<const double> x, const PosteriorParams& q,
                           const ad::Tensor& noise, double sigma) {
  if (noise.shape().rank() != 2 || noise.shape()[1] != q.dim() || noise.shape()[0] == 0)
    throw std::invalid_argument("elbo_estimate: noise must be S x " + std::to_string(q.dim()) +
                                " with S >= 1, got " + noise.shape().to_string());
  if (q.dim() != 2) throw std::invalid_argument("elbo_estimate: latent dimension must be 2");
  const double mean[2] = {q.mean[0], q.mean[1]};
  const double log_variance[2] = {q.log_variance[0], q.log_variance[1]};
  return mc_elbo(x, mean, log_variance, noise.values().data(), noise.shape()[0], sigma);
}

ElboEstimate elbo_estimate(std::span<const double> x, const EncoderParams& effective,
                           const ad::Tensor& noise, double sigma) {
  return elbo_estimate(x, encode(x, effective), noise, sigma);
}

ad::Tensor draw_noise(std::uint64_t seed, std::uint64_t index, std::size_t samples,
                      std::size_t latent_dim) {
  Rng rng(splitmix64(seed) ^ splitmix64(index + 1), Stream::kEvaluationNoise);
  ad::Tensor out(ad::Shape{samples, latent_dim});
  for (double& v : out.data()) v = rng.normal();
  return out;
}

const char* mode_name(Mode mode) { return mode == Mode::kVae ? "vae" : "iavae"; }

EncoderParams InferenceModel::effective_params(std::span<const double> x) const {
  return hypernet ? modulate(encoder, x, *hypernet) : encoder;
}

PosteriorParams InferenceModel::posterior(std::span<const double> x) const {
  return encode(x, effective_params(x));
}

std::size_t InferenceModel::inference_parameter_count() const {
  return encoder.parameter_count() + (hypernet ? hypernet->projection_parameter_count() : 0);
}

std::size_t InferenceModel::embedding_parameter_count() const {
  return hypernet ? hypernet->embedding_parameter_count() : 0;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("train config: " + what); };
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (!(decoder_learning_rate > 0.0)) fail("decoder_learning_rate must be positive");
  if (batch_size == 0) fail("batch_size must be positive");
  if (patience == 0) fail("patience must be positive");
  if (max_epochs > 0 && patience > max_epochs) fail("patience exceeds max_epochs");
  if (num_mc_samples == 0) fail("num_mc_samples must be positive");
  if (eval_samples == 0) fail("eval_samples must be positive");
  if (!(hypernet_init_std >= 0.0)) fail("hypernet_init_std must be non-negative");
  if (embedding_dim == 0) fail("embedding_dim must be positive");
  if (hidden_width == 0) fail("hidden_width must be positive");
  if (train_decoder) fail("the oracle decoder has no trainable parameters");
}

namespace {

struct Evaluator {
  const SyntheticDataset& data;
  std::size_t samples;
  std::vector<double> noise;  // point i owns rows [i * samples, (i + 1) * samples)

  Evaluator(const SyntheticDataset& d, std::size_t s, std::uint64_t seed) : data(d), samples(s) {
    noise.reserve(d.size() * s * 2);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const ad::Tensor t = draw_noise(seed, i, samples, 2);
      noise.insert(noise.end(), t.values().begin(), t.values().end());
    }
  }

  EpochMetrics operator()(FlatInference& flat) const {
    EpochMetrics m;
    for (std::size_t i = 0; i < data.size(); ++i) {
      double mean[2];
      double logvar[2];
      flat.posterior(data.x[i], mean, logvar);
      const ElboEstimate e = mc_elbo(data.x[i], mean, logvar, noise.data() + 2 * samples * i, samples, data.sigma);
      m.elbo += e.elbo;
      m.reconstruction += e.reconstruction;
      m.kl += e.kl;
    }
    const double n = static_cast<double>(data.size());
    m.elbo /= n;
    m.reconstruction /= n;
    m.kl /= n;
    return m;
  }
};

std::vector<std::string> leaf_names(const InferenceModel& model) {
  std::vector<std::string> names;
  if (model.hypernet) {
    names = {"W", "b"};
    for (std::size_t l = 0; l < model.hypernet->block_count(); ++l)
      names.push_back("e_" + std::to_string(l));
  } else {
    for (const ParamBlock& b : model.encoder.blocks) names.push_back(b.name);
  }
  return names;
}

}  // namespace

TrainResult train(const SyntheticDataset& data, Mode mode, const std::optional<EncoderParams>& base,
                  const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  if (mode == Mode::kIaVae && !base) throw std::invalid_argument("train: IA-VAE needs a trained base encoder");

  InferenceModel model;
  if (mode == Mode::kVae) {
    model.encoder = base ? *base : make_encoder(cfg.hidden_width, cfg.seed);
  } else {
    model.encoder = *base;
    model.hypernet = make_hypernet(*base, cfg.embedding_dim, cfg.hypernet_init_std, cfg.seed);
  }
  model.encoder.validate();

  std::vector<ad::Tensor> leaves =
      mode == Mode::kVae ? model.encoder.tensors() : model.hypernet->tensors();
  const std::vector<std::string> names = leaf_names(model);
  auto store = [&](InferenceModel& m) {
    if (m.hypernet) {
      m.hypernet->set_tensors(leaves);
    } else {
      for (std::size_t l = 0; l < leaves.size(); ++l) m.encoder.blocks[l].values = leaves[l];
    }
  };

  AdamOptions adam_options;
  adam_options.learning_rate = cfg.learning_rate;
  AdamState adam(adam_options, leaves);
  FlatInference flat(model);
  const Evaluator evaluate_model(data, cfg.eval_samples, cfg.eval_seed);
  EarlyStopping<InferenceModel> stopper(cfg.patience);

  TrainResult result;
  {
    EpochMetrics m = evaluate_model(flat);
    m.epoch = 0;
    result.history.push_back(m);
    if (on_epoch) on_epoch(m);
    stopper.update(m.elbo, model);
  }

  Rng shuffle_rng(cfg.seed, Stream::kShuffle);
  Rng noise_rng(cfg.seed, Stream::kTrainingNoise);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t k = model.encoder.arch.latent_dim;
  const std::vector<ad::Tensor> base_blocks = model.encoder.tensors();
  std::vector<double> flat_grad(flat.trainable_size());
  std::vector<double> eps(cfg.num_mc_samples * k);

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    shuffle_rng.shuffle(order.begin(), order.end());
    for (std::size_t first = 0; first < order.size(); first += cfg.batch_size) {
      const std::size_t last = std::min(order.size(), first + cfg.batch_size);
      const double weight = -1.0 / static_cast<double>(last - first);
      std::vector<ad::Tensor> grads;
      if (cfg.engine == GradientEngine::kFused) {
        std::fill(flat_grad.begin(), flat_grad.end(), 0.0);
        for (std::size_t b = first; b < last; ++b) {
          for (double& v : eps) v = noise_rng.normal();
          flat.accumulate_gradient(data.x[order[b]], eps.data(), cfg.num_mc_samples, data.sigma, weight,
                                   flat_grad);
        }
        grads = FlatInference::unflatten(flat_grad, leaves);
      } else {
        ad::Graph g;
        std::vector<ad::Var> leaf_vars;
        leaf_vars.reserve(leaves.size());
        for (const ad::Tensor& t : leaves) leaf_vars.push_back(g.leaf(t));
        std::vector<ad::Var> frozen;
        if (mode == Mode::kIaVae)
          for (const ad::Tensor& t : base_blocks) frozen.push_back(g.constant(t));

        std::vector<ad::Var> elbos;
        elbos.reserve(last - first);
        for (std::size_t b = first; b < last; ++b) {
          const auto& xi = data.x[order[b]];
          const ad::Var x = g.constant(ad::Tensor::vector({xi.begin(), xi.end()}));
          std::vector<ad::Var> blocks;
          if (mode == Mode::kVae) {
            blocks = leaf_vars;
          } else {
            blocks = modulated_blocks<ad::Var>(x, frozen, leaf_vars[0], leaf_vars[1],
                                               std::span<const ad::Var>(leaf_vars).subspan(2));
          }
          const Posterior<ad::Var> q = encoder_forward<ad::Var>(x, blocks, k);
          ad::Tensor noise(ad::Shape{cfg.num_mc_samples, k});
          for (double& v : noise.data()) v = noise_rng.normal();
          elbos.push_back(elbo_graph(x, q, noise, data.sigma).elbo);
        }
        const ad::Var loss = ad::scale(ad::sum(ad::concat(elbos)), weight);
        g.backward(loss);
        grads.reserve(leaf_vars.size());
        for (ad::Var v : leaf_vars) grads.push_back(v.grad());
      }
      try {
        adam.step(leaves, grads, names);
      } catch (const NonFiniteGradient& e) {
        throw std::runtime_error("epoch " + std::to_string(epoch) + ": " + e.what());
      }
      flat.load(leaves);
    }
    store(model);
    EpochMetrics m = evaluate_model(flat);
    m.epoch = epoch;
    m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    result.history.push_back(m);
    if (on_epoch) on_epoch(m);
    if (stopper.update(m.elbo, model) == StopDecision::kStop) {
      result.stopped_early = true;
      break;
    }
  }

  result.model = stopper.best_snapshot();
  result.best_epoch = stopper.best_index();
  return result;
}

DatasetEvaluation evaluate(const SyntheticDataset& data, const InferenceModel& model,
                           std::size_t samples, std::uint64_t seed) {
  DatasetEvaluation out;
  out.points.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const ad::Tensor noise = draw_noise(seed, i, samples, 2);
    const ElboEstimate e = elbo_estimate(data.x[i], model.posterior(data.x[i]), noise, data.sigma);
    out.elbo += e.elbo;
    out.reconstruction += e.reconstruction;
    out.kl += e.kl;
    out.points.push_back(e);
  }
  const double n = static_cast<double>(std::max<std::size_t>(data.size(), 1));
  out.elbo /= n;
  out.reconstruction /= n;
  out.kl /= n;
  return out;
}

namespace {

// ELBO and its gradient in (mean, log_variance) for the oracle model.
double local_elbo(std::span<const double> x, const std::array<double, 4>& lambda,
                  const ad::Tensor& noise, double sigma, std::array<double, 4>* grad) {
  const std::size_t samples = noise.shape()[0];
  const double inv_var = 1.0 / (sigma * sigma);
  const double s0 = std::exp(0.5 * lambda[2]);
  const double s1 = std::exp(0.5 * lambda[3]);
  double recon = 0.0;
  std::array<double, 4> g{};
  for (std::size_t s = 0; s < samples; ++s) {
    const double e0 = noise[2 * s];
    const double e1 = noise[2 * s + 1];
    const std::array<double, 2> z{lambda[0] + s0 * e0, lambda[1] + s1 * e1};
    const std::array<double, 3> f = decoder_true(z);
    recon += gaussian_loglik(x, f, sigma);
    const double r0 = x[0] - f[0];
    const double r1 = x[1] - f[1];
    const double r2 = x[2] - f[2];
    // Jacobian of the decoder: rows [1,0], [0,1], [1+z2, 1+z1].
    const double dz0 = (r0 + (1.0 + z[1]) * r2) * inv_var;
    const double dz1 = (r1 + (1.0 + z[0]) * r2) * inv_var;
    g[0] += dz0;
    g[1] += dz1;
    g[2] += dz0 * 0.5 * s0 * e0;
    g[3] += dz1 * 0.5 * s1 * e1;
  }
  const double n = static_cast<double>(samples);
  recon /= n;
  PosteriorParams q{{lambda[0], lambda[1]}, {lambda[2], lambda[3]}};
  const double kl = kl_diag_gaussian(q);
  if (grad) {
    (*grad)[0] = g[0] / n - lambda[0];
    (*grad)[1] = g[1] / n - lambda[1];
    (*grad)[2] = g[2] / n - 0.5 * (std::exp(lambda[2]) - 1.0);
    (*grad)[3] = g[3] / n - 0.5 * (std::exp(lambda[3]) - 1.0);
  }
  return recon - kl;
}

}  // namespace

LocalOptimum per_instance_optimal_elbo(std::span<const double> x, const PosteriorParams& init,
                                       std::size_t steps, double lr, const ad::Tensor& noise,
                                       double sigma) {
  if (init.dim() != 2) throw std::invalid_argument("per_instance_optimal_elbo: latent dimension must be 2");
  if (noise.shape().rank() != 2 || noise.shape()[1] != 2 || noise.shape()[0] == 0)
    throw std::invalid_argument("per_instance_optimal_elbo: noise must be S x 2");
  std::array<double, 4> lambda{init.mean[0], init.mean[1], init.log_variance[0], init.log_variance[1]};
  LocalOptimum best;
  best.params = init;
  best.elbo = elbo_estimate(x, init, noise, sigma).elbo;
  if (steps == 0) return best;

  AdamOptions options;
  options.learning_rate = lr;
  std::vector<ad::Tensor> params{ad::Tensor::vector({lambda.begin(), lambda.end()})};
  AdamState adam(options, params);
  for (std::size_t step = 1; step <= steps; ++step) {
    std::array<double, 4> grad{};
    local_elbo(x, lambda, noise, sigma, &grad);
    // Adam minimizes; ascend the ELBO.
    ad::Tensor descent(ad::Shape{4});
    for (std::size_t i = 0; i < 4; ++i) descent[i] = -grad[i];
    adam.step(params, std::span<const ad::Tensor>(&descent, 1));
    std::copy(params[0].data().begin(), params[0].data().end(), lambda.begin());
    const PosteriorParams q{{lambda[0], lambda[1]}, {lambda[2], lambda[3]}};
    const double value = elbo_estimate(x, q, noise, sigma).elbo;
    if (value > best.elbo) {
      best.elbo = value;
      best.params = q;
      best.best_step = step;
    }
  }
  return best;
}

}  // namespace iavae

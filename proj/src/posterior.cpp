#include "iavae/posterior.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "iavae/rng.hpp"
#include "iavae/vae.hpp"

namespace iavae {

namespace {

double log_std_normal2(std::span<const double> z) {
  return -0.5 * (z[0] * z[0] + z[1] * z[1]) - std::log(2.0 * std::numbers::pi);
}

double norm(const Vec2& v) { return std::hypot(v[0], v[1]); }

}  // namespace

double log_posterior_unnorm(std::span<const double> z, std::span<const double> x,
                            const OracleModel& model) {
  if (z.size() != 2 || x.size() != 3)
    throw std::invalid_argument("log_posterior_unnorm: expected z in R^2 and x in R^3");
  return gaussian_loglik(x, model.mean(z), model.sigma) + log_std_normal2(z);
}

Vec2 log_posterior_gradient(const Vec2& z, std::span<const double> x, const OracleModel& model) {
  const std::array<double, 3> f = model.mean(z);
  const double inv_var = 1.0 / (model.sigma * model.sigma);
  const double r0 = x[0] - f[0];
  const double r1 = x[1] - f[1];
  const double r2 = x[2] - f[2];
  const double j20 = model.interaction ? 1.0 + z[1] : 1.0;
  const double j21 = model.interaction ? 1.0 + z[0] : 1.0;
  return {(r0 + j20 * r2) * inv_var - z[0], (r1 + j21 * r2) * inv_var - z[1]};
}

Mat2 log_posterior_hessian(const Vec2& z, std::span<const double> x, const OracleModel& model) {
  const std::array<double, 3> f = model.mean(z);
  const double inv_var = 1.0 / (model.sigma * model.sigma);
  const double r2 = x[2] - f[2];
  const double j20 = model.interaction ? 1.0 + z[1] : 1.0;
  const double j21 = model.interaction ? 1.0 + z[0] : 1.0;
  // -J^T J / sigma^2 + r2 * d2f3 / sigma^2 - I, with d2f3 = [[0,1],[1,0]].
  const double cross = model.interaction ? r2 : 0.0;
  Mat2 h{};
  h[0][0] = -(1.0 + j20 * j20) * inv_var - 1.0;
  h[1][1] = -(1.0 + j21 * j21) * inv_var - 1.0;
  h[0][1] = h[1][0] = (-j20 * j21 + cross) * inv_var;
  return h;
}

Vec2 symmetric_eigenvalues(const Mat2& m) {
  const double mid = 0.5 * (m[0][0] + m[1][1]);
  const double half_diff = 0.5 * (m[0][0] - m[1][1]);
  const double radius = std::hypot(half_diff, m[0][1]);
  return {mid - radius, mid + radius};
}

Mat2 inverse(const Mat2& m) {
  const double det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
  if (det == 0.0) throw std::invalid_argument("inverse: singular 2x2 matrix");
  return {{{m[1][1] / det, -m[0][1] / det}, {-m[1][0] / det, m[0][0] / det}}};
}

namespace {

struct Ascent {
  Vec2 z;
  double value;
  double gradient_norm;
};

Ascent ascend(Vec2 z, std::span<const double> x, const OracleModel& model, const MapOptions& options) {
  double value = log_posterior_unnorm(z, x, model);
  Vec2 g = log_posterior_gradient(z, x, model);
  for (std::size_t step = 0; step < options.steps && norm(g) > 1e-12; ++step) {
    const Mat2 h = log_posterior_hessian(z, x, model);
    const Mat2 neg{{{-h[0][0], -h[0][1]}, {-h[1][0], -h[1][1]}}};
    Vec2 dir;
    double t = 1.0;
    if (symmetric_eigenvalues(neg)[0] > 0.0) {
      const Mat2 inv = inverse(neg);
      dir = {inv[0][0] * g[0] + inv[0][1] * g[1], inv[1][0] * g[0] + inv[1][1] * g[1]};
    } else {
      dir = g;
      t = options.lr;
    }
    const double slope = g[0] * dir[0] + g[1] * dir[1];
    bool moved = false;
    for (; t > 1e-14; t *= 0.5) {
      const Vec2 trial{z[0] + t * dir[0], z[1] + t * dir[1]};
      const double trial_value = log_posterior_unnorm(trial, x, model);
      if (trial_value >= value + 1e-4 * t * slope) {
        z = trial;
        value = trial_value;
        moved = true;
        break;
      }
    }
    g = log_posterior_gradient(z, x, model);
    if (!moved) break;
  }
  return {z, value, norm(g)};
}

}  // namespace

MapResult find_map(std::span<const double> x, const OracleModel& model, const MapOptions& options) {
  if (options.restarts == 0) throw std::invalid_argument("find_map: restarts must be at least 1");
  if (x.size() != 3) throw std::invalid_argument("find_map: observation must be in R^3");

  std::vector<Vec2> starts;
  if (options.initial_mean) starts.push_back(*options.initial_mean);
  if (starts.size() < options.restarts && options.seed_grid_resolution >= 2) {
    starts.push_back(posterior_grid(x, model, options.seed_grid_lo, options.seed_grid_hi,
                                    options.seed_grid_resolution)
                         .argmax());
  }
  if (starts.size() < options.restarts) starts.push_back({0.0, 0.0});
  Rng rng(options.seed, Stream::kMapRestarts);
  while (starts.size() < options.restarts) starts.push_back({rng.normal(), rng.normal()});

  MapResult best;
  best.log_posterior = -std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s < starts.size(); ++s) {
    const Ascent a = ascend(starts[s], x, model, options);
    if (a.value > best.log_posterior) {
      best.z = a.z;
      best.log_posterior = a.value;
      best.gradient_norm = a.gradient_norm;
      best.start_index = s;
    }
  }
  best.converged = best.gradient_norm < kMapGradientTolerance;
  return best;
}

NotPositiveDefinite::NotPositiveDefinite(double eigenvalue)
    : std::runtime_error("laplace_fit: negative Hessian has non-positive eigenvalue " +
                         std::to_string(eigenvalue) + "; not a local maximum"),
      eigenvalue_(eigenvalue) {}

LaplaceFit laplace_fit(std::span<const double> x, const Vec2& z_map, const OracleModel& model,
                       double step) {
  auto f = [&](double a, double b) {
    const Vec2 z{a, b};
    return log_posterior_unnorm(z, x, model);
  };
  const double z0 = z_map[0];
  const double z1 = z_map[1];
  const double center = f(z0, z1);
  const double h2 = step * step;
  Mat2 hess{};
  hess[0][0] = (f(z0 + step, z1) - 2.0 * center + f(z0 - step, z1)) / h2;
  hess[1][1] = (f(z0, z1 + step) - 2.0 * center + f(z0, z1 - step)) / h2;
  const double cross = (f(z0 + step, z1 + step) - f(z0 + step, z1 - step) -
                        f(z0 - step, z1 + step) + f(z0 - step, z1 - step)) /
                       (4.0 * h2);
  hess[0][1] = hess[1][0] = cross;

  LaplaceFit fit;
  fit.z_map = z_map;
  fit.log_post_at_map = center;
  fit.precision = {{{-hess[0][0], -0.5 * (hess[0][1] + hess[1][0])},
                    {-0.5 * (hess[0][1] + hess[1][0]), -hess[1][1]}}};
  const Vec2 eig = symmetric_eigenvalues(fit.precision);
  if (!(eig[0] > 0.0)) throw NotPositiveDefinite(eig[0]);
  fit.covariance = inverse(fit.precision);
  // Exact symmetry after inversion.
  fit.covariance[1][0] = fit.covariance[0][1];
  return fit;
}

double mahalanobis(std::span<const double> mu, const LaplaceFit& fit) {
  const double d0 = mu[0] - fit.z_map[0];
  const double d1 = mu[1] - fit.z_map[1];
  const Mat2& p = fit.precision;
  const double q = d0 * (p[0][0] * d0 + p[0][1] * d1) + d1 * (p[1][0] * d0 + p[1][1] * d1);
  return std::sqrt(std::max(q, 0.0));
}

double density_ratio(std::span<const double> mu, std::span<const double> x, const Vec2& z_map,
                     const OracleModel& model) {
  return std::exp(log_posterior_unnorm(mu, x, model) - log_posterior_unnorm(z_map, x, model));
}

Vec2 PosteriorGrid::argmax() const {
  const auto it = std::max_element(log_density.begin(), log_density.end());
  const auto k = static_cast<std::size_t>(it - log_density.begin());
  return {coordinate(k / resolution), coordinate(k % resolution)};
}

double PosteriorGrid::log_integral() const {
  const double peak = *std::max_element(log_density.begin(), log_density.end());
  double acc = 0.0;
  for (double v : log_density) acc += std::exp(v - peak);
  return peak + std::log(acc) + 2.0 * std::log(cell_width());
}

PosteriorGrid posterior_grid(std::span<const double> x, const OracleModel& model, double lo,
                             double hi, std::size_t resolution) {
  if (resolution < 2) throw std::invalid_argument("posterior_grid: resolution must be at least 2");
  if (!(hi > lo)) throw std::invalid_argument("posterior_grid: empty bounds");
  PosteriorGrid grid;
  grid.lo = lo;
  grid.hi = hi;
  grid.resolution = resolution;
  grid.log_density.resize(resolution * resolution);
  for (std::size_t i = 0; i < resolution; ++i) {
    for (std::size_t j = 0; j < resolution; ++j) {
      const Vec2 z{grid.coordinate(i), grid.coordinate(j)};
      grid.log_density[i * resolution + j] = log_posterior_unnorm(z, x, model);
    }
  }
  return grid;
}

double kl_to_posterior(const PosteriorParams& q, const PosteriorGrid& grid) {
  const double log_evidence = grid.log_integral();
  const double area = grid.cell_width() * grid.cell_width();
  const double v0 = q.variance(0);
  const double v1 = q.variance(1);
  const double log_norm =
      -std::log(2.0 * std::numbers::pi) - 0.5 * (q.log_variance[0] + q.log_variance[1]);
  double kl = 0.0;
  for (std::size_t i = 0; i < grid.resolution; ++i) {
    const double d0 = grid.coordinate(i) - q.mean[0];
    for (std::size_t j = 0; j < grid.resolution; ++j) {
      const double d1 = grid.coordinate(j) - q.mean[1];
      const double log_q = log_norm - 0.5 * (d0 * d0 / v0 + d1 * d1 / v1);
      const double log_post = grid.at(i, j) - log_evidence;
      kl += std::exp(log_q) * (log_q - log_post) * area;
    }
  }
  return kl;
}

LaplaceFit moment_fit(const PosteriorGrid& grid) {
  const double log_evidence = grid.log_integral();
  const double area = grid.cell_width() * grid.cell_width();
  double m0 = 0.0, m1 = 0.0, s00 = 0.0, s01 = 0.0, s11 = 0.0;
  for (std::size_t i = 0; i < grid.resolution; ++i) {
    for (std::size_t j = 0; j < grid.resolution; ++j) {
      const double w = std::exp(grid.at(i, j) - log_evidence) * area;
      const double a = grid.coordinate(i);
      const double b = grid.coordinate(j);
      m0 += w * a;
      m1 += w * b;
      s00 += w * a * a;
      s01 += w * a * b;
      s11 += w * b * b;
    }
  }
  LaplaceFit fit;
  fit.z_map = {m0, m1};
  fit.covariance = {{{s00 - m0 * m0, s01 - m0 * m1}, {s01 - m0 * m1, s11 - m1 * m1}}};
  const Vec2 eig = symmetric_eigenvalues(fit.covariance);
  if (!(eig[0] > 0.0)) throw NotPositiveDefinite(eig[0]);
  fit.precision = inverse(fit.covariance);
  fit.log_post_at_map = std::numeric_limits<double>::quiet_NaN();
  return fit;
}

}  // namespace iavae

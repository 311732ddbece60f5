#pragma once

// Diagnostics against the true posterior of the synthetic model:
// unnormalized log-posterior, MAP search, Laplace fit, Mahalanobis distance,
// density ratio, and lattice evaluation.

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "iavae/models.hpp"

namespace iavae {

using Vec2 = std::array<double, 2>;
using Mat2 = std::array<std::array<double, 2>, 2>;

// theta of the synthetic benchmark: the oracle decoder and its noise level.
// interaction = false drops z1 z2, leaving the conjugate linear-Gaussian model.
struct OracleModel {
  double sigma = 0.1;
  bool interaction = true;

  std::array<double, 3> mean(std::span<const double> z) const {
    return interaction ? decoder_true(z) : decoder_linear(z);
  }
};

// log p(x|z) + log p(z); drops only log p(x).
double log_posterior_unnorm(std::span<const double> z, std::span<const double> x,
                            const OracleModel& model);
Vec2 log_posterior_gradient(const Vec2& z, std::span<const double> x, const OracleModel& model);
Mat2 log_posterior_hessian(const Vec2& z, std::span<const double> x, const OracleModel& model);

struct MapOptions {
  std::size_t restarts = 5;
  std::size_t steps = 200;
  // Step for plain gradient moves where the curvature is not usable.
  double lr = 1e-3;
  std::uint64_t seed = 0;
  // Typically the amortized posterior mean.
  std::optional<Vec2> initial_mean;
  // Coarse lattice whose best cell seeds one restart.
  std::size_t seed_grid_resolution = 81;
  double seed_grid_lo = -5.0;
  double seed_grid_hi = 5.0;
};

struct MapResult {
  Vec2 z{};
  double log_posterior = 0.0;
  double gradient_norm = 0.0;
  bool converged = false;
  std::size_t start_index = 0;  // which restart produced z
};

inline constexpr double kMapGradientTolerance = 1e-5;

// Multi-start ascent on the log-posterior (Newton steps with backtracking,
// gradient steps where the negative Hessian is not positive definite).
// Starts, in order: initial_mean (if any), the seed-grid argmax, the origin,
// then standard-normal draws; the first `restarts` of these are used.
MapResult find_map(std::span<const double> x, const OracleModel& model, const MapOptions& options = {});

struct LaplaceFit {
  Vec2 z_map{};
  Mat2 covariance{};
  Mat2 precision{};  // negative Hessian at z_map
  double log_post_at_map = 0.0;
};

class NotPositiveDefinite : public std::runtime_error {
 public:
  explicit NotPositiveDefinite(double eigenvalue);
  double eigenvalue() const { return eigenvalue_; }

 private:
  double eigenvalue_;
};

Vec2 symmetric_eigenvalues(const Mat2& m);
Mat2 inverse(const Mat2& m);

// Covariance = inverse negative Hessian at z_map, the Hessian taken by
// central differences of log_posterior_unnorm and symmetrized.
LaplaceFit laplace_fit(std::span<const double> x, const Vec2& z_map, const OracleModel& model,
                       double step = 1e-4);

double mahalanobis(std::span<const double> mu, const LaplaceFit& fit);

// p(mu|x) / p(z_map|x).
double density_ratio(std::span<const double> mu, std::span<const double> x, const Vec2& z_map,
                     const OracleModel& model);

// Cell-centred lattice over [lo, hi]^2; log_density[i * resolution + j] is
// the value at (coordinate(i), coordinate(j)).
struct PosteriorGrid {
  double lo = -5.0;
  double hi = 5.0;
  std::size_t resolution = 0;
  std::vector<double> log_density;

  double cell_width() const { return (hi - lo) / static_cast<double>(resolution); }
  double coordinate(std::size_t i) const { return lo + (static_cast<double>(i) + 0.5) * cell_width(); }
  double at(std::size_t i, std::size_t j) const { return log_density[i * resolution + j]; }
  Vec2 argmax() const;
  // log of the integral of exp(log_density) by the midpoint rule.
  double log_integral() const;
};

PosteriorGrid posterior_grid(std::span<const double> x, const OracleModel& model, double lo = -5.0,
                             double hi = 5.0, std::size_t resolution = 400);

// KL(q || p(z|x)) by quadrature on the grid, with p(z|x) normalized on the grid.
double kl_to_posterior(const PosteriorParams& q, const PosteriorGrid& grid);

// Mean and covariance of the grid density: a moment-matched alternative to
// the Laplace fit. precision/log_post_at_map are filled from the moments.
LaplaceFit moment_fit(const PosteriorGrid& grid);

}  // namespace iavae

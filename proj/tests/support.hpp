#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "iavae/autodiff.hpp"
#include "iavae/rng.hpp"

namespace testing {

inline iavae::ad::Tensor random_tensor(iavae::Rng& rng, iavae::ad::Shape shape, double lo = -2.0,
                                       double hi = 2.0) {
  iavae::ad::Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = lo + (hi - lo) * rng.uniform();
  return t;
}

// Gradient agreement: relative error below rel, or absolute below abs_small
// when the reference is tiny.
inline bool grad_close(double analytic, double numeric, double rel = 1e-5, double abs_small = 1e-7) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  if (scale < 1e-3) return std::abs(analytic - numeric) < abs_small;
  return std::abs(analytic - numeric) / scale < rel;
}

// Worst violation over all coordinates, as a message; empty when all agree.
inline std::string compare_grads(const std::vector<iavae::ad::Tensor>& analytic,
                                 const std::vector<iavae::ad::Tensor>& numeric, double rel = 1e-5,
                                 double abs_small = 1e-7) {
  for (std::size_t k = 0; k < analytic.size(); ++k)
    for (std::size_t i = 0; i < analytic[k].size(); ++i)
      if (!grad_close(analytic[k][i], numeric[k][i], rel, abs_small))
        return "leaf " + std::to_string(k) + "[" + std::to_string(i) + "]: analytic " +
               std::to_string(analytic[k][i]) + " vs numeric " + std::to_string(numeric[k][i]);
  return {};
}

}  // namespace testing

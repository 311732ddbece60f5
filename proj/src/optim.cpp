#include "iavae/optim.hpp"

#include <cmath>

namespace iavae {

AdamState::AdamState(AdamOptions options, std::span<const ad::Tensor> params)
    : options_(options) {
  if (!(options_.learning_rate > 0.0)) throw std::invalid_argument("adam: learning rate must be positive");
  for (const ad::Tensor& p : params) {
    m_.emplace_back(p.shape());
    v_.emplace_back(p.shape());
  }
}

void AdamState::step(std::span<ad::Tensor> params, std::span<const ad::Tensor> grads,
                     std::span<const std::string> names) {
  if (params.size() != m_.size() || grads.size() != m_.size())
    throw std::invalid_argument("adam: expected " + std::to_string(m_.size()) + " leaves");
  for (std::size_t k = 0; k < grads.size(); ++k) {
    if (!(grads[k].shape() == params[k].shape()) || !(params[k].shape() == m_[k].shape()))
      throw std::invalid_argument("adam: shape mismatch in leaf " + std::to_string(k));
    if (!grads[k].all_finite())
      throw NonFiniteGradient(k < names.size() ? names[k] : "leaf " + std::to_string(k), t_ + 1);
  }
  ++t_;
  const double b1 = options_.beta1;
  const double b2 = options_.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    ad::Tensor& p = params[k];
    ad::Tensor& m = m_[k];
    ad::Tensor& v = v_[k];
    const ad::Tensor& g = grads[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      p[i] -= options_.learning_rate * m_hat / (std::sqrt(v_hat) + options_.epsilon);
    }
  }
}

}  // namespace iavae

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "iavae/autodiff.hpp"

namespace iavae {

struct AdamOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  NonFiniteGradient(std::string leaf, std::size_t step)
      : std::runtime_error("non-finite gradient in " + leaf + " at Adam step " +
                           std::to_string(step)),
        leaf_(std::move(leaf)) {}

  const std::string& leaf() const { return leaf_; }

 private:
  std::string leaf_;
};

// Per-leaf first and second moments; the update of one leaf never reads
// another leaf's state.
class AdamState {
 public:
  AdamState(AdamOptions options, std::span<const ad::Tensor> params);

  // Bias-corrected Adam update in place. `names` labels leaves in errors.
  // Rejects non-finite gradients before touching any parameter.
  void step(std::span<ad::Tensor> params, std::span<const ad::Tensor> grads,
            std::span<const std::string> names = {});

  std::size_t steps() const { return t_; }
  const AdamOptions& options() const { return options_; }
  const std::vector<ad::Tensor>& first_moments() const { return m_; }
  const std::vector<ad::Tensor>& second_moments() const { return v_; }

 private:
  AdamOptions options_;
  std::size_t t_ = 0;
  std::vector<ad::Tensor> m_;
  std::vector<ad::Tensor> v_;
};

enum class StopDecision { kContinue, kStop };

// Tracks the best metric seen; a strictly larger metric counts as an
// improvement. Stops once more than `patience` consecutive updates failed to
// improve.
template <typename Snapshot>
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  StopDecision update(double metric, const Snapshot& snapshot) {
    if (!best_ || metric > best_metric_) {
      best_metric_ = metric;
      best_ = snapshot;
      best_index_ = updates_;
      since_improvement_ = 0;
    } else {
      ++since_improvement_;
    }
    ++updates_;
    return since_improvement_ > patience_ ? StopDecision::kStop : StopDecision::kContinue;
  }

  bool has_best() const { return best_.has_value(); }
  double best_metric() const { return best_metric_; }
  const Snapshot& best_snapshot() const { return *best_; }
  // 0-based index of the update that produced the best snapshot.
  std::size_t best_index() const { return best_index_; }
  std::size_t epochs_since_improvement() const { return since_improvement_; }
  std::size_t patience() const { return patience_; }

 private:
  std::size_t patience_;
  std::size_t updates_ = 0;
  std::size_t since_improvement_ = 0;
  std::size_t best_index_ = 0;
  double best_metric_ = 0.0;
  std::optional<Snapshot> best_;
};

}  // namespace iavae

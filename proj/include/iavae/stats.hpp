#pragma once

// Paired one-sided tests of "treatment > baseline" and the selection rule
// between them: Shapiro-Wilk on the differences gates a paired t-test
// (normality not rejected) or a Wilcoxon signed-rank test (rejected).

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace iavae::stats {

class DegenerateSample : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ShapiroWilkResult {
  double w = 0.0;
  double p_value = 0.0;
};

// Royston's approximation (AS R94). Requires 3 <= n <= 5000; throws
// DegenerateSample when every value is identical.
ShapiroWilkResult shapiro_wilk(std::span<const double> sample);

struct TestResult {
  double statistic = 0.0;
  double p_value = 0.0;
  bool degenerate = false;
};

// d = treatment - baseline; p = P(T_{n-1} >= t_obs). Zero variance gives
// p = 0, 0.5 or 1 by the sign of mean(d).
TestResult paired_t_one_sided(std::span<const double> baseline, std::span<const double> treatment);

// Statistic is W+, the rank sum of positive differences after dropping
// zeros. Exact null for n <= 20, normal approximation with tie and
// continuity correction above. All differences zero gives p = 0.5.
TestResult wilcoxon_one_sided(std::span<const double> baseline, std::span<const double> treatment);

inline constexpr std::size_t kWilcoxonExactLimit = 20;

// Signed ranks of the non-zero differences (average ranks for ties).
std::vector<double> signed_ranks(std::span<const double> differences);
// P(W+ >= observed) under the sign-flip null; exact, via the distribution
// of sums of doubled ranks.
double wilcoxon_exact_upper_p(std::span<const double> differences);
double wilcoxon_normal_upper_p(std::span<const double> differences);

struct ProtocolReport {
  std::string test_used;  // "paired_t" or "wilcoxon"
  double statistic = 0.0;
  double p_value = 0.0;
  double alpha = 0.05;
  bool significant = false;
  std::size_t n = 0;
  double shapiro_w = 0.0;
  double shapiro_p = 0.0;
  bool normality_degenerate = false;
};

ProtocolReport paired_protocol(std::span<const double> baseline, std::span<const double> treatment,
                               double alpha = 0.05);

nlohmann::ordered_json to_json(const ProtocolReport& report);
std::string to_text(const ProtocolReport& report, const std::string& baseline_name,
                    const std::string& treatment_name);

}  // namespace iavae::stats

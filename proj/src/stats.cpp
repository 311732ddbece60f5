#include "iavae/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "iavae/format.hpp"

namespace iavae::stats {

namespace {

double poly(std::span<const double> c, double x) {
  double acc = 0.0;
  for (std::size_t i = c.size(); i-- > 0;) acc = acc * x + c[i];
  return acc;
}

std::vector<double> differences(std::span<const double> baseline, std::span<const double> treatment) {
  if (baseline.size() != treatment.size())
    throw std::invalid_argument("paired test: " + std::to_string(baseline.size()) + " baseline vs " +
                                std::to_string(treatment.size()) + " treatment values");
  std::vector<double> d(baseline.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = treatment[i] - baseline[i];
  return d;
}

}  // namespace

ShapiroWilkResult shapiro_wilk(std::span<const double> sample) {
  const std::size_t n = sample.size();
  if (n < 3) throw std::invalid_argument("shapiro_wilk: need at least 3 values, got " + std::to_string(n));
  if (n > 5000) throw std::invalid_argument("shapiro_wilk: at most 5000 values supported");

  std::vector<double> x(sample.begin(), sample.end());
  std::sort(x.begin(), x.end());
  const double range = x.back() - x.front();
  if (range < 1e-19 * std::max(1.0, std::abs(x.front())))
    throw DegenerateSample("shapiro_wilk: all values identical");

  // Half-sample coefficients a[0..n/2), positive, for the upper order statistics.
  const std::size_t half = n / 2;
  const double an = static_cast<double>(n);
  std::vector<double> a(half);
  if (n == 3) {
    a[0] = std::sqrt(0.5);
  } else {
    static constexpr double c1[] = {0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056};
    static constexpr double c2[] = {0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633};
    const boost::math::normal std_normal;
    std::vector<double> m(half);
    double summ2 = 0.0;
    for (std::size_t i = 0; i < half; ++i) {
      m[i] = boost::math::quantile(std_normal, (static_cast<double>(i + 1) - 0.375) / (an + 0.25));
      summ2 += m[i] * m[i];
    }
    summ2 *= 2.0;
    const double ssumm2 = std::sqrt(summ2);
    const double rsn = 1.0 / std::sqrt(an);
    const double a1 = poly(c1, rsn) - m[0] / ssumm2;
    std::size_t first = 1;
    double fac;
    if (n > 5) {
      first = 2;
      const double a2 = -m[1] / ssumm2 + poly(c2, rsn);
      fac = std::sqrt((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1]) /
                      (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2));
      a[1] = a2;
    } else {
      fac = std::sqrt((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1));
    }
    a[0] = a1;
    for (std::size_t i = first; i < half; ++i) a[i] = -m[i] / fac;
  }

  // W as the squared correlation between scaled data and the antisymmetric
  // coefficient vector; 1 - W is formed directly to limit rounding.
  std::vector<double> coef(n, 0.0);
  for (std::size_t i = 0; i < half; ++i) {
    coef[i] = -a[i];
    coef[n - 1 - i] = a[i];
  }
  double sx = 0.0;
  for (double v : x) sx += v / range;
  sx /= an;
  double ssa = 0.0, ssx = 0.0, sax = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double xs = x[i] / range - sx;
    ssa += coef[i] * coef[i];
    ssx += xs * xs;
    sax += coef[i] * xs;
  }
  const double root = std::sqrt(ssa * ssx);
  const double w1 = (root - sax) * (root + sax) / (ssa * ssx);
  ShapiroWilkResult out;
  out.w = 1.0 - w1;

  if (n == 3) {
    constexpr double pi6 = 1.90985931710274;   // 6 / pi
    constexpr double stqr = 1.04719755119660;  // pi / 3
    out.p_value = std::max(0.0, pi6 * (std::asin(std::sqrt(out.w)) - stqr));
    return out;
  }
  double y = std::log(w1);
  double mean;
  double sd;
  if (n <= 11) {
    static constexpr double g[] = {-2.273, 0.459};
    static constexpr double c3[] = {0.544, -0.39978, 0.025054, -6.714e-4};
    static constexpr double c4[] = {1.3822, -0.77857, 0.062767, -0.0020322};
    const double gamma = poly(g, an);
    if (y >= gamma) {
      out.p_value = 1e-99;
      return out;
    }
    y = -std::log(gamma - y);
    mean = poly(c3, an);
    sd = std::exp(poly(c4, an));
  } else {
    static constexpr double c5[] = {-1.5861, -0.31082, -0.083751, 0.0038915};
    static constexpr double c6[] = {-0.4803, -0.082676, 0.0030302};
    const double ln = std::log(an);
    mean = poly(c5, ln);
    sd = std::exp(poly(c6, ln));
  }
  out.p_value = boost::math::cdf(boost::math::complement(boost::math::normal(mean, sd), y));
  return out;
}

TestResult paired_t_one_sided(std::span<const double> baseline, std::span<const double> treatment) {
  const std::vector<double> d = differences(baseline, treatment);
  const std::size_t n = d.size();
  if (n < 2) throw std::invalid_argument("paired t-test: need at least 2 pairs");
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double v : d) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  TestResult out;
  if (!(sd > 1e-15 * std::max(1.0, std::abs(mean)))) {
    out.degenerate = true;
    out.statistic = mean > 0.0 ? INFINITY : (mean < 0.0 ? -INFINITY : 0.0);
    out.p_value = mean > 0.0 ? 0.0 : (mean < 0.0 ? 1.0 : 0.5);
    return out;
  }
  out.statistic = mean / (sd / std::sqrt(static_cast<double>(n)));
  const boost::math::students_t dist(static_cast<double>(n - 1));
  out.p_value = boost::math::cdf(boost::math::complement(dist, out.statistic));
  return out;
}

std::vector<double> signed_ranks(std::span<const double> differences) {
  std::vector<double> nonzero;
  for (double v : differences)
    if (v != 0.0) nonzero.push_back(v);
  std::vector<std::size_t> order(nonzero.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return std::abs(nonzero[a]) < std::abs(nonzero[b]); });
  std::vector<double> ranks(nonzero.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && std::abs(nonzero[order[j + 1]]) == std::abs(nonzero[order[i]])) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = nonzero[order[k]] > 0.0 ? avg : -avg;
    i = j + 1;
  }
  return ranks;
}

namespace {

double positive_rank_sum(std::span<const double> ranks) {
  double w = 0.0;
  for (double r : ranks)
    if (r > 0.0) w += r;
  return w;
}

}  // namespace

double wilcoxon_exact_upper_p(std::span<const double> differences) {
  const std::vector<double> ranks = signed_ranks(differences);
  if (ranks.empty()) return 0.5;
  // Average ranks are multiples of 1/2, so doubled ranks are integers.
  std::vector<std::size_t> doubled;
  std::size_t total = 0;
  for (double r : ranks) {
    doubled.push_back(static_cast<std::size_t>(std::lround(2.0 * std::abs(r))));
    total += doubled.back();
  }
  std::vector<double> count(total + 1, 0.0);
  count[0] = 1.0;
  std::size_t reach = 0;
  for (std::size_t r : doubled) {
    for (std::size_t s = reach + 1; s-- > 0;) count[s + r] += count[s];
    reach += r;
  }
  const auto observed = static_cast<std::size_t>(std::lround(2.0 * positive_rank_sum(ranks)));
  double tail = 0.0;
  for (std::size_t s = observed; s <= total; ++s) tail += count[s];
  return tail / std::ldexp(1.0, static_cast<int>(ranks.size()));
}

double wilcoxon_normal_upper_p(std::span<const double> differences) {
  const std::vector<double> ranks = signed_ranks(differences);
  if (ranks.empty()) return 0.5;
  const double n = static_cast<double>(ranks.size());
  double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0;
  std::vector<double> magnitudes;
  for (double r : ranks) magnitudes.push_back(std::abs(r));
  std::sort(magnitudes.begin(), magnitudes.end());
  for (std::size_t i = 0; i < magnitudes.size();) {
    std::size_t j = i;
    while (j < magnitudes.size() && magnitudes[j] == magnitudes[i]) ++j;
    const double t = static_cast<double>(j - i);
    var -= (t * t * t - t) / 48.0;
    i = j;
  }
  if (!(var > 0.0)) return 0.5;
  const double z = (positive_rank_sum(ranks) - n * (n + 1.0) / 4.0 - 0.5) / std::sqrt(var);
  return boost::math::cdf(boost::math::complement(boost::math::normal(), z));
}

TestResult wilcoxon_one_sided(std::span<const double> baseline, std::span<const double> treatment) {
  const std::vector<double> d = differences(baseline, treatment);
  const std::vector<double> ranks = signed_ranks(d);
  TestResult out;
  out.statistic = positive_rank_sum(ranks);
  if (ranks.empty()) {
    out.degenerate = true;
    out.p_value = 0.5;
    return out;
  }
  out.p_value = ranks.size() <= kWilcoxonExactLimit ? wilcoxon_exact_upper_p(d)
                                                    : wilcoxon_normal_upper_p(d);
  return out;
}

ProtocolReport paired_protocol(std::span<const double> baseline, std::span<const double> treatment,
                               double alpha) {
  const std::vector<double> d = differences(baseline, treatment);
  ProtocolReport report;
  report.alpha = alpha;
  report.n = d.size();
  bool normal = true;
  try {
    const ShapiroWilkResult sw = shapiro_wilk(d);
    report.shapiro_w = sw.w;
    report.shapiro_p = sw.p_value;
    normal = sw.p_value >= alpha;
  } catch (const DegenerateSample&) {
    // Constant differences: the t-test's zero-variance rule decides.
    report.normality_degenerate = true;
  }
  const TestResult result =
      normal ? paired_t_one_sided(baseline, treatment) : wilcoxon_one_sided(baseline, treatment);
  report.test_used = normal ? "paired_t" : "wilcoxon";
  report.statistic = result.statistic;
  report.p_value = result.p_value;
  report.significant = result.p_value < alpha;
  return report;
}

nlohmann::ordered_json to_json(const ProtocolReport& report) {
  nlohmann::ordered_json j;
  j["test_used"] = report.test_used;
  j["statistic"] = std::isfinite(report.statistic) ? nlohmann::ordered_json(report.statistic)
                                                   : nlohmann::ordered_json(report.statistic > 0 ? "inf" : "-inf");
  j["p_value"] = report.p_value;
  j["alpha"] = report.alpha;
  j["significant"] = report.significant;
  j["n"] = report.n;
  j["shapiro_w"] = report.shapiro_w;
  j["shapiro_p"] = report.shapiro_p;
  j["normality_degenerate"] = report.normality_degenerate;
  return j;
}

std::string to_text(const ProtocolReport& report, const std::string& baseline_name,
                    const std::string& treatment_name) {
  std::ostringstream out;
  out << "H0: mu_" << baseline_name << " = mu_" << treatment_name << "\n"
      << "H1: mu_" << baseline_name << " < mu_" << treatment_name << "\n"
      << "pairs: " << report.n << "\n";
  if (report.normality_degenerate)
    out << "Shapiro-Wilk: differences constant, normality not assessed\n";
  else
    out << "Shapiro-Wilk: W = " << fmt_fixed(report.shapiro_w, 4)
        << ", p = " << fmt_fixed(report.shapiro_p, 4) << "\n";
  out << "test: " << (report.test_used == "paired_t" ? "one-sided paired t" : "one-sided Wilcoxon signed-rank")
      << ", statistic = " << report.statistic << ", p = " << report.p_value << "\n"
      << (report.significant ? "reject H0" : "do not reject H0") << " at alpha = " << report.alpha << "\n";
  return out.str();
}

}  // namespace iavae::stats

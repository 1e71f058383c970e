#include "pdinterp/stats.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pdinterp/error.h"

namespace pdinterp {

RocCurve roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw ConfigError("scores and labels must have equal lengths");
  double pos = 0, neg = 0;
  for (int l : labels) {
    if (l == 1) pos += 1;
    else if (l == 0) neg += 1;
    else throw ConfigError("ROC labels must be 0 or 1");
  }
  if (pos == 0 || neg == 0) throw ConfigError("ROC analysis needs both classes present");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  RocCurve r;
  r.fpr.push_back(0);
  r.tpr.push_back(0);
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double t = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == t; ++i) {
      if (labels[order[i]] == 1) tp += 1;
      else fp += 1;
    }
    r.fpr.push_back(fp / neg);
    r.tpr.push_back(tp / pos);
  }
  for (std::size_t k = 1; k < r.fpr.size(); ++k) {
    r.auc += (r.fpr[k] - r.fpr[k - 1]) * (r.tpr[k] + r.tpr[k - 1]) / 2;
  }
  return r;
}

double chi_square_1df_sf(double x) {
  if (x <= 0) return 1.0;
  return std::erfc(std::sqrt(x / 2));
}

namespace {

// P(X <= k) for X ~ Binomial(n, 1/2).
double binomial_half_cdf(int k, int n) {
  double total = 0;
  for (int i = 0; i <= k; ++i) {
    total += std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) - n * std::log(2.0));
  }
  return total;
}

}  // namespace

TestResult mcnemar(const std::vector<int>& a, const std::vector<int>& b, const std::vector<int>& labels,
                   McNemarMethod method) {
  if (a.size() != labels.size() || b.size() != labels.size()) {
    throw ConfigError("McNemar's test needs paired predictions on the same subjects");
  }
  int only_a = 0, only_b = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool a_ok = a[i] == labels[i];
    const bool b_ok = b[i] == labels[i];
    if (!a_ok && b_ok) ++only_a;
    if (a_ok && !b_ok) ++only_b;
  }
  TestResult r;
  r.test = "mcnemar";
  r.n = only_a + only_b;
  if (r.n == 0) {
    r.method = "none";
    r.degenerate = true;
    return r;
  }
  const double d = std::abs(only_a - only_b) - 1.0;
  r.statistic = d * d / r.n;
  const bool exact = method == McNemarMethod::kExact || (method == McNemarMethod::kAuto && r.n < 25);
  if (exact) {
    r.method = "exact-binomial";
    r.p_value = std::min(1.0, 2 * binomial_half_cdf(std::min(only_a, only_b), r.n));
  } else {
    r.method = "chi-square-cc";
    r.p_value = chi_square_1df_sf(r.statistic);
  }
  return r;
}

TestResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ConfigError("Wilcoxon test needs paired samples of equal length");
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double v = a[i] - b[i];
    if (!std::isfinite(v)) throw NumericalError("Wilcoxon test received a non-finite value");
    if (v != 0) d.push_back(v);
  }
  TestResult r;
  r.test = "wilcoxon-signed-rank";
  r.n = static_cast<int>(d.size());
  if (d.empty()) {
    r.method = "none";
    r.degenerate = true;
    return r;
  }
  if (r.n < 5) {
    throw ConfigError("Wilcoxon test needs at least 5 nonzero paired differences, got " + std::to_string(r.n));
  }
  // Midranks of |d|, held doubled so that they stay integral.
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return std::abs(d[x]) < std::abs(d[y]); });
  std::vector<long> rank2(d.size());
  double tie_term = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && std::abs(d[order[j]]) == std::abs(d[order[i]])) ++j;
    const long doubled = static_cast<long>(i + 1 + j);  // 2 * mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) rank2[order[k]] = doubled;
    const double t = static_cast<double>(j - i);
    tie_term += t * t * t - t;
    i = j;
  }
  long w_plus2 = 0, total2 = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    total2 += rank2[i];
    if (d[i] > 0) w_plus2 += rank2[i];
  }
  const double w_plus = w_plus2 / 2.0;
  const double w_minus = (total2 - w_plus2) / 2.0;
  r.statistic = std::min(w_plus, w_minus);
  const double n = r.n;
  if (r.n < 10) {
    r.method = "exact";
    // Null distribution of doubled W+ under random signs.
    std::vector<double> count(static_cast<std::size_t>(total2) + 1, 0.0);
    count[0] = 1;
    long reach = 0;
    for (long rk : rank2) {
      for (long s = reach; s >= 0; --s) count[static_cast<std::size_t>(s + rk)] += count[static_cast<std::size_t>(s)];
      reach += rk;
    }
    const double combos = std::ldexp(1.0, r.n);
    const long dev2 = std::abs(2 * w_plus2 - total2);  // |2 W+ - total|, doubled units
    double extreme = 0;
    for (long s = 0; s <= total2; ++s) {
      if (std::abs(2 * s - total2) >= dev2) extreme += count[static_cast<std::size_t>(s)];
    }
    r.p_value = std::min(1.0, extreme / combos);
  } else {
    r.method = "normal-approximation";
    const double mean = n * (n + 1) / 4;
    const double var = n * (n + 1) * (2 * n + 1) / 24 - tie_term / 48;
    const double z = (r.statistic - mean) / std::sqrt(var);
    r.p_value = std::min(1.0, std::erfc(std::abs(z) / std::sqrt(2.0)));
  }
  return r;
}

}  // namespace pdinterp

#ifndef PDINTERP_STATS_H_
#define PDINTERP_STATS_H_

// ROC analysis and paired significance tests (McNemar, Wilcoxon signed-rank).

#include <string>
#include <vector>

namespace pdinterp {

struct RocCurve {
  std::vector<double> fpr;  // nondecreasing, from 0 to 1
  std::vector<double> tpr;
  double auc = 0;
};

// Sweeps every distinct score as a threshold (score >= t is positive); tied
// scores cross together. AUC by the trapezoid rule. labels: 1 positive,
// 0 negative. Throws ConfigError unless both classes are present.
RocCurve roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

struct TestResult {
  std::string test;
  std::string method;
  double statistic = 0;
  double p_value = 1;
  int n = 0;             // informative pairs (b + c, or nonzero differences)
  bool degenerate = false;
};

enum class McNemarMethod {
  kChiSquare,  // continuity-corrected, 1 degree of freedom
  kExact,      // two-sided binomial on the discordant pairs
  kAuto,       // exact when b + c < 25
};

// b = subjects only A misclassifies, c = subjects only B misclassifies.
// statistic = (|b - c| - 1)^2 / (b + c); p = 1 when b + c = 0.
TestResult mcnemar(const std::vector<int>& predictions_a, const std::vector<int>& predictions_b,
                   const std::vector<int>& labels, McNemarMethod method = McNemarMethod::kChiSquare);

// Tail of the chi-square distribution with one degree of freedom.
double chi_square_1df_sf(double x);

// Two-sided signed-rank test. Zero differences are dropped and |d| ranked with
// midranks; statistic W = min(W+, W-). n < 10: exact null distribution;
// otherwise normal approximation with tie correction. All differences zero
// gives a degenerate result with p = 1; 1-4 nonzero differences are rejected.
TestResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace pdinterp

#endif  // PDINTERP_STATS_H_

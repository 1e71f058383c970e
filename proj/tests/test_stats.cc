#include "pdinterp/stats.h"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "pdinterp/error.h"
#include "support/oracles.h"

namespace pdinterp {
namespace {

using testing::mann_whitney_auc;
using testing::wilcoxon_exact_enumeration;

// Predictions that give A-only errors b and B-only errors c over n subjects.
struct Paired {
  std::vector<int> a, b, labels;
};

Paired with_discordance(int only_a, int only_b, int both_right, int both_wrong) {
  Paired p;
  auto add = [&](int a_ok, int b_ok) {
    p.labels.push_back(1);
    p.a.push_back(a_ok ? 1 : 0);
    p.b.push_back(b_ok ? 1 : 0);
  };
  for (int i = 0; i < only_a; ++i) add(0, 1);
  for (int i = 0; i < only_b; ++i) add(1, 0);
  for (int i = 0; i < both_right; ++i) add(1, 1);
  for (int i = 0; i < both_wrong; ++i) add(0, 0);
  return p;
}

TEST(Roc, PerfectSeparation) {
  const auto r = roc_auc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1});
  EXPECT_DOUBLE_EQ(r.auc, 1.0);
}

TEST(Roc, IdenticalScoresGiveChance) {
  const auto r = roc_auc({0.5, 0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1, 1});
  EXPECT_DOUBLE_EQ(r.auc, 0.5);
  EXPECT_EQ(r.fpr.size(), 2u);
}

TEST(Roc, WorkedExample) {
  EXPECT_DOUBLE_EQ(roc_auc({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}).auc, 0.75);
  EXPECT_DOUBLE_EQ(mann_whitney_auc({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}), 0.75);
}

TEST(Roc, MatchesPairCountOnRandomScores) {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<int> coarse(0, 9);
  std::bernoulli_distribution coin(0.4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> s;
    std::vector<int> l;
    for (int i = 0; i < 40; ++i) {
      s.push_back(coarse(rng) / 10.0);  // coarse grid forces ties
      l.push_back(coin(rng));
    }
    l[0] = 0;
    l[1] = 1;
    const auto r = roc_auc(s, l);
    EXPECT_NEAR(r.auc, mann_whitney_auc(s, l), 1e-12);
    for (std::size_t k = 1; k < r.fpr.size(); ++k) {
      EXPECT_GE(r.fpr[k], r.fpr[k - 1]);
      EXPECT_GE(r.tpr[k], r.tpr[k - 1]);
    }
    EXPECT_DOUBLE_EQ(r.fpr.back(), 1.0);
    EXPECT_DOUBLE_EQ(r.tpr.back(), 1.0);
  }
}

TEST(Roc, SingleClassRejected) {
  EXPECT_THROW(roc_auc({0.1, 0.2}, {1, 1}), ConfigError);
  EXPECT_THROW(roc_auc({0.1, 0.2}, {0, 1, 1}), ConfigError);
}

TEST(McNemar, TenVersusTwo) {
  const auto p = with_discordance(10, 2, 30, 3);
  const auto r = mcnemar(p.a, p.b, p.labels);
  EXPECT_EQ(r.n, 12);
  EXPECT_NEAR(r.statistic, 49.0 / 12.0, 1e-12);
  EXPECT_NEAR(r.p_value, 0.043, 0.002);
}

TEST(McNemar, EqualDiscordanceUsesCorrectedStatistic) {
  const auto p = with_discordance(4, 4, 10, 0);
  const auto r = mcnemar(p.a, p.b, p.labels);
  EXPECT_DOUBLE_EQ(r.statistic, 1.0 / 8.0);
  EXPECT_GT(r.p_value, 0.7);
  EXPECT_LE(r.p_value, 1.0);
}

TEST(McNemar, NoDiscordanceGivesPOne) {
  const auto p = with_discordance(0, 0, 10, 3);
  const auto r = mcnemar(p.a, p.b, p.labels);
  EXPECT_EQ(r.p_value, 1.0);
  EXPECT_TRUE(r.degenerate);
}

TEST(McNemar, SymmetricInModels) {
  const auto p = with_discordance(7, 2, 20, 1);
  const auto ab = mcnemar(p.a, p.b, p.labels);
  const auto ba = mcnemar(p.b, p.a, p.labels);
  EXPECT_EQ(ab.statistic, ba.statistic);
  EXPECT_EQ(ab.p_value, ba.p_value);
}

TEST(McNemar, ExactBinomialVariant) {
  const auto p = with_discordance(10, 2, 30, 3);
  const auto r = mcnemar(p.a, p.b, p.labels, McNemarMethod::kExact);
  // 2 * P(X <= 2), X ~ Bin(12, 1/2) = 2 * 79 / 4096
  EXPECT_NEAR(r.p_value, 158.0 / 4096.0, 1e-12);
  EXPECT_EQ(mcnemar(p.a, p.b, p.labels, McNemarMethod::kAuto).method, r.method);
}

TEST(McNemar, LengthMismatchRejected) {
  EXPECT_THROW(mcnemar({1, 0}, {1}, {1, 0}), ConfigError);
}

TEST(ChiSquare, KnownQuantiles) {
  EXPECT_NEAR(chi_square_1df_sf(3.841458820694124), 0.05, 1e-12);
  EXPECT_NEAR(chi_square_1df_sf(6.634896601021214), 0.01, 1e-12);
  EXPECT_EQ(chi_square_1df_sf(0), 1.0);
}

TEST(Wilcoxon, IdenticalSamplesDegenerate) {
  const std::vector<double> a{0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  const auto r = wilcoxon_signed_rank(a, a);
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.p_value, 1.0);
}

TEST(Wilcoxon, SwapGivesSameP) {
  const std::vector<double> a{0.9, 0.7, 0.65, 0.8, 0.5, 0.72, 0.6, 0.66, 0.91, 0.4, 0.55, 0.33};
  const std::vector<double> b{0.5, 0.71, 0.6, 0.3, 0.52, 0.7, 0.2, 0.6, 0.9, 0.45, 0.5, 0.1};
  EXPECT_EQ(wilcoxon_signed_rank(a, b).p_value, wilcoxon_signed_rank(b, a).p_value);
  EXPECT_EQ(wilcoxon_signed_rank(a, b).statistic, wilcoxon_signed_rank(b, a).statistic);
}

TEST(Wilcoxon, SixPairsMatchEnumeration) {
  const std::vector<double> a{1.2, 3.4, 2.2, 5.0, 4.1, 0.3};
  const std::vector<double> b{1.0, 3.9, 1.1, 2.0, 4.0, 0.0};
  const auto r = wilcoxon_signed_rank(a, b);
  EXPECT_EQ(r.method, "exact");
  EXPECT_EQ(r.n, 6);
  EXPECT_NEAR(r.p_value, wilcoxon_exact_enumeration(a, b), 1e-12);
}

TEST(Wilcoxon, TiedExactCasesMatchEnumeration) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> d(-3, 3);
  for (int trial = 0; trial < 40; ++trial) {
    std::vector<double> a, b;
    for (int i = 0; i < 9; ++i) {
      a.push_back(0);
      b.push_back(d(rng));
    }
    int nonzero = 0;
    for (double x : b) nonzero += x != 0;
    if (nonzero < 5) continue;
    EXPECT_NEAR(wilcoxon_signed_rank(a, b).p_value, wilcoxon_exact_enumeration(a, b), 1e-12) << trial;
  }
}

TEST(Wilcoxon, NormalApproximationNearExactForModerateN) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n01(0, 1);
  std::vector<double> a, b;
  for (int i = 0; i < 16; ++i) {
    a.push_back(n01(rng) + 0.4);
    b.push_back(n01(rng));
  }
  const auto r = wilcoxon_signed_rank(a, b);
  EXPECT_EQ(r.method, "normal-approximation");
  EXPECT_NEAR(r.p_value, wilcoxon_exact_enumeration(a, b), 0.02);
}

TEST(Wilcoxon, InvariantUnderPositiveAffineMap) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> a, b;
  for (int i = 0; i < 14; ++i) {
    a.push_back(u(rng));
    b.push_back(u(rng));
  }
  std::vector<double> ta, tb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ta.push_back(3.0 * a[i] + 5.0);
    tb.push_back(3.0 * b[i] + 5.0);
  }
  EXPECT_NEAR(wilcoxon_signed_rank(a, b).p_value, wilcoxon_signed_rank(ta, tb).p_value, 1e-12);
}

TEST(Wilcoxon, FewerThanFiveNonzeroRejected) {
  EXPECT_THROW(wilcoxon_signed_rank({1, 2, 3, 4, 5}, {1, 2, 0, 0, 0}), ConfigError);
  EXPECT_THROW(wilcoxon_signed_rank({1, 2}, {1}), ConfigError);
}

TEST(Wilcoxon, PValueInUnitInterval) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0, 1);
  for (int n : {5, 7, 9, 10, 30}) {
    std::vector<double> a, b;
    for (int i = 0; i < n; ++i) {
      a.push_back(u(rng));
      b.push_back(u(rng));
    }
    const auto r = wilcoxon_signed_rank(a, b);
    EXPECT_GE(r.p_value, 0.0);
    EXPECT_LE(r.p_value, 1.0);
  }
}

}  // namespace
}  // namespace pdinterp

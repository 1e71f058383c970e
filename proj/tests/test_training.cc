#include "pdinterp/training.h"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "pdinterp/error.h"

namespace pdinterp {
namespace {

TrainConfig paper_schedule() { return TrainConfig{}; }

TEST(LearningRate, EndpointsExact) {
  const TrainConfig c = paper_schedule();
  EXPECT_EQ(lr_at(0, c), 1e-4);
  EXPECT_EQ(lr_at(29, c), 1e-6);
}

TEST(LearningRate, GeometricMidpoint) {
  TrainConfig c = paper_schedule();
  c.epochs = 3;
  EXPECT_NEAR(lr_at(1, c), 1e-5, 1e-18);
  c.epochs = 30;
  EXPECT_NEAR(lr_at(14.5, c), 1e-5, 1e-18);
}

TEST(LearningRate, MonotoneDecreasing) {
  const TrainConfig c = paper_schedule();
  for (int e = 1; e < c.epochs; ++e) EXPECT_LT(lr_at(e, c), lr_at(e - 1, c));
}

TEST(LearningRate, OutOfRangeRejected) {
  const TrainConfig c = paper_schedule();
  EXPECT_THROW(lr_at(-1, c), ConfigError);
  EXPECT_THROW(lr_at(30, c), ConfigError);
  TrainConfig bad = c;
  bad.lr_end = 1e-3;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Sgd, MomentumStepArithmetic) {
  Tensor<double> p({1}, 1.0), g({1}, 0.5), v({1}, 0.0);
  sgd_momentum_step(p, g, v, 0.1, 0.9);
  EXPECT_DOUBLE_EQ(v[0], -0.05);
  EXPECT_DOUBLE_EQ(p[0], 0.95);
  sgd_momentum_step(p, g, v, 0.1, 0.9);
  EXPECT_NEAR(v[0], -0.095, 1e-15);
  EXPECT_NEAR(p[0], 0.855, 1e-15);
}

TEST(Sgd, ZeroGradientDecaysVelocity) {
  Tensor<double> p({2}, 0.0), g({2}, 0.0), v({2}, 1.0);
  sgd_momentum_step(p, g, v, 0.1, 0.5);
  EXPECT_DOUBLE_EQ(v[0], 0.5);
  EXPECT_DOUBLE_EQ(p[0], 0.5);
}

TEST(Sgd, QuadraticBowlConverges) {
  Tensor<double> p({3}, std::vector<double>{1.0, -2.0, 0.5});
  Tensor<double> v({3});
  for (int step = 0; step < 200; ++step) {
    Tensor<double> g = p;  // gradient of 0.5 |p|^2
    sgd_momentum_step(p, g, v, 0.05, 0.9);
  }
  for (double x : p.data()) EXPECT_LT(std::abs(x), 1e-3);
}

TEST(Sgd, ShapeMismatchRejected) {
  Tensor<double> p({2}), g({3}), v({2});
  EXPECT_THROW(sgd_momentum_step(p, g, v, 0.1, 0.9), ShapeError);
}

std::vector<int> labels_with(int pd, int nc) {
  std::vector<int> l(static_cast<std::size_t>(pd), kClassPD);
  l.insert(l.end(), static_cast<std::size_t>(nc), kClassNC);
  return l;
}

TEST(FoldPlan, TestSetsPartitionSubjects) {
  const auto labels = labels_with(147, 53);
  const auto plan = make_fold_plan(labels, 7);
  ASSERT_EQ(plan.folds.size(), 10u);
  std::multiset<int> seen;
  for (const auto& f : plan.folds) seen.insert(f.test.begin(), f.test.end());
  EXPECT_EQ(seen.size(), labels.size());
  for (int i = 0; i < static_cast<int>(labels.size()); ++i) EXPECT_EQ(seen.count(i), 1u);
}

TEST(FoldPlan, SplitsAreDisjointAndComplete) {
  const auto labels = labels_with(147, 53);
  for (const auto& f : make_fold_plan(labels, 7).folds) {
    std::set<int> all;
    all.insert(f.train.begin(), f.train.end());
    all.insert(f.validation.begin(), f.validation.end());
    all.insert(f.test.begin(), f.test.end());
    EXPECT_EQ(all.size(), labels.size());
    EXPECT_EQ(f.train.size() + f.validation.size() + f.test.size(), labels.size());
  }
}

TEST(FoldPlan, Stratified) {
  const auto labels = labels_with(147, 53);
  for (const auto& f : make_fold_plan(labels, 7).folds) {
    int pd = 0;
    for (int id : f.test) pd += labels[static_cast<std::size_t>(id)] == kClassPD;
    EXPECT_GE(pd, 14);
    EXPECT_LE(pd, 15);
    EXPECT_GE(static_cast<int>(f.test.size()) - pd, 5);
    EXPECT_LE(static_cast<int>(f.test.size()) - pd, 6);
  }
}

TEST(FoldPlan, SeedDeterminesAssignment) {
  const auto labels = labels_with(30, 20);
  const auto a = make_fold_plan(labels, 1), b = make_fold_plan(labels, 1), c = make_fold_plan(labels, 2);
  for (std::size_t k = 0; k < a.folds.size(); ++k) EXPECT_EQ(a.folds[k].test, b.folds[k].test);
  bool differs = false;
  for (std::size_t k = 0; k < a.folds.size(); ++k) differs |= a.folds[k].test != c.folds[k].test;
  EXPECT_TRUE(differs);
}

TEST(FoldPlan, TooFewPerClassRejected) {
  EXPECT_THROW(make_fold_plan(labels_with(30, 5), 0), ConfigError);
}

TEST(Metrics, SensitivitySpecificity) {
  const std::vector<int> labels{1, 1, 1, 1, 0, 0};
  const std::vector<int> pred{1, 1, 1, 0, 0, 1};
  const auto m = classification_metrics(labels, pred, std::vector<double>(6, 0.5));
  EXPECT_DOUBLE_EQ(m.accuracy, 4.0 / 6.0);
  EXPECT_DOUBLE_EQ(m.sensitivity, 0.75);
  EXPECT_DOUBLE_EQ(m.specificity, 0.5);
  EXPECT_THROW(classification_metrics({1, 1}, {1, 1}, {0.5, 0.5}), ConfigError);
}

// 6^3 input -> conv 3^3 (4 channels) -> ReLU -> 4^3 max pool -> dense.
NetworkSpec toy_spec() {
  NetworkSpec s;
  s.name = "toy";
  s.input = {6, 6, 6};
  LayerSpec conv;
  conv.kind = LayerKind::kConv;
  conv.conv = ConvSpec{1, 4, {3, 3, 3}, {1, 1, 1}};
  LayerSpec relu;
  relu.kind = LayerKind::kRelu;
  LayerSpec pool;
  pool.kind = LayerKind::kMaxPool;
  pool.pool = PoolSpec{{4, 4, 4}, {4, 4, 4}};
  LayerSpec dense;
  dense.kind = LayerKind::kDense;
  dense.in_features = 4;
  dense.out_features = 2;
  s.layers = {conv, relu, pool, dense};
  return s;
}

// PD subjects carry a bright cube in one corner, NC subjects in the opposite one.
Dataset toy_dataset(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> noise(0.0f, 0.2f);
  Dataset d;
  d.extent = {6, 6, 6};
  for (int i = 0; i < n; ++i) {
    const int label = i % 2 == 0 ? kClassPD : kClassNC;
    Volume v(d.extent, {2, 2, 2});
    for (float& x : v.data) x = noise(rng);
    const Index o = label == kClassPD ? 0 : 3;
    for (Index z = o; z < o + 3; ++z)
      for (Index y = o; y < o + 3; ++y)
        for (Index x = o; x < o + 3; ++x) v.at(z, y, x) += 1.0f;
    d.ids.push_back("toy-" + std::to_string(i));
    d.labels.push_back(label);
    d.volumes.push_back(std::move(v));
  }
  return d;
}

TEST(TrainFold, ToySeparableReachesPerfectAccuracy) {
  const NetworkSpec spec = toy_spec();
  const Dataset data = toy_dataset(60, 3);
  const auto plan = make_fold_plan(data.labels, 1);
  TrainConfig c;
  c.epochs = 5;
  c.lr_start = 0.05;
  c.lr_end = 0.01;
  c.seed = 2;
  const auto r = train_fold(spec, data, plan.folds[0], 0, c);
  ASSERT_EQ(r.history.size(), 5u);
  EXPECT_EQ(r.history.back().validation_accuracy, 1.0);
  EXPECT_EQ(r.test.accuracy, 1.0);
  for (std::size_t e = 1; e < r.history.size(); ++e) {
    EXPECT_LE(r.history[e].train_loss, r.history[e - 1].train_loss);
  }
}

TEST(TrainFold, DeterministicGivenSeed) {
  const NetworkSpec spec = toy_spec();
  const Dataset data = toy_dataset(40, 4);
  const auto plan = make_fold_plan(data.labels, 1);
  TrainConfig c;
  c.epochs = 3;
  c.lr_start = 0.05;
  c.lr_end = 0.01;
  const auto a = train_fold(spec, data, plan.folds[2], 2, c);
  const auto b = train_fold(spec, data, plan.folds[2], 2, c);
  ASSERT_EQ(a.best.layers.size(), b.best.layers.size());
  for (std::size_t i = 0; i < a.best.layers.size(); ++i) {
    for (std::size_t t = 0; t < a.best.layers[i].tensors.size(); ++t) {
      EXPECT_EQ(a.best.layers[i].tensors[t], b.best.layers[i].tensors[t]);
    }
  }
  EXPECT_EQ(a.test.scores, b.test.scores);
}

TEST(TrainFold, CrossValidateMatchesSequentialFolds) {
  const NetworkSpec spec = toy_spec();
  const Dataset data = toy_dataset(40, 5);
  const auto plan = make_fold_plan(data.labels, 3);
  TrainConfig c;
  c.epochs = 2;
  c.lr_start = 0.05;
  c.lr_end = 0.01;
  const auto parallel = cross_validate(spec, data, plan, c, 2);
  ASSERT_EQ(parallel.size(), 10u);
  for (int k : {0, 7}) {
    const auto single = train_fold(spec, data, plan.folds[static_cast<std::size_t>(k)], k, c);
    EXPECT_EQ(parallel[static_cast<std::size_t>(k)].test.scores, single.test.scores);
  }
}

TEST(TrainFold, DivergenceReportedAsNumericalError) {
  const NetworkSpec spec = toy_spec();
  Dataset data = toy_dataset(40, 6);
  for (auto& v : data.volumes)
    for (float& x : v.data) x *= 1e30f;
  const auto plan = make_fold_plan(data.labels, 1);
  TrainConfig c;
  c.epochs = 3;
  c.lr_start = 10.0;
  c.lr_end = 1.0;
  EXPECT_THROW(train_fold(spec, data, plan.folds[0], 0, c), NumericalError);
}

}  // namespace
}  // namespace pdinterp

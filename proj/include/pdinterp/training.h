#ifndef PDINTERP_TRAINING_H_
#define PDINTERP_TRAINING_H_

// SGD-with-momentum training, stratified 10-fold cross-validation and
// classification metrics. PD (class 1) is the positive class.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pdinterp/network.h"
#include "pdinterp/volume.h"

namespace pdinterp {

struct TrainConfig {
  int epochs = 30;
  double momentum = 0.9;
  double lr_start = 1e-4;
  double lr_end = 1e-6;
  int batch_size = 8;
  bool class_weighting = true;  // w_c = N / (2 N_c) on the training split
  std::uint64_t seed = 0;

  void validate() const;
};

// lr_start * (lr_end / lr_start)^(epoch / (epochs - 1)); fractional epochs
// interpolate the exponent. Throws ConfigError outside [0, epochs - 1].
double lr_at(double epoch, const TrainConfig& config);

// v <- momentum * v - lr * g; p <- p + v
template <typename T>
void sgd_momentum_step(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& velocity, double lr,
                       double momentum);

// Per-layer velocity buffers matching the trainable tensors.
template <typename T>
using Velocity = std::vector<std::vector<Tensor<T>>>;

template <typename T>
Velocity<T> zero_velocity(const NetworkSpec& spec, const NetworkParams<T>& params);

// Applies the update to every trainable tensor (running moments excluded).
template <typename T>
void sgd_momentum_step(const NetworkSpec& spec, NetworkParams<T>& params,
                       const std::vector<std::vector<Tensor<T>>>& grads, Velocity<T>& velocity,
                       double lr, double momentum);

struct Fold {
  std::vector<int> train;
  std::vector<int> validation;
  std::vector<int> test;
};

struct FoldPlan {
  std::uint64_t seed = 0;
  std::vector<Fold> folds;
};

// Shuffles each class, lays PD then NC subjects round-robin over the folds,
// and uses chunk k as fold k's test set and chunk k+1 (mod folds) as its
// validation set. Throws ConfigError if a class has fewer than `folds` members.
FoldPlan make_fold_plan(const std::vector<int>& labels, std::uint64_t seed, int folds = 10);

struct ClassMetrics {
  double accuracy = 0;
  double sensitivity = 0;
  double specificity = 0;
  std::vector<int> labels;
  std::vector<int> predictions;
  std::vector<double> scores;  // P(PD)
};

// Throws ConfigError on empty or mismatched input or when a class is absent.
ClassMetrics classification_metrics(const std::vector<int>& labels, const std::vector<int>& predictions,
                                    const std::vector<double>& scores);

struct Dataset {
  std::vector<std::string> ids;
  std::vector<int> labels;
  std::vector<Volume> volumes;
  Extent3 extent;

  // (n, 1, Z, Y, X) batch of the given subjects.
  Tensor<float> batch(const std::vector<int>& subjects) const;
};

struct EpochLog {
  int fold = 0;
  int epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double validation_loss = 0;
  double validation_accuracy = 0;
};

struct FoldResult {
  int fold = 0;
  NetworkParams<float> best;
  int best_epoch = 0;
  std::vector<EpochLog> history;
  std::vector<int> test_ids;
  ClassMetrics test;
};

struct Evaluation {
  std::vector<int> predictions;
  std::vector<double> scores;  // P(PD)
  double loss = 0;             // unweighted mean cross-entropy
};

// Inference-mode predictions for the given subjects in batches.
Evaluation evaluate(const NetworkSpec& spec, const NetworkParams<float>& params,
                    const Dataset& data, const std::vector<int>& subjects, int batch_size = 8);

using EpochCallback = std::function<void(const EpochLog&)>;

// Trains from Glorot initialisation with seed derived from (config.seed, fold)
// and returns the best-on-validation parameters (highest accuracy, then lower
// loss) evaluated once on the test set. Throws NumericalError on a
// non-finite loss.
FoldResult train_fold(const NetworkSpec& spec, const Dataset& data, const Fold& fold, int fold_id,
                      const TrainConfig& config, const EpochCallback& on_epoch = {});

// Runs every fold of the plan on `threads` workers; results are in fold order.
std::vector<FoldResult> cross_validate(const NetworkSpec& spec, const Dataset& data,
                                       const FoldPlan& plan, const TrainConfig& config,
                                       int threads = 1, const EpochCallback& on_epoch = {});

}  // namespace pdinterp

#endif  // PDINTERP_TRAINING_H_

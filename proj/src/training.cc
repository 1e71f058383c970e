#include "pdinterp/training.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <random>
#include <thread>

#include "pdinterp/error.h"

namespace pdinterp {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(lr_end > 0 && lr_start >= lr_end)) throw ConfigError("learning rates need lr_start >= lr_end > 0");
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
}

double lr_at(double epoch, const TrainConfig& config) {
  config.validate();
  if (!(epoch >= 0 && epoch <= config.epochs - 1)) {
    throw ConfigError("epoch " + std::to_string(epoch) + " outside [0, " +
                      std::to_string(config.epochs - 1) + "]");
  }
  if (config.epochs == 1 || epoch == 0) return config.lr_start;
  if (epoch == config.epochs - 1) return config.lr_end;
  const double t = epoch / (config.epochs - 1);
  return config.lr_start * std::pow(config.lr_end / config.lr_start, t);
}

template <typename T>
void sgd_momentum_step(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& velocity, double lr,
                       double momentum) {
  if (grad.shape() != param.shape() || velocity.shape() != param.shape()) {
    throw ShapeError("SGD step: parameter " + shape_string(param.shape()) + ", gradient " +
                     shape_string(grad.shape()) + ", velocity " + shape_string(velocity.shape()));
  }
  const T mu = static_cast<T>(momentum);
  const T eta = static_cast<T>(lr);
  T* p = param.raw();
  T* v = velocity.raw();
  const T* g = grad.raw();
  for (Index i = 0; i < param.size(); ++i) {
    v[i] = mu * v[i] - eta * g[i];
    p[i] += v[i];
  }
}

template <typename T>
Velocity<T> zero_velocity(const NetworkSpec& spec, const NetworkParams<T>& params) {
  Velocity<T> v(spec.layers.size());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const int n = trainable_count(spec.layers[i].kind);
    for (int t = 0; t < n; ++t) v[i].emplace_back(params.layers[i].tensors[static_cast<std::size_t>(t)].shape());
  }
  return v;
}

template <typename T>
void sgd_momentum_step(const NetworkSpec& spec, NetworkParams<T>& params,
                       const std::vector<std::vector<Tensor<T>>>& grads, Velocity<T>& velocity,
                       double lr, double momentum) {
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const int n = trainable_count(spec.layers[i].kind);
    for (int t = 0; t < n; ++t) {
      const auto ti = static_cast<std::size_t>(t);
      sgd_momentum_step(params.layers[i].tensors[ti], grads[i][ti], velocity[i][ti], lr, momentum);
    }
  }
}

namespace {

void shuffle(std::vector<int>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace

FoldPlan make_fold_plan(const std::vector<int>& labels, std::uint64_t seed, int folds) {
  if (folds < 3) throw ConfigError("at least 3 folds are required");
  std::vector<int> pd, nc;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == kClassPD) pd.push_back(static_cast<int>(i));
    else if (labels[i] == kClassNC) nc.push_back(static_cast<int>(i));
    else throw ConfigError("label " + std::to_string(labels[i]) + " is neither NC nor PD");
  }
  if (static_cast<int>(pd.size()) < folds || static_cast<int>(nc.size()) < folds) {
    throw ConfigError("each class needs at least " + std::to_string(folds) + " subjects (PD " +
                      std::to_string(pd.size()) + ", NC " + std::to_string(nc.size()) + ")");
  }
  std::mt19937_64 rng(seed);
  shuffle(pd, rng);
  shuffle(nc, rng);
  std::vector<std::vector<int>> chunks(static_cast<std::size_t>(folds));
  std::size_t k = 0;
  for (const auto* cls : {&pd, &nc}) {
    for (int id : *cls) chunks[k++ % chunks.size()].push_back(id);
  }
  FoldPlan plan;
  plan.seed = seed;
  for (int f = 0; f < folds; ++f) {
    Fold fold;
    const auto val = static_cast<std::size_t>((f + 1) % folds);
    fold.test = chunks[static_cast<std::size_t>(f)];
    fold.validation = chunks[val];
    for (int c = 0; c < folds; ++c) {
      if (c == f || static_cast<std::size_t>(c) == val) continue;
      const auto& ch = chunks[static_cast<std::size_t>(c)];
      fold.train.insert(fold.train.end(), ch.begin(), ch.end());
    }
    for (auto* v : {&fold.train, &fold.validation, &fold.test}) std::sort(v->begin(), v->end());
    plan.folds.push_back(std::move(fold));
  }
  return plan;
}

ClassMetrics classification_metrics(const std::vector<int>& labels, const std::vector<int>& predictions,
                                    const std::vector<double>& scores) {
  if (labels.empty()) throw ConfigError("classification metrics need at least one subject");
  if (predictions.size() != labels.size() || scores.size() != labels.size()) {
    throw ConfigError("labels, predictions and scores must have equal lengths");
  }
  double tp = 0, tn = 0, pos = 0, neg = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == kClassPD) {
      pos += 1;
      tp += predictions[i] == kClassPD;
    } else {
      neg += 1;
      tn += predictions[i] == kClassNC;
    }
  }
  if (pos == 0 || neg == 0) throw ConfigError("classification metrics need both classes present");
  ClassMetrics m;
  m.accuracy = (tp + tn) / static_cast<double>(labels.size());
  m.sensitivity = tp / pos;
  m.specificity = tn / neg;
  m.labels = labels;
  m.predictions = predictions;
  m.scores = scores;
  return m;
}

Tensor<float> Dataset::batch(const std::vector<int>& subjects) const {
  const Index vox = extent.voxels();
  Tensor<float> t({static_cast<Index>(subjects.size()), 1, extent.z, extent.y, extent.x});
  for (std::size_t b = 0; b < subjects.size(); ++b) {
    const Volume& v = volumes.at(static_cast<std::size_t>(subjects[b]));
    if (v.extent != extent) throw ShapeError("dataset volume extent differs from " + extent_string(extent));
    std::copy(v.data.begin(), v.data.end(), t.raw() + static_cast<Index>(b) * vox);
  }
  return t;
}

Evaluation evaluate(const NetworkSpec& spec, const NetworkParams<float>& params, const Dataset& data,
                    const std::vector<int>& subjects, int batch_size) {
  Evaluation e;
  double loss = 0;
  for (std::size_t s = 0; s < subjects.size(); s += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(subjects.size(), s + static_cast<std::size_t>(batch_size));
    const std::vector<int> ids(subjects.begin() + static_cast<std::ptrdiff_t>(s),
                               subjects.begin() + static_cast<std::ptrdiff_t>(end));
    const auto trace = forward(spec, params, data.batch(ids), Mode::kInfer);
    std::vector<int> labels;
    for (int id : ids) labels.push_back(data.labels[static_cast<std::size_t>(id)]);
    const auto ce = softmax_cross_entropy(trace.logits(), labels);
    loss += static_cast<double>(ce.loss) * static_cast<double>(ids.size());
    for (std::size_t b = 0; b < ids.size(); ++b) {
      const auto bi = static_cast<Index>(b);
      const float p_pd = trace.probabilities[bi * kNumClasses + kClassPD];
      const float z_nc = trace.logits()[bi * kNumClasses + kClassNC];
      const float z_pd = trace.logits()[bi * kNumClasses + kClassPD];
      e.scores.push_back(p_pd);
      e.predictions.push_back(z_pd > z_nc ? kClassPD : kClassNC);
    }
  }
  e.loss = subjects.empty() ? 0.0 : loss / static_cast<double>(subjects.size());
  return e;
}

FoldResult train_fold(const NetworkSpec& spec, const Dataset& data, const Fold& fold, int fold_id,
                      const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  if (fold.train.empty() || fold.validation.empty() || fold.test.empty()) {
    throw ConfigError("fold " + std::to_string(fold_id) + " has an empty split");
  }
  const std::uint64_t fold_seed = config.seed * 1000003ULL + static_cast<std::uint64_t>(fold_id);
  NetworkParams<float> params = init_params<float>(spec, fold_seed);
  Velocity<float> velocity = zero_velocity(spec, params);

  double counts[kNumClasses] = {0, 0};
  for (int id : fold.train) counts[data.labels[static_cast<std::size_t>(id)]] += 1;
  std::vector<double> weights(kNumClasses, 1.0);
  if (config.class_weighting) {
    for (int c = 0; c < kNumClasses; ++c) {
      if (counts[c] == 0) throw ConfigError("training split lacks a class");
      weights[static_cast<std::size_t>(c)] = static_cast<double>(fold.train.size()) / (kNumClasses * counts[c]);
    }
  }

  FoldResult result;
  result.fold = fold_id;
  double best_acc = -1, best_loss = 0;
  std::mt19937_64 rng(fold_seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<int> order = fold.train;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = lr_at(epoch, config);
    shuffle(order, rng);
    double loss_sum = 0;
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), s + static_cast<std::size_t>(config.batch_size));
      const std::vector<int> ids(order.begin() + static_cast<std::ptrdiff_t>(s),
                                 order.begin() + static_cast<std::ptrdiff_t>(end));
      std::vector<int> labels;
      for (int id : ids) labels.push_back(data.labels[static_cast<std::size_t>(id)]);
      const auto trace = forward(spec, params, data.batch(ids), Mode::kTrain);
      const auto ce = weighted_softmax_cross_entropy(trace.logits(), labels, weights);
      if (!std::isfinite(ce.loss)) {
        throw NumericalError("fold " + std::to_string(fold_id) + " epoch " + std::to_string(epoch) +
                             ": non-finite training loss (lr " + std::to_string(lr) + ")");
      }
      loss_sum += static_cast<double>(ce.loss) * static_cast<double>(ids.size());
      BackwardOptions<float> opt;
      opt.input_grad = false;
      const auto grads = backward(spec, params, trace, ce.logit_grad, opt);
      update_batchnorm_moments(spec, params, trace);
      sgd_momentum_step(spec, params, grads.params, velocity, lr, config.momentum);
    }
    const auto val = evaluate(spec, params, data, fold.validation, config.batch_size);
    double correct = 0;
    for (std::size_t i = 0; i < fold.validation.size(); ++i) {
      correct += val.predictions[i] == data.labels[static_cast<std::size_t>(fold.validation[i])];
    }
    EpochLog log{fold_id, epoch, lr, loss_sum / static_cast<double>(order.size()), val.loss,
                 correct / static_cast<double>(fold.validation.size())};
    if (!std::isfinite(log.validation_loss)) {
      throw NumericalError("fold " + std::to_string(fold_id) + " epoch " + std::to_string(epoch) +
                           ": non-finite validation loss");
    }
    result.history.push_back(log);
    if (on_epoch) on_epoch(log);
    if (log.validation_accuracy > best_acc ||
        (log.validation_accuracy == best_acc && log.validation_loss < best_loss)) {
      best_acc = log.validation_accuracy;
      best_loss = log.validation_loss;
      result.best = params;
      result.best.epoch = epoch + 1;
      result.best_epoch = epoch;
    }
  }
  const auto test = evaluate(spec, result.best, data, fold.test, config.batch_size);
  std::vector<int> labels;
  for (int id : fold.test) labels.push_back(data.labels[static_cast<std::size_t>(id)]);
  result.test_ids = fold.test;
  result.test = classification_metrics(labels, test.predictions, test.scores);
  return result;
}

std::vector<FoldResult> cross_validate(const NetworkSpec& spec, const Dataset& data, const FoldPlan& plan,
                                       const TrainConfig& config, int threads,
                                       const EpochCallback& on_epoch) {
  std::vector<FoldResult> results(plan.folds.size());
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr failure;
  const EpochCallback locked = [&](const EpochLog& log) {
    if (!on_epoch) return;
    std::lock_guard<std::mutex> lock(mu);
    on_epoch(log);
  };
  auto worker = [&] {
    for (std::size_t f = next++; f < plan.folds.size(); f = next++) {
      try {
        results[f] = train_fold(spec, data, plan.folds[f], static_cast<int>(f), config, locked);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failure) failure = std::current_exception();
        next = plan.folds.size();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < std::max(1, threads); ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
  return results;
}

#define PDINTERP_INSTANTIATE_TRAINING(T)                                                          \
  template void sgd_momentum_step(Tensor<T>&, const Tensor<T>&, Tensor<T>&, double, double);      \
  template Velocity<T> zero_velocity(const NetworkSpec&, const NetworkParams<T>&);                 \
  template void sgd_momentum_step(const NetworkSpec&, NetworkParams<T>&,                           \
                                  const std::vector<std::vector<Tensor<T>>>&, Velocity<T>&, double, \
                                  double);

PDINTERP_INSTANTIATE_TRAINING(float)
PDINTERP_INSTANTIATE_TRAINING(double)

}  // namespace pdinterp

#ifndef PDINTERP_NETWORK_H_
#define PDINTERP_NETWORK_H_

// Declarative 3D CNN pipelines (PD Net, Deep PD Net and their batchnorm
// variants), their parameters, traced forward execution and a backward pass
// with selectable ReLU/max-pool propagation rules used by the attribution
// methods.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pdinterp/layers.h"
#include "pdinterp/tensor.h"

namespace pdinterp {

enum class Grid { kFull, kHalf };

// 91x109x91 at 2 mm, or 46x55x46 at 4 mm.
Extent3 grid_extent(Grid grid);
double grid_voxel_mm(Grid grid);
Grid parse_grid(std::string_view name);
std::string_view grid_name(Grid grid);

enum class LayerKind { kConv, kRelu, kMaxPool, kBatchNorm, kDense };
std::string_view layer_kind_name(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::kRelu;
  ConvSpec conv;          // kConv
  PoolSpec pool;          // kMaxPool
  Index channels = 0;     // kBatchNorm
  Index in_features = 0;  // kDense
  Index out_features = 0; // kDense
};

// Channel count and spatial extent of a layer output. Dense outputs are
// reported as (out_features, 1x1x1).
struct FeatureShape {
  Index channels = 1;
  Extent3 extent;
};

inline constexpr int kNumClasses = 2;
inline constexpr int kClassNC = 0;
inline constexpr int kClassPD = 1;
inline constexpr Index kDenseFeatures = 256;

struct NetworkSpec {
  std::string name;  // pdnet | pdnet_bn | deep_pdnet | deep_pdnet_bn
  Grid grid = Grid::kFull;
  Extent3 input;
  std::vector<LayerSpec> layers;

  // Output shape of each layer, validated at construction.
  std::vector<FeatureShape> output_shapes() const;
  Index dense_input_features() const;
};

const std::vector<std::string>& architecture_tags();

// Builds one of the four architectures for the given grid and validates the
// shape chain (ends in 256 features feeding a 2-logit dense layer).
NetworkSpec build_network(std::string_view tag, Grid grid = Grid::kFull);

// Checks shape arithmetic; throws ShapeError with the failing layer.
void validate_network(const NetworkSpec& spec);

// Per-layer parameter tensors: conv/dense {weights, bias}; batchnorm
// {scale, shift, running_mean, running_var}; others none.
template <typename T>
struct LayerParams {
  std::vector<Tensor<T>> tensors;
  bool has_running_stats = false;  // batchnorm only

  template <typename U>
  LayerParams<U> cast() const {
    LayerParams<U> out;
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    out.has_running_stats = has_running_stats;
    return out;
  }
};

template <typename T>
struct NetworkParams {
  std::vector<LayerParams<T>> layers;
  std::int64_t epoch = 0;

  template <typename U>
  NetworkParams<U> cast() const {
    NetworkParams<U> out;
    for (const auto& l : layers) out.layers.push_back(l.template cast<U>());
    out.epoch = epoch;
    return out;
  }
};

// Number of trainable tensors in a layer (running moments are excluded).
int trainable_count(LayerKind kind);

// Glorot-uniform weights, zero biases, unit scale / zero shift batchnorm.
template <typename T>
NetworkParams<T> init_params(const NetworkSpec& spec, std::uint64_t seed);

// Throws ShapeError when a parameter tensor disagrees with the spec.
template <typename T>
void check_params(const NetworkSpec& spec, const NetworkParams<T>& params);

enum class Mode { kTrain, kInfer };

template <typename T>
struct ForwardTrace {
  Mode mode = Mode::kInfer;
  Tensor<T> input;
  // Output of every layer; layer i consumes activations[i-1] (or input).
  std::vector<Tensor<T>> activations;
  // Max-pool argmax maps, indexed by layer (empty for other layers).
  std::vector<std::vector<Index>> argmax;
  // Training-mode batchnorm statistics, indexed by layer.
  std::vector<std::optional<BatchNormCache<T>>> batchnorm;
  Tensor<T> probabilities;

  const Tensor<T>& logits() const { return activations.back(); }
  const Tensor<T>& layer_input(std::size_t layer) const {
    return layer == 0 ? input : activations[layer - 1];
  }
};

// input: (N, 1, Z, Y, X). In kInfer mode batchnorm layers use frozen running
// moments and throw ConfigError if none have been recorded yet.
template <typename T>
ForwardTrace<T> forward(const NetworkSpec& spec, const NetworkParams<T>& params,
                        const Tensor<T>& input, Mode mode);

// Applies the running-moment update for every batchnorm layer of a
// training-mode trace.
template <typename T>
void update_batchnorm_moments(const NetworkSpec& spec, NetworkParams<T>& params,
                              const ForwardTrace<T>& trace);

// How signals cross ReLU and max-pool layers during the backward pass.
enum class BackwardRule {
  kGradient,  // exact adjoint
  kGuided,    // ReLU also zeroes negative incoming signal
  kRescale,   // DeepLIFT multipliers against a reference trace
};

template <typename T>
struct BackwardOptions {
  BackwardRule rule = BackwardRule::kGradient;
  const ForwardTrace<T>* reference = nullptr;  // required for kRescale
  bool param_grads = true;
  bool input_grad = true;
  // Records the signal arriving at the output of this layer when >= 0.
  int capture_layer = -1;
};

template <typename T>
struct NetworkGradients {
  Tensor<T> input;
  std::vector<std::vector<Tensor<T>>> params;  // trainable tensors per layer
  Tensor<T> captured;
};

// Propagates dlogits (shape (N, 2)) back through the traced network.
template <typename T>
NetworkGradients<T> backward(const NetworkSpec& spec, const NetworkParams<T>& params,
                             const ForwardTrace<T>& trace, const Tensor<T>& dlogits,
                             const BackwardOptions<T>& options = {});

// Index of the ReLU that directly follows each convolution, in layer order.
std::vector<int> conv_activation_layers(const NetworkSpec& spec);

}  // namespace pdinterp

#endif  // PDINTERP_NETWORK_H_

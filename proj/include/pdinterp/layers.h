#ifndef PDINTERP_LAYERS_H_
#define PDINTERP_LAYERS_H_

// Forward and backward kernels for the layers used by the classifiers.
//
// Volumetric tensors are rank 5 (N, C, Z, Y, X). Convolution is a valid
// (unpadded) cross-correlation; no kernel flip is applied.

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "pdinterp/tensor.h"

namespace pdinterp {

struct ConvSpec {
  Index in_channels = 1;
  Index out_channels = 1;
  Extent3 kernel;
  Extent3 stride;
};

struct PoolSpec {
  Extent3 window{3, 3, 3};
  Extent3 stride{2, 2, 2};
};

// Output extent floor((in - k) / s) + 1 per axis. Throws ShapeError naming the
// first axis whose window does not fit.
Extent3 window_output_extent(const Extent3& in, const Extent3& window, const Extent3& stride);
bool window_fits(const Extent3& in, const Extent3& window);

// Gradients of a layer: with respect to its input and to each parameter tensor,
// in the same order as the layer's parameters.
template <typename T>
struct LayerGradients {
  Tensor<T> input;
  std::vector<Tensor<T>> params;
};

// weights: (Cout, Cin, kz, ky, kx); bias: (Cout).
template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias,
                         const ConvSpec& spec);

// Returns {dL/dinput, {dL/dweights, dL/dbias}}. The input gradient is left
// empty when need_input_grad is false.
template <typename T>
LayerGradients<T> conv3d_backward(const Tensor<T>& input, const Tensor<T>& weights,
                                  const Tensor<T>& upstream, const ConvSpec& spec,
                                  bool need_input_grad = true);

template <typename T>
struct PoolResult {
  Tensor<T> output;
  // Flat index into the input tensor of the selected voxel, one per output
  // element. Ties go to the first voxel in (z, y, x) scan order.
  std::vector<Index> argmax;
};

template <typename T>
PoolResult<T> maxpool3d_forward(const Tensor<T>& input, const PoolSpec& spec);

template <typename T>
Tensor<T> maxpool3d_backward(std::span<const Index> argmax, const Shape& input_shape,
                             const Tensor<T>& upstream);

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x);

// Passes upstream where the pre-activation is strictly positive.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& pre_activation, const Tensor<T>& upstream);

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.99;

// Per-channel statistics captured by a training-mode batchnorm forward.
template <typename T>
struct BatchNormCache {
  Tensor<T> normalized;      // x_hat
  std::vector<T> mean;       // batch mean per channel
  std::vector<T> variance;   // biased batch variance per channel
  std::vector<T> inv_std;    // 1 / sqrt(var + eps)
};

template <typename T>
struct BatchNormTrainResult {
  Tensor<T> output;
  BatchNormCache<T> cache;
};

// Normalizes each channel over (N, Z, Y, X) with batch statistics.
template <typename T>
BatchNormTrainResult<T> batchnorm_forward_train(const Tensor<T>& x, const Tensor<T>& gamma,
                                                const Tensor<T>& beta);

// Frozen-moment affine map per channel.
template <typename T>
Tensor<T> batchnorm_forward_infer(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                                  const Tensor<T>& running_mean, const Tensor<T>& running_var);

// Training-mode adjoint; returns {dx, {dgamma, dbeta}}.
template <typename T>
LayerGradients<T> batchnorm_backward_train(const BatchNormCache<T>& cache, const Tensor<T>& gamma,
                                           const Tensor<T>& upstream);

// Inference-mode adjoint; returns {dx, {dgamma, dbeta}} where the parameter
// gradients treat the frozen moments as constants.
template <typename T>
LayerGradients<T> batchnorm_backward_infer(const Tensor<T>& x, const Tensor<T>& gamma,
                                           const Tensor<T>& running_mean,
                                           const Tensor<T>& running_var,
                                           const Tensor<T>& upstream);

// running <- momentum * running + (1 - momentum) * batch
template <typename T>
void update_running_moments(Tensor<T>& running_mean, Tensor<T>& running_var,
                            const BatchNormCache<T>& cache, double momentum = kBatchNormMomentum);

// x: (N, ...) flattened to (N, F); weights: (out, F); bias: (out). Output (N, out).
template <typename T>
Tensor<T> dense_forward(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& bias);

template <typename T>
LayerGradients<T> dense_backward(const Tensor<T>& x, const Tensor<T>& weights,
                                 const Tensor<T>& upstream, bool need_input_grad = true);

// Row-wise softmax of (N, K) logits.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);

template <typename T>
struct LossResult {
  T loss = 0;
  Tensor<T> logit_grad;
};

// loss = -sum_i w_{y_i} log softmax(z_i)[y_i] / sum_i w_{y_i}
template <typename T>
LossResult<T> weighted_softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels,
                                             std::span<const double> class_weights);

// Unweighted mean cross-entropy.
template <typename T>
LossResult<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

// Fan-in and fan-out from a parameter shape: (out, in) for dense,
// (Cout, Cin, kz, ky, kx) for convolution.
std::pair<Index, Index> glorot_fans(const Shape& shape);

// Uniform on +-sqrt(6 / (fan_in + fan_out)).
template <typename T>
Tensor<T> glorot_init(const Shape& shape, std::mt19937_64& rng);

}  // namespace pdinterp

#endif  // PDINTERP_LAYERS_H_

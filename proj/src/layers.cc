#include "pdinterp/layers.h"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace pdinterp {

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

const char* kAxisNames[3] = {"z", "y", "x"};

void require_rank(const Shape& shape, int rank, const char* what) {
  if (static_cast<int>(shape.size()) != rank) {
    throw ShapeError(std::string(what) + " must have rank " + std::to_string(rank) + ", got " +
                     shape_string(shape));
  }
}

Extent3 spatial(const Shape& s) { return {s[2], s[3], s[4]}; }

// Unrolls receptive fields into a (C*kz*ky*kx) x (oz*oy*ox) matrix.
template <typename T>
void im2col(const T* in, Index channels, const Extent3& in_e, const ConvSpec& spec,
            const Extent3& out_e, T* cols) {
  const Index p_count = out_e.voxels();
  const Extent3& k = spec.kernel;
  const Extent3& s = spec.stride;
  T* row = cols;
  for (Index c = 0; c < channels; ++c) {
    const T* channel = in + c * in_e.voxels();
    for (Index dz = 0; dz < k.z; ++dz) {
      for (Index dy = 0; dy < k.y; ++dy) {
        for (Index dx = 0; dx < k.x; ++dx) {
          T* out = row;
          for (Index oz = 0; oz < out_e.z; ++oz) {
            const T* plane = channel + (oz * s.z + dz) * in_e.y * in_e.x;
            for (Index oy = 0; oy < out_e.y; ++oy) {
              const T* line = plane + (oy * s.y + dy) * in_e.x + dx;
              for (Index ox = 0; ox < out_e.x; ++ox) *out++ = line[ox * s.x];
            }
          }
          row += p_count;
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, Index channels, const Extent3& in_e, const ConvSpec& spec,
            const Extent3& out_e, T* in) {
  const Index p_count = out_e.voxels();
  const Extent3& k = spec.kernel;
  const Extent3& s = spec.stride;
  const T* row = cols;
  for (Index c = 0; c < channels; ++c) {
    T* channel = in + c * in_e.voxels();
    for (Index dz = 0; dz < k.z; ++dz) {
      for (Index dy = 0; dy < k.y; ++dy) {
        for (Index dx = 0; dx < k.x; ++dx) {
          const T* src = row;
          for (Index oz = 0; oz < out_e.z; ++oz) {
            T* plane = channel + (oz * s.z + dz) * in_e.y * in_e.x;
            for (Index oy = 0; oy < out_e.y; ++oy) {
              T* line = plane + (oy * s.y + dy) * in_e.x + dx;
              for (Index ox = 0; ox < out_e.x; ++ox) line[ox * s.x] += *src++;
            }
          }
          row += p_count;
        }
      }
    }
  }
}

void check_conv_args(const Shape& in, const Shape& w, const Shape& b, const ConvSpec& spec) {
  require_rank(in, 5, "conv3d input");
  require_rank(w, 5, "conv3d weights");
  if (in[1] != spec.in_channels) {
    throw ShapeError("conv3d input has " + std::to_string(in[1]) + " channels, spec expects " +
                     std::to_string(spec.in_channels));
  }
  const Shape expected_w{spec.out_channels, spec.in_channels, spec.kernel.z, spec.kernel.y,
                         spec.kernel.x};
  if (w != expected_w) {
    throw ShapeError("conv3d weights " + shape_string(w) + " do not match spec " +
                     shape_string(expected_w));
  }
  if (b != Shape{spec.out_channels}) {
    throw ShapeError("conv3d bias " + shape_string(b) + " does not match out_channels " +
                     std::to_string(spec.out_channels));
  }
}

}  // namespace

bool window_fits(const Extent3& in, const Extent3& window) {
  return window.z <= in.z && window.y <= in.y && window.x <= in.x;
}

Extent3 window_output_extent(const Extent3& in, const Extent3& window, const Extent3& stride) {
  Index out[3];
  for (int a = 0; a < 3; ++a) {
    if (window[a] < 1 || stride[a] < 1) {
      throw ShapeError(std::string("window and stride must be >= 1 on axis ") + kAxisNames[a]);
    }
    if (window[a] > in[a]) {
      throw ShapeError(std::string("window extent ") + std::to_string(window[a]) +
                       " exceeds input extent " + std::to_string(in[a]) + " on axis " +
                       kAxisNames[a]);
    }
    out[a] = (in[a] - window[a]) / stride[a] + 1;
  }
  return {out[0], out[1], out[2]};
}

template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias,
                         const ConvSpec& spec) {
  check_conv_args(input.shape(), weights.shape(), bias.shape(), spec);
  const Extent3 in_e = spatial(input.shape());
  const Extent3 out_e = window_output_extent(in_e, spec.kernel, spec.stride);
  const Index n_batch = input.dim(0);
  const Index k_rows = spec.in_channels * spec.kernel.voxels();
  const Index p_count = out_e.voxels();

  Tensor<T> out({n_batch, spec.out_channels, out_e.z, out_e.y, out_e.x});
  AlignedVector<T> cols(static_cast<std::size_t>(k_rows * p_count));
  ConstMatrixMap<T> w(weights.raw(), spec.out_channels, k_rows);
  for (Index n = 0; n < n_batch; ++n) {
    im2col(input.raw() + n * spec.in_channels * in_e.voxels(), spec.in_channels, in_e, spec, out_e,
           cols.data());
    ConstMatrixMap<T> c(cols.data(), k_rows, p_count);
    MatrixMap<T> y(out.raw() + n * spec.out_channels * p_count, spec.out_channels, p_count);
    y.noalias() = w * c;
    for (Index o = 0; o < spec.out_channels; ++o) y.row(o).array() += bias[o];
  }
  return out;
}

template <typename T>
LayerGradients<T> conv3d_backward(const Tensor<T>& input, const Tensor<T>& weights,
                                  const Tensor<T>& upstream, const ConvSpec& spec,
                                  bool need_input_grad) {
  check_conv_args(input.shape(), weights.shape(), Shape{spec.out_channels}, spec);
  const Extent3 in_e = spatial(input.shape());
  const Extent3 out_e = window_output_extent(in_e, spec.kernel, spec.stride);
  const Index n_batch = input.dim(0);
  const Shape expected{n_batch, spec.out_channels, out_e.z, out_e.y, out_e.x};
  if (upstream.shape() != expected) {
    throw ShapeError("conv3d upstream gradient " + shape_string(upstream.shape()) +
                     " does not match forward output " + shape_string(expected));
  }
  const Index k_rows = spec.in_channels * spec.kernel.voxels();
  const Index p_count = out_e.voxels();

  LayerGradients<T> grads;
  grads.params.emplace_back(weights.shape());
  grads.params.emplace_back(Shape{spec.out_channels});
  if (need_input_grad) grads.input = Tensor<T>(input.shape());

  MatrixMap<T> dw(grads.params[0].raw(), spec.out_channels, k_rows);
  ConstMatrixMap<T> w(weights.raw(), spec.out_channels, k_rows);
  AlignedVector<T> cols(static_cast<std::size_t>(k_rows * p_count));
  for (Index n = 0; n < n_batch; ++n) {
    ConstMatrixMap<T> dy(upstream.raw() + n * spec.out_channels * p_count, spec.out_channels,
                         p_count);
    im2col(input.raw() + n * spec.in_channels * in_e.voxels(), spec.in_channels, in_e, spec, out_e,
           cols.data());
    ConstMatrixMap<T> c(cols.data(), k_rows, p_count);
    dw.noalias() += dy * c.transpose();
    for (Index o = 0; o < spec.out_channels; ++o) grads.params[1][o] += dy.row(o).sum();
    if (need_input_grad) {
      MatrixMap<T> dc(cols.data(), k_rows, p_count);
      dc.noalias() = w.transpose() * dy;
      col2im(cols.data(), spec.in_channels, in_e, spec, out_e,
             grads.input.raw() + n * spec.in_channels * in_e.voxels());
    }
  }
  return grads;
}

template <typename T>
PoolResult<T> maxpool3d_forward(const Tensor<T>& input, const PoolSpec& spec) {
  require_rank(input.shape(), 5, "maxpool3d input");
  const Extent3 in_e = spatial(input.shape());
  const Extent3 out_e = window_output_extent(in_e, spec.window, spec.stride);
  const Index planes = input.dim(0) * input.dim(1);
  PoolResult<T> result;
  result.output = Tensor<T>({input.dim(0), input.dim(1), out_e.z, out_e.y, out_e.x});
  result.argmax.resize(static_cast<std::size_t>(result.output.size()));
  const T* in = input.raw();
  Index o = 0;
  for (Index p = 0; p < planes; ++p) {
    const Index base = p * in_e.voxels();
    for (Index oz = 0; oz < out_e.z; ++oz) {
      for (Index oy = 0; oy < out_e.y; ++oy) {
        for (Index ox = 0; ox < out_e.x; ++ox, ++o) {
          Index best = -1;
          T best_value = -std::numeric_limits<T>::infinity();
          for (Index dz = 0; dz < spec.window.z; ++dz) {
            for (Index dy = 0; dy < spec.window.y; ++dy) {
              for (Index dx = 0; dx < spec.window.x; ++dx) {
                const Index idx = base +
                                  ((oz * spec.stride.z + dz) * in_e.y + oy * spec.stride.y + dy) *
                                      in_e.x +
                                  ox * spec.stride.x + dx;
                if (best < 0 || in[idx] > best_value) {
                  best = idx;
                  best_value = in[idx];
                }
              }
            }
          }
          result.output[o] = best_value;
          result.argmax[static_cast<std::size_t>(o)] = best;
        }
      }
    }
  }
  return result;
}

template <typename T>
Tensor<T> maxpool3d_backward(std::span<const Index> argmax, const Shape& input_shape,
                             const Tensor<T>& upstream) {
  if (static_cast<Index>(argmax.size()) != upstream.size()) {
    throw ShapeError("maxpool3d argmax map has " + std::to_string(argmax.size()) +
                     " entries, upstream gradient has " + std::to_string(upstream.size()));
  }
  Tensor<T> grad(input_shape);
  for (std::size_t i = 0; i < argmax.size(); ++i) {
    if (argmax[i] < 0 || argmax[i] >= grad.size()) {
      throw ShapeError("maxpool3d argmax index out of range for input " +
                       shape_string(input_shape));
    }
    grad[argmax[i]] += upstream[static_cast<Index>(i)];
  }
  return grad;
}

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (T& v : y.data()) v = v > T(0) ? v : T(0);
  return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& pre_activation, const Tensor<T>& upstream) {
  if (pre_activation.shape() != upstream.shape()) {
    throw ShapeError("relu upstream gradient " + shape_string(upstream.shape()) +
                     " does not match activation " + shape_string(pre_activation.shape()));
  }
  Tensor<T> grad(upstream.shape());
  for (Index i = 0; i < grad.size(); ++i) {
    grad[i] = pre_activation[i] > T(0) ? upstream[i] : T(0);
  }
  return grad;
}

namespace {

template <typename T>
void check_channel_vector(const Tensor<T>& p, Index channels, const char* what) {
  if (p.shape() != Shape{channels}) {
    throw ShapeError(std::string("batchnorm ") + what + " " + shape_string(p.shape()) +
                     " does not match channel count " + std::to_string(channels));
  }
}

}  // namespace

template <typename T>
BatchNormTrainResult<T> batchnorm_forward_train(const Tensor<T>& x, const Tensor<T>& gamma,
                                                const Tensor<T>& beta) {
  require_rank(x.shape(), 5, "batchnorm input");
  const Index n_batch = x.dim(0);
  const Index channels = x.dim(1);
  const Index vox = x.dim(2) * x.dim(3) * x.dim(4);
  check_channel_vector(gamma, channels, "scale");
  check_channel_vector(beta, channels, "shift");
  const double count = static_cast<double>(n_batch * vox);

  BatchNormTrainResult<T> r;
  r.output = Tensor<T>(x.shape());
  r.cache.normalized = Tensor<T>(x.shape());
  r.cache.mean.resize(static_cast<std::size_t>(channels));
  r.cache.variance.resize(static_cast<std::size_t>(channels));
  r.cache.inv_std.resize(static_cast<std::size_t>(channels));
  for (Index c = 0; c < channels; ++c) {
    double sum = 0;
    for (Index n = 0; n < n_batch; ++n) {
      const T* p = x.raw() + (n * channels + c) * vox;
      for (Index i = 0; i < vox; ++i) sum += p[i];
    }
    const double mean = sum / count;
    double sq = 0;
    for (Index n = 0; n < n_batch; ++n) {
      const T* p = x.raw() + (n * channels + c) * vox;
      for (Index i = 0; i < vox; ++i) {
        const double d = p[i] - mean;
        sq += d * d;
      }
    }
    const double var = sq / count;
    const double inv_std = 1.0 / std::sqrt(var + kBatchNormEpsilon);
    const auto ci = static_cast<std::size_t>(c);
    r.cache.mean[ci] = static_cast<T>(mean);
    r.cache.variance[ci] = static_cast<T>(var);
    r.cache.inv_std[ci] = static_cast<T>(inv_std);
    for (Index n = 0; n < n_batch; ++n) {
      const Index off = (n * channels + c) * vox;
      for (Index i = 0; i < vox; ++i) {
        const T xh = static_cast<T>((x[off + i] - mean) * inv_std);
        r.cache.normalized[off + i] = xh;
        r.output[off + i] = gamma[c] * xh + beta[c];
      }
    }
  }
  return r;
}

template <typename T>
Tensor<T> batchnorm_forward_infer(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                                  const Tensor<T>& running_mean, const Tensor<T>& running_var) {
  require_rank(x.shape(), 5, "batchnorm input");
  const Index channels = x.dim(1);
  check_channel_vector(gamma, channels, "scale");
  check_channel_vector(beta, channels, "shift");
  check_channel_vector(running_mean, channels, "running mean");
  check_channel_vector(running_var, channels, "running variance");
  const Index vox = x.dim(2) * x.dim(3) * x.dim(4);
  Tensor<T> y(x.shape());
  for (Index n = 0; n < x.dim(0); ++n) {
    for (Index c = 0; c < channels; ++c) {
      const T scale = static_cast<T>(gamma[c] / std::sqrt(static_cast<double>(running_var[c]) +
                                                          kBatchNormEpsilon));
      const T shift = beta[c] - scale * running_mean[c];
      const Index off = (n * channels + c) * vox;
      for (Index i = 0; i < vox; ++i) y[off + i] = scale * x[off + i] + shift;
    }
  }
  return y;
}

template <typename T>
LayerGradients<T> batchnorm_backward_train(const BatchNormCache<T>& cache, const Tensor<T>& gamma,
                                           const Tensor<T>& upstream) {
  const Tensor<T>& xh = cache.normalized;
  if (upstream.shape() != xh.shape()) {
    throw ShapeError("batchnorm upstream gradient " + shape_string(upstream.shape()) +
                     " does not match forward output " + shape_string(xh.shape()));
  }
  const Index n_batch = xh.dim(0);
  const Index channels = xh.dim(1);
  const Index vox = xh.dim(2) * xh.dim(3) * xh.dim(4);
  const double count = static_cast<double>(n_batch * vox);
  LayerGradients<T> g;
  g.input = Tensor<T>(xh.shape());
  g.params.emplace_back(Shape{channels});
  g.params.emplace_back(Shape{channels});
  for (Index c = 0; c < channels; ++c) {
    double sum_dy = 0, sum_dy_xh = 0;
    for (Index n = 0; n < n_batch; ++n) {
      const Index off = (n * channels + c) * vox;
      for (Index i = 0; i < vox; ++i) {
        sum_dy += upstream[off + i];
        sum_dy_xh += static_cast<double>(upstream[off + i]) * xh[off + i];
      }
    }
    g.params[0][c] = static_cast<T>(sum_dy_xh);
    g.params[1][c] = static_cast<T>(sum_dy);
    const double k = gamma[c] * cache.inv_std[static_cast<std::size_t>(c)] / count;
    for (Index n = 0; n < n_batch; ++n) {
      const Index off = (n * channels + c) * vox;
      for (Index i = 0; i < vox; ++i) {
        g.input[off + i] =
            static_cast<T>(k * (count * upstream[off + i] - sum_dy - xh[off + i] * sum_dy_xh));
      }
    }
  }
  return g;
}

template <typename T>
LayerGradients<T> batchnorm_backward_infer(const Tensor<T>& x, const Tensor<T>& gamma,
                                           const Tensor<T>& running_mean,
                                           const Tensor<T>& running_var,
                                           const Tensor<T>& upstream) {
  if (upstream.shape() != x.shape()) {
    throw ShapeError("batchnorm upstream gradient " + shape_string(upstream.shape()) +
                     " does not match forward output " + shape_string(x.shape()));
  }
  const Index channels = x.dim(1);
  const Index vox = x.dim(2) * x.dim(3) * x.dim(4);
  LayerGradients<T> g;
  g.input = Tensor<T>(x.shape());
  g.params.emplace_back(Shape{channels});
  g.params.emplace_back(Shape{channels});
  for (Index c = 0; c < channels; ++c) {
    const double inv_std = 1.0 / std::sqrt(static_cast<double>(running_var[c]) + kBatchNormEpsilon);
    const T scale = static_cast<T>(gamma[c] * inv_std);
    double dgamma = 0, dbeta = 0;
    for (Index n = 0; n < x.dim(0); ++n) {
      const Index off = (n * channels + c) * vox;
      for (Index i = 0; i < vox; ++i) {
        g.input[off + i] = scale * upstream[off + i];
        dgamma += static_cast<double>(upstream[off + i]) * (x[off + i] - running_mean[c]) * inv_std;
        dbeta += upstream[off + i];
      }
    }
    g.params[0][c] = static_cast<T>(dgamma);
    g.params[1][c] = static_cast<T>(dbeta);
  }
  return g;
}

template <typename T>
void update_running_moments(Tensor<T>& running_mean, Tensor<T>& running_var,
                            const BatchNormCache<T>& cache, double momentum) {
  for (Index c = 0; c < running_mean.size(); ++c) {
    const auto ci = static_cast<std::size_t>(c);
    running_mean[c] = static_cast<T>(momentum * running_mean[c] + (1 - momentum) * cache.mean[ci]);
    running_var[c] =
        static_cast<T>(momentum * running_var[c] + (1 - momentum) * cache.variance[ci]);
  }
}

template <typename T>
Tensor<T> dense_forward(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& bias) {
  require_rank(weights.shape(), 2, "dense weights");
  const Index n_batch = x.dim(0);
  const Index features = x.size() / n_batch;
  const Index outputs = weights.dim(0);
  if (weights.dim(1) != features) {
    throw ShapeError("dense layer expects " + std::to_string(weights.dim(1)) +
                     " input features, got " + std::to_string(features) + " from " +
                     shape_string(x.shape()));
  }
  if (bias.shape() != Shape{outputs}) {
    throw ShapeError("dense bias " + shape_string(bias.shape()) + " does not match " +
                     std::to_string(outputs) + " outputs");
  }
  Tensor<T> y({n_batch, outputs});
  for (Index n = 0; n < n_batch; ++n) {
    const T* xr = x.raw() + n * features;
    for (Index o = 0; o < outputs; ++o) {
      const T* wr = weights.raw() + o * features;
      T acc = 0;
      for (Index f = 0; f < features; ++f) acc += wr[f] * xr[f];
      y[n * outputs + o] = acc + bias[o];
    }
  }
  return y;
}

template <typename T>
LayerGradients<T> dense_backward(const Tensor<T>& x, const Tensor<T>& weights,
                                 const Tensor<T>& upstream, bool need_input_grad) {
  const Index n_batch = x.dim(0);
  const Index features = x.size() / n_batch;
  const Index outputs = weights.dim(0);
  if (upstream.shape() != Shape{n_batch, outputs}) {
    throw ShapeError("dense upstream gradient " + shape_string(upstream.shape()) +
                     " does not match forward output (" + std::to_string(n_batch) + "x" +
                     std::to_string(outputs) + ")");
  }
  LayerGradients<T> g;
  g.params.emplace_back(weights.shape());
  g.params.emplace_back(Shape{outputs});
  if (need_input_grad) g.input = Tensor<T>(x.shape());
  for (Index n = 0; n < n_batch; ++n) {
    const T* xr = x.raw() + n * features;
    for (Index o = 0; o < outputs; ++o) {
      const T up = upstream[n * outputs + o];
      T* dw = g.params[0].raw() + o * features;
      for (Index f = 0; f < features; ++f) dw[f] += up * xr[f];
      g.params[1][o] += up;
      if (need_input_grad) {
        const T* wr = weights.raw() + o * features;
        T* dx = g.input.raw() + n * features;
        for (Index f = 0; f < features; ++f) dx[f] += up * wr[f];
      }
    }
  }
  return g;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  require_rank(logits.shape(), 2, "logits");
  const Index k = logits.dim(1);
  Tensor<T> p(logits.shape());
  for (Index n = 0; n < logits.dim(0); ++n) {
    const T* z = logits.raw() + n * k;
    const T zmax = *std::max_element(z, z + k);
    double sum = 0;
    for (Index j = 0; j < k; ++j) sum += std::exp(static_cast<double>(z[j] - zmax));
    for (Index j = 0; j < k; ++j) {
      p[n * k + j] = static_cast<T>(std::exp(static_cast<double>(z[j] - zmax)) / sum);
    }
  }
  return p;
}

template <typename T>
LossResult<T> weighted_softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels,
                                             std::span<const double> class_weights) {
  require_rank(logits.shape(), 2, "logits");
  const Index n_batch = logits.dim(0);
  const Index k = logits.dim(1);
  if (static_cast<Index>(labels.size()) != n_batch) {
    throw ShapeError("label count " + std::to_string(labels.size()) + " does not match batch " +
                     std::to_string(n_batch));
  }
  if (static_cast<Index>(class_weights.size()) != k) {
    throw ConfigError("class weight count must equal the number of classes");
  }
  for (double w : class_weights) {
    if (!(w > 0)) throw ConfigError("class weights must be strictly positive");
  }
  double weight_sum = 0;
  for (int y : labels) {
    if (y < 0 || y >= k) {
      throw ConfigError("label " + std::to_string(y) + " outside class range [0, " +
                        std::to_string(k) + ")");
    }
    weight_sum += class_weights[static_cast<std::size_t>(y)];
  }
  LossResult<T> r;
  r.logit_grad = Tensor<T>(logits.shape());
  double total = 0;
  for (Index n = 0; n < n_batch; ++n) {
    const T* z = logits.raw() + n * k;
    const int y = labels[static_cast<std::size_t>(n)];
    const double w = class_weights[static_cast<std::size_t>(y)];
    double zmax = z[0];
    for (Index j = 1; j < k; ++j) zmax = std::max<double>(zmax, z[j]);
    double sum = 0;
    for (Index j = 0; j < k; ++j) sum += std::exp(z[j] - zmax);
    const double log_norm = zmax + std::log(sum);
    total += w * (log_norm - z[y]);
    for (Index j = 0; j < k; ++j) {
      const double p = std::exp(z[j] - log_norm);
      r.logit_grad[n * k + j] = static_cast<T>(w * (p - (j == y ? 1.0 : 0.0)) / weight_sum);
    }
  }
  r.loss = static_cast<T>(total / weight_sum);
  return r;
}

template <typename T>
LossResult<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_rank(logits.shape(), 2, "logits");
  const Index n_batch = logits.dim(0);
  const Index k = logits.dim(1);
  if (static_cast<Index>(labels.size()) != n_batch) {
    throw ShapeError("label count " + std::to_string(labels.size()) + " does not match batch " +
                     std::to_string(n_batch));
  }
  LossResult<T> r;
  r.logit_grad = Tensor<T>(logits.shape());
  const double count = static_cast<double>(n_batch);
  double total = 0;
  for (Index n = 0; n < n_batch; ++n) {
    const T* z = logits.raw() + n * k;
    const int y = labels[static_cast<std::size_t>(n)];
    if (y < 0 || y >= k) {
      throw ConfigError("label " + std::to_string(y) + " outside class range [0, " +
                        std::to_string(k) + ")");
    }
    double zmax = z[0];
    for (Index j = 1; j < k; ++j) zmax = std::max<double>(zmax, z[j]);
    double sum = 0;
    for (Index j = 0; j < k; ++j) sum += std::exp(z[j] - zmax);
    const double log_norm = zmax + std::log(sum);
    total += log_norm - z[y];
    for (Index j = 0; j < k; ++j) {
      const double p = std::exp(z[j] - log_norm);
      r.logit_grad[n * k + j] = static_cast<T>((p - (j == y ? 1.0 : 0.0)) / count);
    }
  }
  r.loss = static_cast<T>(total / count);
  return r;
}

std::pair<Index, Index> glorot_fans(const Shape& shape) {
  if (shape.size() == 2) return {shape[1], shape[0]};
  if (shape.size() == 5) {
    const Index receptive = shape[2] * shape[3] * shape[4];
    return {shape[1] * receptive, shape[0] * receptive};
  }
  if (shape.size() == 1) return {shape[0], shape[0]};
  throw ShapeError("cannot derive fan-in/fan-out from shape " + shape_string(shape));
}

template <typename T>
Tensor<T> glorot_init(const Shape& shape, std::mt19937_64& rng) {
  const auto [fan_in, fan_out] = glorot_fans(shape);
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor<T> t(shape);
  for (T& v : t.data()) {
    // 53 random mantissa bits give a platform-independent uniform in [0, 1).
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    v = static_cast<T>(-bound + 2.0 * bound * u);
  }
  return t;
}

#define PDINTERP_INSTANTIATE_LAYERS(T)                                                           \
  template Tensor<T> conv3d_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,         \
                                    const ConvSpec&);                                             \
  template LayerGradients<T> conv3d_backward(const Tensor<T>&, const Tensor<T>&,                  \
                                             const Tensor<T>&, const ConvSpec&, bool);            \
  template PoolResult<T> maxpool3d_forward(const Tensor<T>&, const PoolSpec&);                    \
  template Tensor<T> maxpool3d_backward(std::span<const Index>, const Shape&, const Tensor<T>&);  \
  template Tensor<T> relu_forward(const Tensor<T>&);                                              \
  template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);                           \
  template BatchNormTrainResult<T> batchnorm_forward_train(const Tensor<T>&, const Tensor<T>&,    \
                                                           const Tensor<T>&);                     \
  template Tensor<T> batchnorm_forward_infer(const Tensor<T>&, const Tensor<T>&,                  \
                                             const Tensor<T>&, const Tensor<T>&,                  \
                                             const Tensor<T>&);                                   \
  template LayerGradients<T> batchnorm_backward_train(const BatchNormCache<T>&,                   \
                                                      const Tensor<T>&, const Tensor<T>&);        \
  template LayerGradients<T> batchnorm_backward_infer(const Tensor<T>&, const Tensor<T>&,         \
                                                      const Tensor<T>&, const Tensor<T>&,         \
                                                      const Tensor<T>&);                          \
  template void update_running_moments(Tensor<T>&, Tensor<T>&, const BatchNormCache<T>&, double); \
  template Tensor<T> dense_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);         \
  template LayerGradients<T> dense_backward(const Tensor<T>&, const Tensor<T>&,                   \
                                            const Tensor<T>&, bool);                              \
  template Tensor<T> softmax(const Tensor<T>&);                                                   \
  template LossResult<T> weighted_softmax_cross_entropy(const Tensor<T>&, std::span<const int>,   \
                                                        std::span<const double>);                 \
  template LossResult<T> softmax_cross_entropy(const Tensor<T>&, std::span<const int>);            \
  template Tensor<T> glorot_init(const Shape&, std::mt19937_64&);

PDINTERP_INSTANTIATE_LAYERS(float)
PDINTERP_INSTANTIATE_LAYERS(double)

}  // namespace pdinterp

#include "pdinterp/network.h"

#include <cmath>
#include <random>

namespace pdinterp {

Extent3 grid_extent(Grid grid) {
  return grid == Grid::kFull ? Extent3{91, 109, 91} : Extent3{46, 55, 46};
}

double grid_voxel_mm(Grid grid) { return grid == Grid::kFull ? 2.0 : 4.0; }

Grid parse_grid(std::string_view name) {
  if (name == "full") return Grid::kFull;
  if (name == "half") return Grid::kHalf;
  throw ConfigError("unknown grid '" + std::string(name) + "' (expected full or half)");
}

std::string_view grid_name(Grid grid) { return grid == Grid::kFull ? "full" : "half"; }

std::string_view layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv: return "conv3d";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kMaxPool: return "maxpool3d";
    case LayerKind::kBatchNorm: return "batchnorm";
    case LayerKind::kDense: return "dense";
  }
  return "unknown";
}

int trainable_count(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv:
    case LayerKind::kDense:
    case LayerKind::kBatchNorm:
      return 2;
    default:
      return 0;
  }
}

const std::vector<std::string>& architecture_tags() {
  static const std::vector<std::string> tags{"pdnet", "pdnet_bn", "deep_pdnet", "deep_pdnet_bn"};
  return tags;
}

std::vector<FeatureShape> NetworkSpec::output_shapes() const {
  std::vector<FeatureShape> shapes;
  FeatureShape cur{1, input};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const std::string where = "layer " + std::to_string(i) + " (" +
                              std::string(layer_kind_name(l.kind)) + ") of " + name + ": ";
    try {
      switch (l.kind) {
        case LayerKind::kConv:
          if (l.conv.in_channels != cur.channels) {
            throw ShapeError("expects " + std::to_string(l.conv.in_channels) +
                             " input channels, receives " + std::to_string(cur.channels));
          }
          cur.extent = window_output_extent(cur.extent, l.conv.kernel, l.conv.stride);
          cur.channels = l.conv.out_channels;
          break;
        case LayerKind::kMaxPool:
          cur.extent = window_output_extent(cur.extent, l.pool.window, l.pool.stride);
          break;
        case LayerKind::kBatchNorm:
          if (l.channels != cur.channels) {
            throw ShapeError("normalizes " + std::to_string(l.channels) + " channels, receives " +
                             std::to_string(cur.channels));
          }
          break;
        case LayerKind::kRelu:
          break;
        case LayerKind::kDense:
          if (l.in_features != cur.channels * cur.extent.voxels()) {
            throw ShapeError("expects " + std::to_string(l.in_features) + " features, receives " +
                             std::to_string(cur.channels * cur.extent.voxels()));
          }
          cur = FeatureShape{l.out_features, {1, 1, 1}};
          break;
      }
    } catch (const ShapeError& e) {
      throw ShapeError(where + e.what());
    }
    shapes.push_back(cur);
  }
  return shapes;
}

Index NetworkSpec::dense_input_features() const {
  for (const LayerSpec& l : layers) {
    if (l.kind == LayerKind::kDense) return l.in_features;
  }
  return 0;
}

void validate_network(const NetworkSpec& spec) {
  if (spec.layers.empty() || spec.layers.back().kind != LayerKind::kDense) {
    throw ShapeError(spec.name + ": network must end in a dense layer");
  }
  const auto shapes = spec.output_shapes();
  if (shapes.back().channels != kNumClasses) {
    throw ShapeError(spec.name + ": network must produce exactly 2 logits");
  }
  if (spec.dense_input_features() != kDenseFeatures) {
    throw ShapeError(spec.name + ": dense layer must receive 256 features, receives " +
                     std::to_string(spec.dense_input_features()));
  }
}

namespace {

struct Builder {
  NetworkSpec spec;
  bool batchnorm = false;
  FeatureShape cur;

  void conv(Index out_channels, Extent3 kernel, Extent3 stride) {
    LayerSpec l;
    l.kind = LayerKind::kConv;
    l.conv = ConvSpec{cur.channels, out_channels, kernel, stride};
    cur.extent = window_output_extent(cur.extent, kernel, stride);
    cur.channels = out_channels;
    spec.layers.push_back(l);
    LayerSpec relu;
    relu.kind = LayerKind::kRelu;
    spec.layers.push_back(relu);
    if (batchnorm) {
      LayerSpec bn;
      bn.kind = LayerKind::kBatchNorm;
      bn.channels = out_channels;
      spec.layers.push_back(bn);
    }
  }

  void pool() {
    LayerSpec l;
    l.kind = LayerKind::kMaxPool;
    cur.extent = window_output_extent(cur.extent, l.pool.window, l.pool.stride);
    spec.layers.push_back(l);
  }

  bool pool_fits() const { return window_fits(cur.extent, PoolSpec{}.window); }

  // Final convolution spans the remaining extent, leaving a 1x1x1 map.
  void collapse(Index out_channels) { conv(out_channels, cur.extent, {1, 1, 1}); }

  void dense() {
    LayerSpec l;
    l.kind = LayerKind::kDense;
    l.in_features = cur.channels * cur.extent.voxels();
    l.out_features = kNumClasses;
    spec.layers.push_back(l);
  }
};

}  // namespace

NetworkSpec build_network(std::string_view tag, Grid grid) {
  const bool known = tag == "pdnet" || tag == "pdnet_bn" || tag == "deep_pdnet" ||
                     tag == "deep_pdnet_bn";
  if (!known) {
    throw ConfigError("unknown architecture '" + std::string(tag) +
                      "' (expected pdnet, pdnet_bn, deep_pdnet or deep_pdnet_bn)");
  }
  Builder b;
  b.spec.name = std::string(tag);
  b.spec.grid = grid;
  b.spec.input = grid_extent(grid);
  b.batchnorm = tag.ends_with("_bn");
  b.cur = FeatureShape{1, b.spec.input};

  if (tag.starts_with("pdnet")) {
    // The 4 mm grid halves the first stride so the same kernels still fit.
    const Index s1 = grid == Grid::kFull ? 4 : 2;
    b.conv(16, {7, 7, 7}, {s1, s1, s1});
    b.pool();
    b.conv(64, {5, 5, 5}, {1, 1, 1});
    b.pool();
    b.collapse(kDenseFeatures);
  } else {
    struct Block {
      Index channels, kernel, stride;
    };
    const Block blocks[] = {{16, 5, 2}, {32, 3, 1}, {64, 3, 1}, {128, 3, 1}};
    for (const Block& blk : blocks) {
      const Extent3 k{blk.kernel, blk.kernel, blk.kernel};
      if (!window_fits(b.cur.extent, k)) continue;
      b.conv(blk.channels, k, {blk.stride, blk.stride, blk.stride});
      if (b.pool_fits()) b.pool();
    }
    b.collapse(kDenseFeatures);
  }
  b.dense();
  validate_network(b.spec);
  return b.spec;
}

std::vector<int> conv_activation_layers(const NetworkSpec& spec) {
  std::vector<int> out;
  for (std::size_t i = 0; i + 1 < spec.layers.size(); ++i) {
    if (spec.layers[i].kind == LayerKind::kConv && spec.layers[i + 1].kind == LayerKind::kRelu) {
      out.push_back(static_cast<int>(i + 1));
    }
  }
  return out;
}

template <typename T>
NetworkParams<T> init_params(const NetworkSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  NetworkParams<T> p;
  for (const LayerSpec& l : spec.layers) {
    LayerParams<T> lp;
    switch (l.kind) {
      case LayerKind::kConv: {
        const ConvSpec& c = l.conv;
        lp.tensors.push_back(glorot_init<T>(
            {c.out_channels, c.in_channels, c.kernel.z, c.kernel.y, c.kernel.x}, rng));
        lp.tensors.emplace_back(Shape{c.out_channels});
        break;
      }
      case LayerKind::kDense:
        lp.tensors.push_back(glorot_init<T>({l.out_features, l.in_features}, rng));
        lp.tensors.emplace_back(Shape{l.out_features});
        break;
      case LayerKind::kBatchNorm:
        lp.tensors.emplace_back(Shape{l.channels}, T(1));
        lp.tensors.emplace_back(Shape{l.channels}, T(0));
        lp.tensors.emplace_back(Shape{l.channels}, T(0));
        lp.tensors.emplace_back(Shape{l.channels}, T(1));
        break;
      default:
        break;
    }
    p.layers.push_back(std::move(lp));
  }
  return p;
}

template <typename T>
void check_params(const NetworkSpec& spec, const NetworkParams<T>& params) {
  if (params.layers.size() != spec.layers.size()) {
    throw ShapeError("parameter set has " + std::to_string(params.layers.size()) +
                     " layers, network " + spec.name + " has " +
                     std::to_string(spec.layers.size()));
  }
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    std::vector<Shape> expected;
    switch (l.kind) {
      case LayerKind::kConv:
        expected = {{l.conv.out_channels, l.conv.in_channels, l.conv.kernel.z, l.conv.kernel.y,
                     l.conv.kernel.x},
                    {l.conv.out_channels}};
        break;
      case LayerKind::kDense:
        expected = {{l.out_features, l.in_features}, {l.out_features}};
        break;
      case LayerKind::kBatchNorm:
        expected = {{l.channels}, {l.channels}, {l.channels}, {l.channels}};
        break;
      default:
        break;
    }
    const auto& tensors = params.layers[i].tensors;
    if (tensors.size() != expected.size()) {
      throw ShapeError("layer " + std::to_string(i) + " expects " +
                       std::to_string(expected.size()) + " parameter tensors, got " +
                       std::to_string(tensors.size()));
    }
    for (std::size_t t = 0; t < expected.size(); ++t) {
      if (tensors[t].shape() != expected[t]) {
        throw ShapeError("layer " + std::to_string(i) + " parameter " + std::to_string(t) +
                         " has shape " + shape_string(tensors[t].shape()) + ", expected " +
                         shape_string(expected[t]));
      }
    }
  }
}

template <typename T>
ForwardTrace<T> forward(const NetworkSpec& spec, const NetworkParams<T>& params,
                        const Tensor<T>& input, Mode mode) {
  const Shape& s = input.shape();
  if (s.size() != 5 || s[1] != 1 || s[2] != spec.input.z || s[3] != spec.input.y ||
      s[4] != spec.input.x) {
    throw ShapeError("network " + spec.name + " expects input (N x 1 x " +
                     extent_string(spec.input) + "), got " + shape_string(s));
  }
  if (params.layers.size() != spec.layers.size()) {
    throw ShapeError("parameter set does not match network " + spec.name);
  }
  ForwardTrace<T> trace;
  trace.mode = mode;
  trace.input = input;
  const std::size_t n_layers = spec.layers.size();
  trace.activations.reserve(n_layers);
  trace.argmax.resize(n_layers);
  trace.batchnorm.resize(n_layers);
  for (std::size_t i = 0; i < n_layers; ++i) {
    const LayerSpec& l = spec.layers[i];
    const auto& p = params.layers[i].tensors;
    const Tensor<T>& x = trace.layer_input(i);
    switch (l.kind) {
      case LayerKind::kConv:
        trace.activations.push_back(conv3d_forward(x, p[0], p[1], l.conv));
        break;
      case LayerKind::kRelu:
        trace.activations.push_back(relu_forward(x));
        break;
      case LayerKind::kMaxPool: {
        PoolResult<T> r = maxpool3d_forward(x, l.pool);
        trace.argmax[i] = std::move(r.argmax);
        trace.activations.push_back(std::move(r.output));
        break;
      }
      case LayerKind::kBatchNorm:
        if (mode == Mode::kTrain) {
          BatchNormTrainResult<T> r = batchnorm_forward_train(x, p[0], p[1]);
          trace.batchnorm[i] = std::move(r.cache);
          trace.activations.push_back(std::move(r.output));
        } else {
          if (!params.layers[i].has_running_stats) {
            throw ConfigError("batchnorm layer " + std::to_string(i) +
                              " has no frozen statistics; train the network before inference");
          }
          trace.activations.push_back(batchnorm_forward_infer(x, p[0], p[1], p[2], p[3]));
        }
        break;
      case LayerKind::kDense:
        trace.activations.push_back(dense_forward(x, p[0], p[1]));
        break;
    }
  }
  trace.probabilities = softmax(trace.logits());
  return trace;
}

template <typename T>
void update_batchnorm_moments(const NetworkSpec& spec, NetworkParams<T>& params,
                              const ForwardTrace<T>& trace) {
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (spec.layers[i].kind != LayerKind::kBatchNorm || !trace.batchnorm[i]) continue;
    auto& lp = params.layers[i];
    if (!lp.has_running_stats) {
      // First batch seeds the moments directly.
      for (Index c = 0; c < lp.tensors[2].size(); ++c) {
        lp.tensors[2][c] = trace.batchnorm[i]->mean[static_cast<std::size_t>(c)];
        lp.tensors[3][c] = trace.batchnorm[i]->variance[static_cast<std::size_t>(c)];
      }
      lp.has_running_stats = true;
    } else {
      update_running_moments(lp.tensors[2], lp.tensors[3], *trace.batchnorm[i]);
    }
  }
}

namespace {

constexpr double kRescaleThreshold = 1e-7;

template <typename T>
Tensor<T> relu_rescale(const Tensor<T>& x, const Tensor<T>& y, const Tensor<T>& x_ref,
                       const Tensor<T>& y_ref, const Tensor<T>& upstream) {
  Tensor<T> g(upstream.shape());
  for (Index i = 0; i < g.size(); ++i) {
    const double dx = static_cast<double>(x[i]) - x_ref[i];
    double m;
    if (std::abs(dx) < kRescaleThreshold) {
      m = x[i] > T(0) ? 1.0 : 0.0;
    } else {
      m = (static_cast<double>(y[i]) - y_ref[i]) / dx;
    }
    g[i] = static_cast<T>(m * upstream[i]);
  }
  return g;
}

// For a window whose maxima sit at a (input) and b (reference), the output
// difference lies between dx[b] and dx[a], so it is split as a convex
// combination of the two; contributions sum to the output difference exactly.
template <typename T>
Tensor<T> maxpool_rescale(const Tensor<T>& x, const Tensor<T>& x_ref, const Tensor<T>& y,
                          const Tensor<T>& y_ref, const std::vector<Index>& arg,
                          const std::vector<Index>& arg_ref, const Tensor<T>& upstream) {
  Tensor<T> g(x.shape());
  for (std::size_t o = 0; o < arg.size(); ++o) {
    const Index a = arg[o];
    const Index b = arg_ref[o];
    const T up = upstream[static_cast<Index>(o)];
    if (a == b) {
      g[a] += up;
      continue;
    }
    const double da = static_cast<double>(x[a]) - x_ref[a];
    const double db = static_cast<double>(x[b]) - x_ref[b];
    const double dy = static_cast<double>(y[static_cast<Index>(o)]) - y_ref[static_cast<Index>(o)];
    double lambda = 0.5;
    if (std::abs(da - db) > 0) lambda = std::clamp((dy - db) / (da - db), 0.0, 1.0);
    g[a] += static_cast<T>(lambda * up);
    g[b] += static_cast<T>((1.0 - lambda) * up);
  }
  return g;
}

}  // namespace

template <typename T>
NetworkGradients<T> backward(const NetworkSpec& spec, const NetworkParams<T>& params,
                             const ForwardTrace<T>& trace, const Tensor<T>& dlogits,
                             const BackwardOptions<T>& options) {
  if (dlogits.shape() != trace.logits().shape()) {
    throw ShapeError("logit gradient " + shape_string(dlogits.shape()) +
                     " does not match logits " + shape_string(trace.logits().shape()));
  }
  const ForwardTrace<T>* ref = options.reference;
  if (options.rule == BackwardRule::kRescale) {
    if (ref == nullptr) throw ConfigError("rescale rule requires a reference trace");
    if (ref->input.shape() != trace.input.shape()) {
      throw ShapeError("reference input " + shape_string(ref->input.shape()) +
                       " does not match input " + shape_string(trace.input.shape()));
    }
  }
  const std::size_t n_layers = spec.layers.size();
  NetworkGradients<T> out;
  if (options.param_grads) out.params.resize(n_layers);
  Tensor<T> grad = dlogits;
  for (std::size_t li = n_layers; li-- > 0;) {
    if (static_cast<int>(li) == options.capture_layer) out.captured = grad;
    const LayerSpec& l = spec.layers[li];
    const auto& p = params.layers[li].tensors;
    const Tensor<T>& x = trace.layer_input(li);
    const bool need_input = li > 0 || options.input_grad;
    switch (l.kind) {
      case LayerKind::kConv: {
        LayerGradients<T> g = conv3d_backward(x, p[0], grad, l.conv, need_input);
        if (options.param_grads) out.params[li] = std::move(g.params);
        grad = std::move(g.input);
        break;
      }
      case LayerKind::kDense: {
        LayerGradients<T> g = dense_backward(x, p[0], grad, need_input);
        if (options.param_grads) out.params[li] = std::move(g.params);
        grad = need_input ? g.input.reshaped(x.shape()) : Tensor<T>();
        break;
      }
      case LayerKind::kRelu:
        if (options.rule == BackwardRule::kRescale) {
          grad = relu_rescale(x, trace.activations[li], ref->layer_input(li),
                              ref->activations[li], grad);
        } else {
          Tensor<T> g = relu_backward(x, grad);
          if (options.rule == BackwardRule::kGuided) {
            for (Index i = 0; i < g.size(); ++i) {
              if (grad[i] < T(0)) g[i] = T(0);
            }
          }
          grad = std::move(g);
        }
        break;
      case LayerKind::kMaxPool:
        if (options.rule == BackwardRule::kRescale) {
          grad = maxpool_rescale(x, ref->layer_input(li), trace.activations[li],
                                 ref->activations[li], trace.argmax[li], ref->argmax[li], grad);
        } else {
          grad = maxpool3d_backward<T>(trace.argmax[li], x.shape(), grad);
        }
        break;
      case LayerKind::kBatchNorm: {
        LayerGradients<T> g = trace.batchnorm[li]
                                  ? batchnorm_backward_train(*trace.batchnorm[li], p[0], grad)
                                  : batchnorm_backward_infer(x, p[0], p[2], p[3], grad);
        if (options.param_grads) out.params[li] = std::move(g.params);
        grad = std::move(g.input);
        break;
      }
    }
  }
  if (options.input_grad) out.input = std::move(grad);
  return out;
}

#define PDINTERP_INSTANTIATE_NETWORK(T)                                                         \
  template NetworkParams<T> init_params<T>(const NetworkSpec&, std::uint64_t);                   \
  template void check_params(const NetworkSpec&, const NetworkParams<T>&);                       \
  template ForwardTrace<T> forward(const NetworkSpec&, const NetworkParams<T>&, const Tensor<T>&, \
                                   Mode);                                                        \
  template void update_batchnorm_moments(const NetworkSpec&, NetworkParams<T>&,                  \
                                         const ForwardTrace<T>&);                                \
  template NetworkGradients<T> backward(const NetworkSpec&, const NetworkParams<T>&,             \
                                        const ForwardTrace<T>&, const Tensor<T>&,                \
                                        const BackwardOptions<T>&);

PDINTERP_INSTANTIATE_NETWORK(float)
PDINTERP_INSTANTIATE_NETWORK(double)

}  // namespace pdinterp

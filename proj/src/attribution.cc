#include "pdinterp/attribution.h"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "pdinterp/error.h"

namespace pdinterp {

namespace {

constexpr const char* kMethodNames[] = {"saliency", "guided_backprop", "grad_cam",
                                        "guided_grad_cam", "deeplift", "kernel_shap"};

void check_input(const NetworkSpec& spec, const Tensor<double>& input, int target_class) {
  const Shape want{1, 1, spec.input.z, spec.input.y, spec.input.x};
  if (input.shape() != want) {
    throw ShapeError("attribution input " + shape_string(input.shape()) + " does not match " +
                     shape_string(want));
  }
  if (target_class != kClassNC && target_class != kClassPD) {
    throw ConfigError("target class must be 0 (NC) or 1 (PD)");
  }
  for (Index i = 0; i < input.size(); ++i) {
    if (!std::isfinite(input[i])) throw NumericalError("attribution input contains non-finite voxels");
  }
}

Tensor<double> one_hot(int target_class) {
  Tensor<double> d({1, kNumClasses});
  d[target_class] = 1.0;
  return d;
}

AttentionMap make_map(Method method, int target_class, Extent3 extent, std::vector<double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericalError(std::string(method_name(method)) + " produced a non-finite attribution");
    }
  }
  AttentionMap m;
  m.method = method;
  m.target_class = target_class;
  m.extent = extent;
  m.values = std::move(values);
  return m;
}

AttentionMap backprop_map(Method method, BackwardRule rule, const NetworkSpec& spec,
                          const NetworkParams<double>& params, const Tensor<double>& input,
                          int target_class) {
  check_input(spec, input, target_class);
  const auto trace = forward(spec, params, input, Mode::kInfer);
  BackwardOptions<double> opt;
  opt.rule = rule;
  opt.param_grads = false;
  auto g = backward(spec, params, trace, one_hot(target_class), opt);
  return make_map(method, target_class, spec.input, g.input.to_vector());
}

Extent3 layer_extent(const NetworkSpec& spec, int layer) {
  return spec.output_shapes()[static_cast<std::size_t>(layer)].extent;
}

bool spatial(const Extent3& e) { return e.z > 1 && e.y > 1 && e.x > 1; }

}  // namespace

std::string_view method_name(Method m) { return kMethodNames[static_cast<int>(m)]; }

Method parse_method(std::string_view name) {
  for (Method m : all_methods()) {
    if (method_name(m) == name) return m;
  }
  throw ConfigError("unknown attribution method '" + std::string(name) +
                    "' (expected saliency, guided_backprop, grad_cam, guided_grad_cam, deeplift or "
                    "kernel_shap)");
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> kAll{Method::kSaliency, Method::kGuidedBackprop,
                                        Method::kGradCam,  Method::kGuidedGradCam,
                                        Method::kDeepLift, Method::kKernelShap};
  return kAll;
}

AttentionMap saliency(const NetworkSpec& spec, const NetworkParams<double>& params,
                      const Tensor<double>& input, int target_class) {
  return backprop_map(Method::kSaliency, BackwardRule::kGradient, spec, params, input, target_class);
}

AttentionMap guided_backprop(const NetworkSpec& spec, const NetworkParams<double>& params,
                             const Tensor<double>& input, int target_class) {
  return backprop_map(Method::kGuidedBackprop, BackwardRule::kGuided, spec, params, input,
                      target_class);
}

int default_grad_cam_layer(const NetworkSpec& spec) {
  const auto shapes = spec.output_shapes();
  int best = -1;
  for (int li : conv_activation_layers(spec)) {
    if (spatial(shapes[static_cast<std::size_t>(li)].extent)) best = li;
  }
  if (best < 0) throw ConfigError("network '" + spec.name + "' has no spatial conv activation");
  return best;
}

std::vector<double> upsample(const std::vector<double>& field, Extent3 from, Extent3 to,
                             Upsampling mode) {
  if (static_cast<Index>(field.size()) != from.voxels()) {
    throw ShapeError("field size does not match extent " + extent_string(from));
  }
  // Source coordinate of each target index along one axis.
  auto coords = [](Index n_from, Index n_to) {
    std::vector<double> c(static_cast<std::size_t>(n_to), 0.0);
    if (n_from > 1 && n_to > 1) {
      const double scale = static_cast<double>(n_from - 1) / static_cast<double>(n_to - 1);
      for (Index i = 0; i < n_to; ++i) c[static_cast<std::size_t>(i)] = static_cast<double>(i) * scale;
    }
    return c;
  };
  const auto cz = coords(from.z, to.z), cy = coords(from.y, to.y), cx = coords(from.x, to.x);
  auto src = [&](Index z, Index y, Index x) {
    return field[static_cast<std::size_t>((z * from.y + y) * from.x + x)];
  };
  std::vector<double> out(static_cast<std::size_t>(to.voxels()));
  std::size_t idx = 0;
  for (Index k = 0; k < to.z; ++k)
    for (Index j = 0; j < to.y; ++j)
      for (Index i = 0; i < to.x; ++i, ++idx) {
        const double fz = cz[static_cast<std::size_t>(k)];
        const double fy = cy[static_cast<std::size_t>(j)];
        const double fx = cx[static_cast<std::size_t>(i)];
        if (mode == Upsampling::kNearest) {
          out[idx] = src(std::lround(fz), std::lround(fy), std::lround(fx));
          continue;
        }
        const Index z0 = std::min<Index>(static_cast<Index>(fz), from.z - 1);
        const Index y0 = std::min<Index>(static_cast<Index>(fy), from.y - 1);
        const Index x0 = std::min<Index>(static_cast<Index>(fx), from.x - 1);
        const Index z1 = std::min<Index>(z0 + 1, from.z - 1);
        const Index y1 = std::min<Index>(y0 + 1, from.y - 1);
        const Index x1 = std::min<Index>(x0 + 1, from.x - 1);
        const double tz = fz - z0, ty = fy - y0, tx = fx - x0;
        const double c00 = src(z0, y0, x0) * (1 - tx) + src(z0, y0, x1) * tx;
        const double c01 = src(z0, y1, x0) * (1 - tx) + src(z0, y1, x1) * tx;
        const double c10 = src(z1, y0, x0) * (1 - tx) + src(z1, y0, x1) * tx;
        const double c11 = src(z1, y1, x0) * (1 - tx) + src(z1, y1, x1) * tx;
        out[idx] = (c00 * (1 - ty) + c01 * ty) * (1 - tz) + (c10 * (1 - ty) + c11 * ty) * tz;
      }
  return out;
}

GradCamResult grad_cam(const NetworkSpec& spec, const NetworkParams<double>& params,
                       const Tensor<double>& input, int target_class, const GradCamOptions& options) {
  check_input(spec, input, target_class);
  GradCamResult r;
  int layer = options.layer < 0 ? default_grad_cam_layer(spec) : options.layer;
  const auto acts = conv_activation_layers(spec);
  if (std::find(acts.begin(), acts.end(), layer) == acts.end()) {
    throw ConfigError("Grad-CAM layer " + std::to_string(layer) + " is not a conv activation");
  }
  if (!spatial(layer_extent(spec, layer))) {
    int fallback = -1;
    for (int li : acts) {
      if (li < layer && spatial(layer_extent(spec, li))) fallback = li;
    }
    if (fallback < 0) throw ConfigError("no conv activation above layer " + std::to_string(layer) +
                                        " has spatial extent > 1");
    r.warnings.push_back("layer " + std::to_string(layer) + " has extent " +
                         extent_string(layer_extent(spec, layer)) + "; using layer " +
                         std::to_string(fallback) + " (" +
                         extent_string(layer_extent(spec, fallback)) + ")");
    layer = fallback;
  }
  r.layer = layer;
  r.layer_extent = layer_extent(spec, layer);

  const auto trace = forward(spec, params, input, Mode::kInfer);
  BackwardOptions<double> opt;
  opt.param_grads = false;
  opt.input_grad = false;
  opt.capture_layer = layer;
  const auto g = backward(spec, params, trace, one_hot(target_class), opt);
  const Tensor<double>& a = trace.activations[static_cast<std::size_t>(layer)];
  const Index channels = a.dim(1);
  const Index vox = r.layer_extent.voxels();
  r.alpha.assign(static_cast<std::size_t>(channels), 0.0);
  r.coarse.assign(static_cast<std::size_t>(vox), 0.0);
  for (Index k = 0; k < channels; ++k) {
    double alpha = 0;
    for (Index v = 0; v < vox; ++v) alpha += g.captured[k * vox + v];
    r.alpha[static_cast<std::size_t>(k)] = alpha;
    for (Index v = 0; v < vox; ++v) r.coarse[static_cast<std::size_t>(v)] += alpha * a[k * vox + v];
  }
  for (double& v : r.coarse) v = std::max(v, 0.0);
  r.map = make_map(Method::kGradCam, target_class, spec.input,
                   upsample(r.coarse, r.layer_extent, spec.input, options.upsampling));
  return r;
}

AttentionMap guided_grad_cam(const NetworkSpec& spec, const NetworkParams<double>& params,
                             const Tensor<double>& input, int target_class,
                             const GradCamOptions& options) {
  const AttentionMap cam = grad_cam(spec, params, input, target_class, options).map;
  AttentionMap guided = guided_backprop(spec, params, input, target_class);
  for (std::size_t i = 0; i < guided.values.size(); ++i) guided.values[i] *= cam.values[i];
  guided.method = Method::kGuidedGradCam;
  return guided;
}

AttentionMap deeplift_rescale(const NetworkSpec& spec, const NetworkParams<double>& params,
                              const Tensor<double>& input, const Tensor<double>& reference,
                              int target_class) {
  check_input(spec, input, target_class);
  if (reference.shape() != input.shape()) {
    throw ShapeError("DeepLIFT reference " + shape_string(reference.shape()) +
                     " does not match input " + shape_string(input.shape()));
  }
  const auto trace = forward(spec, params, input, Mode::kInfer);
  const auto ref = forward(spec, params, reference, Mode::kInfer);
  BackwardOptions<double> opt;
  opt.rule = BackwardRule::kRescale;
  opt.reference = &ref;
  opt.param_grads = false;
  const auto g = backward(spec, params, trace, one_hot(target_class), opt);
  std::vector<double> c(static_cast<std::size_t>(input.size()));
  for (Index i = 0; i < input.size(); ++i) {
    c[static_cast<std::size_t>(i)] = g.input[i] * (input[i] - reference[i]);
  }
  return make_map(Method::kDeepLift, target_class, spec.input, std::move(c));
}

Tensor<double> zero_reference(Extent3 extent) {
  return Tensor<double>({1, 1, extent.z, extent.y, extent.x});
}

Tensor<double> mean_reference(const std::vector<const Volume*>& volumes) {
  if (volumes.empty()) throw ConfigError("mean reference needs at least one volume");
  const Extent3 e = volumes.front()->extent;
  Tensor<double> t = zero_reference(e);
  for (const Volume* v : volumes) {
    if (!(v->extent == e)) throw ShapeError("reference volumes have differing extents");
    for (Index i = 0; i < t.size(); ++i) t[i] += v->data[static_cast<std::size_t>(i)];
  }
  for (double& v : t.data()) v /= static_cast<double>(volumes.size());
  return t;
}

SupervoxelPartition block_partition(Extent3 extent, const std::vector<std::uint8_t>& mask,
                                    Index block) {
  if (block < 1) throw ConfigError("super-voxel block size must be positive");
  if (static_cast<Index>(mask.size()) != extent.voxels()) {
    throw ShapeError("mask size does not match extent " + extent_string(extent));
  }
  const Index bz = (extent.z + block - 1) / block;
  const Index by = (extent.y + block - 1) / block;
  const Index bx = (extent.x + block - 1) / block;
  std::vector<int> block_group(static_cast<std::size_t>(bz * by * bx), -1);
  SupervoxelPartition p;
  p.extent = extent;
  p.group.assign(mask.size(), -1);
  // Number blocks in raster order of their first masked voxel's block index.
  std::vector<std::uint8_t> used(block_group.size(), 0);
  std::size_t idx = 0;
  for (Index k = 0; k < extent.z; ++k)
    for (Index j = 0; j < extent.y; ++j)
      for (Index i = 0; i < extent.x; ++i, ++idx) {
        if (mask[idx]) used[static_cast<std::size_t>(((k / block) * by + j / block) * bx + i / block)] = 1;
      }
  int next = 0;
  for (std::size_t b = 0; b < used.size(); ++b) {
    if (used[b]) block_group[b] = next++;
  }
  p.sizes.assign(static_cast<std::size_t>(next), 0);
  idx = 0;
  for (Index k = 0; k < extent.z; ++k)
    for (Index j = 0; j < extent.y; ++j)
      for (Index i = 0; i < extent.x; ++i, ++idx) {
        if (!mask[idx]) continue;
        const int g = block_group[static_cast<std::size_t>(((k / block) * by + j / block) * bx + i / block)];
        p.group[idx] = g;
        ++p.sizes[static_cast<std::size_t>(g)];
      }
  if (p.groups() < 2) throw ConfigError("super-voxel partition needs at least 2 groups");
  return p;
}

ShapResult kernel_shap_values(int players, const CoalitionValue& value, const ShapOptions& options) {
  const int m = players;
  if (m < 2) throw ConfigError("kernel SHAP needs at least 2 players");
  using Coalition = std::vector<std::uint8_t>;
  std::vector<Coalition> rows;
  std::vector<double> weights;
  // Kernel weight of one coalition of size s: (M-1) / (C(M,s) s (M-s)).
  const auto log_binom = [&](int size) {
    return std::lgamma(m + 1.0) - std::lgamma(size + 1.0) - std::lgamma(m - size + 1.0);
  };
  const auto kernel = [&](int size) {
    return (m - 1.0) / (std::exp(log_binom(size)) * size * (m - size));
  };
  bool exact = m <= options.max_exact_players && m < 31;
  if (exact) {
    const std::uint32_t total = 1u << m;
    for (std::uint32_t s = 1; s + 1 < total; ++s) {
      Coalition z(static_cast<std::size_t>(m));
      int size = 0;
      for (int i = 0; i < m; ++i) {
        z[static_cast<std::size_t>(i)] = (s >> i) & 1u;
        size += z[static_cast<std::size_t>(i)];
      }
      weights.push_back(kernel(size));
      rows.push_back(std::move(z));
    }
  } else {
    if (options.samples < 2) throw ConfigError("kernel SHAP needs at least 2 sampled coalitions");
    // Sizes s and M-s are enumerated together, smallest first, while they
    // fit the budget; a budget of 2M therefore always covers every singleton
    // and its complement.
    int first_sampled = 1;
    for (; 2 * first_sampled <= m; ++first_sampled) {
      const int s = first_sampled;
      const double count = (2 * s == m ? 1.0 : 2.0) * std::round(std::exp(log_binom(s)));
      if (log_binom(s) > 40 || count > static_cast<double>(options.samples) - static_cast<double>(rows.size())) break;
      std::vector<int> pick(static_cast<std::size_t>(s));
      for (int i = 0; i < s; ++i) pick[static_cast<std::size_t>(i)] = i;
      for (;;) {
        Coalition z(static_cast<std::size_t>(m), 0);
        for (int i : pick) z[static_cast<std::size_t>(i)] = 1;
        if (2 * s != m) {
          Coalition comp(z);
          for (auto& b : comp) b = b ? 0 : 1;
          rows.push_back(std::move(comp));
          weights.push_back(kernel(m - s));
        }
        rows.push_back(std::move(z));
        weights.push_back(kernel(s));
        int i = s - 1;
        while (i >= 0 && pick[static_cast<std::size_t>(i)] == m - s + i) --i;
        if (i < 0) break;
        ++pick[static_cast<std::size_t>(i)];
        for (int j = i + 1; j < s; ++j) pick[static_cast<std::size_t>(j)] = pick[static_cast<std::size_t>(j - 1)] + 1;
      }
    }
    if (2 * first_sampled > m) {
      exact = true;
    } else {
      // Remaining sizes are drawn with probability proportional to their
      // kernel mass (M-1) / (s (M-s)); each draw is paired with its
      // complement. Rows are distinct and carry the share of the remaining
      // mass given by their draw count.
      std::vector<double> size_weight;
      double mass = 0;
      for (int s = first_sampled; s <= m - first_sampled; ++s) {
        size_weight.push_back((m - 1.0) / (static_cast<double>(s) * (m - s)));
        mass += size_weight.back();
      }
      std::mt19937_64 rng(options.seed);
      std::discrete_distribution<int> pick_size(size_weight.begin(), size_weight.end());
      std::vector<int> order(static_cast<std::size_t>(m));
      for (int i = 0; i < m; ++i) order[static_cast<std::size_t>(i)] = i;
      const std::size_t enumerated = rows.size();
      std::map<Coalition, std::size_t> seen;
      double draws = 0;
      while (static_cast<int>(rows.size()) < options.samples) {
        const int s = pick_size(rng) + first_sampled;
        for (int i = 0; i < s; ++i) {
          std::uniform_int_distribution<int> u(i, m - 1);
          std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(u(rng))]);
        }
        Coalition z(static_cast<std::size_t>(m), 0);
        for (int i = 0; i < s; ++i) z[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1;
        Coalition comp(z);
        for (auto& b : comp) b = b ? 0 : 1;
        for (Coalition* c : {&z, &comp}) {
          const auto [it, fresh] = seen.try_emplace(*c, rows.size());
          if (!fresh) {
            weights[it->second] += 1.0;
            draws += 1.0;
          } else if (static_cast<int>(rows.size()) < options.samples) {
            rows.push_back(std::move(*c));
            weights.push_back(1.0);
            draws += 1.0;
          } else {
            seen.erase(it);
          }
        }
      }
      for (std::size_t i = enumerated; i < weights.size(); ++i) weights[i] *= mass / draws;
    }
  }

  std::vector<Coalition> batch = rows;
  batch.emplace_back(static_cast<std::size_t>(m), 0);
  batch.emplace_back(static_cast<std::size_t>(m), 1);
  const std::vector<double> v = value(batch);
  if (v.size() != batch.size()) throw ConfigError("coalition value function returned the wrong count");
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericalError("coalition value is not finite");
  }
  ShapResult r;
  r.exact = exact;
  r.coalitions = static_cast<int>(rows.size());
  r.phi0 = v[rows.size()];
  r.full_value = v[rows.size() + 1];
  const double delta = r.full_value - r.phi0;

  // y - z_M delta = sum_{i<M} phi_i (z_i - z_M), solved as sqrt(w)-scaled
  // least squares; the normal equations would square the conditioning.
  const int k = m - 1;
  Eigen::MatrixXd a(static_cast<Index>(rows.size()), k);
  Eigen::VectorXd y(static_cast<Index>(rows.size()));
  for (std::size_t row = 0; row < rows.size(); ++row) {
    const Coalition& z = rows[row];
    const double zm = z[static_cast<std::size_t>(k)];
    const double sw = std::sqrt(weights[row]);
    const auto r_i = static_cast<Index>(row);
    for (int i = 0; i < k; ++i) a(r_i, i) = sw * (z[static_cast<std::size_t>(i)] - zm);
    y[r_i] = sw * (v[row] - r.phi0 - zm * delta);
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
  qr.setThreshold(1e-10);
  if (qr.rank() < k) {
    throw NumericalError("kernel SHAP regression is singular with " + std::to_string(rows.size()) +
                         " coalitions for " + std::to_string(m) +
                         " players; increase the sample count (complement pairs need at least 2x the players)");
  }
  const Eigen::VectorXd sol = qr.solve(y);
  r.phi.assign(static_cast<std::size_t>(m), 0.0);
  double sum = 0;
  for (int i = 0; i < k; ++i) {
    r.phi[static_cast<std::size_t>(i)] = sol[i];
    sum += sol[i];
  }
  r.phi[static_cast<std::size_t>(k)] = delta - sum;
  return r;
}

AttentionMap kernel_shap(const NetworkSpec& spec, const NetworkParams<double>& params,
                         const Tensor<double>& input, const SupervoxelPartition& partition,
                         const Tensor<double>& reference, int target_class,
                         const ShapOptions& options, ShapResult* detail) {
  check_input(spec, input, target_class);
  if (reference.shape() != input.shape()) {
    throw ShapeError("SHAP reference " + shape_string(reference.shape()) + " does not match input " +
                     shape_string(input.shape()));
  }
  if (!(partition.extent == spec.input)) {
    throw ShapeError("partition extent " + extent_string(partition.extent) +
                     " does not match input " + extent_string(spec.input));
  }
  const Index vox = input.size();
  constexpr std::size_t kChunk = 8;
  const CoalitionValue value = [&](const std::vector<std::vector<std::uint8_t>>& coalitions) {
    std::vector<double> out;
    out.reserve(coalitions.size());
    for (std::size_t start = 0; start < coalitions.size(); start += kChunk) {
      const std::size_t n = std::min(kChunk, coalitions.size() - start);
      Tensor<double> batch({static_cast<Index>(n), 1, spec.input.z, spec.input.y, spec.input.x});
      for (std::size_t b = 0; b < n; ++b) {
        const auto& z = coalitions[start + b];
        double* dst = batch.raw() + b * static_cast<std::size_t>(vox);
        for (Index i = 0; i < vox; ++i) {
          const int g = partition.group[static_cast<std::size_t>(i)];
          dst[i] = (g < 0 || z[static_cast<std::size_t>(g)]) ? input[i] : reference[i];
        }
      }
      const auto trace = forward(spec, params, batch, Mode::kInfer);
      for (std::size_t b = 0; b < n; ++b) {
        out.push_back(trace.logits()[static_cast<Index>(b) * kNumClasses + target_class]);
      }
    }
    return out;
  };
  ShapResult r = kernel_shap_values(partition.groups(), value, options);
  std::vector<double> map(static_cast<std::size_t>(vox), 0.0);
  for (Index i = 0; i < vox; ++i) {
    const int g = partition.group[static_cast<std::size_t>(i)];
    if (g >= 0) {
      map[static_cast<std::size_t>(i)] =
          r.phi[static_cast<std::size_t>(g)] / static_cast<double>(partition.sizes[static_cast<std::size_t>(g)]);
    }
  }
  if (detail) *detail = std::move(r);
  return make_map(Method::kKernelShap, target_class, spec.input, std::move(map));
}

AttentionMap attribute(Method method, const AttributionRequest& req, const Tensor<double>& input,
                       int target_class, const std::string& subject) {
  if (!req.spec || !req.params) throw ConfigError("attribution request needs a model");
  const NetworkSpec& spec = *req.spec;
  const NetworkParams<double>& params = *req.params;
  auto need_reference = [&]() -> const Tensor<double>& {
    if (!req.reference) throw ConfigError(std::string(method_name(method)) + " needs a reference input");
    return *req.reference;
  };
  AttentionMap m;
  switch (method) {
    case Method::kSaliency: m = saliency(spec, params, input, target_class); break;
    case Method::kGuidedBackprop: m = guided_backprop(spec, params, input, target_class); break;
    case Method::kGradCam: m = grad_cam(spec, params, input, target_class, req.grad_cam).map; break;
    case Method::kGuidedGradCam:
      m = guided_grad_cam(spec, params, input, target_class, req.grad_cam);
      break;
    case Method::kDeepLift:
      m = deeplift_rescale(spec, params, input, need_reference(), target_class);
      break;
    case Method::kKernelShap:
      if (!req.partition) throw ConfigError("kernel_shap needs a super-voxel partition");
      m = kernel_shap(spec, params, input, *req.partition, need_reference(), target_class, req.shap);
      break;
  }
  m.subject = subject;
  return m;
}

Tensor<double> volume_input(const Volume& v) {
  Tensor<double> t({1, 1, v.extent.z, v.extent.y, v.extent.x});
  for (Index i = 0; i < t.size(); ++i) t[i] = v.data[static_cast<std::size_t>(i)];
  return t;
}

void save_attention_map(const AttentionMap& map, const std::array<double, 3>& spacing_mm,
                        const std::string& model_digest, const std::filesystem::path& raw_path) {
  Volume v(map.extent, spacing_mm);
  for (std::size_t i = 0; i < map.values.size(); ++i) v.data[i] = static_cast<float>(map.values[i]);
  v.provenance["kind"] = "attention_map";
  v.provenance["method"] = std::string(method_name(map.method));
  v.provenance["target_class"] = std::to_string(map.target_class);
  v.provenance["subject"] = map.subject;
  v.provenance["model_digest"] = model_digest;
  save_volume(v, raw_path);
}

AttentionMap load_attention_map(const std::filesystem::path& raw_path) {
  const Volume v = load_volume(raw_path);
  auto field = [&](const std::string& key) {
    auto it = v.provenance.find(key);
    if (it == v.provenance.end()) {
      throw FormatError(raw_path.string() + ": attention map sidecar lacks '" + key + "'");
    }
    return it->second;
  };
  AttentionMap m;
  try {
    m.method = parse_method(field("method"));
    m.target_class = std::stoi(field("target_class"));
  } catch (const ConfigError& e) {
    throw FormatError(raw_path.string() + ": " + e.what());
  }
  m.subject = field("subject");
  m.extent = v.extent;
  m.values.assign(v.data.begin(), v.data.end());
  return m;
}

}  // namespace pdinterp

#ifndef PDINTERP_ATTRIBUTION_H_
#define PDINTERP_ATTRIBUTION_H_

// Attention maps for a target class: saliency, guided backpropagation,
// Grad-CAM, guided Grad-CAM, DeepLIFT (Rescale) and kernel SHAP. All
// gradient methods differentiate the pre-softmax logit of the class.
// Inputs are (1, 1, Z, Y, X) double tensors; networks run in inference mode.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "pdinterp/network.h"
#include "pdinterp/volume.h"

namespace pdinterp {

enum class Method { kSaliency, kGuidedBackprop, kGradCam, kGuidedGradCam, kDeepLift, kKernelShap };

std::string_view method_name(Method m);
Method parse_method(std::string_view name);
const std::vector<Method>& all_methods();

struct AttentionMap {
  Method method = Method::kSaliency;
  int target_class = kClassPD;
  std::string subject;
  Extent3 extent;
  std::vector<double> values;  // x fastest
};

AttentionMap saliency(const NetworkSpec& spec, const NetworkParams<double>& params,
                      const Tensor<double>& input, int target_class);

// Gradient backward pass that also zeroes, at every ReLU, signal that is
// negative on arrival.
AttentionMap guided_backprop(const NetworkSpec& spec, const NetworkParams<double>& params,
                             const Tensor<double>& input, int target_class);

enum class Upsampling { kTrilinear, kNearest };

struct GradCamOptions {
  int layer = -1;  // a conv activation layer index; -1 selects the default
  Upsampling upsampling = Upsampling::kTrilinear;
};

struct GradCamResult {
  AttentionMap map;
  int layer = -1;
  Extent3 layer_extent;
  std::vector<double> alpha;   // per channel: summed gradient over the map
  std::vector<double> coarse;  // ReLU(sum_k alpha_k A^k) at layer resolution
  std::vector<std::string> warnings;
};

// Deepest conv activation whose spatial extent exceeds 1 on every axis.
int default_grad_cam_layer(const NetworkSpec& spec);

// A requested layer with 1x1x1 extent falls back to the nearest shallower
// conv activation with extent > 1 and records a warning. Layers that are not
// conv activations are rejected with ConfigError.
GradCamResult grad_cam(const NetworkSpec& spec, const NetworkParams<double>& params,
                       const Tensor<double>& input, int target_class,
                       const GradCamOptions& options = {});

// Aligned-corner resampling of a (z, y, x) field to a new extent.
std::vector<double> upsample(const std::vector<double>& field, Extent3 from, Extent3 to,
                             Upsampling mode);

// Voxelwise product of the upsampled Grad-CAM map and the guided map.
AttentionMap guided_grad_cam(const NetworkSpec& spec, const NetworkParams<double>& params,
                             const Tensor<double>& input, int target_class,
                             const GradCamOptions& options = {});

// Contributions C_i of (x_i - x0_i) to S^c(x) - S^c(x0). Throws ShapeError
// when the reference extents differ from the input.
AttentionMap deeplift_rescale(const NetworkSpec& spec, const NetworkParams<double>& params,
                              const Tensor<double>& input, const Tensor<double>& reference,
                              int target_class);

// All-zero baseline with the input's extents.
Tensor<double> zero_reference(Extent3 extent);
// Voxelwise mean of the given volumes.
Tensor<double> mean_reference(const std::vector<const Volume*>& volumes);

// Voxel-to-group assignment; -1 marks voxels outside every group.
struct SupervoxelPartition {
  Extent3 extent;
  std::vector<int> group;
  std::vector<Index> sizes;  // voxels per group

  int groups() const { return static_cast<int>(sizes.size()); }
};

// Cubic blocks of `block` voxels intersected with the mask. Groups are
// numbered in block raster order; blocks with no masked voxel are dropped.
// Throws ConfigError when fewer than 2 groups remain.
SupervoxelPartition block_partition(Extent3 extent, const std::vector<std::uint8_t>& mask,
                                    Index block = 4);

struct ShapOptions {
  int samples = 2048;  // sampled coalitions when enumeration is not used
  int max_exact_players = 16;
  std::uint64_t seed = 0;
};

struct ShapResult {
  std::vector<double> phi;
  double phi0 = 0;        // v(empty coalition)
  double full_value = 0;  // v(all players)
  int coalitions = 0;     // regression rows, excluding the two constraints
  bool exact = false;     // every proper coalition enumerated
};

// Coalition value function: receives a batch of presence vectors (one byte
// per player) and returns one value each.
using CoalitionValue =
    std::function<std::vector<double>(const std::vector<std::vector<std::uint8_t>>&)>;

// Shapley-kernel weighted least squares with sum(phi) = v(all) - v(empty)
// imposed by eliminating the last player. Throws NumericalError when the
// system is singular.
ShapResult kernel_shap_values(int players, const CoalitionValue& value, const ShapOptions& options);

// Absent groups take reference voxels; voxels outside every group keep the
// subject's values. Each voxel receives its group's phi divided by the group
// size.
AttentionMap kernel_shap(const NetworkSpec& spec, const NetworkParams<double>& params,
                         const Tensor<double>& input, const SupervoxelPartition& partition,
                         const Tensor<double>& reference, int target_class,
                         const ShapOptions& options = {}, ShapResult* detail = nullptr);

struct AttributionRequest {
  const NetworkSpec* spec = nullptr;
  const NetworkParams<double>* params = nullptr;
  const Tensor<double>* reference = nullptr;             // DeepLIFT and SHAP
  const SupervoxelPartition* partition = nullptr;        // SHAP
  GradCamOptions grad_cam;
  ShapOptions shap;
};

AttentionMap attribute(Method method, const AttributionRequest& request, const Tensor<double>& input,
                       int target_class, const std::string& subject);

Tensor<double> volume_input(const Volume& v);

// Map values as float32 plus a sidecar recording method, class, subject and
// model digest.
void save_attention_map(const AttentionMap& map, const std::array<double, 3>& spacing_mm,
                        const std::string& model_digest, const std::filesystem::path& raw_path);
AttentionMap load_attention_map(const std::filesystem::path& raw_path);

}  // namespace pdinterp

#endif  // PDINTERP_ATTRIBUTION_H_

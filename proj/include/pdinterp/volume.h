#ifndef PDINTERP_VOLUME_H_
#define PDINTERP_VOLUME_H_

// Scalar volumes on a voxel grid and their on-disk form: a raw little-endian
// float32 file (x fastest) beside a JSON sidecar with extents, spacing and
// provenance.

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pdinterp/tensor.h"

namespace pdinterp {

struct Volume {
  Extent3 extent;
  std::array<double, 3> spacing_mm{2.0, 2.0, 2.0};  // (z, y, x)
  std::vector<float> data;
  std::map<std::string, std::string> provenance;

  Volume() = default;
  Volume(Extent3 e, std::array<double, 3> spacing, float fill = 0.0f);

  std::size_t index(Index z, Index y, Index x) const {
    return static_cast<std::size_t>((z * extent.y + y) * extent.x + x);
  }
  float& at(Index z, Index y, Index x) { return data[index(z, y, x)]; }
  float at(Index z, Index y, Index x) const { return data[index(z, y, x)]; }
};

// Rescales to [0, 1]. Returns false (leaving zeros) for a constant volume.
bool min_max_normalize(Volume& v);

// Separable Gaussian with sigma = fwhm / (2 sqrt(2 ln 2)) mm per axis. Each
// 1D kernel has unit sum and is renormalized over the in-bounds taps at edges.
Volume gaussian_smooth_3d(const Volume& v, double fwhm_mm);

// Sampled, unit-sum 1D Gaussian of the given sigma (voxels), radius ceil(4 sigma).
std::vector<double> gaussian_kernel(double sigma_voxels);

inline double fwhm_to_sigma(double fwhm) { return fwhm / 2.3548200450309493; }

// "<dir>/<name>.f32" -> "<dir>/<name>.json"
std::filesystem::path sidecar_path(const std::filesystem::path& raw_path);

void save_volume(const Volume& v, const std::filesystem::path& raw_path);

// Throws MissingArtifactError when either file is absent and FormatError when
// the sidecar is malformed or the data length disagrees with it.
Volume load_volume(const std::filesystem::path& raw_path);

// Loads an externally produced raw+sidecar pair and min-max normalizes it.
Volume import_volume(const std::filesystem::path& raw_path);

// (1, 1, Z, Y, X) tensor view of a volume.
Tensor<float> volume_tensor(const Volume& v);

}  // namespace pdinterp

#endif  // PDINTERP_VOLUME_H_

#include "pdinterp/volume.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>

#include "json.hpp"
#include "pdinterp/error.h"

namespace pdinterp {

static_assert(std::endian::native == std::endian::little,
              "volume I/O assumes a little-endian host");

Volume::Volume(Extent3 e, std::array<double, 3> spacing, float fill)
    : extent(e), spacing_mm(spacing), data(static_cast<std::size_t>(e.voxels()), fill) {}

bool min_max_normalize(Volume& v) {
  if (v.data.empty()) return false;
  const auto [lo, hi] = std::minmax_element(v.data.begin(), v.data.end());
  const double mn = *lo;
  const double range = static_cast<double>(*hi) - mn;
  if (!(range > 0)) {
    std::fill(v.data.begin(), v.data.end(), 0.0f);
    return false;
  }
  for (float& x : v.data) x = static_cast<float>((x - mn) / range);
  return true;
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0)) throw ConfigError("Gaussian sigma must be positive");
  const int radius = static_cast<int>(std::ceil(4.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * (i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = w;
    sum += w;
  }
  for (double& w : k) w /= sum;
  return k;
}

namespace {

// Convolves every line along `axis` (0 = z, 1 = y, 2 = x) in place.
void smooth_axis(std::vector<double>& buf, const Extent3& e, int axis,
                 const std::vector<double>& k) {
  const Index n = e[axis];
  const Index stride = axis == 0 ? e.y * e.x : (axis == 1 ? e.x : 1);
  const int radius = static_cast<int>(k.size() / 2);
  std::vector<double> line(static_cast<std::size_t>(n));
  std::vector<Index> starts;
  for (Index z = 0; z < (axis == 0 ? 1 : e.z); ++z)
    for (Index y = 0; y < (axis == 1 ? 1 : e.y); ++y)
      for (Index x = 0; x < (axis == 2 ? 1 : e.x); ++x) starts.push_back((z * e.y + y) * e.x + x);
  for (Index s : starts) {
    for (Index i = 0; i < n; ++i) line[static_cast<std::size_t>(i)] = buf[static_cast<std::size_t>(s + i * stride)];
    for (Index i = 0; i < n; ++i) {
      double acc = 0, wsum = 0;
      const Index lo = std::max<Index>(0, i - radius);
      const Index hi = std::min<Index>(n - 1, i + radius);
      for (Index j = lo; j <= hi; ++j) {
        const double w = k[static_cast<std::size_t>(j - i + radius)];
        acc += w * line[static_cast<std::size_t>(j)];
        wsum += w;
      }
      buf[static_cast<std::size_t>(s + i * stride)] = acc / wsum;
    }
  }
}

}  // namespace

Volume gaussian_smooth_3d(const Volume& v, double fwhm_mm) {
  if (!(fwhm_mm > 0)) throw ConfigError("smoothing FWHM must be positive");
  std::vector<double> buf(v.data.begin(), v.data.end());
  for (int axis = 0; axis < 3; ++axis) {
    if (v.extent[axis] < 2) continue;
    smooth_axis(buf, v.extent, axis,
                gaussian_kernel(fwhm_to_sigma(fwhm_mm) / v.spacing_mm[static_cast<std::size_t>(axis)]));
  }
  Volume out = v;
  for (std::size_t i = 0; i < buf.size(); ++i) out.data[i] = static_cast<float>(buf[i]);
  return out;
}

std::filesystem::path sidecar_path(const std::filesystem::path& raw_path) {
  std::filesystem::path p = raw_path;
  return p.replace_extension(".json");
}

void save_volume(const Volume& v, const std::filesystem::path& raw_path) {
  if (static_cast<Index>(v.data.size()) != v.extent.voxels()) {
    throw ShapeError("volume data length does not match extent " + extent_string(v.extent));
  }
  nlohmann::json side{{"extent", {v.extent.z, v.extent.y, v.extent.x}},
                      {"spacing_mm", {v.spacing_mm[0], v.spacing_mm[1], v.spacing_mm[2]}},
                      {"dtype", "float32le"},
                      {"order", "zyx, x fastest"},
                      {"provenance", v.provenance}};
  std::ofstream raw(raw_path, std::ios::binary | std::ios::trunc);
  if (!raw) throw FormatError("cannot write volume: " + raw_path.string());
  raw.write(reinterpret_cast<const char*>(v.data.data()),
            static_cast<std::streamsize>(v.data.size() * sizeof(float)));
  std::ofstream js(sidecar_path(raw_path), std::ios::trunc);
  if (!js) throw FormatError("cannot write sidecar: " + sidecar_path(raw_path).string());
  js << side.dump(2) << "\n";
  if (!raw || !js) throw FormatError("failed writing volume: " + raw_path.string());
}

Volume load_volume(const std::filesystem::path& raw_path) {
  const auto side_path = sidecar_path(raw_path);
  std::ifstream js(side_path);
  if (!js) throw MissingArtifactError("missing volume sidecar: " + side_path.string());
  std::ifstream raw(raw_path, std::ios::binary);
  if (!raw) throw MissingArtifactError("missing volume data: " + raw_path.string());
  Volume v;
  try {
    const auto side = nlohmann::json::parse(js);
    const auto& e = side.at("extent");
    v.extent = {e.at(0).get<Index>(), e.at(1).get<Index>(), e.at(2).get<Index>()};
    const auto& s = side.at("spacing_mm");
    v.spacing_mm = {s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>()};
    if (side.contains("dtype") && side.at("dtype") != "float32le") {
      throw FormatError("unsupported dtype " + side.at("dtype").dump());
    }
    if (side.contains("provenance")) {
      v.provenance = side.at("provenance").get<std::map<std::string, std::string>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(side_path.string() + ": malformed sidecar: " + e.what());
  }
  if (v.extent.z < 1 || v.extent.y < 1 || v.extent.x < 1) {
    throw FormatError(side_path.string() + ": extents must be positive");
  }
  std::string bytes((std::istreambuf_iterator<char>(raw)), std::istreambuf_iterator<char>());
  const std::size_t expected = static_cast<std::size_t>(v.extent.voxels()) * sizeof(float);
  if (bytes.size() != expected) {
    throw FormatError(raw_path.string() + ": sidecar declares " + extent_string(v.extent) + " (" +
                      std::to_string(expected) + " bytes) but file holds " +
                      std::to_string(bytes.size()) + " bytes");
  }
  v.data.resize(static_cast<std::size_t>(v.extent.voxels()));
  std::copy(bytes.begin(), bytes.end(), reinterpret_cast<char*>(v.data.data()));
  return v;
}

Volume import_volume(const std::filesystem::path& raw_path) {
  Volume v = load_volume(raw_path);
  for (float x : v.data) {
    if (!std::isfinite(x)) throw NumericalError(raw_path.string() + ": non-finite voxel value");
  }
  if (!min_max_normalize(v)) throw NumericalError(raw_path.string() + ": constant volume");
  return v;
}

Tensor<float> volume_tensor(const Volume& v) {
  return Tensor<float>({1, 1, v.extent.z, v.extent.y, v.extent.x}, v.data);
}

}  // namespace pdinterp

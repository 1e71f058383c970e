#ifndef PDINTERP_PHANTOM_H_
#define PDINTERP_PHANTOM_H_

// Seeded synthetic DaT-SPECT phantoms: a brain ellipsoid at background
// uptake, an occipital reference box, and left/right caudate + putamen
// ellipsoids. PD lowers putamen uptake on one or both sides.
//
// Geometry is in mm relative to the grid centre ((n - 1) / 2 per axis),
// +x = subject right, +y = anterior, +z = superior. Mirroring x -> -x maps
// voxel i to n - 1 - i exactly.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pdinterp/network.h"
#include "pdinterp/volume.h"

namespace pdinterp {

inline constexpr int kPhantomTemplateVersion = 1;

enum class Laterality { kNone, kLeft, kRight, kBilateral };
std::string_view laterality_name(Laterality l);
Laterality parse_laterality(std::string_view name);

// Voxel labels of the recorded striatal ground truth.
enum StriatalLabel : std::uint8_t {
  kBackgroundLabel = 0,
  kCaudateLeft = 1,
  kCaudateRight = 2,
  kPutamenLeft = 3,
  kPutamenRight = 4,
};

struct Ellipsoid {
  double cx, cy, cz;  // centre of the right-side copy, mm
  double ax, ay, az;  // semi-axes, mm
  double angle_deg;   // rotation in the x-y plane
};

// Versioned template geometry.
struct PhantomTemplate {
  Ellipsoid brain;
  Ellipsoid caudate;
  Ellipsoid putamen;
  double occipital_x_half;            // |x| <= this
  double occipital_y_lo, occipital_y_hi;
  double occipital_z_lo, occipital_z_hi;
};
const PhantomTemplate& phantom_template();

struct Range {
  double lo = 0;
  double hi = 0;
};

struct PhantomParams {
  int label = kClassNC;
  Laterality laterality = Laterality::kNone;
  double depletion = 0;           // fraction of putamen uptake removed
  double striatal_uptake = 3.5;   // relative to background 1.0
  double noise_level = 0.05;      // sd = level * sqrt(intensity)
  double psf_fwhm_mm = 10.0;      // 0 disables blur
};

struct GeneratedPhantom {
  Volume volume;                       // normalized to [0, 1] unless raw requested
  std::vector<std::uint8_t> structures;  // StriatalLabel per voxel
};

// Throws ConfigError when the params are inconsistent (PD iff depletion > 0)
// and ShapeError when the grid cannot hold the template.
GeneratedPhantom generate_phantom(Extent3 extent, double spacing_mm, const PhantomParams& params,
                                  std::uint64_t noise_seed, bool normalize = true);

// Voxels inside the template brain ellipsoid (1) or outside it (0).
std::vector<std::uint8_t> brain_mask(Extent3 extent, double spacing_mm);

struct PhantomConfig {
  int cohort_size = 607;
  int pd_ratio = 448;
  int nc_ratio = 159;
  Range striatal_uptake{3.0, 4.0};
  Range depletion{0.35, 0.85};
  double asymmetry_probability = 0.3;  // probability a PD subject is unilateral
  double noise_level = 0.05;
  double psf_fwhm_mm = 10.0;
  Grid grid = Grid::kFull;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SubjectRecord {
  std::string id;
  int label = kClassNC;
  std::string volume_path;     // relative to the cohort directory
  std::string structure_path;  // recorded striatal labels, same format
  PhantomParams params;
  std::uint64_t noise_seed = 0;
};

// PD count = floor(n * pd / (pd + nc)); NC takes the remainder.
int cohort_pd_count(const PhantomConfig& config);

// Deterministic cohort description; no volumes are generated.
std::vector<SubjectRecord> build_cohort(const PhantomConfig& config);

// Independent generator stream for (seed, subject index, purpose).
std::uint64_t subject_stream_seed(std::uint64_t seed, std::uint64_t subject, std::uint64_t purpose);

GeneratedPhantom generate_subject(const PhantomConfig& config, const SubjectRecord& record);

// Writes every subject's volume + structure map and the manifest.jsonl.
// Subjects are generated on `threads` workers.
std::vector<SubjectRecord> write_cohort(const PhantomConfig& config,
                                        const std::filesystem::path& dir, int threads = 1);

std::string manifest_line(const SubjectRecord& r);
std::vector<SubjectRecord> read_manifest(const std::filesystem::path& manifest_path);

}  // namespace pdinterp

#endif  // PDINTERP_PHANTOM_H_

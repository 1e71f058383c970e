#include "pdinterp/phantom.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <numbers>
#include <random>
#include <thread>

#include "json.hpp"
#include "pdinterp/error.h"

namespace pdinterp {

std::string_view laterality_name(Laterality l) {
  switch (l) {
    case Laterality::kNone: return "none";
    case Laterality::kLeft: return "left";
    case Laterality::kRight: return "right";
    case Laterality::kBilateral: return "bilateral";
  }
  return "none";
}

Laterality parse_laterality(std::string_view name) {
  for (Laterality l : {Laterality::kNone, Laterality::kLeft, Laterality::kRight, Laterality::kBilateral}) {
    if (laterality_name(l) == name) return l;
  }
  throw ConfigError("unknown laterality '" + std::string(name) + "'");
}

const PhantomTemplate& phantom_template() {
  // Striatal centres sit 4-8 mm below the grid centre, so on the 2 mm grid
  // both structures fall within transaxial slices 36-47.
  static const PhantomTemplate t{
      .brain = {0, 0, 0, 68, 85, 65, 0},
      .caudate = {13, 12, -4, 5, 8, 9, 0},
      .putamen = {24, -2, -8, 5, 14, 10, 20},
      .occipital_x_half = 30,
      .occipital_y_lo = -75,
      .occipital_y_hi = -55,
      .occipital_z_lo = -15,
      .occipital_z_hi = 5,
  };
  return t;
}

namespace {

// Inside test for the right-side copy; callers pass |x| or -x for the left.
bool inside(const Ellipsoid& e, double x, double y, double z) {
  const double dx = x - e.cx, dy = y - e.cy, dz = z - e.cz;
  const double a = e.angle_deg * std::numbers::pi / 180.0;
  const double u = std::cos(a) * dx + std::sin(a) * dy;
  const double v = -std::sin(a) * dx + std::cos(a) * dy;
  const double r = (u * u) / (e.ax * e.ax) + (v * v) / (e.ay * e.ay) + (dz * dz) / (e.az * e.az);
  return r <= 1.0;
}

double coord(Index i, Index n, double spacing) {
  return (static_cast<double>(i) - static_cast<double>(n - 1) / 2.0) * spacing;
}

void check_params(const PhantomParams& p) {
  if (p.label != kClassNC && p.label != kClassPD) throw ConfigError("phantom label must be NC or PD");
  if (!(p.depletion >= 0 && p.depletion <= 1)) throw ConfigError("depletion must lie in [0, 1]");
  const bool depleted = p.depletion > 0;
  if (depleted != (p.label == kClassPD)) {
    throw ConfigError("phantom label inconsistent with depletion (PD iff depletion > 0)");
  }
  if ((p.label == kClassPD) == (p.laterality == Laterality::kNone)) {
    throw ConfigError("PD phantoms need a laterality; NC phantoms must use 'none'");
  }
  if (!(p.striatal_uptake > 0)) throw ConfigError("striatal uptake must be positive");
  if (!(p.noise_level >= 0)) throw ConfigError("noise level must be nonnegative");
  if (!(p.psf_fwhm_mm >= 0)) throw ConfigError("PSF FWHM must be nonnegative");
}

}  // namespace

std::vector<std::uint8_t> brain_mask(Extent3 extent, double spacing_mm) {
  const Ellipsoid& b = phantom_template().brain;
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(extent.voxels()), 0);
  std::size_t idx = 0;
  for (Index k = 0; k < extent.z; ++k)
    for (Index j = 0; j < extent.y; ++j)
      for (Index i = 0; i < extent.x; ++i, ++idx) {
        mask[idx] = inside(b, coord(i, extent.x, spacing_mm), coord(j, extent.y, spacing_mm),
                           coord(k, extent.z, spacing_mm));
      }
  return mask;
}

GeneratedPhantom generate_phantom(Extent3 extent, double spacing_mm, const PhantomParams& params,
                                  std::uint64_t noise_seed, bool normalize) {
  check_params(params);
  const PhantomTemplate& t = phantom_template();
  const double half[3] = {static_cast<double>(extent.z - 1) / 2 * spacing_mm,
                          static_cast<double>(extent.y - 1) / 2 * spacing_mm,
                          static_cast<double>(extent.x - 1) / 2 * spacing_mm};
  if (half[0] < t.brain.az || half[1] < t.brain.ay || half[2] < t.brain.ax) {
    throw ShapeError("grid " + extent_string(extent) + " at " + std::to_string(spacing_mm) +
                     " mm cannot contain the phantom brain template");
  }
  GeneratedPhantom g;
  g.volume = Volume(extent, {spacing_mm, spacing_mm, spacing_mm});
  g.structures.assign(static_cast<std::size_t>(extent.voxels()), kBackgroundLabel);
  const double s = params.striatal_uptake;
  const bool dep_left = params.laterality == Laterality::kLeft || params.laterality == Laterality::kBilateral;
  const bool dep_right = params.laterality == Laterality::kRight || params.laterality == Laterality::kBilateral;
  const double put_left = s * (dep_left ? 1.0 - params.depletion : 1.0);
  const double put_right = s * (dep_right ? 1.0 - params.depletion : 1.0);
  for (Index k = 0; k < extent.z; ++k) {
    const double z = coord(k, extent.z, spacing_mm);
    for (Index j = 0; j < extent.y; ++j) {
      const double y = coord(j, extent.y, spacing_mm);
      for (Index i = 0; i < extent.x; ++i) {
        const double x = coord(i, extent.x, spacing_mm);
        const std::size_t idx = g.volume.index(k, j, i);
        if (!inside(t.brain, x, y, z)) continue;
        double v = 1.0;
        // Left structures are the right template evaluated at -x.
        const bool right = x > 0;
        const double xs = right ? x : -x;
        if (inside(t.caudate, xs, y, z)) {
          v = s;
          g.structures[idx] = right ? kCaudateRight : kCaudateLeft;
        } else if (inside(t.putamen, xs, y, z)) {
          v = right ? put_right : put_left;
          g.structures[idx] = right ? kPutamenRight : kPutamenLeft;
        }
        g.volume.data[idx] = static_cast<float>(v);
      }
    }
  }
  if (params.psf_fwhm_mm > 0) g.volume = gaussian_smooth_3d(g.volume, params.psf_fwhm_mm);
  if (params.noise_level > 0) {
    std::mt19937_64 rng(noise_seed);
    std::normal_distribution<double> n01(0.0, 1.0);
    for (float& v : g.volume.data) {
      const double sd = params.noise_level * std::sqrt(std::max(0.0f, v));
      v = static_cast<float>(v + sd * n01(rng));
    }
  }
  if (normalize && !min_max_normalize(g.volume)) throw NumericalError("phantom volume is constant");
  g.volume.provenance["generator"] = "pdinterp-phantom";
  g.volume.provenance["template_version"] = std::to_string(kPhantomTemplateVersion);
  g.volume.provenance["label"] = params.label == kClassPD ? "PD" : "NC";
  g.volume.provenance["normalized"] = normalize ? "true" : "false";
  return g;
}

void PhantomConfig::validate() const {
  if (cohort_size < 2) throw ConfigError("cohort size must be at least 2");
  if (pd_ratio < 0 || nc_ratio < 0 || pd_ratio + nc_ratio == 0) {
    throw ConfigError("PD:NC ratio must be nonnegative and not both zero");
  }
  for (const Range* r : {&striatal_uptake, &depletion}) {
    if (!(r->lo <= r->hi)) throw ConfigError("parameter ranges must be nonempty (lo <= hi)");
  }
  if (!(striatal_uptake.lo > 0)) throw ConfigError("striatal uptake must be positive");
  if (!(depletion.lo > 0 && depletion.hi <= 1)) throw ConfigError("depletion range must lie in (0, 1]");
  if (!(asymmetry_probability >= 0 && asymmetry_probability <= 1)) {
    throw ConfigError("asymmetry probability must lie in [0, 1]");
  }
  if (!(noise_level >= 0)) throw ConfigError("noise level must be nonnegative");
  if (!(psf_fwhm_mm >= 0)) throw ConfigError("PSF FWHM must be nonnegative");
}

int cohort_pd_count(const PhantomConfig& c) {
  const long long n = c.cohort_size;
  return static_cast<int>(n * c.pd_ratio / (c.pd_ratio + c.nc_ratio));
}

std::uint64_t subject_stream_seed(std::uint64_t seed, std::uint64_t subject, std::uint64_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(subject), static_cast<std::uint32_t>(subject >> 32),
                    static_cast<std::uint32_t>(purpose)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

namespace {

double uniform(std::mt19937_64& rng, const Range& r) {
  return r.lo + (r.hi - r.lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
}

constexpr std::uint64_t kLabelStream = ~std::uint64_t{0};

}  // namespace

std::vector<SubjectRecord> build_cohort(const PhantomConfig& config) {
  config.validate();
  const int n = config.cohort_size;
  const int n_pd = cohort_pd_count(config);
  std::vector<int> labels(static_cast<std::size_t>(n), kClassNC);
  std::fill(labels.begin(), labels.begin() + n_pd, kClassPD);
  // Fisher-Yates on raw 64-bit draws keeps the order independent of the
  // standard library's distribution implementations.
  std::mt19937_64 shuffle_rng(subject_stream_seed(config.seed, kLabelStream, 0));
  for (int i = n - 1; i > 0; --i) {
    const auto j = static_cast<int>(shuffle_rng() % static_cast<std::uint64_t>(i + 1));
    std::swap(labels[static_cast<std::size_t>(i)], labels[static_cast<std::size_t>(j)]);
  }
  std::vector<SubjectRecord> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    SubjectRecord r;
    char id[32];
    std::snprintf(id, sizeof(id), "sub-%04d", i + 1);
    r.id = id;
    r.label = labels[static_cast<std::size_t>(i)];
    r.volume_path = "volumes/" + r.id + ".f32";
    r.structure_path = "volumes/" + r.id + "_striatum.f32";
    std::mt19937_64 rng(subject_stream_seed(config.seed, static_cast<std::uint64_t>(i), 0));
    PhantomParams& p = r.params;
    p.label = r.label;
    p.striatal_uptake = uniform(rng, config.striatal_uptake);
    p.noise_level = config.noise_level;
    p.psf_fwhm_mm = config.psf_fwhm_mm;
    if (r.label == kClassPD) {
      p.depletion = uniform(rng, config.depletion);
      const double u = uniform(rng, {0, 1});
      if (u < config.asymmetry_probability) {
        p.laterality = uniform(rng, {0, 1}) < 0.5 ? Laterality::kLeft : Laterality::kRight;
      } else {
        p.laterality = Laterality::kBilateral;
      }
    }
    r.noise_seed = subject_stream_seed(config.seed, static_cast<std::uint64_t>(i), 1);
    out.push_back(std::move(r));
  }
  return out;
}

GeneratedPhantom generate_subject(const PhantomConfig& config, const SubjectRecord& record) {
  GeneratedPhantom g = generate_phantom(grid_extent(config.grid), grid_voxel_mm(config.grid),
                                        record.params, record.noise_seed);
  g.volume.provenance["subject"] = record.id;
  g.volume.provenance["seed"] = std::to_string(config.seed);
  return g;
}

std::string manifest_line(const SubjectRecord& r) {
  nlohmann::json j{{"id", r.id},
                   {"label", r.label == kClassPD ? "PD" : "NC"},
                   {"volume", r.volume_path},
                   {"structures", r.structure_path},
                   {"laterality", std::string(laterality_name(r.params.laterality))},
                   {"depletion", r.params.depletion},
                   {"striatal_uptake", r.params.striatal_uptake},
                   {"noise_level", r.params.noise_level},
                   {"psf_fwhm_mm", r.params.psf_fwhm_mm},
                   {"noise_seed", r.noise_seed}};
  return j.dump();
}

std::vector<SubjectRecord> write_cohort(const PhantomConfig& config, const std::filesystem::path& dir,
                                        int threads) {
  const auto records = build_cohort(config);
  std::filesystem::create_directories(dir / "volumes");
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < records.size(); i = next++) {
      try {
        const auto g = generate_subject(config, records[i]);
        save_volume(g.volume, dir / records[i].volume_path);
        Volume labels(g.volume.extent, g.volume.spacing_mm);
        for (std::size_t v = 0; v < g.structures.size(); ++v) labels.data[v] = g.structures[v];
        labels.provenance = {{"subject", records[i].id},
                             {"content", "striatal labels: 1 caudate L, 2 caudate R, 3 putamen L, 4 putamen R"}};
        save_volume(labels, dir / records[i].structure_path);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next = records.size();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < std::max(1, threads); ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
  std::ofstream m(dir / "manifest.jsonl", std::ios::trunc);
  for (const auto& r : records) m << manifest_line(r) << "\n";
  if (!m) throw FormatError("failed writing manifest in " + dir.string());
  return records;
}

std::vector<SubjectRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("missing cohort manifest: " + path.string());
  std::vector<SubjectRecord> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      SubjectRecord r;
      r.id = j.at("id").get<std::string>();
      const auto label = j.at("label").get<std::string>();
      if (label != "PD" && label != "NC") throw FormatError("label must be PD or NC");
      r.label = label == "PD" ? kClassPD : kClassNC;
      r.volume_path = j.at("volume").get<std::string>();
      r.structure_path = j.at("structures").get<std::string>();
      r.params.label = r.label;
      r.params.laterality = parse_laterality(j.at("laterality").get<std::string>());
      r.params.depletion = j.at("depletion").get<double>();
      r.params.striatal_uptake = j.at("striatal_uptake").get<double>();
      r.params.noise_level = j.at("noise_level").get<double>();
      r.params.psf_fwhm_mm = j.at("psf_fwhm_mm").get<double>();
      r.noise_seed = j.at("noise_seed").get<std::uint64_t>();
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace pdinterp

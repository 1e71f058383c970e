#include "pdinterp/sbr.h"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "pdinterp/error.h"
#include "pdinterp/phantom.h"

namespace pdinterp {

HottestWindow hottest_slice_average(const Volume& v) {
  const Index nz = v.extent.z;
  if (nz < kSbrWindowSlices) {
    throw ShapeError("hottest-slice averaging needs at least " + std::to_string(kSbrWindowSlices) +
                     " transaxial slices, volume has " + std::to_string(nz));
  }
  const Index plane = v.extent.y * v.extent.x;
  HottestWindow w;
  double best = -INFINITY;
  for (Index z = 0; z < nz; ++z) {
    double s = 0;
    for (Index i = 0; i < plane; ++i) s += v.data[static_cast<std::size_t>(z * plane + i)];
    if (s > best) {
      best = s;
      w.center = z;
    }
  }
  w.first = std::clamp<Index>(w.center - kSbrWindowSlices / 2, 0, nz - kSbrWindowSlices);
  w.last = w.first + kSbrWindowSlices - 1;
  w.image = SliceImage(v.extent.y, v.extent.x);
  for (Index z = w.first; z <= w.last; ++z)
    for (Index i = 0; i < plane; ++i) w.image.values[static_cast<std::size_t>(i)] += v.data[static_cast<std::size_t>(z * plane + i)];
  for (double& x : w.image.values) x /= kSbrWindowSlices;
  w.image.provenance["source"] = "hottest-window average";
  w.image.provenance["slices"] = std::to_string(w.first) + "-" + std::to_string(w.last);
  return w;
}

namespace {

bool in_ellipse(const Ellipsoid& e, double x, double y) {
  const double dx = x - e.cx, dy = y - e.cy;
  const double a = e.angle_deg * std::numbers::pi / 180.0;
  const double u = std::cos(a) * dx + std::sin(a) * dy;
  const double v = -std::sin(a) * dx + std::cos(a) * dy;
  return (u * u) / (e.ax * e.ax) + (v * v) / (e.ay * e.ay) <= 1.0;
}

double mask_mean(const SliceImage& s, const BinaryMask2D& m) {
  double sum = 0;
  Index n = 0;
  for (Index i = 0; i < s.size(); ++i) {
    if (m.bits[static_cast<std::size_t>(i)]) {
      sum += s.values[static_cast<std::size_t>(i)];
      ++n;
    }
  }
  if (n == 0) throw ShapeError("ROI mask '" + m.provenance + "' is empty");
  return sum / static_cast<double>(n);
}

}  // namespace

RoiMask template_roi_masks(Index ny, Index nx, double spacing) {
  const PhantomTemplate& t = phantom_template();
  RoiMask r{BinaryMask2D(ny, nx), BinaryMask2D(ny, nx), BinaryMask2D(ny, nx), BinaryMask2D(ny, nx),
            BinaryMask2D(ny, nx)};
  r.caudate_left.provenance = "caudate_left";
  r.caudate_right.provenance = "caudate_right";
  r.putamen_left.provenance = "putamen_left";
  r.putamen_right.provenance = "putamen_right";
  r.reference.provenance = "occipital";
  for (Index j = 0; j < ny; ++j) {
    const double y = (static_cast<double>(j) - static_cast<double>(ny - 1) / 2) * spacing;
    for (Index i = 0; i < nx; ++i) {
      const double x = (static_cast<double>(i) - static_cast<double>(nx - 1) / 2) * spacing;
      const auto k = static_cast<std::size_t>(j * nx + i);
      const bool right = x > 0;
      const double xs = right ? x : -x;
      if (in_ellipse(t.caudate, xs, y)) {
        (right ? r.caudate_right : r.caudate_left).bits[k] = 1;
      } else if (in_ellipse(t.putamen, xs, y)) {
        (right ? r.putamen_right : r.putamen_left).bits[k] = 1;
      } else if (std::abs(x) <= t.occipital_x_half && y >= t.occipital_y_lo && y <= t.occipital_y_hi) {
        r.reference.bits[k] = 1;
      }
    }
  }
  return r;
}

SbrFeatures compute_sbr(const SliceImage& slice, const RoiMask& m) {
  for (const BinaryMask2D* mask : {&m.caudate_left, &m.caudate_right, &m.putamen_left, &m.putamen_right, &m.reference}) {
    if (mask->ny != slice.ny || mask->nx != slice.nx) {
      throw ShapeError("ROI mask extent differs from the slice image");
    }
  }
  const double ref = mask_mean(slice, m.reference);
  if (!(ref > 0)) {
    throw NumericalError("reference region density is " + std::to_string(ref) + "; SBR undefined");
  }
  return {mask_mean(slice, m.caudate_left) / ref - 1, mask_mean(slice, m.caudate_right) / ref - 1,
          mask_mean(slice, m.putamen_left) / ref - 1, mask_mean(slice, m.putamen_right) / ref - 1};
}

SbrFeatures extract_sbr(const Volume& v) {
  const auto window = hottest_slice_average(gaussian_smooth_3d(v, kSbrSmoothingFwhmMm));
  return compute_sbr(window.image, template_roi_masks(v.extent.y, v.extent.x, v.spacing_mm[2]));
}

namespace {

std::vector<std::vector<double>> standardize(const SvmModel& m, const std::vector<std::vector<double>>& f) {
  std::vector<std::vector<double>> out(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (f[i].size() != m.feature_mean.size()) throw ShapeError("feature vector length mismatch");
    out[i].resize(f[i].size());
    for (std::size_t d = 0; d < f[i].size(); ++d) out[i][d] = (f[i][d] - m.feature_mean[d]) / m.feature_scale[d];
  }
  return out;
}

double sign_of(int label) { return label == kClassPD ? 1.0 : -1.0; }

}  // namespace

double svm_objective(const SvmModel& m, const std::vector<std::vector<double>>& x, const std::vector<int>& labels) {
  double obj = 0;
  for (double w : m.weights) obj += 0.5 * w * w;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double s = m.bias;
    for (std::size_t d = 0; d < m.weights.size(); ++d) s += m.weights[d] * x[i][d];
    obj += m.c * std::max(0.0, 1.0 - sign_of(labels[i]) * s);
  }
  return obj;
}

SvmModel svm_train(const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
                   const SvmOptions& options) {
  if (features.empty() || features.size() != labels.size()) {
    throw ConfigError("SVM training needs equally many feature vectors and labels");
  }
  if (!(options.c > 0) || options.iterations < 1) throw ConfigError("SVM needs C > 0 and iterations >= 1");
  bool has_pd = false, has_nc = false;
  for (int l : labels) {
    if (l == kClassPD) has_pd = true;
    else if (l == kClassNC) has_nc = true;
    else throw ConfigError("SVM labels must be NC or PD");
  }
  if (!has_pd || !has_nc) throw ConfigError("SVM training needs both classes present");
  const std::size_t n = features.size();
  const std::size_t dim = features[0].size();

  SvmModel m;
  m.c = options.c;
  m.feature_mean.assign(dim, 0.0);
  m.feature_scale.assign(dim, 0.0);
  for (const auto& f : features) {
    if (f.size() != dim) throw ShapeError("feature vector length mismatch");
    for (std::size_t d = 0; d < dim; ++d) m.feature_mean[d] += f[d];
  }
  for (double& v : m.feature_mean) v /= static_cast<double>(n);
  for (const auto& f : features)
    for (std::size_t d = 0; d < dim; ++d) m.feature_scale[d] += (f[d] - m.feature_mean[d]) * (f[d] - m.feature_mean[d]);
  for (double& v : m.feature_scale) {
    v = std::sqrt(v / static_cast<double>(n));
    if (!(v > 0)) v = 1.0;  // constant feature
  }
  const auto x = standardize(m, features);

  std::vector<double> w(dim, 0.0), gw(dim);
  double b = 0;
  m.weights = w;
  m.bias = b;
  double best = svm_objective(m, x, labels);
  const double eta0 = 1.0 / (1.0 + options.c * static_cast<double>(n));
  for (int t = 0; t < options.iterations; ++t) {
    for (std::size_t d = 0; d < dim; ++d) gw[d] = w[d];
    double gb = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = b;
      for (std::size_t d = 0; d < dim; ++d) s += w[d] * x[i][d];
      const double y = sign_of(labels[i]);
      if (y * s < 1) {
        for (std::size_t d = 0; d < dim; ++d) gw[d] -= options.c * y * x[i][d];
        gb -= options.c * y;
      }
    }
    const double eta = eta0 / std::sqrt(static_cast<double>(t) + 1.0);
    for (std::size_t d = 0; d < dim; ++d) w[d] -= eta * gw[d];
    b -= eta * gb;
    SvmModel trial = m;
    trial.weights = w;
    trial.bias = b;
    const double obj = svm_objective(trial, x, labels);
    if (!std::isfinite(obj)) throw NumericalError("SVM objective became non-finite");
    if (obj < best) {
      best = obj;
      m.weights = w;
      m.bias = b;
    }
    m.objective_history.push_back(best);
  }
  return m;
}

SvmPrediction svm_predict(const SvmModel& m, const std::vector<std::vector<double>>& features) {
  const auto x = standardize(m, features);
  SvmPrediction p;
  for (const auto& xi : x) {
    double s = m.bias;
    for (std::size_t d = 0; d < m.weights.size(); ++d) s += m.weights[d] * xi[d];
    p.margins.push_back(s);
    p.labels.push_back(s >= 0 ? kClassPD : kClassNC);
  }
  return p;
}

std::string sbr_csv_header() { return "subject,caudate_left,caudate_right,putamen_left,putamen_right,label"; }

std::string sbr_csv_row(const std::string& id, const SbrFeatures& f, int label) {
  std::ostringstream os;
  os.precision(17);
  os << id << ',' << f.caudate_left << ',' << f.caudate_right << ',' << f.putamen_left << ','
     << f.putamen_right << ',' << (label == kClassPD ? "PD" : "NC");
  return os.str();
}

}  // namespace pdinterp

#ifndef PDINTERP_SBR_H_
#define PDINTERP_SBR_H_

// Striatal binding ratio features from a smoothed, slice-averaged volume and
// a linear soft-margin SVM baseline on those features.

#include <array>
#include <string>
#include <vector>

#include "pdinterp/slice.h"
#include "pdinterp/volume.h"

namespace pdinterp {

inline constexpr double kSbrSmoothingFwhmMm = 6.0;
inline constexpr int kSbrWindowSlices = 8;

struct HottestWindow {
  SliceImage image;
  Index center = 0;  // slice with the largest summed intensity (lowest on ties)
  Index first = 0;   // inclusive window bounds
  Index last = 0;
};

// Averages the 8-slice window [center - 4, center + 3], shifted to stay
// inside the volume. Throws ShapeError for fewer than 8 slices.
HottestWindow hottest_slice_average(const Volume& v);

struct RoiMask {
  BinaryMask2D caudate_left;
  BinaryMask2D caudate_right;
  BinaryMask2D putamen_left;
  BinaryMask2D putamen_right;
  BinaryMask2D reference;  // occipital cortex
};

// In-plane cross-sections of the phantom template structures on a slice grid
// with the given in-plane spacing. Putamen voxels claimed by the caudate are
// dropped so the masks stay disjoint.
RoiMask template_roi_masks(Index ny, Index nx, double spacing_mm);

struct SbrFeatures {
  double caudate_left = 0;
  double caudate_right = 0;
  double putamen_left = 0;
  double putamen_right = 0;

  std::array<double, 4> values() const { return {caudate_left, caudate_right, putamen_left, putamen_right}; }
};

// SBR = mean(target) / mean(reference) - 1. Throws NumericalError when the
// reference density is not positive and ShapeError on extent mismatch.
SbrFeatures compute_sbr(const SliceImage& slice, const RoiMask& masks);

// Smooth (6 mm FWHM), average the hottest window and measure the template ROIs.
SbrFeatures extract_sbr(const Volume& v);

struct SvmOptions {
  double c = 1.0;
  int iterations = 4000;
};

struct SvmModel {
  std::vector<double> weights;  // in standardized feature space
  double bias = 0;
  double c = 1.0;
  std::vector<double> feature_mean;
  std::vector<double> feature_scale;
  std::vector<double> objective_history;  // best objective after each iteration
};

// Soft-margin linear SVM, objective 0.5 |w|^2 + C sum_i hinge(y_i (w.x_i + b))
// with y = +1 for PD, trained by full-batch subgradient descent with a
// 1/sqrt(t) step on standardized features, keeping the best iterate.
// Throws ConfigError unless both classes are present.
SvmModel svm_train(const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
                   const SvmOptions& options = {});

double svm_objective(const SvmModel& model, const std::vector<std::vector<double>>& standardized,
                     const std::vector<int>& labels);

struct SvmPrediction {
  std::vector<int> labels;       // PD where margin >= 0
  std::vector<double> margins;   // w.x + b
};

SvmPrediction svm_predict(const SvmModel& model, const std::vector<std::vector<double>>& features);

std::string sbr_csv_header();
std::string sbr_csv_row(const std::string& id, const SbrFeatures& f, int label);

}  // namespace pdinterp

#endif  // PDINTERP_SBR_H_

#ifndef PDINTERP_INTERP_EVAL_H_
#define PDINTERP_INTERP_EVAL_H_

// Scores attention maps against intensity-thresholded striatal ground truth
// on a striatal slice average: top-k% binarization, Dice, mean absolute
// error fields and mean segmented heatmaps.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pdinterp/attribution.h"
#include "pdinterp/slice.h"
#include "pdinterp/volume.h"

namespace pdinterp {

inline constexpr Index kReferenceSlices = 91;
inline constexpr Index kWindowFirst = 35;
inline constexpr Index kWindowLast = 48;
inline constexpr double kThresholdNC = 0.63;
inline constexpr double kThresholdPD = 0.69;

struct SliceWindow {
  Index first = 0;  // inclusive
  Index last = 0;   // inclusive
  Index count() const { return last - first + 1; }
};

// 35..48 on 91 slices; other depths scale both ends by nz / 91 and round to
// the nearest slice.
SliceWindow striatal_window(Index nz);

// Per-slice min-max normalization over the window, mean across slices, then
// min-max renormalization. Constant slices contribute zeros and are listed
// under provenance "constant_slices".
SliceImage slice_average(Extent3 extent, std::span<const double> values, const std::string& subject,
                         const std::string& source);
SliceImage slice_average(const Volume& v, const std::string& subject);
SliceImage slice_average(const AttentionMap& m);

double ground_truth_threshold(int label);

// slice >= threshold(label).
BinaryMask2D segment_ground_truth(const SliceImage& slice, int label);

// Pixels whose rank is among the round(k/100 * N) largest; equal values
// prefer the lower flat index. Requires 0 < k <= 100.
Index topk_count(Index pixels, double k_percent);
BinaryMask2D topk_binarize(const SliceImage& slice, double k_percent);

// 2|P & G| / (|P| + |G|); 0 when both are empty. Throws ShapeError on an
// extent mismatch.
double dice(const BinaryMask2D& p, const BinaryMask2D& g);

struct MaeResult {
  SliceImage field;  // per-pixel mean of |P - G|
  double mean = 0;   // spatial mean of the field
};

MaeResult mae_map(const std::vector<BinaryMask2D>& predicted, const std::vector<BinaryMask2D>& truth);

// Per-pixel fraction of masks that contain the pixel.
SliceImage mean_segmented_heatmap(const std::vector<BinaryMask2D>& masks);

struct DiceAtK {
  double k_percent = 0;
  double dice = 0;
};

struct InterpRecord {
  std::string model;
  std::string method;
  std::string subject;
  int label = 0;
  int fold = -1;
  std::vector<DiceAtK> dice;
  bool excluded = false;
  std::string reason;  // why an excluded subject was dropped
};

// Slice-averages the subject image and its attention map, segments the
// ground truth from the image and scores the map's top-k masks.
InterpRecord evaluate_subject(const Volume& image, int label, const AttentionMap& map,
                              const std::vector<double>& k_percents, BinaryMask2D* truth_out = nullptr,
                              std::vector<BinaryMask2D>* predicted_out = nullptr);

struct InterpSummary {
  std::string model;
  std::string method;
  double k_percent = 0;
  double mean = 0;
  double sd = 0;  // sample standard deviation (0 for a single subject)
  int n = 0;
  int excluded = 0;
};

// Grouped by (model, method, k) in first-appearance order of (model, method).
std::vector<InterpSummary> summarize(const std::vector<InterpRecord>& records);

// Dice at k for one (model, method) keyed by subject, excluded subjects skipped.
std::vector<std::pair<std::string, double>> dice_by_subject(const std::vector<InterpRecord>& records,
                                                            const std::string& model,
                                                            const std::string& method, double k_percent);

std::string interp_csv_header();
// One row per k: model,method,subject,label,fold,k,dice,excluded,reason
std::vector<std::string> interp_csv_rows(const InterpRecord& r);
std::vector<InterpRecord> parse_interp_csv(const std::string& text);

// Binary portable graymap, 8-bit; values are clamped to [0, 1] and scaled.
std::string pgm_bytes(const SliceImage& image);
std::string pgm_bytes(const BinaryMask2D& mask);

SliceImage mask_image(const BinaryMask2D& mask);

}  // namespace pdinterp

#endif  // PDINTERP_INTERP_EVAL_H_

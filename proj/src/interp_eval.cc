#include "pdinterp/interp_eval.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>
#include <tuple>

#include "pdinterp/error.h"

namespace pdinterp {

namespace {

void check_same_extent(const BinaryMask2D& a, const BinaryMask2D& b) {
  if (a.ny != b.ny || a.nx != b.nx) {
    throw ShapeError("mask extents differ: " + std::to_string(a.ny) + "x" + std::to_string(a.nx) +
                     " vs " + std::to_string(b.ny) + "x" + std::to_string(b.nx));
  }
}

// Min-max to [0, 1] in place; false (and zeros) when the range is empty.
bool normalize_span(std::span<double> v) {
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double a = *lo, b = *hi;
  if (!(b > a)) {
    std::fill(v.begin(), v.end(), 0.0);
    return false;
  }
  for (double& x : v) x = (x - a) / (b - a);
  return true;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string csv_safe(std::string s) {
  std::replace(s.begin(), s.end(), ',', ';');
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

}  // namespace

SliceWindow striatal_window(Index nz) {
  if (nz == kReferenceSlices) return {kWindowFirst, kWindowLast};
  const double scale = static_cast<double>(nz) / static_cast<double>(kReferenceSlices);
  SliceWindow w{std::lround(kWindowFirst * scale), std::lround(kWindowLast * scale)};
  if (w.first < 0 || w.last >= nz || w.count() < 1) {
    throw ShapeError("volume with " + std::to_string(nz) + " slices cannot hold the striatal window");
  }
  return w;
}

SliceImage slice_average(Extent3 extent, std::span<const double> values, const std::string& subject,
                         const std::string& source) {
  if (static_cast<Index>(values.size()) != extent.voxels()) {
    throw ShapeError("values do not match extent " + extent_string(extent));
  }
  const SliceWindow w = striatal_window(extent.z);
  const Index plane = extent.y * extent.x;
  SliceImage out(extent.y, extent.x);
  std::vector<double> slice(static_cast<std::size_t>(plane));
  std::string constant;
  for (Index z = w.first; z <= w.last; ++z) {
    std::copy_n(values.begin() + z * plane, plane, slice.begin());
    if (!normalize_span(slice)) constant += (constant.empty() ? "" : " ") + std::to_string(z);
    for (Index i = 0; i < plane; ++i) out.values[static_cast<std::size_t>(i)] += slice[static_cast<std::size_t>(i)];
  }
  for (double& v : out.values) v /= static_cast<double>(w.count());
  const bool ranged = normalize_span(out.values);
  out.provenance["subject"] = subject;
  out.provenance["source"] = source;
  out.provenance["window"] = std::to_string(w.first) + "-" + std::to_string(w.last);
  if (!constant.empty()) out.provenance["constant_slices"] = constant;
  if (!ranged) out.provenance["constant_average"] = "true";
  return out;
}

SliceImage slice_average(const Volume& v, const std::string& subject) {
  std::vector<double> d(v.data.begin(), v.data.end());
  return slice_average(v.extent, d, subject, "image");
}

SliceImage slice_average(const AttentionMap& m) {
  return slice_average(m.extent, m.values, m.subject, "attention:" + std::string(method_name(m.method)));
}

double ground_truth_threshold(int label) {
  if (label == kClassNC) return kThresholdNC;
  if (label == kClassPD) return kThresholdPD;
  throw ConfigError("label must be 0 (NC) or 1 (PD)");
}

BinaryMask2D segment_ground_truth(const SliceImage& slice, int label) {
  const double t = ground_truth_threshold(label);
  BinaryMask2D m(slice.ny, slice.nx);
  for (std::size_t i = 0; i < slice.values.size(); ++i) m.bits[i] = slice.values[i] >= t;
  m.provenance = "ground-truth>=" + format_double(t);
  return m;
}

Index topk_count(Index pixels, double k_percent) {
  if (!(k_percent > 0 && k_percent <= 100)) {
    throw ConfigError("top-k percentage must lie in (0, 100], got " + format_double(k_percent));
  }
  return std::llround(k_percent / 100.0 * static_cast<double>(pixels));
}

BinaryMask2D topk_binarize(const SliceImage& slice, double k_percent) {
  const Index n = topk_count(slice.size(), k_percent);
  std::vector<Index> order(static_cast<std::size_t>(slice.size()));
  std::iota(order.begin(), order.end(), 0);
  const auto& v = slice.values;
  auto before = [&](Index a, Index b) {
    const double va = v[static_cast<std::size_t>(a)], vb = v[static_cast<std::size_t>(b)];
    return va > vb || (va == vb && a < b);
  };
  std::partial_sort(order.begin(), order.begin() + n, order.end(), before);
  BinaryMask2D m(slice.ny, slice.nx);
  for (Index i = 0; i < n; ++i) m.bits[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1;
  m.provenance = "top-" + format_double(k_percent) + "%";
  return m;
}

double dice(const BinaryMask2D& p, const BinaryMask2D& g) {
  check_same_extent(p, g);
  Index both = 0, sp = 0, sg = 0;
  for (std::size_t i = 0; i < p.bits.size(); ++i) {
    const bool a = p.bits[i] != 0, b = g.bits[i] != 0;
    sp += a;
    sg += b;
    both += a && b;
  }
  if (sp + sg == 0) return 0.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(sp + sg);
}

MaeResult mae_map(const std::vector<BinaryMask2D>& predicted, const std::vector<BinaryMask2D>& truth) {
  if (predicted.empty()) throw ConfigError("MAE map needs at least one subject");
  if (predicted.size() != truth.size()) throw ConfigError("MAE map needs paired mask lists");
  MaeResult r;
  r.field = SliceImage(predicted.front().ny, predicted.front().nx);
  for (std::size_t s = 0; s < predicted.size(); ++s) {
    check_same_extent(predicted[s], predicted.front());
    check_same_extent(predicted[s], truth[s]);
    for (std::size_t i = 0; i < r.field.values.size(); ++i) {
      r.field.values[i] += (predicted[s].bits[i] != 0) != (truth[s].bits[i] != 0) ? 1.0 : 0.0;
    }
  }
  for (double& v : r.field.values) {
    v /= static_cast<double>(predicted.size());
    r.mean += v;
  }
  r.mean /= static_cast<double>(r.field.values.size());
  r.field.provenance["source"] = "mae";
  r.field.provenance["subjects"] = std::to_string(predicted.size());
  return r;
}

SliceImage mean_segmented_heatmap(const std::vector<BinaryMask2D>& masks) {
  if (masks.empty()) throw ConfigError("mean heatmap needs at least one mask");
  SliceImage h(masks.front().ny, masks.front().nx);
  for (const auto& m : masks) {
    check_same_extent(m, masks.front());
    for (std::size_t i = 0; i < h.values.size(); ++i) h.values[i] += m.bits[i] != 0;
  }
  for (double& v : h.values) v /= static_cast<double>(masks.size());
  h.provenance["source"] = "mean-segmented-heatmap";
  h.provenance["subjects"] = std::to_string(masks.size());
  return h;
}

InterpRecord evaluate_subject(const Volume& image, int label, const AttentionMap& map,
                              const std::vector<double>& k_percents, BinaryMask2D* truth_out,
                              std::vector<BinaryMask2D>* predicted_out) {
  if (!(image.extent == map.extent)) {
    throw ShapeError("attention map extent " + extent_string(map.extent) + " differs from image " +
                     extent_string(image.extent));
  }
  InterpRecord r;
  r.subject = map.subject;
  r.method = std::string(method_name(map.method));
  r.label = label;
  const BinaryMask2D truth = segment_ground_truth(slice_average(image, map.subject), label);
  const SliceImage attention = slice_average(map);
  if (truth.count() == 0) {
    r.excluded = true;
    r.reason = "empty ground-truth mask at threshold " + format_double(ground_truth_threshold(label));
  }
  if (predicted_out) predicted_out->clear();
  for (double k : k_percents) {
    const BinaryMask2D p = topk_binarize(attention, k);
    r.dice.push_back({k, r.excluded ? 0.0 : dice(p, truth)});
    if (predicted_out) predicted_out->push_back(p);
  }
  if (truth_out) *truth_out = truth;
  return r;
}

std::vector<InterpSummary> summarize(const std::vector<InterpRecord>& records) {
  std::vector<std::pair<std::string, std::string>> keys;
  std::map<std::pair<std::string, std::string>, std::map<double, std::vector<double>>> values;
  std::map<std::pair<std::string, std::string>, std::vector<double>> key_ks;
  std::map<std::pair<std::string, std::string>, int> excluded;
  for (const auto& r : records) {
    const auto key = std::make_pair(r.model, r.method);
    if (!values.count(key)) keys.push_back(key);
    auto& per_k = values[key];
    for (const auto& d : r.dice) {
      auto& ks = key_ks[key];
      if (std::find(ks.begin(), ks.end(), d.k_percent) == ks.end()) ks.push_back(d.k_percent);
      auto& bucket = per_k[d.k_percent];
      if (!r.excluded) bucket.push_back(d.dice);
    }
    if (r.excluded) ++excluded[key];
  }
  std::vector<InterpSummary> out;
  for (const auto& key : keys) {
    for (double k : key_ks[key]) {
      const auto& v = values[key][k];
      InterpSummary s;
      s.model = key.first;
      s.method = key.second;
      s.k_percent = k;
      s.n = static_cast<int>(v.size());
      s.excluded = excluded[key];
      if (!v.empty()) {
        s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        if (v.size() > 1) {
          double ss = 0;
          for (double x : v) ss += (x - s.mean) * (x - s.mean);
          s.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
        }
      }
      out.push_back(s);
    }
  }
  return out;
}

std::vector<std::pair<std::string, double>> dice_by_subject(const std::vector<InterpRecord>& records,
                                                            const std::string& model,
                                                            const std::string& method, double k_percent) {
  std::vector<std::pair<std::string, double>> out;
  for (const auto& r : records) {
    if (r.model != model || r.method != method || r.excluded) continue;
    for (const auto& d : r.dice) {
      if (d.k_percent == k_percent) out.emplace_back(r.subject, d.dice);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::string interp_csv_header() { return "model,method,subject,label,fold,k,dice,excluded,reason"; }

std::vector<std::string> interp_csv_rows(const InterpRecord& r) {
  std::vector<std::string> rows;
  for (const auto& d : r.dice) {
    rows.push_back(r.model + "," + r.method + "," + r.subject + "," + std::to_string(r.label) + "," +
                   std::to_string(r.fold) + "," + format_double(d.k_percent) + "," +
                   format_double(d.dice) + "," + (r.excluded ? "1" : "0") + "," + csv_safe(r.reason));
  }
  return rows;
}

std::vector<InterpRecord> parse_interp_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != interp_csv_header()) {
    throw FormatError("interpretation table lacks the expected header");
  }
  std::vector<InterpRecord> out;
  std::map<std::tuple<std::string, std::string, std::string>, std::size_t> index;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 9) {
      throw FormatError("interpretation table line " + std::to_string(line_no) + " has " +
                        std::to_string(f.size()) + " fields, expected 9");
    }
    const auto key = std::make_tuple(f[0], f[1], f[2]);
    auto it = index.find(key);
    if (it == index.end()) {
      InterpRecord r;
      r.model = f[0];
      r.method = f[1];
      r.subject = f[2];
      try {
        r.label = std::stoi(f[3]);
        r.fold = std::stoi(f[4]);
      } catch (const std::exception&) {
        throw FormatError("interpretation table line " + std::to_string(line_no) + " is malformed");
      }
      r.excluded = f[7] == "1";
      r.reason = f[8];
      it = index.emplace(key, out.size()).first;
      out.push_back(std::move(r));
    }
    try {
      out[it->second].dice.push_back({std::stod(f[5]), std::stod(f[6])});
    } catch (const std::exception&) {
      throw FormatError("interpretation table line " + std::to_string(line_no) + " is malformed");
    }
  }
  return out;
}

std::string pgm_bytes(const SliceImage& image) {
  std::string out = "P5\n" + std::to_string(image.nx) + " " + std::to_string(image.ny) + "\n255\n";
  for (double v : image.values) {
    const double c = std::clamp(std::isfinite(v) ? v : 0.0, 0.0, 1.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
  }
  return out;
}

SliceImage mask_image(const BinaryMask2D& mask) {
  SliceImage s(mask.ny, mask.nx);
  for (std::size_t i = 0; i < mask.bits.size(); ++i) s.values[i] = mask.bits[i] ? 1.0 : 0.0;
  s.provenance["source"] = mask.provenance;
  return s;
}

std::string pgm_bytes(const BinaryMask2D& mask) { return pgm_bytes(mask_image(mask)); }

}  // namespace pdinterp

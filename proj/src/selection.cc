#include "pdinterp/selection.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "pdinterp/error.h"
#include "pdinterp/network.h"

namespace pdinterp {

namespace {

std::string fmt(double v, int digits = 4) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

// Subject-sorted copy; throws on duplicates or length mismatches.
ModelClassification sorted(const ModelClassification& m) {
  const std::size_t n = m.subjects.size();
  if (m.labels.size() != n || m.predictions.size() != n || (!m.pd_scores.empty() && m.pd_scores.size() != n) ||
      (!m.folds.empty() && m.folds.size() != n)) {
    throw ConfigError("classification report for '" + m.tag + "' has inconsistent lengths");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return m.subjects[a] < m.subjects[b]; });
  ModelClassification s;
  s.tag = m.tag;
  for (std::size_t i : order) {
    if (!s.subjects.empty() && s.subjects.back() == m.subjects[i]) {
      throw ConfigError("classification report for '" + m.tag + "' repeats subject " + m.subjects[i]);
    }
    s.subjects.push_back(m.subjects[i]);
    s.labels.push_back(m.labels[i]);
    s.predictions.push_back(m.predictions[i]);
    if (!m.pd_scores.empty()) s.pd_scores.push_back(m.pd_scores[i]);
    if (!m.folds.empty()) s.folds.push_back(m.folds[i]);
  }
  return s;
}

ModelSummary summarize_model(const ModelClassification& m) {
  ModelSummary s;
  s.tag = m.tag;
  double correct = 0, tp = 0, pos = 0, tn = 0, neg = 0;
  for (std::size_t i = 0; i < m.labels.size(); ++i) {
    const bool ok = m.labels[i] == m.predictions[i];
    correct += ok;
    if (m.labels[i] == kClassPD) {
      pos += 1;
      tp += ok;
    } else {
      neg += 1;
      tn += ok;
    }
  }
  s.accuracy = m.labels.empty() ? 0 : correct / static_cast<double>(m.labels.size());
  s.sensitivity = pos > 0 ? tp / pos : 0;
  s.specificity = neg > 0 ? tn / neg : 0;
  if (!m.pd_scores.empty() && pos > 0 && neg > 0) s.auc = roc_auc(m.pd_scores, m.labels).auc;
  return s;
}

nlohmann::json test_json(const PairwiseResult& p) {
  return {{"a", p.a},
          {"b", p.b},
          {"test", p.result.test},
          {"method", p.result.method},
          {"statistic", p.result.statistic},
          {"p_value", p.result.p_value},
          {"n", p.result.n},
          {"degenerate", p.result.degenerate}};
}

std::string class_name(int c) { return c == kClassPD ? "PD" : "NC"; }

int parse_class(const std::string& s, std::size_t line) {
  if (s == "PD") return kClassPD;
  if (s == "NC") return kClassNC;
  throw FormatError("classification report line " + std::to_string(line) + ": class '" + s +
                    "' is neither PD nor NC");
}

}  // namespace

std::string classification_csv_header() { return "model,subject,fold,label,prediction,pd_score"; }

std::string classification_csv(const ModelClassification& m) {
  std::string out;
  char score[40];
  for (std::size_t i = 0; i < m.subjects.size(); ++i) {
    std::snprintf(score, sizeof(score), "%.17g", m.pd_scores.empty() ? 0.0 : m.pd_scores[i]);
    out += m.tag + "," + m.subjects[i] + "," + std::to_string(m.folds.empty() ? -1 : m.folds[i]) + "," +
           class_name(m.labels[i]) + "," + class_name(m.predictions[i]) + "," + score + "\n";
  }
  return out;
}

std::vector<ModelClassification> parse_classification_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != classification_csv_header()) {
    throw FormatError("classification report must start with '" + classification_csv_header() + "'");
  }
  std::map<std::string, ModelClassification> by_tag;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 6) throw FormatError("classification report line " + std::to_string(n) + " has " +
                                         std::to_string(f.size()) + " fields, expected 6");
    auto& m = by_tag[f[0]];
    m.tag = f[0];
    m.subjects.push_back(f[1]);
    try {
      m.folds.push_back(std::stoi(f[2]));
      m.pd_scores.push_back(std::stod(f[5]));
    } catch (const std::exception&) {
      throw FormatError("classification report line " + std::to_string(n) + " has a non-numeric field");
    }
    m.labels.push_back(parse_class(f[3], n));
    m.predictions.push_back(parse_class(f[4], n));
  }
  std::vector<ModelClassification> out;
  for (auto& [tag, m] : by_tag) out.push_back(std::move(m));
  return out;
}

ModelSelectionReport select_model(const std::vector<ModelClassification>& input,
                                  const std::vector<InterpRecord>* interp,
                                  const SelectionOptions& options) {
  if (input.size() < 2) throw ConfigError("model selection needs at least two models");
  if (!(options.alpha > 0 && options.alpha < 1)) throw ConfigError("alpha must lie in (0, 1)");
  std::vector<ModelClassification> models;
  for (const auto& m : input) models.push_back(sorted(m));
  for (const auto& m : models) {
    if (m.subjects != models.front().subjects || m.labels != models.front().labels) {
      throw ConfigError("classification reports of '" + m.tag + "' and '" + models.front().tag +
                        "' cover different subjects");
    }
  }
  ModelSelectionReport r;
  r.options = options;
  std::map<std::string, const ModelClassification*> by_tag;
  for (const auto& m : models) {
    if (!by_tag.emplace(m.tag, &m).second) throw ConfigError("model tag '" + m.tag + "' appears twice");
    r.models.push_back(summarize_model(m));
  }
  std::sort(r.models.begin(), r.models.end(), [](const ModelSummary& a, const ModelSummary& b) {
    return a.accuracy != b.accuracy ? a.accuracy > b.accuracy : a.tag < b.tag;
  });
  const std::string leader = r.models.front().tag;
  r.trace.push_back("step 1: rank by accuracy:");
  for (const auto& s : r.models) r.trace.push_back("  " + s.tag + " accuracy " + fmt(s.accuracy));
  if (r.models[1].accuracy == r.models[0].accuracy) {
    r.trace.push_back("  accuracy tie between " + r.models[0].tag + " and " + r.models[1].tag +
                      "; leader by lexicographic tag");
  }
  r.trace.push_back("  leader: " + leader);

  r.candidates.push_back(leader);
  const ModelClassification& lead = *by_tag.at(leader);
  for (std::size_t i = 1; i < r.models.size(); ++i) {
    const ModelClassification& other = *by_tag.at(r.models[i].tag);
    PairwiseResult p{leader, other.tag, mcnemar(lead.predictions, other.predictions, lead.labels, options.mcnemar)};
    const bool separable = p.result.p_value < options.alpha;
    r.trace.push_back("step 2: McNemar " + leader + " vs " + other.tag + ": statistic " +
                      fmt(p.result.statistic) + ", p " + fmt(p.result.p_value) +
                      (separable ? " < " : " >= ") + fmt(options.alpha, 3) +
                      (separable ? " (significantly different)" : " (not significantly different)"));
    if (!separable) r.candidates.push_back(other.tag);
    r.mcnemar.push_back(std::move(p));
  }
  if (r.candidates.size() == 1) {
    r.recommended = leader;
    r.decided_at_step = 1;
    r.trace.push_back("decision: " + leader + " is significantly more accurate than every other model");
    return r;
  }

  if (interp == nullptr || interp->empty()) {
    throw MissingArtifactError(
        "models " + r.candidates.front() + " and " + r.candidates[1] +
        " are not significantly different; interpretation records (run 'evaluate') are required");
  }
  std::map<std::string, std::vector<std::pair<std::string, double>>> dice;
  for (auto& s : r.models) {
    const auto v = dice_by_subject(*interp, s.tag, options.method, options.k_percent);
    dice[s.tag] = v;
    if (v.empty()) continue;
    s.has_dice = true;
    s.dice_n = static_cast<int>(v.size());
    double sum = 0;
    for (const auto& [id, d] : v) sum += d;
    s.dice_mean = sum / static_cast<double>(v.size());
    double ss = 0;
    for (const auto& [id, d] : v) ss += (d - s.dice_mean) * (d - s.dice_mean);
    s.dice_sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  }
  auto summary = [&](const std::string& tag) -> const ModelSummary& {
    for (const auto& s : r.models) {
      if (s.tag == tag) return s;
    }
    throw ConfigError("unknown model " + tag);
  };
  for (const auto& tag : r.candidates) {
    if (!summary(tag).has_dice) {
      throw MissingArtifactError("no " + options.method + " top-" + fmt(options.k_percent, 1) +
                                 "% Dice records for model '" + tag + "'; run 'evaluate' for it");
    }
  }
  std::string best = r.candidates.front();
  for (const auto& tag : r.candidates) {
    const double m = summary(tag).dice_mean, mb = summary(best).dice_mean;
    if (m > mb || (m == mb && tag < best)) best = tag;
  }
  r.trace.push_back("step 3: " + options.method + " top-" + fmt(options.k_percent, 1) + "% Dice among candidates:");
  for (const auto& tag : r.candidates) {
    r.trace.push_back("  " + tag + " Dice " + fmt(summary(tag).dice_mean) + " +/- " + fmt(summary(tag).dice_sd) +
                      " (n " + std::to_string(summary(tag).dice_n) + ")");
  }
  bool chosen_by_interp = false;
  for (const auto& tag : r.candidates) {
    if (tag == best) continue;
    // Pair on subjects scored for both models.
    std::map<std::string, double> other(dice[tag].begin(), dice[tag].end());
    std::vector<double> a, b;
    for (const auto& [id, d] : dice[best]) {
      auto it = other.find(id);
      if (it == other.end()) continue;
      a.push_back(d);
      b.push_back(it->second);
    }
    PairwiseResult p{best, tag, {}};
    std::string note;
    try {
      p.result = wilcoxon_signed_rank(a, b);
    } catch (const ConfigError& e) {
      p.result.test = "wilcoxon-signed-rank";
      p.result.method = "insufficient";
      p.result.degenerate = true;
      note = std::string(" (") + e.what() + ")";
    }
    const bool better = !p.result.degenerate && p.result.p_value < options.alpha;
    r.trace.push_back("  Wilcoxon " + best + " vs " + tag + ": W " + fmt(p.result.statistic) + ", p " +
                      fmt(p.result.p_value) + (better ? " (significant)" : " (not significant)") + note);
    if (tag == leader) chosen_by_interp = better;
    r.wilcoxon.push_back(std::move(p));
  }
  if (best != leader && chosen_by_interp) {
    r.recommended = best;
    r.decided_at_step = 3;
    r.trace.push_back("decision: " + best + " interprets significantly better than accuracy leader " + leader);
  } else {
    r.recommended = leader;
    r.decided_at_step = 3;
    r.trace.push_back(best == leader
                          ? "decision: accuracy leader " + leader + " also has the highest Dice"
                          : "decision: no candidate interprets significantly better; keeping accuracy leader " +
                                leader);
  }
  return r;
}

std::string selection_report_json(const ModelSelectionReport& r) {
  using nlohmann::json;
  json models = json::array();
  for (const auto& s : r.models) {
    json m{{"tag", s.tag},
           {"accuracy", s.accuracy},
           {"sensitivity", s.sensitivity},
           {"specificity", s.specificity},
           {"auc", s.auc}};
    if (s.has_dice) m["dice"] = {{"mean", s.dice_mean}, {"sd", s.dice_sd}, {"n", s.dice_n}};
    models.push_back(m);
  }
  json mc = json::array(), wx = json::array();
  for (const auto& p : r.mcnemar) mc.push_back(test_json(p));
  for (const auto& p : r.wilcoxon) wx.push_back(test_json(p));
  json j{{"procedure", "accuracy rank, McNemar screen, interpretation Dice tie-break (codified flow chart)"},
         {"options",
          {{"alpha", r.options.alpha}, {"method", r.options.method}, {"k_percent", r.options.k_percent}}},
         {"models", models},
         {"mcnemar", mc},
         {"wilcoxon", wx},
         {"candidates", r.candidates},
         {"recommended", r.recommended},
         {"decided_at_step", r.decided_at_step},
         {"trace", r.trace}};
  return j.dump(2) + "\n";
}

}  // namespace pdinterp

#ifndef PDINTERP_SELECTION_H_
#define PDINTERP_SELECTION_H_

// Model selection with interpretation feedback: rank by accuracy, keep the
// models McNemar cannot separate from the leader, and let a significantly
// better interpretation Dice decide among them.

#include <string>
#include <vector>

#include "pdinterp/interp_eval.h"
#include "pdinterp/stats.h"

namespace pdinterp {

// Out-of-fold test predictions of one model, one entry per subject.
struct ModelClassification {
  std::string tag;
  std::vector<std::string> subjects;
  std::vector<int> labels;
  std::vector<int> predictions;
  std::vector<double> pd_scores;  // PD probability, for ROC
  std::vector<int> folds;         // test fold per subject; may be empty
};

// "model,subject,fold,label,prediction,pd_score" with PD/NC class names.
std::string classification_csv_header();
std::string classification_csv(const ModelClassification& m);
// Models in tag order. Throws FormatError on malformed rows.
std::vector<ModelClassification> parse_classification_csv(const std::string& text);

struct SelectionOptions {
  double alpha = 0.05;
  std::string method = "guided_backprop";
  double k_percent = 1.0;
  McNemarMethod mcnemar = McNemarMethod::kChiSquare;
};

struct ModelSummary {
  std::string tag;
  double accuracy = 0;
  double sensitivity = 0;
  double specificity = 0;
  double auc = 0;
  bool has_dice = false;
  double dice_mean = 0;
  double dice_sd = 0;
  int dice_n = 0;
};

struct PairwiseResult {
  std::string a;
  std::string b;
  TestResult result;
};

struct ModelSelectionReport {
  std::vector<ModelSummary> models;  // ranked: accuracy desc, then tag asc
  std::vector<PairwiseResult> mcnemar;
  std::vector<PairwiseResult> wilcoxon;
  std::vector<std::string> candidates;
  std::string recommended;
  int decided_at_step = 0;  // 1: accuracy, 3: interpretation feedback
  std::vector<std::string> trace;
  SelectionOptions options;
};

// Throws ConfigError for fewer than two models or unaligned subject sets and
// MissingArtifactError when interpretation records are needed but absent.
ModelSelectionReport select_model(const std::vector<ModelClassification>& models,
                                  const std::vector<InterpRecord>* interp,
                                  const SelectionOptions& options = {});

std::string selection_report_json(const ModelSelectionReport& report);

}  // namespace pdinterp

#endif  // PDINTERP_SELECTION_H_

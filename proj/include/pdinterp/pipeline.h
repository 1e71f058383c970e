#ifndef PDINTERP_PIPELINE_H_
#define PDINTERP_PIPELINE_H_

// Run-directory stages behind the command-line tool. Every stage writes a
// stage.json manifest holding the config digest, seed, code version and the
// SHA-256 of each file it produced; manifests carry no timestamps, so
// identical configs give byte-identical manifests.
//
// Layout under RunConfig::out:
//   data/       cohort volumes, structure maps, manifest.jsonl
//   models/     <tag>/fold-NN.ckpt, predictions.csv, history.csv
//   baseline/   sbr.csv, predictions.csv
//   maps/       <tag>/<method>/<subject>.f32 (+ .json sidecar)
//   eval/       interp.csv, summary.csv
//   stats/      classification tables, pairwise tests, ROC points
//   selection/  report.json
//   export/     pgm/ and csv/

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "pdinterp/phantom.h"
#include "pdinterp/selection.h"
#include "pdinterp/training.h"

namespace pdinterp {

struct AttributionConfig {
  std::string reference = "zero";  // zero | mean_nc (NC mean of the fold's training subjects)
  int shap_samples = 2048;
  Index shap_block = 4;
  int grad_cam_layer = -1;
  std::string upsampling = "trilinear";
  std::vector<std::string> subjects;  // empty: every test subject
  int max_subjects_per_fold = 0;      // 0: no cap
};

struct RunConfig {
  std::uint64_t seed = 0;
  Grid grid = Grid::kFull;
  std::filesystem::path out = "run";
  std::vector<std::string> models;   // architecture tags
  std::vector<std::string> methods;  // attribution method names
  std::vector<double> topk{10, 1};
  double alpha = 0.05;
  int folds = 10;
  int threads = 1;
  PhantomConfig phantom;
  TrainConfig train;
  AttributionConfig attribution;
  SelectionOptions selection;

  // Copies seed and grid into the phantom and training sections.
  void sync();
  // Throws ConfigError naming the offending field.
  void validate() const;
};

RunConfig default_run_config();
// Overlays a JSON document on `base`; unknown keys are rejected.
RunConfig parse_run_config(const std::string& json_text, RunConfig base = default_run_config());
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = default_run_config());
// Canonical JSON of every field that can change an output (excludes `out`
// and `threads`).
std::string canonical_config_json(const RunConfig& config);
std::string config_digest(const RunConfig& config);

std::string_view code_version();
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

// Exclusive lock on a run directory for the lifetime of the object. Throws
// ConfigError when another command holds it.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& run_dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

using Logger = std::function<void(const std::string&)>;

struct StageResult {
  std::string stage;
  std::filesystem::path manifest;            // stage.json
  std::vector<std::filesystem::path> outputs;  // relative to the run directory
};

std::vector<StageResult> cmd_generate_data(const RunConfig& config, const Logger& log = {});
std::vector<StageResult> cmd_train(const RunConfig& config, const Logger& log = {});
std::vector<StageResult> cmd_baseline(const RunConfig& config, const Logger& log = {});
std::vector<StageResult> cmd_attribute(const RunConfig& config, const Logger& log = {});
std::vector<StageResult> cmd_evaluate(const RunConfig& config, const Logger& log = {});
std::vector<StageResult> cmd_stats(const RunConfig& config, const Logger& log = {});

struct SelectionInputs {
  std::filesystem::path classification;  // empty: <out>/stats/classification_report.csv
  std::filesystem::path interp;          // empty: <out>/eval/interp.csv
};

// Pure function of the two report files; writes selection/report.json.
std::vector<StageResult> cmd_select_model(const RunConfig& config, const SelectionInputs& inputs,
                                          ModelSelectionReport* report_out = nullptr,
                                          const Logger& log = {});

// format: pgm | csv
std::vector<StageResult> cmd_export(const RunConfig& config, const std::string& format,
                                    const Logger& log = {});

// Table II layout: one row per model with fold mean and SD of accuracy,
// sensitivity and specificity (percent) plus pooled AUC.
std::string classification_table_csv(const std::vector<ModelClassification>& models);
// Table III layout: one row per (k, model), mean and SD (percent) per method.
std::string interp_table_csv(const std::vector<InterpRecord>& records,
                             const std::vector<std::string>& models,
                             const std::vector<std::string>& methods, const std::vector<double>& ks);

}  // namespace pdinterp

#endif  // PDINTERP_PIPELINE_H_

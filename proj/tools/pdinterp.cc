// Command-line front end: one subcommand per pipeline stage.
//
// Exit codes: 0 success, 2 configuration error, 3 missing prerequisite,
// 4 numerical failure, 1 anything else.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pdinterp/error.h"
#include "pdinterp/pipeline.h"

namespace {

using namespace pdinterp;

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> models;
  std::vector<std::string> methods;
  std::vector<double> topk;
  std::optional<double> alpha;
  std::string out;
  std::string grid;
  std::optional<int> threads;
  std::optional<int> folds;
  std::vector<std::string> subjects;
  std::string classification;
  std::string interp;
  std::string format;
};

RunConfig effective_config(const Flags& f) {
  RunConfig c = f.config.empty() ? default_run_config() : load_run_config(f.config);
  if (f.seed) c.seed = *f.seed;
  if (!f.models.empty()) c.models = f.models;
  if (!f.methods.empty()) c.methods = f.methods;
  if (!f.topk.empty()) c.topk = f.topk;
  if (f.alpha) c.alpha = *f.alpha;
  if (!f.out.empty()) c.out = f.out;
  if (!f.grid.empty()) c.grid = parse_grid(f.grid);
  if (f.threads) c.threads = *f.threads;
  if (f.folds) c.folds = *f.folds;
  if (!f.subjects.empty()) c.attribution.subjects = f.subjects;
  c.sync();
  c.validate();
  return c;
}

void report(const std::vector<StageResult>& results) {
  for (const auto& r : results) {
    std::cout << r.stage << ": " << r.outputs.size() << " outputs, manifest " << r.manifest.string() << "\n";
  }
}

int run(CLI::App& app, const Flags& f) {
  const Logger log = [](const std::string& s) { std::cerr << s << "\n"; };
  const std::string name = app.get_subcommands().front()->get_name();
  const RunConfig c = effective_config(f);
  if (name == "show-config") {
    std::cout << canonical_config_json(c) << "\n"
              << "digest " << config_digest(c) << "\n";
    return 0;
  }
  RunLock lock(c.out);
  if (name == "generate-data") {
    report(cmd_generate_data(c, log));
  } else if (name == "train") {
    report(cmd_train(c, log));
  } else if (name == "baseline") {
    report(cmd_baseline(c, log));
  } else if (name == "attribute") {
    report(cmd_attribute(c, log));
  } else if (name == "evaluate") {
    report(cmd_evaluate(c, log));
  } else if (name == "stats") {
    report(cmd_stats(c, log));
  } else if (name == "select-model") {
    ModelSelectionReport r;
    report(cmd_select_model(c, {f.classification, f.interp}, &r, log));
    std::cout << "recommended: " << r.recommended << " (decided at step " << r.decided_at_step << ")\n";
  } else if (name == "export") {
    report(cmd_export(c, f.format, log));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Interpretable Parkinson's recognition on synthetic DaT-SPECT phantoms"};
  app.set_version_flag("--version", std::string(pdinterp::code_version()));
  app.require_subcommand(1);
  app.fallthrough();
  Flags f;
  app.add_option("--config", f.config, "JSON run configuration; flags override its values");
  app.add_option("--seed", f.seed, "Master seed");
  app.add_option("--models", f.models, "Architectures (comma separated)")->delimiter(',');
  app.add_option("--methods", f.methods, "Attribution methods (comma separated)")->delimiter(',');
  app.add_option("--topk", f.topk, "Top-k percentages (default 10,1)")->delimiter(',');
  app.add_option("--alpha", f.alpha, "Significance level for model selection (default 0.05)");
  app.add_option("--out", f.out, "Run directory (default ./run)");
  app.add_option("--grid", f.grid, "Voxel grid: full (2 mm) or half (4 mm)");
  app.add_option("--threads", f.threads, "Worker threads");
  app.add_option("--folds", f.folds, "Cross-validation folds (default 10)");

  app.add_subcommand("generate-data", "Synthesize the phantom cohort");
  app.add_subcommand("train", "Cross-validate the CNN architectures");
  app.add_subcommand("baseline", "SBR features and the linear SVM baseline");
  auto* attribute = app.add_subcommand("attribute", "Attention maps for test subjects");
  attribute->add_option("--subjects", f.subjects, "Restrict to these subject ids (comma separated)")->delimiter(',');
  app.add_subcommand("evaluate", "Dice scores of attention maps against the striatal ground truth");
  app.add_subcommand("stats", "Classification and interpretation tables and significance tests");
  auto* select = app.add_subcommand("select-model", "Accuracy ranking with interpretation feedback");
  select->add_option("--classification", f.classification, "Classification report CSV");
  select->add_option("--interp", f.interp, "Interpretation report CSV");
  auto* exp = app.add_subcommand("export", "Graymap images or CSV tables");
  exp->add_option("--format", f.format, "pgm or csv")->required();
  app.add_subcommand("show-config", "Print the effective configuration and its digest");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    return run(app, f);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const MissingArtifactError& e) {
    std::cerr << "missing prerequisite: " << e.what() << "\n";
    return 3;
  } catch (const FormatError& e) {
    std::cerr << "unreadable artifact: " << e.what() << "\n";
    return 3;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

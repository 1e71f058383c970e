#include "pdinterp/pipeline.h"

#include <fcntl.h>
#include <openssl/evp.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include "json.hpp"
#include "pdinterp/attribution.h"
#include "pdinterp/checkpoint.h"
#include "pdinterp/error.h"
#include "pdinterp/interp_eval.h"
#include "pdinterp/sbr.h"
#include "pdinterp/stats.h"

#ifndef PDINTERP_VERSION
#define PDINTERP_VERSION "0.0.0"
#endif

namespace pdinterp {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt(double v, const char* spec = "%.17g") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

// "10", "1", "0.5"
std::string k_label(double k) { return fmt(k, "%g"); }

void write_file(const fs::path& path, const std::string& bytes) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing " + path.string());
}

std::string read_file(const fs::path& path, const std::string& producer) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("missing " + path.string() + " (run '" + producer + "' first)");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void require_file(const fs::path& path, const std::string& producer) {
  if (!fs::exists(path)) throw MissingArtifactError("missing " + path.string() + " (run '" + producer + "' first)");
}

void log_line(const Logger& log, const std::string& s) {
  if (log) log(s);
}

void check_keys(const json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError("unknown config key '" + where + (where.empty() ? "" : ".") + key + "'");
    }
  }
}

template <typename T>
void read_key(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + where + (where.empty() ? "" : ".") + key + "' has the wrong type");
  }
}

void read_range(const json& j, const char* key, Range& out, const std::string& where) {
  std::vector<double> v;
  read_key(j, key, v, where);
  if (!j.contains(key)) return;
  if (v.size() != 2) throw ConfigError("config key '" + where + "." + key + "' must be [lo, hi]");
  out = {v[0], v[1]};
}

McNemarMethod parse_mcnemar(const std::string& s) {
  if (s == "chi-square") return McNemarMethod::kChiSquare;
  if (s == "exact") return McNemarMethod::kExact;
  if (s == "auto") return McNemarMethod::kAuto;
  throw ConfigError("selection.mcnemar must be chi-square, exact or auto, got '" + s + "'");
}

std::string mcnemar_name(McNemarMethod m) {
  switch (m) {
    case McNemarMethod::kExact:
      return "exact";
    case McNemarMethod::kAuto:
      return "auto";
    default:
      return "chi-square";
  }
}

// ---- run-directory helpers ---------------------------------------------

struct Paths {
  fs::path out;
  fs::path data() const { return out / "data"; }
  fs::path manifest() const { return data() / "manifest.jsonl"; }
  fs::path model(const std::string& tag) const { return out / "models" / tag; }
  fs::path checkpoint(const std::string& tag, int fold) const {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "fold-%02d.ckpt", fold);
    return model(tag) / buf;
  }
  fs::path predictions(const std::string& tag) const { return model(tag) / "predictions.csv"; }
  fs::path baseline() const { return out / "baseline"; }
  fs::path maps(const std::string& tag, const std::string& method) const { return out / "maps" / tag / method; }
  fs::path eval() const { return out / "eval"; }
  fs::path stats() const { return out / "stats"; }
  fs::path selection() const { return out / "selection"; }
  fs::path exports() const { return out / "export"; }
};

StageResult write_stage_manifest(const RunConfig& config, const std::string& stage, const fs::path& dir,
                                 std::vector<fs::path> outputs, const std::vector<fs::path>& inputs = {}) {
  std::sort(outputs.begin(), outputs.end());
  json outs = json::array(), ins = json::array();
  for (const auto& rel : outputs) {
    outs.push_back({{"path", rel.generic_string()}, {"sha256", sha256_file(config.out / rel)}});
  }
  for (const auto& p : inputs) {
    // Inputs inside the run directory are recorded relative to it.
    const fs::path rel = fs::weakly_canonical(p).lexically_relative(fs::weakly_canonical(config.out));
    const bool inside = !rel.empty() && *rel.begin() != "..";
    ins.push_back({{"path", (inside ? rel : p).generic_string()}, {"sha256", sha256_file(p)}});
  }
  json m{{"stage", stage},
         {"config_digest", config_digest(config)},
         {"seed", config.seed},
         {"code_version", std::string(code_version())},
         {"grid", std::string(grid_name(config.grid))},
         {"outputs", outs}};
  if (!inputs.empty()) m["inputs"] = ins;
  StageResult r{stage, dir / "stage.json", outputs};
  write_file(r.manifest, m.dump(2) + "\n");
  return r;
}

fs::path rel(const RunConfig& c, const fs::path& p) { return fs::relative(p, c.out); }

struct Cohort {
  std::vector<SubjectRecord> records;
  std::map<std::string, std::size_t> index;  // subject id -> record
};

Cohort load_cohort(const RunConfig& config) {
  const Paths paths{config.out};
  require_file(paths.manifest(), "generate-data");
  Cohort c;
  c.records = read_manifest(paths.manifest());
  for (std::size_t i = 0; i < c.records.size(); ++i) c.index[c.records[i].id] = i;
  return c;
}

Volume load_subject(const RunConfig& config, const SubjectRecord& r) {
  Volume v = load_volume(Paths{config.out}.data() / r.volume_path);
  if (v.extent != grid_extent(config.grid)) {
    throw ConfigError("cohort volumes are not on the " + std::string(grid_name(config.grid)) +
                      " grid; rerun generate-data with the same --grid");
  }
  return v;
}

Dataset load_dataset(const RunConfig& config, const Cohort& cohort) {
  Dataset d;
  d.extent = grid_extent(config.grid);
  for (const auto& r : cohort.records) {
    d.ids.push_back(r.id);
    d.labels.push_back(r.label);
    d.volumes.push_back(load_subject(config, r));
  }
  return d;
}

std::vector<int> labels_of(const Cohort& c) {
  std::vector<int> l;
  for (const auto& r : c.records) l.push_back(r.label);
  return l;
}

// Test fold of every subject index.
std::vector<int> test_fold_of(const FoldPlan& plan, std::size_t n) {
  std::vector<int> f(n, -1);
  for (std::size_t k = 0; k < plan.folds.size(); ++k)
    for (int i : plan.folds[k].test) f[static_cast<std::size_t>(i)] = static_cast<int>(k);
  return f;
}

ModelClassification sorted_by_subject(ModelClassification m) {
  std::vector<std::size_t> order(m.subjects.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return m.subjects[a] < m.subjects[b]; });
  ModelClassification s{m.tag, {}, {}, {}, {}, {}};
  for (std::size_t i : order) {
    s.subjects.push_back(m.subjects[i]);
    s.labels.push_back(m.labels[i]);
    s.predictions.push_back(m.predictions[i]);
    s.pd_scores.push_back(m.pd_scores[i]);
    s.folds.push_back(m.folds[i]);
  }
  return s;
}

ModelClassification load_predictions(const fs::path& path, const std::string& producer) {
  const auto models = parse_classification_csv(read_file(path, producer));
  if (models.size() != 1) throw FormatError(path.string() + " must hold exactly one model");
  return models.front();
}

double sample_sd(const std::vector<double>& v, double mean) {
  if (v.size() < 2) return 0;
  double ss = 0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace

// ---- configuration -------------------------------------------------------

void RunConfig::sync() {
  phantom.seed = seed;
  phantom.grid = grid;
  train.seed = seed;
}

void RunConfig::validate() const {
  if (models.empty()) throw ConfigError("models: at least one architecture tag is required");
  for (const auto& m : models) {
    const auto& tags = architecture_tags();
    if (std::find(tags.begin(), tags.end(), m) == tags.end()) {
      throw ConfigError("models: unknown architecture '" + m + "' (expected pdnet, pdnet_bn, deep_pdnet or deep_pdnet_bn)");
    }
  }
  if (std::set<std::string>(models.begin(), models.end()).size() != models.size()) {
    throw ConfigError("models: duplicate architecture tag");
  }
  if (methods.empty()) throw ConfigError("methods: at least one attribution method is required");
  for (const auto& m : methods) parse_method(m);
  if (topk.empty()) throw ConfigError("topk: at least one percentage is required");
  for (double k : topk) {
    if (!(k > 0 && k <= 100)) throw ConfigError("topk: percentages must lie in (0, 100], got " + fmt(k, "%g"));
  }
  if (!(alpha > 0 && alpha < 1)) throw ConfigError("alpha must lie in (0, 1)");
  if (folds < 3) throw ConfigError("folds must be at least 3");
  if (threads < 1) throw ConfigError("threads must be at least 1");
  phantom.validate();
  train.validate();
  if (attribution.reference != "zero" && attribution.reference != "mean_nc") {
    throw ConfigError("attribution.reference must be zero or mean_nc");
  }
  if (attribution.shap_samples < 1) throw ConfigError("attribution.shap_samples must be positive");
  if (attribution.shap_block < 1) throw ConfigError("attribution.shap_block must be positive");
  if (attribution.upsampling != "trilinear" && attribution.upsampling != "nearest") {
    throw ConfigError("attribution.upsampling must be trilinear or nearest");
  }
  if (attribution.max_subjects_per_fold < 0) throw ConfigError("attribution.max_subjects_per_fold must be >= 0");
  parse_method(selection.method);
  if (!(selection.k_percent > 0 && selection.k_percent <= 100)) {
    throw ConfigError("selection.k_percent must lie in (0, 100]");
  }
}

RunConfig default_run_config() {
  RunConfig c;
  c.models = architecture_tags();
  for (Method m : all_methods()) c.methods.emplace_back(method_name(m));
  c.sync();
  return c;
}

RunConfig parse_run_config(const std::string& text, RunConfig c) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(j, {"seed", "grid", "out", "models", "methods", "topk", "alpha", "folds", "threads", "phantom", "train",
                 "attribution", "selection"},
             "");
  read_key(j, "seed", c.seed, "");
  if (j.contains("grid")) {
    std::string g;
    read_key(j, "grid", g, "");
    c.grid = parse_grid(g);
  }
  if (j.contains("out")) {
    std::string o;
    read_key(j, "out", o, "");
    c.out = o;
  }
  read_key(j, "models", c.models, "");
  read_key(j, "methods", c.methods, "");
  read_key(j, "topk", c.topk, "");
  read_key(j, "alpha", c.alpha, "");
  read_key(j, "folds", c.folds, "");
  read_key(j, "threads", c.threads, "");
  if (j.contains("phantom")) {
    const json& p = j["phantom"];
    check_keys(p, {"cohort_size", "pd_ratio", "nc_ratio", "striatal_uptake", "depletion", "asymmetry_probability",
                   "noise_level", "psf_fwhm_mm", "template_version"},
               "phantom");
    if (p.contains("template_version")) {
      int v = 0;
      read_key(p, "template_version", v, "phantom");
      if (v != kPhantomTemplateVersion) {
        throw ConfigError("phantom.template_version " + std::to_string(v) + " does not match this build (" +
                          std::to_string(kPhantomTemplateVersion) + ")");
      }
    }
    read_key(p, "cohort_size", c.phantom.cohort_size, "phantom");
    read_key(p, "pd_ratio", c.phantom.pd_ratio, "phantom");
    read_key(p, "nc_ratio", c.phantom.nc_ratio, "phantom");
    read_range(p, "striatal_uptake", c.phantom.striatal_uptake, "phantom");
    read_range(p, "depletion", c.phantom.depletion, "phantom");
    read_key(p, "asymmetry_probability", c.phantom.asymmetry_probability, "phantom");
    read_key(p, "noise_level", c.phantom.noise_level, "phantom");
    read_key(p, "psf_fwhm_mm", c.phantom.psf_fwhm_mm, "phantom");
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    check_keys(t, {"epochs", "momentum", "lr_start", "lr_end", "batch_size", "class_weighting"}, "train");
    read_key(t, "epochs", c.train.epochs, "train");
    read_key(t, "momentum", c.train.momentum, "train");
    read_key(t, "lr_start", c.train.lr_start, "train");
    read_key(t, "lr_end", c.train.lr_end, "train");
    read_key(t, "batch_size", c.train.batch_size, "train");
    read_key(t, "class_weighting", c.train.class_weighting, "train");
  }
  if (j.contains("attribution")) {
    const json& a = j["attribution"];
    check_keys(a, {"reference", "shap_samples", "shap_block", "grad_cam_layer", "upsampling", "subjects",
                   "max_subjects_per_fold"},
               "attribution");
    read_key(a, "reference", c.attribution.reference, "attribution");
    read_key(a, "shap_samples", c.attribution.shap_samples, "attribution");
    read_key(a, "shap_block", c.attribution.shap_block, "attribution");
    read_key(a, "grad_cam_layer", c.attribution.grad_cam_layer, "attribution");
    read_key(a, "upsampling", c.attribution.upsampling, "attribution");
    read_key(a, "subjects", c.attribution.subjects, "attribution");
    read_key(a, "max_subjects_per_fold", c.attribution.max_subjects_per_fold, "attribution");
  }
  if (j.contains("selection")) {
    const json& s = j["selection"];
    check_keys(s, {"method", "k_percent", "mcnemar"}, "selection");
    read_key(s, "method", c.selection.method, "selection");
    read_key(s, "k_percent", c.selection.k_percent, "selection");
    if (s.contains("mcnemar")) {
      std::string m;
      read_key(s, "mcnemar", m, "selection");
      c.selection.mcnemar = parse_mcnemar(m);
    }
  }
  c.sync();
  c.validate();
  return c;
}

RunConfig load_run_config(const fs::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), std::move(base));
}

std::string canonical_config_json(const RunConfig& c) {
  const auto& p = c.phantom;
  const auto& t = c.train;
  const auto& a = c.attribution;
  json j{{"seed", c.seed},
         {"grid", std::string(grid_name(c.grid))},
         {"models", c.models},
         {"methods", c.methods},
         {"topk", c.topk},
         {"alpha", c.alpha},
         {"folds", c.folds},
         {"phantom",
          {{"cohort_size", p.cohort_size},
           {"pd_ratio", p.pd_ratio},
           {"nc_ratio", p.nc_ratio},
           {"striatal_uptake", {p.striatal_uptake.lo, p.striatal_uptake.hi}},
           {"depletion", {p.depletion.lo, p.depletion.hi}},
           {"asymmetry_probability", p.asymmetry_probability},
           {"noise_level", p.noise_level},
           {"psf_fwhm_mm", p.psf_fwhm_mm},
           {"template_version", kPhantomTemplateVersion}}},
         {"train",
          {{"epochs", t.epochs},
           {"momentum", t.momentum},
           {"lr_start", t.lr_start},
           {"lr_end", t.lr_end},
           {"batch_size", t.batch_size},
           {"class_weighting", t.class_weighting}}},
         {"attribution",
          {{"reference", a.reference},
           {"shap_samples", a.shap_samples},
           {"shap_block", a.shap_block},
           {"grad_cam_layer", a.grad_cam_layer},
           {"upsampling", a.upsampling},
           {"subjects", a.subjects},
           {"max_subjects_per_fold", a.max_subjects_per_fold}}},
         {"selection",
          {{"method", c.selection.method},
           {"k_percent", c.selection.k_percent},
           {"mcnemar", mcnemar_name(c.selection.mcnemar)}}}};
  return j.dump();
}

std::string config_digest(const RunConfig& config) { return sha256_hex(canonical_config_json(config)); }

std::string_view code_version() { return PDINTERP_VERSION; }

std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw NumericalError("SHA-256 digest failed");
  }
  static const char* kHex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[md[i] >> 4];
    out += kHex[md[i] & 15];
  }
  return out;
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot hash missing file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return sha256_hex(ss.str());
}

RunLock::RunLock(const fs::path& run_dir) : path_(run_dir / ".lock") {
  fs::create_directories(run_dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    if (errno == EEXIST) {
      throw ConfigError("run directory " + run_dir.string() + " is locked by another command (" + path_.string() +
                        "); remove the lock file if no command is running");
    }
    throw ConfigError("cannot create lock file " + path_.string() + ": " + std::strerror(errno));
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

// ---- stages --------------------------------------------------------------

std::vector<StageResult> cmd_generate_data(const RunConfig& config, const Logger& log) {
  config.validate();
  const Paths paths{config.out};
  log_line(log, "generating " + std::to_string(config.phantom.cohort_size) + " subjects on the " +
                    std::string(grid_name(config.grid)) + " grid");
  const auto records = write_cohort(config.phantom, paths.data(), config.threads);
  std::vector<fs::path> outputs{rel(config, paths.manifest())};
  for (const auto& r : records) {
    for (const auto& f : {r.volume_path, r.structure_path}) {
      const fs::path raw = paths.data() / f;
      outputs.push_back(rel(config, raw));
      outputs.push_back(rel(config, sidecar_path(raw)));
    }
  }
  return {write_stage_manifest(config, "generate-data", paths.data(), outputs)};
}

std::vector<StageResult> cmd_train(const RunConfig& config, const Logger& log) {
  config.validate();
  const Paths paths{config.out};
  const Cohort cohort = load_cohort(config);
  const Dataset data = load_dataset(config, cohort);
  const FoldPlan plan = make_fold_plan(data.labels, config.seed, config.folds);
  std::vector<StageResult> results;
  for (const auto& tag : config.models) {
    const NetworkSpec spec = build_network(tag, config.grid);
    log_line(log, "training " + tag + " on " + std::to_string(data.ids.size()) + " subjects, " +
                      std::to_string(config.folds) + " folds");
    const auto folds = cross_validate(spec, data, plan, config.train, config.threads, [&](const EpochLog& e) {
      log_line(log, tag + " fold " + std::to_string(e.fold) + " epoch " + std::to_string(e.epoch) + " lr " +
                        fmt(e.lr, "%.3e") + " train loss " + fmt(e.train_loss, "%.4f") + " val loss " +
                        fmt(e.validation_loss, "%.4f") + " val acc " + fmt(e.validation_accuracy, "%.3f"));
    });
    std::vector<fs::path> outputs;
    ModelClassification m{tag, {}, {}, {}, {}, {}};
    std::string history = "fold,epoch,lr,train_loss,validation_loss,validation_accuracy\n";
    for (const auto& f : folds) {
      const fs::path ckpt = paths.checkpoint(tag, f.fold);
      fs::create_directories(ckpt.parent_path());
      save_checkpoint(spec, f.best, ckpt);
      outputs.push_back(rel(config, ckpt));
      for (std::size_t i = 0; i < f.test_ids.size(); ++i) {
        const auto id = static_cast<std::size_t>(f.test_ids[i]);
        m.subjects.push_back(data.ids[id]);
        m.labels.push_back(data.labels[id]);
        m.predictions.push_back(f.test.predictions[i]);
        m.pd_scores.push_back(f.test.scores[i]);
        m.folds.push_back(f.fold);
      }
      for (const auto& e : f.history) {
        history += std::to_string(e.fold) + "," + std::to_string(e.epoch) + "," + fmt(e.lr) + "," +
                   fmt(e.train_loss) + "," + fmt(e.validation_loss) + "," + fmt(e.validation_accuracy) + "\n";
      }
      log_line(log, tag + " fold " + std::to_string(f.fold) + " test accuracy " + fmt(f.test.accuracy, "%.4f") +
                        " (best epoch " + std::to_string(f.best_epoch) + ")");
    }
    write_file(paths.predictions(tag), classification_csv_header() + "\n" + classification_csv(sorted_by_subject(m)));
    write_file(paths.model(tag) / "history.csv", history);
    outputs.push_back(rel(config, paths.predictions(tag)));
    outputs.push_back(rel(config, paths.model(tag) / "history.csv"));
    results.push_back(write_stage_manifest(config, "train:" + tag, paths.model(tag), outputs));
  }
  return results;
}

std::vector<StageResult> cmd_baseline(const RunConfig& config, const Logger& log) {
  config.validate();
  const Paths paths{config.out};
  const Cohort cohort = load_cohort(config);
  const FoldPlan plan = make_fold_plan(labels_of(cohort), config.seed, config.folds);
  log_line(log, "extracting SBR features for " + std::to_string(cohort.records.size()) + " subjects");
  std::vector<std::vector<double>> features;
  std::string sbr = sbr_csv_header() + "\n";
  for (const auto& r : cohort.records) {
    const SbrFeatures f = extract_sbr(load_subject(config, r));
    const auto v = f.values();
    features.emplace_back(v.begin(), v.end());
    sbr += sbr_csv_row(r.id, f, r.label) + "\n";
  }
  ModelClassification m{"svm", {}, {}, {}, {}, {}};
  for (std::size_t k = 0; k < plan.folds.size(); ++k) {
    const Fold& fold = plan.folds[k];
    std::vector<std::vector<double>> x, xt;
    std::vector<int> y;
    for (const auto* part : {&fold.train, &fold.validation})
      for (int i : *part) {
        x.push_back(features[static_cast<std::size_t>(i)]);
        y.push_back(cohort.records[static_cast<std::size_t>(i)].label);
      }
    for (int i : fold.test) xt.push_back(features[static_cast<std::size_t>(i)]);
    const SvmModel svm = svm_train(x, y);
    const SvmPrediction p = svm_predict(svm, xt);
    for (std::size_t i = 0; i < fold.test.size(); ++i) {
      const auto& r = cohort.records[static_cast<std::size_t>(fold.test[i])];
      m.subjects.push_back(r.id);
      m.labels.push_back(r.label);
      m.predictions.push_back(p.labels[i]);
      // Logistic squashing of the margin; only its ranking feeds the ROC.
      m.pd_scores.push_back(1.0 / (1.0 + std::exp(-p.margins[i])));
      m.folds.push_back(static_cast<int>(k));
    }
  }
  const auto sorted = sorted_by_subject(m);
  int correct = 0;
  for (std::size_t i = 0; i < sorted.labels.size(); ++i) correct += sorted.labels[i] == sorted.predictions[i];
  log_line(log, "svm out-of-fold accuracy " + fmt(correct / static_cast<double>(sorted.labels.size()), "%.4f"));
  write_file(paths.baseline() / "sbr.csv", sbr);
  write_file(paths.baseline() / "predictions.csv", classification_csv_header() + "\n" + classification_csv(sorted));
  return {write_stage_manifest(config, "baseline", paths.baseline(),
                               {rel(config, paths.baseline() / "sbr.csv"),
                                rel(config, paths.baseline() / "predictions.csv")})};
}

std::vector<StageResult> cmd_attribute(const RunConfig& config, const Logger& log) {
  config.validate();
  const Paths paths{config.out};
  const Cohort cohort = load_cohort(config);
  const FoldPlan plan = make_fold_plan(labels_of(cohort), config.seed, config.folds);
  const Extent3 extent = grid_extent(config.grid);
  std::vector<Method> methods;
  for (const auto& m : config.methods) methods.push_back(parse_method(m));
  const bool shap = std::find(methods.begin(), methods.end(), Method::kKernelShap) != methods.end();

  // Validate every prerequisite before the long-running work.
  for (const auto& tag : config.models)
    for (int k = 0; k < config.folds; ++k) require_file(paths.checkpoint(tag, k), "train");
  std::set<std::string> wanted(config.attribution.subjects.begin(), config.attribution.subjects.end());
  for (const auto& id : wanted) {
    if (!cohort.index.count(id)) throw ConfigError("attribution.subjects: unknown subject '" + id + "'");
  }
  SupervoxelPartition partition;
  if (shap) {
    const double mm = grid_voxel_mm(config.grid);
    partition = block_partition(extent, brain_mask(extent, mm), config.attribution.shap_block);
    // Complementary coalitions give collinear regression rows, so the budget
    // must cover twice the player count.
    const int groups = partition.groups();
    if (groups > ShapOptions{}.max_exact_players && config.attribution.shap_samples < 2 * groups) {
      throw ConfigError("kernel_shap: " + std::to_string(groups) + " super-voxels need at least " +
                        std::to_string(2 * groups) + " sampled coalitions, the budget is " +
                        std::to_string(config.attribution.shap_samples) +
                        "; raise attribution.shap_samples or enlarge attribution.shap_block");
    }
  }

  std::vector<StageResult> results;
  for (const auto& tag : config.models) {
    std::vector<fs::path> outputs;
    for (int k = 0; k < config.folds; ++k) {
      const Fold& fold = plan.folds[static_cast<std::size_t>(k)];
      std::vector<std::string> subjects;
      for (int i : fold.test) {
        const auto& id = cohort.records[static_cast<std::size_t>(i)].id;
        if (wanted.empty() || wanted.count(id)) subjects.push_back(id);
      }
      std::sort(subjects.begin(), subjects.end());
      if (config.attribution.max_subjects_per_fold > 0 &&
          static_cast<int>(subjects.size()) > config.attribution.max_subjects_per_fold) {
        subjects.resize(static_cast<std::size_t>(config.attribution.max_subjects_per_fold));
      }
      if (subjects.empty()) continue;
      const fs::path ckpt_path = paths.checkpoint(tag, k);
      const Checkpoint ckpt = load_checkpoint(ckpt_path);
      const std::string model_digest = sha256_file(ckpt_path);
      const NetworkParams<double> params = ckpt.params.cast<double>();
      Tensor<double> reference = zero_reference(extent);
      if (config.attribution.reference == "mean_nc") {
        std::vector<Volume> nc;
        for (const auto* part : {&fold.train, &fold.validation})
          for (int i : *part) {
            const auto& r = cohort.records[static_cast<std::size_t>(i)];
            if (r.label == kClassNC) nc.push_back(load_subject(config, r));
          }
        std::vector<const Volume*> ptrs;
        for (const auto& v : nc) ptrs.push_back(&v);
        reference = mean_reference(ptrs);
      }
      AttributionRequest req;
      req.spec = &ckpt.spec;
      req.params = &params;
      req.reference = &reference;
      req.partition = shap ? &partition : nullptr;
      req.grad_cam.layer = config.attribution.grad_cam_layer;
      req.grad_cam.upsampling =
          config.attribution.upsampling == "nearest" ? Upsampling::kNearest : Upsampling::kTrilinear;
      req.shap.samples = config.attribution.shap_samples;
      req.shap.seed = config.seed;
      for (const auto& id : subjects) {
        const SubjectRecord& r = cohort.records[cohort.index.at(id)];
        const Volume v = load_subject(config, r);
        const Tensor<double> input = volume_input(v);
        for (Method m : methods) {
          // The target class is the subject's true label.
          const AttentionMap map = attribute(m, req, input, r.label, id);
          const fs::path out = paths.maps(tag, std::string(method_name(m))) / (id + ".f32");
          fs::create_directories(out.parent_path());
          save_attention_map(map, v.spacing_mm, model_digest, out);
          outputs.push_back(rel(config, out));
          outputs.push_back(rel(config, sidecar_path(out)));
        }
        log_line(log, tag + " fold " + std::to_string(k) + " " + id + ": " + std::to_string(methods.size()) + " maps");
      }
    }
    results.push_back(write_stage_manifest(config, "attribute:" + tag, config.out / "maps" / tag, outputs));
  }
  return results;
}

namespace {

// Attention-map files of one (model, method), sorted.
std::vector<fs::path> map_files(const Paths& paths, const std::string& tag, const std::string& method) {
  const fs::path dir = paths.maps(tag, method);
  if (!fs::is_directory(dir)) {
    throw MissingArtifactError("missing attention maps " + dir.string() + " (run 'attribute' first)");
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".f32") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw MissingArtifactError("no attention maps in " + dir.string() + " (run 'attribute' first)");
  return files;
}

std::vector<InterpRecord> load_interp(const fs::path& path) {
  return parse_interp_csv(read_file(path, "evaluate"));
}

}  // namespace

std::vector<StageResult> cmd_evaluate(const RunConfig& config, const Logger& log) {
  config.validate();
  const Paths paths{config.out};
  const Cohort cohort = load_cohort(config);
  const FoldPlan plan = make_fold_plan(labels_of(cohort), config.seed, config.folds);
  const auto fold_of = test_fold_of(plan, cohort.records.size());
  std::map<std::pair<std::string, std::string>, std::vector<fs::path>> files;
  for (const auto& tag : config.models)
    for (const auto& method : config.methods) files[{tag, method}] = map_files(paths, tag, method);

  std::map<std::string, Volume> volumes;
  std::vector<InterpRecord> records;
  for (const auto& tag : config.models)
    for (const auto& method : config.methods) {
      for (const auto& f : files[{tag, method}]) {
        const AttentionMap map = load_attention_map(f);
        auto it = cohort.index.find(map.subject);
        if (it == cohort.index.end()) throw FormatError(f.string() + " names unknown subject '" + map.subject + "'");
        const SubjectRecord& r = cohort.records[it->second];
        if (!volumes.count(r.id)) volumes.emplace(r.id, load_subject(config, r));
        InterpRecord rec = evaluate_subject(volumes.at(r.id), r.label, map, config.topk);
        rec.model = tag;
        rec.method = method;
        rec.subject = r.id;
        rec.label = r.label;
        rec.fold = fold_of[it->second];
        records.push_back(std::move(rec));
      }
      log_line(log, "evaluated " + tag + " / " + method + ": " + std::to_string(files[{tag, method}].size()) + " maps");
    }
  std::string interp = interp_csv_header() + "\n";
  for (const auto& r : records)
    for (const auto& row : interp_csv_rows(r)) interp += row + "\n";
  std::string summary = "model,method,k,mean,sd,n,excluded\n";
  for (const auto& s : summarize(records)) {
    summary += s.model + "," + s.method + "," + k_label(s.k_percent) + "," + fmt(s.mean) + "," + fmt(s.sd) + "," +
               std::to_string(s.n) + "," + std::to_string(s.excluded) + "\n";
  }
  write_file(paths.eval() / "interp.csv", interp);
  write_file(paths.eval() / "summary.csv", summary);
  return {write_stage_manifest(config, "evaluate", paths.eval(),
                               {rel(config, paths.eval() / "interp.csv"), rel(config, paths.eval() / "summary.csv")})};
}

std::string classification_table_csv(const std::vector<ModelClassification>& models) {
  std::string out =
      "model,input_feature,accuracy_mean,accuracy_sd,sensitivity_mean,sensitivity_sd,specificity_mean,"
      "specificity_sd,auc\n";
  for (const auto& m : models) {
    std::map<int, std::vector<std::size_t>> by_fold;
    for (std::size_t i = 0; i < m.subjects.size(); ++i) by_fold[m.folds.empty() ? 0 : m.folds[i]].push_back(i);
    std::vector<double> acc, sen, spe;
    for (const auto& [fold, idx] : by_fold) {
      std::vector<int> l, p;
      std::vector<double> s;
      for (std::size_t i : idx) {
        l.push_back(m.labels[i]);
        p.push_back(m.predictions[i]);
        s.push_back(m.pd_scores[i]);
      }
      const ClassMetrics c = classification_metrics(l, p, s);
      acc.push_back(100 * c.accuracy);
      sen.push_back(100 * c.sensitivity);
      spe.push_back(100 * c.specificity);
    }
    out += m.tag + "," + (m.tag == "svm" ? "SBR" : "SPECT");
    for (const auto* v : {&acc, &sen, &spe}) {
      double mean = 0;
      for (double x : *v) mean += x;
      mean /= static_cast<double>(v->size());
      out += "," + fmt(mean, "%.2f") + "," + fmt(sample_sd(*v, mean), "%.2f");
    }
    out += "," + fmt(roc_auc(m.pd_scores, m.labels).auc, "%.4f") + "\n";
  }
  return out;
}

std::string interp_table_csv(const std::vector<InterpRecord>& records, const std::vector<std::string>& models,
                             const std::vector<std::string>& methods, const std::vector<double>& ks) {
  std::map<std::tuple<std::string, std::string, double>, InterpSummary> s;
  for (const auto& x : summarize(records)) s[{x.model, x.method, x.k_percent}] = x;
  std::string out = "k,model";
  for (const auto& m : methods) out += "," + m + "_mean," + m + "_sd";
  out += "\n";
  for (double k : ks)
    for (const auto& tag : models) {
      out += k_label(k) + "," + tag;
      for (const auto& m : methods) {
        auto it = s.find({tag, m, k});
        out += it == s.end() ? ",," : "," + fmt(100 * it->second.mean, "%.2f") + "," + fmt(100 * it->second.sd, "%.2f");
      }
      out += "\n";
    }
  return out;
}

std::vector<StageResult> cmd_stats(const RunConfig& config, const Logger& log) {
  config.validate();
  const Paths paths{config.out};
  std::vector<ModelClassification> models;
  for (const auto& tag : config.models) models.push_back(load_predictions(paths.predictions(tag), "train"));
  if (fs::exists(paths.baseline() / "predictions.csv")) {
    models.insert(models.begin(), load_predictions(paths.baseline() / "predictions.csv", "baseline"));
  }
  std::vector<fs::path> outputs;
  auto emit = [&](const std::string& name, const std::string& bytes) {
    write_file(paths.stats() / name, bytes);
    outputs.push_back(rel(config, paths.stats() / name));
  };
  emit("classification_table.csv", classification_table_csv(models));
  std::string report = classification_csv_header() + "\n";
  for (const auto& m : models) report += classification_csv(m);
  emit("classification_report.csv", report);

  std::string roc = "model,fpr,tpr\n";
  for (const auto& m : models) {
    const RocCurve c = roc_auc(m.pd_scores, m.labels);
    for (std::size_t i = 0; i < c.fpr.size(); ++i) roc += m.tag + "," + fmt(c.fpr[i]) + "," + fmt(c.tpr[i]) + "\n";
  }
  emit("roc.csv", roc);

  const std::string test_header = "a,b,test,method,statistic,p_value,n,degenerate";
  auto test_row = [&](const std::string& a, const std::string& b, const TestResult& t) {
    return a + "," + b + "," + t.test + "," + t.method + "," + fmt(t.statistic) + "," + fmt(t.p_value) + "," +
           std::to_string(t.n) + "," + (t.degenerate ? "true" : "false") + "\n";
  };
  std::string mc = test_header + "\n";
  for (std::size_t i = 0; i < models.size(); ++i)
    for (std::size_t j = i + 1; j < models.size(); ++j) {
      if (models[i].subjects != models[j].subjects) {
        throw ConfigError("predictions of " + models[i].tag + " and " + models[j].tag + " cover different subjects");
      }
      mc += test_row(models[i].tag, models[j].tag,
                     mcnemar(models[i].predictions, models[j].predictions, models[i].labels, config.selection.mcnemar));
    }
  emit("mcnemar.csv", mc);

  const fs::path interp_path = paths.eval() / "interp.csv";
  if (fs::exists(interp_path)) {
    const auto records = load_interp(interp_path);
    emit("interp_table.csv", interp_table_csv(records, config.models, config.methods, config.topk));
    auto paired = [&](const std::string& ma, const std::string& xa, const std::string& mb, const std::string& xb,
                      double k) -> std::pair<std::vector<double>, std::vector<double>> {
      const auto a = dice_by_subject(records, ma, xa, k);
      const auto bv = dice_by_subject(records, mb, xb, k);
      const std::map<std::string, double> b(bv.begin(), bv.end());
      std::vector<double> va, vb;
      for (const auto& [id, d] : a) {
        auto it = b.find(id);
        if (it == b.end()) continue;
        va.push_back(d);
        vb.push_back(it->second);
      }
      return {va, vb};
    };
    auto wilcoxon_row = [&](const std::string& label_a, const std::string& label_b, const std::vector<double>& a,
                            const std::vector<double>& b) {
      try {
        return test_row(label_a, label_b, wilcoxon_signed_rank(a, b));
      } catch (const ConfigError&) {
        TestResult t;
        t.test = "wilcoxon-signed-rank";
        t.method = "insufficient";
        t.degenerate = true;
        return test_row(label_a, label_b, t);
      }
    };
    const std::string focus = config.selection.method;
    std::string wm = "k,model," + test_header + "\n";
    for (double k : config.topk)
      for (const auto& tag : config.models)
        for (const auto& method : config.methods) {
          if (method == focus) continue;
          const auto [a, b] = paired(tag, focus, tag, method, k);
          wm += k_label(k) + "," + tag + "," + wilcoxon_row(focus, method, a, b);
        }
    emit("wilcoxon_methods.csv", wm);
    std::string wmod = "k,method," + test_header + "\n";
    for (double k : config.topk)
      for (std::size_t i = 0; i < config.models.size(); ++i)
        for (std::size_t j = i + 1; j < config.models.size(); ++j) {
          const auto [a, b] = paired(config.models[i], focus, config.models[j], focus, k);
          wmod += k_label(k) + "," + focus + "," + wilcoxon_row(config.models[i], config.models[j], a, b);
        }
    emit("wilcoxon_models.csv", wmod);
  } else {
    log_line(log, "no " + interp_path.string() + "; interpretation tables skipped");
  }
  return {write_stage_manifest(config, "stats", paths.stats(), outputs)};
}

std::vector<StageResult> cmd_select_model(const RunConfig& config, const SelectionInputs& inputs,
                                          ModelSelectionReport* report_out, const Logger& log) {
  config.validate();
  const Paths paths{config.out};
  const fs::path cls = inputs.classification.empty() ? paths.stats() / "classification_report.csv" : inputs.classification;
  const fs::path interp = inputs.interp.empty() ? paths.eval() / "interp.csv" : inputs.interp;
  const auto all = parse_classification_csv(read_file(cls, "stats"));
  std::vector<ModelClassification> models;
  for (const auto& tag : config.models) {
    auto it = std::find_if(all.begin(), all.end(), [&](const ModelClassification& m) { return m.tag == tag; });
    if (it == all.end()) {
      throw MissingArtifactError("classification report " + cls.string() + " has no rows for model '" + tag + "'");
    }
    models.push_back(*it);
  }
  std::vector<InterpRecord> records;
  const bool have_interp = fs::exists(interp);
  if (have_interp) records = load_interp(interp);
  SelectionOptions options = config.selection;
  options.alpha = config.alpha;
  const ModelSelectionReport report = select_model(models, have_interp ? &records : nullptr, options);
  for (const auto& line : report.trace) log_line(log, line);
  write_file(paths.selection() / "report.json", selection_report_json(report) + "\n");
  if (report_out) *report_out = report;
  std::vector<fs::path> used{cls};
  if (have_interp) used.push_back(interp);
  return {write_stage_manifest(config, "select-model", paths.selection(), {rel(config, paths.selection() / "report.json")},
                               used)};
}

std::vector<StageResult> cmd_export(const RunConfig& config, const std::string& format, const Logger& log) {
  config.validate();
  if (format != "pgm" && format != "csv") throw ConfigError("export format must be pgm or csv, got '" + format + "'");
  const Paths paths{config.out};
  const fs::path dir = paths.exports() / format;
  std::vector<fs::path> outputs;
  auto emit = [&](const fs::path& p, const std::string& bytes) {
    write_file(p, bytes);
    outputs.push_back(rel(config, p));
  };
  if (format == "csv") {
    std::vector<ModelClassification> models;
    for (const auto& tag : config.models) models.push_back(load_predictions(paths.predictions(tag), "train"));
    if (fs::exists(paths.baseline() / "predictions.csv")) {
      models.insert(models.begin(), load_predictions(paths.baseline() / "predictions.csv", "baseline"));
    }
    emit(dir / "table_classification.csv", classification_table_csv(models));
    emit(dir / "table_interp.csv",
         interp_table_csv(load_interp(paths.eval() / "interp.csv"), config.models, config.methods, config.topk));
    return {write_stage_manifest(config, "export:csv", dir, outputs)};
  }

  const Cohort cohort = load_cohort(config);
  std::map<std::pair<std::string, std::string>, std::vector<fs::path>> files;
  for (const auto& tag : config.models)
    for (const auto& method : config.methods) files[{tag, method}] = map_files(paths, tag, method);
  std::map<std::string, std::pair<SliceImage, BinaryMask2D>> subjects;  // slice image, ground truth
  auto subject = [&](const SubjectRecord& r) -> const std::pair<SliceImage, BinaryMask2D>& {
    auto it = subjects.find(r.id);
    if (it != subjects.end()) return it->second;
    SliceImage img = slice_average(load_subject(config, r), r.id);
    BinaryMask2D truth = segment_ground_truth(img, r.label);
    emit(dir / "subjects" / (r.id + ".pgm"), pgm_bytes(img));
    emit(dir / "subjects" / (r.id + "_truth.pgm"), pgm_bytes(truth));
    return subjects.emplace(r.id, std::make_pair(std::move(img), std::move(truth))).first->second;
  };
  for (const auto& tag : config.models)
    for (const auto& method : config.methods) {
      // Per k and class: predicted masks and truths of non-excluded subjects.
      std::map<std::pair<double, int>, std::pair<std::vector<BinaryMask2D>, std::vector<BinaryMask2D>>> groups;
      for (const auto& f : files[{tag, method}]) {
        const AttentionMap map = load_attention_map(f);
        auto it = cohort.index.find(map.subject);
        if (it == cohort.index.end()) throw FormatError(f.string() + " names unknown subject '" + map.subject + "'");
        const SubjectRecord& r = cohort.records[it->second];
        const auto& [img, truth] = subject(r);
        const SliceImage avg = slice_average(map);
        const fs::path base = dir / tag / method;
        emit(base / (r.id + ".pgm"), pgm_bytes(avg));
        for (double k : config.topk) {
          const BinaryMask2D mask = topk_binarize(avg, k);
          emit(base / (r.id + "_top" + k_label(k) + ".pgm"), pgm_bytes(mask));
          if (truth.count() > 0) {
            auto& g = groups[{k, r.label}];
            g.first.push_back(mask);
            g.second.push_back(truth);
          }
        }
      }
      std::map<double, std::pair<std::vector<BinaryMask2D>, std::vector<BinaryMask2D>>> pooled;
      for (const auto& [key, g] : groups) {
        const std::string name =
            tag + "_" + method + "_top" + k_label(key.first) + "_" + (key.second == kClassPD ? "PD" : "NC") + ".pgm";
        emit(dir / "heatmaps" / name, pgm_bytes(mean_segmented_heatmap(g.first)));
        auto& p = pooled[key.first];
        p.first.insert(p.first.end(), g.first.begin(), g.first.end());
        p.second.insert(p.second.end(), g.second.begin(), g.second.end());
      }
      for (const auto& [k, p] : pooled) {
        emit(dir / "mae" / (tag + "_" + method + "_top" + k_label(k) + ".pgm"), pgm_bytes(mae_map(p.first, p.second).field));
      }
      log_line(log, "exported " + tag + " / " + method);
    }
  return {write_stage_manifest(config, "export:pgm", dir, outputs)};
}

}  // namespace pdinterp

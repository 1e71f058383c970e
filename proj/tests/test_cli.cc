#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <vector>

namespace {

namespace fs = std::filesystem;

const fs::path kRoot = fs::temp_directory_path() / "pdinterp_test_cli";

// Runs the CLI with stdout/stderr captured in <kRoot>/last.log.
int cli(const std::string& args) {
  fs::create_directories(kRoot);
  const std::string cmd =
      std::string(PDINTERP_CLI_PATH) + " " + args + " > " + (kRoot / "last.log").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string last_log() {
  std::ifstream in(kRoot / "last.log");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path write_config(const std::string& name, const std::string& text) {
  const fs::path p = kRoot / name;
  fs::create_directories(kRoot);
  std::ofstream(p) << text;
  return p;
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

std::size_t count_files(const fs::path& dir, const std::string& ext) {
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir)) n += e.path().extension() == ext;
  return n;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override { fs::remove_all(kRoot); }
  void TearDown() override { fs::remove_all(kRoot); }
  std::string out(const std::string& name) const { return "--out " + (kRoot / name).string(); }
};

TEST_F(Cli, HelpExitsZero) {
  EXPECT_EQ(cli("--help"), 0);
  EXPECT_NE(last_log().find("select-model"), std::string::npos);
}

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(cli("frobnicate"), 2);
  EXPECT_EQ(cli("train --seed notanumber"), 2);
  EXPECT_EQ(cli("show-config --models resnet"), 2);
  EXPECT_EQ(cli("show-config --config " + write_config("bad.json", R"({"sead": 1})").string()), 2);
  EXPECT_NE(last_log().find("sead"), std::string::npos);
  EXPECT_EQ(cli("export --format tiff " + out("run")), 2);
}

TEST_F(Cli, ShowConfigDigestIgnoresOut) {
  ASSERT_EQ(cli("show-config --seed 3 " + out("a")), 0);
  const std::string a = last_log();
  ASSERT_EQ(cli("show-config --seed 3 " + out("b")), 0);
  EXPECT_EQ(a, last_log());
  ASSERT_EQ(cli("show-config --seed 4 " + out("a")), 0);
  EXPECT_NE(a, last_log());
}

TEST_F(Cli, MissingPrerequisiteExitsThree) {
  EXPECT_EQ(cli("evaluate " + out("empty")), 3);
  EXPECT_EQ(cli("train --grid half " + out("empty")), 3);
  EXPECT_EQ(cli("select-model " + out("empty")), 3);
}

TEST_F(Cli, HeldLockExitsTwo) {
  fs::create_directories(kRoot / "locked");
  std::ofstream(kRoot / "locked" / ".lock") << "1\n";
  EXPECT_EQ(cli("generate-data --grid half " + out("locked")), 2);
  EXPECT_NE(last_log().find("lock"), std::string::npos);
}

TEST_F(Cli, DefaultCohortHas607Subjects) {
  ASSERT_EQ(cli("generate-data --grid half " + out("cohort")), 0) << last_log();
  EXPECT_EQ(count_lines(kRoot / "cohort" / "data" / "manifest.jsonl"), 607u);
}

TEST_F(Cli, AttributeWritesEveryMethodForEveryModel) {
  const fs::path cfg = write_config("tiny.json", R"({
    "grid": "half", "seed": 2, "folds": 3,
    "phantom": {"cohort_size": 20},
    "train": {"epochs": 1, "lr_start": 0.01, "lr_end": 0.0001},
    "attribution": {"shap_samples": 1100, "subjects": ["sub-0001"]}
  })");
  const std::string base = "--config " + cfg.string() + " " + out("run");
  ASSERT_EQ(cli("generate-data " + base), 0) << last_log();
  ASSERT_EQ(cli("train " + base), 0) << last_log();
  ASSERT_EQ(cli("attribute " + base), 0) << last_log();
  EXPECT_EQ(count_files(kRoot / "run" / "maps", ".f32"), 24u);
  ASSERT_EQ(cli("evaluate " + base), 0) << last_log();
  EXPECT_EQ(count_lines(kRoot / "run" / "eval" / "interp.csv"), 1u + 24u * 2u);

  // A corrupted input volume surfaces as a numerical failure.
  const fs::path vol = kRoot / "run" / "data" / "volumes" / "sub-0001.f32";
  const auto bytes = fs::file_size(vol);
  std::vector<float> nan(bytes / sizeof(float), std::numeric_limits<float>::quiet_NaN());
  std::ofstream(vol, std::ios::binary).write(reinterpret_cast<const char*>(nan.data()), bytes);
  EXPECT_EQ(cli("attribute --models pdnet --methods saliency " + base), 4) << last_log();
}

}  // namespace

// Drives the command-line binary as a subprocess. AF_CLI points at it.

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include <sys/wait.h>

#include "test_support.hpp"

using namespace af;
using aftest::TempDir;
namespace fs = std::filesystem;

namespace {

std::string cli() {
  const char* p = std::getenv("AF_CLI");
  return p ? p : "";
}

struct CliResult {
  int code = -1;
  std::string output;
};

CliResult run(const std::string& args, const fs::path& scratch) {
  const fs::path log = scratch / "cli_output.txt";
  const std::string cmd = "'" + cli() + "' " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.output = ss.str();
  return r;
}

std::string file_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) ++n;
  return n;
}

std::size_t count_files(const fs::path& dir, const std::string& suffix) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) ++n;
  }
  return n;
}

// Small enough that three stages train in seconds.
RunConfig tiny_run(const fs::path& out, const fs::path& manifest) {
  RunConfig c = RunConfig::desk();
  c.out_dir = out.string();
  c.manifest = manifest.string();
  c.seed = 3;
  c.generator.base_channels = 4;
  c.generator.num_scales = 2;
  c.generator.num_resblocks = 1;
  c.generator.noise_dim = 4;
  c.generator.disc_channels = 4;
  c.generator.disc_layers = 2;
  c.generator.disc_scales = 1;
  for (Stage s : {Stage::boot, Stage::flare, Stage::blaze}) {
    c.schedule(s).resolution = 16;
    c.schedule(s).batch_size = 2;
    c.schedule(s).epochs = 1;
    c.schedule(s).max_steps = 2;
  }
  c.features.channels = {4, 4};
  c.features.taps = {0, 1, 2};
  c.losses.perceptual_layer_weights = {1, 1, 1};
  c.eval.gen_list_size = 4;
  c.eval.n_groups = 2;
  c.eval.is_splits = 2;
  return c;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("cli");
    const fs::path& d = dir_->path();
    corpus_ = run("build-corpus --out '" + (d / "corpus").string() +
                      "' --n 4 --categories 2 --resolution 16 --heldout 2 --seed 11",
                  d);
    save_run_config(d / "tiny.json", tiny_run(d / "run", d / "corpus" / "manifest.tsv"));
    for (const char* s : {"boot", "flare", "blaze"}) train_[s] = run("train " + config() + " --stage " + s, d);
  }
  static void TearDownTestSuite() { delete dir_; }

  static std::string config() { return "--config '" + (dir_->path() / "tiny.json").string() + "'"; }
  static fs::path out() { return dir_->path() / "run"; }

  static TempDir* dir_;
  static CliResult corpus_;
  static std::map<std::string, CliResult> train_;
};

TempDir* Cli::dir_ = nullptr;
CliResult Cli::corpus_;
std::map<std::string, CliResult> Cli::train_;

}  // namespace

TEST(CliUsage, BinaryIsConfigured) { ASSERT_FALSE(cli().empty()) << "AF_CLI is not set"; }

TEST(CliUsage, ParseErrorsExitTwo) {
  TempDir d("cli_usage");
  EXPECT_EQ(run("", d.path()).code, 2);
  EXPECT_EQ(run("frobnicate", d.path()).code, 2);
  EXPECT_EQ(run("train", d.path()).code, 2);  // --stage is required
  EXPECT_EQ(run("train --stage boot --config '" + (d / "absent.json").string() + "'", d.path()).code, 2);
}

TEST(CliUsage, UnknownStageAndBadConfigExitTwo) {
  TempDir d("cli_usage");
  EXPECT_EQ(run("train --stage forge", d.path()).code, 2);
  std::ofstream(d / "bad.json") << "{\"generator\": {\"num_scales\": 0}}";
  EXPECT_EQ(run("train --stage boot --config '" + (d / "bad.json").string() + "'", d.path()).code, 2);
}

TEST(CliUsage, MissingManifestExitsTwo) {
  TempDir d("cli_usage");
  RunConfig c = tiny_run(d / "run", d / "nowhere" / "manifest.tsv");
  save_run_config(d / "c.json", c);
  const CliResult r = run("train --stage boot --config '" + (d / "c.json").string() + "'", d.path());
  EXPECT_NE(r.code, 0);
  EXPECT_FALSE(fs::exists(d / "run" / "checkpoints" / "boot.ckpt"));
}

TEST(CliUsage, LaterStageWithoutUpstreamNamesIt) {
  TempDir d("cli_usage");
  save_run_config(d / "c.json", tiny_run(d / "run", d / "manifest.tsv"));
  const std::string cfg = "--config '" + (d / "c.json").string() + "'";
  CliResult r = run("train --stage flare " + cfg, d.path());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("boot"), std::string::npos) << r.output;
  r = run("train --stage blaze " + cfg, d.path());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("flare"), std::string::npos) << r.output;
  r = run("generate " + cfg, d.path());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("flare"), std::string::npos) << r.output;
  r = run("detect " + cfg, d.path());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("blaze"), std::string::npos) << r.output;
}

TEST(CliCorpus, SameSeedSameBytes) {
  TempDir d("cli_corpus");
  const std::string common = " --n 3 --categories 2 --resolution 16 --heldout 1 --seed 4";
  ASSERT_EQ(run("build-corpus --out '" + (d / "a").string() + "'" + common, d.path()).code, 0);
  ASSERT_EQ(run("build-corpus --out '" + (d / "b").string() + "'" + common, d.path()).code, 0);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(d / "a")) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), d / "a");
    ASSERT_TRUE(fs::exists(d / "b" / rel)) << rel;
    if (e.path().extension() != ".png") continue;  // manifests carry their own directory
    EXPECT_EQ(file_text(e.path()), file_text(d / "b" / rel)) << rel;
    ++files;
  }
  EXPECT_GT(files, 0u);
  ASSERT_EQ(run("build-corpus --out '" + (d / "c").string() + "' --n 3 --categories 2 --resolution 16 --heldout 1 --seed 5",
                d.path()).code, 0);
  bool any_differs = false;
  for (const auto& e : fs::recursive_directory_iterator(d / "a"))
    if (e.path().extension() == ".png")
      any_differs |= file_text(e.path()) != file_text(d / "c" / fs::relative(e.path(), d / "a"));
  EXPECT_TRUE(any_differs);
}

TEST_F(Cli, CorpusCounts) {
  ASSERT_EQ(corpus_.code, 0) << corpus_.output;
  const auto train = load_manifest(dir_->path() / "corpus" / "manifest.tsv");
  const auto held = load_manifest(dir_->path() / "corpus" / "heldout.tsv");
  EXPECT_EQ(train.records.size(), 8u);
  EXPECT_EQ(train.categories.size(), 2u);
  EXPECT_EQ(held.records.size(), 4u);
}

TEST_F(Cli, TrainWritesCheckpointsLogsAndConfig) {
  for (const char* s : {"boot", "flare", "blaze"}) {
    ASSERT_EQ(train_[s].code, 0) << s << ": " << train_[s].output;
    const auto w = load_checkpoint<Real>(out() / "checkpoints" / (std::string(s) + ".ckpt"));
    EXPECT_EQ(w.stage, parse_stage(s));
    EXPECT_EQ(line_count(out() / "logs" / (std::string(s) + "_loss.jsonl")), 2u);
    EXPECT_TRUE(fs::exists(out() / ("config_" + std::string(s) + ".json")));
  }
}

TEST_F(Cli, ZeroEpochsWritesCheckpointAndEmptyLog) {
  TempDir d("cli_zero");
  RunConfig c = tiny_run(d / "run", dir_->path() / "corpus" / "manifest.tsv");
  save_run_config(d / "c.json", c);
  const CliResult r = run("train --stage boot --epochs 0 --config '" + (d / "c.json").string() + "'", d.path());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(d / "run" / "checkpoints" / "boot.ckpt"));
  EXPECT_EQ(line_count(d / "run" / "logs" / "boot_loss.jsonl"), 0u);
}

TEST_F(Cli, SeedOverrideIsReproducible) {
  TempDir d("cli_seed");
  save_run_config(d / "c.json", tiny_run(d / "run", dir_->path() / "corpus" / "manifest.tsv"));
  const std::string base = "train --stage boot --config '" + (d / "c.json").string() + "' --seed 9 --out '";
  ASSERT_EQ(run(base + (d / "x").string() + "'", d.path()).code, 0);
  ASSERT_EQ(run(base + (d / "y").string() + "'", d.path()).code, 0);
  EXPECT_EQ(file_text(d / "x" / "logs" / "boot_loss.jsonl"), file_text(d / "y" / "logs" / "boot_loss.jsonl"));
  EXPECT_EQ(file_text(d / "x" / "checkpoints" / "boot.ckpt"), file_text(d / "y" / "checkpoints" / "boot.ckpt"));
}

TEST_F(Cli, GenerateWritesFourMapsPerSample) {
  ASSERT_EQ(train_["flare"].code, 0);
  const CliResult r = run("generate " + config() + " --count 3", dir_->path());
  ASSERT_EQ(r.code, 0) << r.output;
  const fs::path dir = out() / "samples" / "generate";
  for (const char* kind : {"_anomaly.png", "_heatmap.png", "_mask.png", "_edge.png"}) EXPECT_EQ(count_files(dir, kind), 3u);
  EXPECT_TRUE(fs::exists(dir / "grid.png"));
  EXPECT_EQ(png::dimensions(dir / "sample_0_anomaly.png"), std::make_pair(16, 16));
}

TEST_F(Cli, NoEditGivesEmptyMasks) {
  ASSERT_EQ(train_["flare"].code, 0);
  const CliResult r = run("generate " + config() + " --count 4 --no-edit", dir_->path());
  ASSERT_EQ(r.code, 0) << r.output;
  for (int i = 0; i < 4; ++i) {
    const auto px = png::read(out() / "samples" / "generate" / ("sample_" + std::to_string(i) + "_mask.png"), 1);
    for (auto b : px.bytes) ASSERT_EQ(b, 0);
  }
}

TEST_F(Cli, DetectCoversEveryRecord) {
  ASSERT_EQ(train_["blaze"].code, 0);
  const std::string held = (dir_->path() / "corpus" / "heldout.tsv").string();
  const CliResult r = run("detect " + config() + " --manifest '" + held + "'", dir_->path());
  ASSERT_EQ(r.code, 0) << r.output;
  const fs::path dir = out() / "samples" / "detect";
  EXPECT_EQ(count_files(dir, "_heatmap.png"), 4u);
  EXPECT_EQ(count_files(dir, "_reconstruction.png"), 4u);
}

TEST_F(Cli, EvaluateIdenticalImagesHasZeroDiversity) {
  TempDir d("cli_eval");
  fs::create_directories(d / "imgs");
  std::mt19937_64 rng(1);
  const auto img = aftest::random_image(16, 16, rng);
  for (int i = 0; i < 4; ++i) png::write_raster(d / "imgs" / ("i" + std::to_string(i) + ".png"), img);
  const CliResult r = run("evaluate --images '" + (d / "imgs").string() + "' --groups 2 --out '" + d.path().string() + "'",
                    d.path());
  ASSERT_EQ(r.code, 0) << r.output;
  std::ifstream in(d / "reports" / "metrics.jsonl");
  std::string line;
  ASSERT_TRUE(std::getline(in, line));
  const auto j = nlohmann::json::parse(line);
  EXPECT_EQ(j.at("lpips").get<double>(), 0.0);
  EXPECT_TRUE(fs::exists(d / "reports" / "metrics.txt"));
}

TEST_F(Cli, EvaluateIndivisibleGroupsFails) {
  TempDir d("cli_eval");
  fs::create_directories(d / "imgs");
  std::mt19937_64 rng(2);
  for (int i = 0; i < 3; ++i) png::write_raster(d / "imgs" / ("i" + std::to_string(i) + ".png"), aftest::random_image(16, 16, rng));
  const CliResult r = run("evaluate --images '" + (d / "imgs").string() + "' --groups 2 --out '" + d.path().string() + "'",
                    d.path());
  EXPECT_NE(r.code, 0);
}

TEST_F(Cli, EvaluateFullProtocolReportsAllColumns) {
  ASSERT_EQ(train_["blaze"].code, 0);
  const std::string held = (dir_->path() / "corpus" / "heldout.tsv").string();
  const CliResult r = run("evaluate " + config() + " --heldout '" + held + "'", dir_->path());
  ASSERT_EQ(r.code, 0) << r.output;
  std::ifstream in(out() / "reports" / "metrics.jsonl");
  std::string line;
  ASSERT_TRUE(std::getline(in, line));
  const auto j = nlohmann::json::parse(line);
  EXPECT_TRUE(j.contains("lpips"));
  EXPECT_TRUE(j.contains("is_mean")) << line;
  ASSERT_TRUE(j.contains("pixel_auroc")) << line;
  EXPECT_GE(j.at("pixel_auroc").get<double>(), 0.0);
  EXPECT_LE(j.at("pixel_auroc").get<double>(), 1.0);
}

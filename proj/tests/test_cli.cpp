#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "test_support.hpp"

namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(EINMEMO_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kTinyToy =
    " --set toy.tokenizer_epochs=2 --set toy.tokenizer_patches_per_epoch=4000"
    " --set toy.predictor_epochs=1 --set toy.max_reconstruction_mae=1.0";

}  // namespace

TEST(Cli, ExitCodes) {
  const fs::path dir = einmemo::testkit::scratch_dir("cli_codes");
  EXPECT_EQ(run_cli(""), 1);
  EXPECT_EQ(run_cli("no-such-command"), 1);
  EXPECT_EQ(run_cli("gen-data --bogus 1"), 1);
  EXPECT_EQ(run_cli("gen-data --set nonsense=1 --out " + (dir / "a").string()), 1);
  {
    std::ofstream(dir / "bad.json") << R"({"seed": 1, "colour": "red"})";
  }
  EXPECT_EQ(run_cli("gen-data --config " + (dir / "bad.json").string() + " --out " + (dir / "b").string()), 1);
  EXPECT_EQ(run_cli("build-index --data " + (dir / "missing").string() + " --out " + (dir / "c").string()), 2);
  EXPECT_EQ(run_cli("gen-data --help"), 0);
}

TEST(Cli, GenDataIsDeterministic) {
  const fs::path dir = einmemo::testkit::scratch_dir("cli_gen");
  const std::string common = " --categories 2 --per-class 4 --test-per-class 2 --seed 4";
  ASSERT_EQ(run_cli("gen-data" + common + " --out " + (dir / "a").string()), 0);
  ASSERT_EQ(run_cli("gen-data" + common + " --out " + (dir / "b").string()), 0);
  ASSERT_EQ(run_cli("gen-data --categories 2 --per-class 4 --test-per-class 2 --seed 5 --out " + (dir / "c").string()), 0);
  const std::string a = slurp(dir / "a" / "tree.sha256");
  EXPECT_EQ(a.size(), 65u);
  EXPECT_EQ(a, slurp(dir / "b" / "tree.sha256"));
  EXPECT_NE(a, slurp(dir / "c" / "tree.sha256"));
  const auto cfg = nlohmann::json::parse(slurp(dir / "a" / "config.json"));
  EXPECT_EQ(cfg.at("per_class"), 4);
}

TEST(Cli, OutputRootFromEnvironment) {
  const fs::path dir = einmemo::testkit::scratch_dir("cli_env");
  const std::string cmd = "EINMEMO_OUT=" + dir.string() + " " + EINMEMO_CLI_PATH +
                          " gen-data --categories 2 --per-class 4 --test-per-class 2 >/dev/null 2>&1";
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  EXPECT_TRUE(fs::exists(dir / "gen-data" / "manifest.tsv"));
}

TEST(Cli, SmallPipeline) {
  const fs::path dir = einmemo::testkit::scratch_dir("cli_pipe");
  const std::string data = (dir / "data").string();
  ASSERT_EQ(run_cli("gen-data --categories 2 --per-class 4 --test-per-class 2 --out " + data), 0);
  ASSERT_EQ(run_cli("train-frozen --data " + data + std::string(kTinyToy) + " --out " + (dir / "frozen").string()), 0);
  const std::string model = (dir / "frozen" / "model").string();
  ASSERT_EQ(run_cli("build-index --data " + data + " --model " + model + " --extractor toy-encoder --out " +
                    (dir / "index").string()),
            0);
  EXPECT_TRUE(fs::exists(dir / "index" / "index.bin"));
  ASSERT_EQ(run_cli("train-prompt --data " + data + " --model " + model + " --epochs 2 --batch-size 4 --out " +
                    (dir / "prompt").string()),
            0);
  const auto summary = nlohmann::json::parse(slurp(dir / "prompt" / "summary.json"));
  EXPECT_EQ(summary.at("param_count"), 27540);
  ASSERT_EQ(run_cli("eval --data " + data + " --model " + model + " --prompt " + (dir / "prompt" / "prompt.bin").string() +
                    " --out " + (dir / "eval").string()),
            0);
  EXPECT_TRUE(fs::exists(dir / "eval" / "summary.json"));
  EXPECT_TRUE(fs::exists(dir / "eval" / "baseline" / "folds.csv"));
  ASSERT_EQ(run_cli("report " + (dir / "eval").string() + " --out " + (dir / "report").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "report" / "report.csv"));
  EXPECT_EQ(run_cli("eval --data " + data + " --model " + model + " --prompt " + (dir / "nope.bin").string() +
                    " --out " + (dir / "eval2").string()),
            2);
}

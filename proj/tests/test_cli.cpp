#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <regex>

#include "relemb/common.hpp"

namespace fs = std::filesystem;

namespace {

const std::string kBin = RELEMB_BIN;
const std::string kFixtures = RELEMB_FIXTURES;

struct Run {
  int code = -1;
  std::string err;
};

Run run(const std::string& args) {
  const fs::path err = fs::temp_directory_path() / "relemb_cli_stderr.txt";
  const std::string cmd = kBin + " " + args + " > /dev/null 2> " + err.string();
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = relemb::read_file(err.string());
  return r;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  return d;
}

std::string fixture_flags(const fs::path& work) {
  return "--config " + kFixtures + "/pipeline.toml --workdir " + work.string();
}

void full_pipeline(const fs::path& work) {
  const std::string f = fixture_flags(work) + " --quiet";
  ASSERT_EQ(run("parse " + f + " --corpus " + kFixtures + "/corpus --rules " + kFixtures + "/rules.txt").code, 0);
  ASSERT_EQ(run("build " + f).code, 0);
  ASSERT_EQ(run("train " + f).code, 0);
  ASSERT_EQ(run("embed " + f).code, 0);
  ASSERT_EQ(run("eval " + f + " --labels " + kFixtures + "/labels.csv").code, 0);
  ASSERT_EQ(run("report " + f).code, 0);
}

std::size_t data_lines(const fs::path& p) { return relemb::read_data_lines(p.string()).size(); }

}  // namespace

TEST(Cli, FullPipelineOnFixtureIsDeterministic) {
  const auto a = fresh_dir("relemb_cli_run_a"), b = fresh_dir("relemb_cli_run_b");
  full_pipeline(a);
  full_pipeline(b);

  for (const char* mode : {"em", "inv"}) {
    EXPECT_TRUE(fs::exists(a / ("model_" + std::string(mode) + ".ckpt")));
    for (const char* kind : {"summary", "clusters", "samples"})
      EXPECT_TRUE(fs::exists(a / ("eval_" + std::string(mode) + "_" + kind + ".csv")));
  }
  EXPECT_EQ(data_lines(a / "examples.jsonl"), 43u);
  EXPECT_EQ(data_lines(a / "split_train.jsonl"), 28u);
  EXPECT_EQ(data_lines(a / "split_test.jsonl"), 7u);
  EXPECT_EQ(data_lines(a / "split_validation.jsonl"), 35u);
  EXPECT_EQ(data_lines(a / "parse_episodes.csv"), 4u);
  EXPECT_EQ(data_lines(a / "table3.csv"), 4u);
  EXPECT_EQ(data_lines(a / "table4.csv"), 3u);  // header + clusters 1, 2
  EXPECT_EQ(data_lines(a / "loss_em.csv"), 1u + 2u * 3u);

  const std::regex header("^# relemb stage=[a-z]+ config=[0-9a-f]{16} seed=7( .*)?\n");
  std::size_t compared = 0;
  for (const auto& entry : fs::directory_iterator(a)) {
    const auto name = entry.path().filename().string();
    const std::string bytes = relemb::read_file(entry.path().string());
    EXPECT_EQ(bytes, relemb::read_file((b / name).string())) << name;
    if (name != "vocab.txt") {
      const std::string first = bytes.substr(0, bytes.find('\n') + 1);
      EXPECT_TRUE(std::regex_match(first, header)) << name << ": " << first;
    }
    ++compared;
  }
  EXPECT_GE(compared, 20u);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Cli, MissingArtifactsNameTheStage) {
  const auto w = fresh_dir("relemb_cli_missing");
  auto r = run("build " + fixture_flags(w));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("'parse'"), std::string::npos) << r.err;

  const std::string f = fixture_flags(w) + " --quiet";
  ASSERT_EQ(run("parse " + f + " --corpus " + kFixtures + "/corpus --rules " + kFixtures + "/rules.txt").code, 0);
  ASSERT_EQ(run("build " + f).code, 0);
  r = run("eval " + f + " --labels " + kFixtures + "/labels.csv");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("missing checkpoint"), std::string::npos) << r.err;
  r = run("embed " + f);
  EXPECT_NE(r.err.find("missing checkpoint"), std::string::npos) << r.err;
  r = run("report " + f);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("'eval'"), std::string::npos) << r.err;
  fs::remove_all(w);
}

TEST(Cli, EmptyCorpusWarnsAndSucceeds) {
  const auto w = fresh_dir("relemb_cli_empty");
  const auto corpus = fresh_dir("relemb_cli_empty_corpus");
  fs::create_directories(corpus);
  const auto r = run("parse --workdir " + w.string() + " --corpus " + corpus.string());
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.err.find("warning"), std::string::npos);
  EXPECT_EQ(data_lines(w / "examples.jsonl"), 0u);
  EXPECT_EQ(run("parse --workdir " + w.string() + " --corpus " + corpus.string() + "/nope").code, 2);
  fs::remove_all(w);
  fs::remove_all(corpus);
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("--help").code, 0);
  EXPECT_EQ(run("parse --no-such-flag").code, 1);
  EXPECT_EQ(run("train --mode both3").code, 1);
  EXPECT_EQ(run("train --samples-per-anchor 7").code, 1);
  EXPECT_EQ(run("parse").code, 1);  // no corpus
  EXPECT_EQ(run("synth --clusters 5").code, 1);
}

TEST(Cli, FlagsOverrideConfigFile) {
  const auto w = fresh_dir("relemb_cli_override");
  const std::string f = fixture_flags(w) + " --quiet";
  ASSERT_EQ(run("parse " + f + " --corpus " + kFixtures + "/corpus --rules " + kFixtures + "/rules.txt").code, 0);
  ASSERT_EQ(run("build " + f).code, 0);
  EXPECT_EQ(data_lines(w / "split_validation.jsonl"), 35u);  // top-k 5 from the file
  const std::string before = relemb::read_file((w / "split_stats.csv").string());
  ASSERT_EQ(run("build " + f + " --top-k 4").code, 0);
  EXPECT_EQ(data_lines(w / "split_validation.jsonl"), 30u);
  const std::string after = relemb::read_file((w / "split_stats.csv").string());
  EXPECT_NE(before.substr(0, before.find('\n')), after.substr(0, after.find('\n')));  // new config hash
  ASSERT_EQ(run("build " + f + " --exclude-pair 'HOLT|ODELL'").code, 0);
  EXPECT_EQ(data_lines(w / "split_validation.jsonl"), 30u);
  EXPECT_EQ(run("build " + f + " --top-k 9").code, 2);  // only 5 pairs survive
  fs::remove_all(w);
}

TEST(Cli, SynthThenParse) {
  const auto w = fresh_dir("relemb_cli_synth");
  ASSERT_EQ(run("synth --quiet --workdir " + w.string() + " --pairs 4 --examples-per-pair 10 --clusters 4").code, 0);
  EXPECT_TRUE(fs::exists(w / "synth" / "labels.csv"));
  EXPECT_TRUE(fs::exists(w / "synth" / "synth_meta.json"));
  ASSERT_EQ(run("parse --quiet --workdir " + w.string() + " --corpus " + (w / "synth" / "corpus").string()).code, 0);
  EXPECT_EQ(data_lines(w / "examples.jsonl"), 40u);
  fs::remove_all(w);
}

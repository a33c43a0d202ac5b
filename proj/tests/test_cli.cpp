#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <sstream>

#include "cli.hpp"
#include "support/temp_dir.hpp"
#include "xsf/pipeline.hpp"

namespace fs = std::filesystem;
using xsf::testing::TempDir;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "xsf");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = xsf::cli::run_command(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  f << text;
}

// A pipeline small enough to run end to end in well under a second.
using Overrides = std::map<std::string, std::string>;

std::string tiny_config(const Overrides& overrides = {}) {
  std::map<std::string, std::string> keys{
      {"identities", "10"},    {"variations", "4"},         {"input_size", "16"},   {"n_pretrain", "4"},
      {"n_adapt", "2"},        {"n_eval", "4"},             {"eval_folds", "2"},    {"stem_channels", "4"},
      {"stage_channels", "4,8,8"}, {"embed_dim", "16"},     {"pretrain_epochs", "2"}, {"pretrain_batch", "8"},
      {"epochs", "1"},         {"batch", "16"},             {"lr", "1e-3"}};
  for (const auto& [k, v] : overrides) keys[k] = v;
  std::string text;
  for (const auto& [k, v] : keys) text += k + " = " + v + "\n";
  return text;
}

struct RunDir {
  TempDir dir;
  fs::path cfg = dir.path() / "run.cfg";
  fs::path out = dir.path() / "run";

  explicit RunDir(const Overrides& overrides = {}) { write(cfg, tiny_config(overrides)); }

  Result cmd(const std::string& command) { return run({command, "--config", cfg.string(), "--out", out.string()}); }
};

void expect_single_line(const Result& r) {
  EXPECT_FALSE(r.err.empty());
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1) << r.err;
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) out.push_back(line);
  return out;
}

}  // namespace

TEST(Cli, HelpDocumentsCommandsFlagsAndExitCodes) {
  const Result r = run({"--help"});
  EXPECT_EQ(r.code, 0);
  for (const auto& c : xsf::cli::commands()) EXPECT_NE(r.out.find(c), std::string::npos) << c;
  for (const char* flag : {"--config", "--seed", "--out", "--help"}) EXPECT_NE(r.out.find(flag), std::string::npos) << flag;

  std::set<int> documented;
  const std::regex row(R"(^  (\d+)  \S.*$)");
  bool in_codes = false;
  for (const auto& line : lines(r.out)) {
    if (line == "Exit codes:") in_codes = true;
    std::smatch m;
    if (in_codes && std::regex_match(line, m, row)) documented.insert(std::stoi(m[1]));
  }
  const std::set<int> implemented{xsf::cli::kOk,           xsf::cli::kInternal,     xsf::cli::kUsage,
                                  xsf::cli::kConfig,       xsf::cli::kMissingInput, xsf::cli::kCorruptInput,
                                  xsf::cli::kPipeline,     xsf::cli::kWriteFailure};
  EXPECT_EQ(documented, implemented);
  EXPECT_EQ(documented.size(), xsf::cli::exit_codes().size());
}

TEST(Cli, UsageErrors) {
  RunDir r;
  for (const auto& args : std::vector<std::vector<std::string>>{
           {},
           {"train", "--config", r.cfg.string()},
           {"eval", "--config", r.cfg.string(), "--verbose"},
           {"eval"},
           {"eval", "--config", r.cfg.string(), "--seed", "abc"},
           {"eval", "pretrain", "--config", r.cfg.string()}}) {
    const Result res = run(args);
    EXPECT_EQ(res.code, xsf::cli::kUsage) << (args.empty() ? "<none>" : args[0]);
    expect_single_line(res);
  }
}

TEST(Cli, ConfigErrorNamesKey) {
  RunDir r(Overrides{{"lambda", "1.5"}});
  const Result res = r.cmd("gen-data");
  EXPECT_EQ(res.code, xsf::cli::kConfig);
  EXPECT_NE(res.err.find("lambda"), std::string::npos) << res.err;
  expect_single_line(res);
}

TEST(Cli, MissingInputs) {
  RunDir r;
  const Result no_cfg = run({"gen-data", "--config", (r.dir.path() / "nope.cfg").string()});
  EXPECT_EQ(no_cfg.code, xsf::cli::kMissingInput);
  expect_single_line(no_cfg);
  for (const char* c : {"pretrain", "adapt", "eval", "ablate"}) {
    const Result res = r.cmd(c);
    EXPECT_EQ(res.code, xsf::cli::kMissingInput) << c << ": " << res.err;
    expect_single_line(res);
  }
}

TEST(Cli, CorruptCheckpoint) {
  RunDir r;
  ASSERT_EQ(r.cmd("gen-data").code, 0);
  write(r.out / "pretrained.xsfc", "definitely not a checkpoint");
  const Result res = r.cmd("adapt");
  EXPECT_EQ(res.code, xsf::cli::kCorruptInput) << res.err;
  expect_single_line(res);
}

TEST(Cli, PipelineFailureOnDatasetTooSmallForSplit) {
  RunDir r;
  ASSERT_EQ(r.cmd("gen-data").code, 0);
  write(r.cfg, tiny_config(Overrides{{"identities", "30"}, {"n_pretrain", "20"}}));
  const Result res = r.cmd("pretrain");
  EXPECT_EQ(res.code, xsf::cli::kPipeline) << res.err;
  expect_single_line(res);
}

TEST(Cli, UnwritableRunDirectory) {
  RunDir r;
  write(r.dir.path() / "file", "x");
  const Result res = run({"gen-data", "--config", r.cfg.string(), "--out", (r.dir.path() / "file" / "run").string()});
  EXPECT_EQ(res.code, xsf::cli::kWriteFailure) << res.err;
  expect_single_line(res);
}

TEST(Cli, FullPipelineProducesArtifacts) {
  RunDir r;
  for (const char* c : {"gen-data", "pretrain", "adapt"}) {
    const Result res = r.cmd(c);
    ASSERT_EQ(res.code, 0) << c << ": " << res.err;
  }
  const std::string pre = slurp(r.out / "pretrained.xsfc"), post = slurp(r.out / "adapted.xsfc");
  const Result ev = r.cmd("eval");
  ASSERT_EQ(ev.code, 0) << ev.err;
  EXPECT_EQ(slurp(r.out / "pretrained.xsfc"), pre);
  EXPECT_EQ(slurp(r.out / "adapted.xsfc"), post);

  for (const char* f : {"config.resolved", "data/source/0000/v00.xst", "data/target/0009/v03.xst", "pretrained.xsfc",
                        "adapted.xsfc", "train.log", "metrics.tsv", "scores_pretrained_cross.csv",
                        "scores_pretrained_source.csv", "scores_adapted_cross.csv", "scores_adapted_source.csv",
                        "embeddings_pretrained.xst", "embeddings_adapted.xst"}) {
    EXPECT_TRUE(fs::exists(r.out / f)) << f;
  }
  // The resolved config reproduces itself.
  const std::string resolved = slurp(r.out / "config.resolved");
  EXPECT_EQ(xsf::parse_config_text(resolved).to_text(), resolved);

  // Metrics recomputed from the exported scores match the report.
  const auto rows = lines(slurp(r.out / "metrics.tsv"));
  ASSERT_EQ(rows.size(), 1u + 2 * 2 * 7);
  EXPECT_EQ(rows[0], "model\tmetric\tvalue\tfold_mean\tfold_std");
  for (const char* model : {"pretrained", "adapted"}) {
    for (const char* part : {"cross", "source"}) {
      const auto scores = xsf::load_scores(r.out / ("scores_" + std::string(model) + "_" + part + ".csv"));
      for (const auto& [name, value] : xsf::report_metrics(xsf::evaluate(scores))) {
        const std::string key = std::string(model) + "\t" + part + "." + name + "\t";
        const auto it = std::find_if(rows.begin(), rows.end(), [&](const std::string& l) { return l.rfind(key, 0) == 0; });
        ASSERT_NE(it, rows.end()) << key;
        EXPECT_NEAR(std::stod(it->substr(key.size())), value, 1e-6) << key;
      }
    }
  }
}

TEST(Cli, IdenticalRunsGiveIdenticalCheckpoints) {
  RunDir a, b;
  for (RunDir* r : {&a, &b}) {
    for (const char* c : {"gen-data", "pretrain", "adapt"}) ASSERT_EQ(r->cmd(c).code, 0) << c;
  }
  EXPECT_EQ(slurp(a.out / "adapted.xsfc"), slurp(b.out / "adapted.xsfc"));
  EXPECT_EQ(slurp(a.out / "train.log"), slurp(b.out / "train.log"));

  // A different seed on the command line changes the run and is echoed.
  ASSERT_EQ(run({"gen-data", "--config", a.cfg.string(), "--out", a.out.string(), "--seed", "8"}).code, 0);
  EXPECT_NE(slurp(a.out / "config.resolved").find("seed = 8\n"), std::string::npos);
}

TEST(Cli, AblateEmitsOneRowPerCell) {
  RunDir r(Overrides{{"ablate_sweeps", "lambda"}, {"ablate_lambdas", "0,1"}});
  for (const char* c : {"gen-data", "pretrain", "ablate"}) {
    const Result res = r.cmd(c);
    ASSERT_EQ(res.code, 0) << c << ": " << res.err;
  }
  const auto rows = lines(slurp(r.out / "ablation.tsv"));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[1].rfind("lambda\t0\t", 0), 0u) << rows[1];
  EXPECT_EQ(rows[2].rfind("lambda\t1\t", 0), 0u) << rows[2];
  EXPECT_EQ(std::count(rows[0].begin(), rows[0].end(), '\t'), 1 + 2 * 7);
}

TEST(Cli, AblateDefaultGridCellCount) {
  // All three published grids: 16 layer sets, 5 lambdas, 5 fractions. Zero
  // epochs keeps each cell to an evaluation pass.
  RunDir r(Overrides{{"epochs", "0"}});
  for (const char* c : {"gen-data", "pretrain", "ablate"}) ASSERT_EQ(r.cmd(c).code, 0) << c;
  const auto rows = lines(slurp(r.out / "ablation.tsv"));
  ASSERT_EQ(rows.size(), 1u + 16 + 5 + 5);
  EXPECT_EQ(rows[1].rfind("layer_set\t", 0), 0u);
  EXPECT_EQ(rows[17].rfind("lambda\t0\t", 0), 0u);
  EXPECT_EQ(rows[26].rfind("fraction\t0.05\t", 0), 0u);
}

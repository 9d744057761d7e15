// Copyright 2026 The mspoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include <gtest/gtest.h>

#include "mspoe/cli.hpp"

namespace mspoe {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("mspoe_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(invoke({}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"--help"}).code, cli::kExitOk);
  EXPECT_EQ(invoke({"bogus"}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"eval"}).code, cli::kExitUsage);  // --out-prefix is required
  EXPECT_EQ(invoke({"run", "--max-new", "x"}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"run", "--model", path("absent.mspe")}).code, cli::kExitRuntime);
}

TEST_F(Cli, UnknownEncoderListsValidOnes) {
  const auto r = invoke({"run", "--encoder", "alibi"});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_NE(r.err.find(cli::kValidEncoders), std::string::npos);
  EXPECT_EQ(invoke({"run", "--encoder", "pi:-1"}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"run", "--encoder", "self-extend:0,4"}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"run", "--encoder", "self-extend:2"}).code, cli::kExitUsage);
}

TEST_F(Cli, BadFlagValuesAreUsageErrors) {
  EXPECT_EQ(invoke({"sweep", "--ratios", "", "--out-prefix", path("s")}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"sweep", "--ratios", "1,-2", "--out-prefix", path("s")}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"eval", "--samples", "0", "--out-prefix", path("e")}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"run", "--strategy", "greedy"}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"run", "--scoring-mode", "both"}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"run", "--rmin", "2", "--rmax", "1"}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"run", "--task", "qa"}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"run", "--position", "8"}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"run", "--prompt", "1,x"}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"gen-weights", "--kind", "zoo", "--out", path("w")}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"gen-weights", "--kind", "random", "--head-dim", "3", "--out", path("w")}).code,
            cli::kExitUsage);
}

TEST_F(Cli, RunReportsCorrectnessAndDumps) {
  const auto r = invoke({"run", "--position", "7", "--dump-snapshot", path("snap.json"),
                         "--dump-ratios", path("ratios.json"), "--out", path("run.json")});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  EXPECT_NE(r.out.find("(correct)"), std::string::npos);
  const auto snap = AttentionSnapshot::from_json(nlohmann::json::parse(slurp(path("snap.json"))));
  EXPECT_EQ(snap.context_len, 18u);
  const auto ratios = RatioAssignment::from_json(nlohmann::json::parse(slurp(path("ratios.json"))));
  const auto offline = assign_ratios(score_snapshot(snap, ProfilerConfig{}), ProfilerConfig{});
  EXPECT_EQ(ratios, offline);
  const auto rec = nlohmann::json::parse(slurp(path("run.json")));
  EXPECT_EQ(rec["invocation"]["args"][0], "run");
  EXPECT_EQ(rec["config"]["encoder"], "mspoe");
  EXPECT_TRUE(rec["correct"].get<bool>());
  EXPECT_FALSE(rec.contains("timing"));
}

TEST_F(Cli, RunWithExplicitPromptAndBaseline) {
  const auto r = invoke({"run", "--encoder", "rope", "--prompt", "0,3,30,4,31,3", "--max-new", "2",
                         "--dump-ratios", path("r.json")});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  EXPECT_EQ(r.out.find("expected"), std::string::npos);
  const auto ratios = RatioAssignment::from_json(nlohmann::json::parse(slurp(path("r.json"))));
  EXPECT_EQ(ratios, RatioAssignment(2, 4, 1.0));
}

TEST_F(Cli, ProfileSequentialAndAlpha) {
  ASSERT_EQ(invoke({"profile", "--strategy", "sequential", "--out-prefix", path("p")}).code,
            cli::kExitOk);
  const std::string csv = slurp(path("p.csv"));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "layer,head,score,ratio");
  const auto rec = nlohmann::json::parse(slurp(path("p.json")));
  const auto ratios = RatioAssignment::from_json(rec["ratios"]);
  const Vector sched = linear_ratio_schedule(4);
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_EQ(ratios.layer(l), std::vector<double>(sched.begin(), sched.end()));
  }
  // A huge alpha leaves every head at zero, so ties fall back to head order.
  ASSERT_EQ(invoke({"profile", "--alpha", "1e6", "--out-prefix", path("q")}).code, cli::kExitOk);
  const auto q = nlohmann::json::parse(slurp(path("q.json")));
  for (const auto& s : q["scores"]) EXPECT_EQ(s["score"], 0.0);
  EXPECT_EQ(RatioAssignment::from_json(q["ratios"]), ratios);
}

TEST_F(Cli, UnitInterpolationMatchesRope) {
  ASSERT_EQ(invoke({"eval", "--encoder", "rope", "--samples", "5", "--out-prefix", path("a")}).code,
            cli::kExitOk);
  ASSERT_EQ(invoke({"eval", "--encoder", "pi:1.0", "--samples", "5", "--out-prefix", path("b")}).code,
            cli::kExitOk);
  auto a = reports_from_csv(slurp(path("a.csv")));
  auto b = reports_from_csv(slurp(path("b.csv")));
  ASSERT_EQ(a.size(), 1u);
  ASSERT_EQ(b.size(), 1u);
  EXPECT_EQ(a[0].encoder_label, "rope");
  b[0].encoder_label = a[0].encoder_label;
  EXPECT_EQ(a, b);
}

TEST_F(Cli, EvalIsBitwiseReproducible) {
  const std::vector<std::string> args{"eval",      "--encoder", "rope",   "--encoder",
                                      "mspoe",     "--encoder", "self-extend:2,4",
                                      "--samples", "4",         "--task", "mdqa",
                                      "--out-prefix"};
  auto first = args;
  first.push_back(path("x"));
  auto second = args;
  second.push_back(path("x2"));
  const auto r1 = invoke(first);
  ASSERT_EQ(r1.code, cli::kExitOk) << r1.err;
  ASSERT_EQ(invoke(second).code, cli::kExitOk);
  EXPECT_EQ(slurp(path("x.csv")), slurp(path("x2.csv")));
  auto j1 = nlohmann::json::parse(slurp(path("x.json")));
  auto j2 = nlohmann::json::parse(slurp(path("x2.json")));
  EXPECT_EQ(j1["reports"], j2["reports"]);
  EXPECT_EQ(j1["config"], j2["config"]);
  EXPECT_EQ(j1["config"]["task"]["task"], "mdqa");
  EXPECT_EQ(j1["config"]["task"]["n_items"], 10);
  EXPECT_EQ(reports_from_csv(slurp(path("x.csv"))).size(), 3u);
  // The record names its own invocation, so rerunning it reproduces the outputs.
  std::vector<std::string> replay = j1["invocation"]["args"];
  replay.back() = path("x3");
  ASSERT_EQ(invoke(replay).code, cli::kExitOk);
  EXPECT_EQ(slurp(path("x.csv")), slurp(path("x3.csv")));
  EXPECT_NE(r1.out.find("self-extend:2,4"), std::string::npos);
}

TEST_F(Cli, SweepWritesSummaryRows) {
  ASSERT_EQ(invoke({"sweep", "--ratios", "1,2", "--samples", "3", "--out-prefix", path("s")}).code,
            cli::kExitOk);
  const std::string csv = slurp(path("s.csv"));
  EXPECT_NE(csv.find("pi:1,all,"), std::string::npos);
  EXPECT_NE(csv.find("pi:2,all,"), std::string::npos);
  EXPECT_EQ(reports_from_csv(csv).size(), 2u);
}

TEST_F(Cli, GenWeightsAndInspect) {
  ASSERT_EQ(invoke({"gen-weights", "--out", path("ind.mspe")}).code, cli::kExitOk);
  const auto [cfg, w] = load_weights(path("ind.mspe"));
  const auto built = build_induction_model();
  EXPECT_EQ(cfg, built.first);
  EXPECT_EQ(w, built.second);

  ASSERT_EQ(invoke({"gen-weights", "--kind", "random", "--layers", "1", "--heads", "2",
                    "--head-dim", "4", "--vocab", "9", "--untied", "--seed", "3", "--out",
                    path("rnd.mspe")})
                .code,
            cli::kExitOk);
  const auto r = invoke({"inspect", "--model", path("rnd.mspe"), "--json"});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  const auto info = nlohmann::json::parse(r.out);
  EXPECT_EQ(info["config"]["n_layers"], 1);
  EXPECT_EQ(info["config"]["tied_output"], false);
  EXPECT_EQ(info["tensors"].back()["name"], "output");
  EXPECT_EQ(info["tensors"].back()["shape"], nlohmann::json::array({8, 9}));

  const auto text = invoke({"inspect"});
  ASSERT_EQ(text.code, cli::kExitOk);
  EXPECT_NE(text.out.find("tok_embedding"), std::string::npos);

  // The generated file drives the other commands like the built-in fixture.
  ASSERT_EQ(invoke({"eval", "--model", path("ind.mspe"), "--samples", "3", "--out-prefix",
                    path("f")})
                .code,
            cli::kExitOk);
  ASSERT_EQ(invoke({"eval", "--samples", "3", "--out-prefix", path("g")}).code, cli::kExitOk);
  EXPECT_EQ(slurp(path("f.csv")), slurp(path("g.csv")));
}

}  // namespace
}  // namespace mspoe

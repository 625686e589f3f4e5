#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "cem/error.hpp"
#include "plotdata.hpp"
#include "spec.hpp"
#include "tasks.hpp"

using namespace cem;
using namespace cem::cli;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "cem_cli_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string config_error(const json& j) {
  try {
    parse_spec(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(CEM_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << text;
}

GpRow row(std::uint64_t seed, const std::string& variant, std::size_t t, double test) {
  GpRow r;
  r.seed = seed;
  r.variant = variant;
  r.steps = t;
  r.test_rmse = test;
  return r;
}

}  // namespace

TEST(Spec, DefaultsDependOnTask) {
  const auto gp = parse_spec(json{{"task", "gp-regression"}});
  EXPECT_EQ(gp.model.head, model::TaskHead::regression_scalar);
  const auto lm = parse_spec(json{{"task", "lm-smoke"}});
  EXPECT_EQ(lm.model.head, model::TaskHead::lm_logits);
  EXPECT_EQ(lm.seeds, (std::vector<std::uint64_t>{0}));
}

TEST(Spec, ErrorsNameTheDottedPath) {
  EXPECT_NE(config_error(json{{"task", "gp-regression"}, {"optim", {{"peak_lr", "fast"}}}})
                .find("optim.peak_lr"),
            std::string::npos);
  EXPECT_NE(config_error(json{{"task", "lm-smoke"}, {"data", {{"seq_len", -3}}}}).find("data.seq_len"),
            std::string::npos);
  EXPECT_NE(config_error(json{{"task", "verify"}, {"verify", {{"instances", 3}}}}).find("verify.instances"),
            std::string::npos);
  EXPECT_NE(config_error(json{{"task", "gp-regression"}, {"model", {{"block", {{"mlp", "moe"}}}}}})
                .find("mlp"),
            std::string::npos);
  EXPECT_NE(config_error(json{{"task", "sing"}}).find("task"), std::string::npos);
  EXPECT_NE(config_error(json{{"task", "verify"}, {"version", 7}}).find("version"), std::string::npos);
  EXPECT_NE(config_error(json{{"task", "verify"}, {"colour", 1}}).find("colour"), std::string::npos);
  EXPECT_FALSE(config_error(json{{"task", "gp-regression"}, {"seeds", json::array()}}).empty());
}

TEST(Spec, RoundTripsThroughJson) {
  auto j = load_json(fs::path(CEM_SOURCE_DIR) / "specs" / "gp.json");
  const auto s = parse_spec(j);
  const auto back = parse_spec(to_json(s));
  EXPECT_EQ(to_json(back), to_json(s));
  EXPECT_EQ(spec_hash(back), spec_hash(s));
  for (const char* name : {"verify.json", "count.json", "lm-smoke.json", "lr-sweep.json"}) {
    EXPECT_NO_THROW(parse_spec(load_json(fs::path(CEM_SOURCE_DIR) / "specs" / name))) << name;
  }
}

TEST(Spec, OverridesAndHash) {
  json j = {{"task", "gp-regression"}};
  apply_override(j, "optim.peak_lr=0.01");
  apply_override(j, "data.kernel=periodic");
  apply_override(j, "seeds=[3,4]");
  const auto s = parse_spec(j);
  EXPECT_EQ(s.optim.peak_lr, 0.01);
  EXPECT_EQ(s.data.kernel.kind, data::KernelKind::periodic);
  EXPECT_EQ(s.seeds, (std::vector<std::uint64_t>{3, 4}));
  EXPECT_THROW(apply_override(j, "no_equals_sign"), ConfigError);

  // seeds and output location do not change the hash; anything else does
  json k = j;
  apply_override(k, "seeds=[9]");
  apply_override(k, "output=\"/elsewhere\"");
  EXPECT_EQ(spec_hash(parse_spec(k)), spec_hash(s));
  apply_override(k, "optim.total_steps=7");
  EXPECT_NE(spec_hash(parse_spec(k)), spec_hash(s));
  EXPECT_EQ(spec_hash(s).size(), 12u);
}

TEST(Spec, OutputRootPrecedence) {
  auto s = parse_spec(json{{"task", "verify"}});
  ::setenv("CEM_OUT_ROOT", "/tmp/from-env", 1);
  EXPECT_EQ(output_root(s), fs::path("/tmp/from-env"));
  s.output = "/tmp/explicit";
  EXPECT_EQ(output_root(s), fs::path("/tmp/explicit"));
  ::unsetenv("CEM_OUT_ROOT");
  s.output.clear();
  EXPECT_EQ(output_root(s), fs::path("out"));
}

TEST(Spec, IndexLists) {
  EXPECT_EQ(parse_index_list("0-4"), (std::vector<std::uint64_t>{0, 1, 2, 3, 4}));
  EXPECT_EQ(parse_index_list("1,3,7-8"), (std::vector<std::uint64_t>{1, 3, 7, 8}));
  EXPECT_THROW(parse_index_list("4-1"), ConfigError);
  EXPECT_THROW(parse_index_list("a"), ConfigError);
  EXPECT_THROW(parse_index_list(""), ConfigError);
}

TEST(GpOrdering, CountsWinsAndGatedGap) {
  std::vector<GpRow> rows;
  const double t1[] = {1.0, 1.0, 1.0, 1.0, 1.0}, t2[] = {0.9, 0.9, 0.9, 0.9, 1.1};
  for (std::uint64_t s = 0; s < 5; ++s) {
    rows.push_back(row(s, "gated", 0, 0.9));
    rows.push_back(row(s, "cem-t1", 1, t1[s]));
    rows.push_back(row(s, "cem-t2", 2, t2[s]));
  }
  auto o = gp_ordering(rows);
  EXPECT_EQ(o["wins_needed"], 4);
  EXPECT_EQ(o["pairs"][0]["wins"], 4);
  EXPECT_NEAR(o["gated_vs_t1"]["mean_relative_gap"].get<double>(), 0.1 / 0.9, 1e-12);
  EXPECT_TRUE(o["passed"].get<bool>());
  rows[14].test_rmse = 1.2;
  rows[11].test_rmse = 1.2;
  EXPECT_FALSE(gp_ordering(rows)["passed"].get<bool>());
  for (auto& r : rows)
    if (r.variant == "gated") r.test_rmse = 0.7;  // T1 now 43% worse
  rows[11].test_rmse = rows[14].test_rmse = 0.9;
  o = gp_ordering(rows);
  EXPECT_EQ(o["pairs"][0]["wins"], 5);
  EXPECT_FALSE(o["passed"].get<bool>());
}

TEST(PlotData, TidiesSweepAndDepthRuns) {
  const auto dir = scratch("plot_ok");
  std::string sweep;
  const double lrs[] = {1e-3, 2e-3, 4e-3, 8e-3, 1.6e-2};
  for (double lr : lrs) {
    const double x = std::log10(lr) - std::log10(4e-3);
    json rec = {{"seed", 0}, {"lr", lr}, {"step", 10}, {"split", "eval"}, {"metric", "perplexity"},
                {"value", 3.0 + 10 * x * x}};
    sweep += rec.dump() + "\n";
  }
  write_text(dir / "sweep" / "metrics.jsonl", sweep);
  std::string depth;
  for (int t : {1, 2}) {
    for (const char* split : {"train", "test"}) {
      depth += json{{"seed", 1}, {"variant", "cem-t" + std::to_string(t)}, {"T", t}, {"kernel", "rbf"},
                    {"step", 5}, {"split", split}, {"metric", "rmse"}, {"value", 0.1 * t}}
                   .dump() + "\n";
    }
  }
  write_text(dir / "gp" / "seed-1" / "metrics.jsonl", depth);
  const auto pd = emit_plotdata(dir, dir / "out");
  ASSERT_EQ(pd.argmin_lr.size(), 1u);
  EXPECT_NEAR(std::log10(pd.argmin_lr[0].second), std::log10(4e-3), 0.02);
  EXPECT_TRUE(fs::exists(dir / "out" / "runs.csv"));
  EXPECT_TRUE(fs::exists(dir / "out" / "lr_curve.csv"));
  std::ifstream in(dir / "out" / "rmse_vs_T.csv");
  std::string header, line;
  std::getline(in, header);
  EXPECT_EQ(header, "kernel,variant,T,seed,train_rmse,test_rmse");
  std::size_t n = 0;
  while (std::getline(in, line)) ++n;
  EXPECT_EQ(n, 2u);
}

TEST(PlotData, ErrorsNameTheProblem) {
  const auto empty = scratch("plot_empty");
  EXPECT_THROW(emit_plotdata(empty, empty / "out"), DataError);
  EXPECT_THROW(emit_plotdata(empty / "nope", empty / "out"), DataError);
  const auto dir = scratch("plot_missing");
  write_text(dir / "metrics.jsonl", R"({"step": 1, "split": "train", "value": 2.0})" "\n");
  try {
    emit_plotdata(dir, dir / "out");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("'metric'"), std::string::npos);
  }
  const auto dir2 = scratch("plot_metric");
  write_text(dir2 / "metrics.jsonl", R"({"step": 1, "split": "train", "metric": "loss", "value": 2.0})" "\n");
  EXPECT_THROW(emit_plotdata(dir2, dir2 / "out", "eval/perplexity"), DataError);
}

TEST(Run, CountTaskWritesTable) {
  auto s = parse_spec(json{{"task", "count"}, {"count", {{"seq_len", 16}}}});
  s.output = scratch("count").string();
  std::ostringstream out, log;
  const auto r = run(s, {1, &out, &log});
  EXPECT_TRUE(r.passed);
  EXPECT_TRUE(fs::exists(r.dir / "count.csv"));
  EXPECT_TRUE(fs::exists(r.dir / "effective_spec.json"));
  EXPECT_TRUE(fs::exists(r.dir / "verdict.json"));
  EXPECT_NE(out.str().find("1/2"), std::string::npos);
  EXPECT_NE(out.str().find("2/3"), std::string::npos);
}

TEST(Run, TinyGpRunProducesArtifacts) {
  json j = {{"task", "gp-regression"},
            {"data", {{"n_points", 40}}},
            {"optim", {{"total_steps", 5}, {"batch_size", 8}}},
            {"seeds", {0, 1}}};
  auto s = parse_spec(j);
  s.output = scratch("gp").string();
  std::ostringstream out, log;
  const auto r = run(s, {2, &out, &log});
  for (const char* seed : {"seed-0", "seed-1"}) {
    for (const char* f : {"data.csv", "metrics.jsonl", "gated.ckpt", "cem-t1.ckpt", "cem-t2.ckpt"})
      EXPECT_TRUE(fs::exists(r.dir / seed / f)) << seed << "/" << f;
  }
  EXPECT_TRUE(fs::exists(r.dir / "summary.csv"));
  EXPECT_TRUE(r.verdict.contains("pairs"));
  // metrics can be tidied straight away
  EXPECT_NO_THROW(emit_plotdata(r.dir, r.dir / "plotdata"));
}

TEST(Cli, ExitCodes) {
  const auto dir = scratch("exit");
  write_text(dir / "bad.json", R"({"task": "gp-regression", "optim": {"peak_lr": -1}})");
  EXPECT_EQ(run_cli("run " + (dir / "bad.json").string()), 2);
  write_text(dir / "typo.json", R"({"task": "verify", "verfy": {}})");
  EXPECT_EQ(run_cli("run " + (dir / "typo.json").string()), 2);
  write_text(dir / "broken.json", "{ not json");
  EXPECT_EQ(run_cli("run " + (dir / "broken.json").string()), 2);
  EXPECT_EQ(run_cli("run " + (dir / "absent.json").string()), 2);
  EXPECT_EQ(run_cli("run"), 2);
  EXPECT_EQ(run_cli("run --spec " + (dir / "typo.json").string() + " --set nope"), 2);

  write_text(dir / "nocorpus.json",
             R"({"task": "lm-smoke", "data": {"corpus": "/nonexistent/corpus.txt"}})");
  EXPECT_EQ(run_cli("run " + (dir / "nocorpus.json").string() + " --out " + (dir / "o").string()), 1);
  EXPECT_EQ(run_cli("emit-plotdata " + (dir / "empty").string()), 1);

  write_text(dir / "verify.json",
             R"({"task": "verify", "verify": {"equivalence_configs": 2, "gradient_instances": 2,
                 "model_instances": 1, "descent_instances": 2, "causality_instances": 1}})");
  EXPECT_EQ(run_cli("run " + (dir / "verify.json").string() + " --out " + (dir / "o").string()), 0);
  ::setenv("CEM_OUT_ROOT", (dir / "env").c_str(), 1);
  EXPECT_EQ(run_cli("run " + (dir / "verify.json").string()), 0);
  ::unsetenv("CEM_OUT_ROOT");
  EXPECT_TRUE(fs::exists(dir / "env"));
}

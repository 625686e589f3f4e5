#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cem/error.hpp"
#include "plotdata.hpp"
#include "spec.hpp"
#include "tasks.hpp"

namespace fs = std::filesystem;
using namespace cem;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitSpec = 2;

// Relative corpus paths resolve against the working directory first and
// the spec file's directory second.
void resolve_corpus(nlohmann::json& j, const fs::path& spec_path) {
  if (!j.contains("data") || !j["data"].is_object() || !j["data"].contains("corpus")) return;
  auto& c = j["data"]["corpus"];
  if (!c.is_string()) return;
  const fs::path p = c.get<std::string>();
  if (p.is_absolute() || fs::exists(p)) return;
  const fs::path alt = spec_path.parent_path() / p;
  if (fs::exists(alt)) c = alt.string();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Causal energy minimization transformer experiments"};
  app.require_subcommand(1);

  std::string spec_path;
  std::vector<std::string> overrides;
  std::string out_dir, seeds, kernel, steps;
  std::size_t jobs = 1;
  auto* run = app.add_subcommand("run", "Run the task described by an experiment spec");
  run->add_option("spec,--spec", spec_path, "Experiment spec (JSON)")->required();
  run->add_option("--set", overrides, "Override a spec field: dotted.key=value (repeatable)");
  run->add_option("--out", out_dir, "Output root (default $CEM_OUT_ROOT, else ./out)");
  run->add_option("--seeds", seeds, "Seeds, e.g. 0-4 or 1,3");
  run->add_option("--jobs", jobs, "Seeds trained concurrently")->check(CLI::PositiveNumber);
  run->add_option("--kernel", kernel, "GP kernel kind (desk lengthscale)");
  run->add_option("--T", steps, "CEM MLP recursion depths, e.g. 1,2");

  std::string metrics_dir, plot_out, metric;
  auto* plot = app.add_subcommand("emit-plotdata", "Tidy CSVs from a run's metrics");
  plot->add_option("metrics,--metrics", metrics_dir, "Run directory")->required();
  plot->add_option("--out", plot_out, "Where to write CSVs (default <metrics>/plotdata)");
  plot->add_option("--metric", metric, "Metric for the LR curve, e.g. eval/perplexity");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitSpec;
  }

  if (*plot) {
    try {
      const fs::path out = plot_out.empty() ? fs::path(metrics_dir) / "plotdata" : fs::path(plot_out);
      const auto pd = cli::emit_plotdata(metrics_dir, out, metric);
      for (const auto& f : pd.files) std::cout << f.string() << '\n';
      for (const auto& [seed, lr] : pd.argmin_lr) {
        std::cout << "seed " << seed << ": Akima argmin lr " << lr << '\n';
      }
      return 0;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << '\n';
      return kExitRuntime;
    }
  }

  cli::ExperimentSpec spec;
  try {
    auto j = cli::load_json(spec_path);
    if (!kernel.empty()) cli::apply_override(j, "data.kernel=\"" + kernel + "\"");
    if (!steps.empty()) {
      nlohmann::json list = cli::parse_index_list(steps);
      cli::apply_override(j, "gp.steps=" + list.dump());
    }
    if (!seeds.empty()) {
      nlohmann::json list = cli::parse_index_list(seeds);
      cli::apply_override(j, "seeds=" + list.dump());
    }
    for (const auto& o : overrides) cli::apply_override(j, o);
    if (!out_dir.empty()) cli::apply_override(j, "output=\"" + out_dir + "\"");
    resolve_corpus(j, spec_path);
    spec = cli::parse_spec(j);
  } catch (const cem::Error& e) {
    std::cerr << "invalid spec: " << e.what() << '\n';
    return kExitSpec;
  }

  try {
    cli::RunOptions opts;
    opts.jobs = jobs;
    const auto res = cli::run(spec, opts);
    return res.passed ? 0 : kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "run failed: " << e.what() << '\n';
    return kExitRuntime;
  }
}

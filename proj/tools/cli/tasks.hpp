#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <string>

#include <nlohmann/json.hpp>

#include "spec.hpp"

namespace cem::cli {

struct RunOptions {
  std::size_t jobs = 1;  // seeds trained concurrently
  std::ostream* out = nullptr;  // tables and verdicts; null = std::cout
  std::ostream* log = nullptr;  // progress; null = std::cerr
};

struct RunResult {
  bool passed = true;  // task verdict (all suites green, ordering held, ...)
  std::filesystem::path dir;
  nlohmann::json verdict;
};

// Runs the task under <root>/<spec-hash>/, writing effective_spec.json,
// per-seed metrics.jsonl, summary.csv, checkpoints and verdict.json.
RunResult run(const ExperimentSpec& spec, const RunOptions& options = {});

struct GpRow {
  std::uint64_t seed = 0;
  std::string kernel;
  std::string variant;
  std::size_t steps = 0;  // T; 0 for the gated baseline
  std::size_t parameters = 0;
  std::size_t mlp_core = 0;
  std::size_t flops = 0;  // per forward pass of one input point
  double train_rmse = 0.0;
  double test_rmse = 0.0;
  double wall_seconds = 0.0;
};

// Ordering statistics over per-seed rows: for consecutive T values, the
// number of seeds where the deeper recursion has lower test RMSE, and for
// T=1 the relative test-RMSE gap to the gated baseline.
nlohmann::json gp_ordering(const std::vector<GpRow>& rows);

}  // namespace cem::cli

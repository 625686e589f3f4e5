#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cem/data.hpp"
#include "cem/model.hpp"
#include "cem/optim.hpp"
#include "cem/verify.hpp"

namespace cem::cli {

inline constexpr int kSpecVersion = 1;

enum class Task { gp_regression, lm_smoke, verify, lr_sweep, count };
const char* to_string(Task task);

struct DataSpec {
  data::GpKernelSpec kernel = data::desk_kernel(data::KernelKind::rbf);
  std::size_t n_points = 8000;
  double train_fraction = 0.8;
  std::size_t input_dim = 10;
  std::string corpus = "data/corpus.txt";
  std::size_t seq_len = 64;
  double eval_fraction = 0.1;
};

struct LoggingSpec {
  std::size_t log_every = 10;
  std::size_t eval_every = 100;
  std::size_t eval_limit = 64;
};

// gp-regression: a Gated baseline (same dims, gated MLP) plus one CEM model
// per recursion depth T.
struct GpSpec {
  std::vector<std::size_t> steps = {1, 2};
  bool gated_baseline = true;
};

// lr-sweep: trains `base` once per learning rate and fits an Akima curve
// through (log10 lr, final metric).
struct SweepSpec {
  Task base = Task::lm_smoke;
  std::vector<double> lrs = {5e-4, 1e-3, 2e-3, 4e-3, 8e-3};
};

struct CountEntry {
  std::string name;
  model::ModelConfig model;
};

// count: each CEM entry is paired with its reference twin (same shapes,
// reference attention and gated MLP).
struct CountSpec {
  std::vector<CountEntry> models;
  std::size_t seq_len = 256;
};

struct ExperimentSpec {
  int version = kSpecVersion;
  Task task = Task::gp_regression;
  model::ModelConfig model;
  train::OptimConfig optim;
  DataSpec data;
  LoggingSpec logging;
  GpSpec gp;
  SweepSpec sweep;
  CountSpec count;
  verify::SuiteOptions verify;
  std::vector<std::uint64_t> seeds = {0};
  std::string output;  // empty: $CEM_OUT_ROOT or ./out

  void validate() const;
};

// Strict parsing: unknown or mistyped fields raise ConfigError naming the
// dotted path. A task-appropriate model and optimizer default is filled in
// when "model" / "optim" are absent.
ExperimentSpec parse_spec(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentSpec& spec);

nlohmann::json load_json(const std::filesystem::path& path);

// "a.b.c=value": value is read as JSON when it parses, else as a string.
void apply_override(nlohmann::json& j, const std::string& assignment);

// Short stable hash of the spec minus seeds and output location.
std::string spec_hash(const ExperimentSpec& spec);

std::filesystem::path output_root(const ExperimentSpec& spec);

// Comma-separated integers, with "a-b" ranges: "0-4", "1,2,8".
std::vector<std::uint64_t> parse_index_list(const std::string& text);

}  // namespace cem::cli

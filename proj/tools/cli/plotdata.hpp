#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace cem::cli {

struct PlotData {
  std::vector<std::filesystem::path> files;
  // Per-seed Akima argmins of the LR curve, when a sweep was found.
  std::vector<std::pair<std::uint64_t, double>> argmin_lr;
};

// Reads every metrics.jsonl below `metrics_dir` and writes tidy CSVs into
// `out_dir`: runs.csv (all records), lr_curve.csv (final `lr_metric` per
// learning rate, plus Akima argmin rows) and rmse_vs_T.csv (final RMSEs per
// variant). An empty `lr_metric` picks eval/perplexity, else test/rmse.
// Throws DataError on empty metrics or a missing key.
PlotData emit_plotdata(const std::filesystem::path& metrics_dir,
                       const std::filesystem::path& out_dir,
                       const std::string& lr_metric = "");

}  // namespace cem::cli

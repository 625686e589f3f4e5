#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <variant>
#include <vector>

#include "cem/data.hpp"
#include "cem/model.hpp"
#include "cem/optim.hpp"

namespace cem::train {

struct LmData {
  std::vector<data::TokenWindow> train;
  std::vector<data::TokenWindow> eval;
};

using TrainData = std::variant<data::GpDataset, LmData>;

struct MetricRecord {
  std::size_t step = 0;
  std::string split;
  std::string metric;
  double value = 0.0;
};

void to_json(nlohmann::json& j, const MetricRecord& r);

struct RunMetrics {
  std::vector<MetricRecord> records;
  double wall_seconds = 0.0;

  // Values of (split, metric) in step order.
  std::vector<double> series(const std::string& split, const std::string& metric) const;
  // Last recorded value; throws DataError if absent.
  double last(const std::string& split, const std::string& metric) const;
};

struct TrainOptions {
  std::size_t log_every = 10;
  std::size_t eval_every = 100;
  // Cap on windows / points used per evaluation (0 = all).
  std::size_t eval_limit = 64;
  std::function<void(const MetricRecord&)> sink;
  // Where to dump the last good parameters if the loss turns non-finite.
  std::filesystem::path failure_dir;
};

// Evaluation metrics: GP -> rmse on both splits; LM -> loss on a fixed
// probe of train windows plus loss and perplexity on eval windows.
std::vector<MetricRecord> evaluate(const model::Model& m, const TrainData& data,
                                   std::size_t step, std::size_t eval_limit);

// Mean loss and parameter gradients over one minibatch.
struct BatchGradient {
  double loss = 0.0;
  std::vector<Tensor> grads;
};
BatchGradient batch_gradient(model::Model& m, const TrainData& data,
                             std::span<const std::size_t> indices);

// AdamW with the cosine schedule and global-norm clipping. Minibatches are
// drawn from a per-epoch shuffle seeded by `seed`. Throws NumericalError on
// a non-finite loss after dumping the last good checkpoint.
RunMetrics train_loop(model::Model& m, const TrainData& data, const OptimConfig& cfg,
                      std::uint64_t seed, const TrainOptions& options = {});

}  // namespace cem::train

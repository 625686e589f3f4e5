#include "cem/train.hpp"

#include <chrono>
#include <cmath>

#include "cem/error.hpp"
#include "cem/ops.hpp"

namespace cem::train {
namespace {

std::size_t train_size(const TrainData& data) {
  if (const auto* gp = std::get_if<data::GpDataset>(&data)) return gp->train.inputs.dim(0);
  return std::get<LmData>(data).train.size();
}

Tensor gather(const Tensor& t, std::span<const std::size_t> rows) {
  const std::size_t cols = t.dim(1);
  Tensor out({rows.size(), cols});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = t.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

double rmse(const model::Model& m, const data::RegressionBatch& b) {
  const Tensor pred = model::regression_predict(m, b.inputs);
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - b.targets[i];
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(pred.size()));
}

double mean_lm_loss(const model::Model& m, const std::vector<data::TokenWindow>& windows,
                    std::size_t limit) {
  const std::size_t n = limit == 0 ? windows.size() : std::min(limit, windows.size());
  if (n == 0) throw DataError("no windows to evaluate");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    Tape tape(false);
    ParamBinding bind(tape, false);
    total += model::lm_loss(m, windows[i], bind).value().item();
  }
  return total / static_cast<double>(n);
}

}  // namespace

void to_json(nlohmann::json& j, const MetricRecord& r) {
  j = nlohmann::json{{"step", r.step}, {"split", r.split}, {"metric", r.metric},
                     {"value", r.value}};
}

std::vector<double> RunMetrics::series(const std::string& split,
                                       const std::string& metric) const {
  std::vector<double> out;
  for (const MetricRecord& r : records) {
    if (r.split == split && r.metric == metric) out.push_back(r.value);
  }
  return out;
}

double RunMetrics::last(const std::string& split, const std::string& metric) const {
  const auto s = series(split, metric);
  if (s.empty()) throw DataError("no metric '" + split + "/" + metric + "' recorded");
  return s.back();
}

std::vector<MetricRecord> evaluate(const model::Model& m, const TrainData& data,
                                   std::size_t step, std::size_t eval_limit) {
  std::vector<MetricRecord> out;
  if (const auto* gp = std::get_if<data::GpDataset>(&data)) {
    out.push_back({step, "train", "rmse", rmse(m, gp->train)});
    out.push_back({step, "test", "rmse", rmse(m, gp->test)});
    return out;
  }
  const auto& lm = std::get<LmData>(data);
  out.push_back({step, "train", "loss", mean_lm_loss(m, lm.train, eval_limit)});
  if (!lm.eval.empty()) {
    const double loss = mean_lm_loss(m, lm.eval, eval_limit);
    out.push_back({step, "eval", "loss", loss});
    out.push_back({step, "eval", "perplexity", std::exp(loss)});
  }
  return out;
}

BatchGradient batch_gradient(model::Model& m, const TrainData& data,
                             std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("empty minibatch");
  Tape tape;
  ParamBinding bind(tape);
  Var loss;
  if (const auto* gp = std::get_if<data::GpDataset>(&data)) {
    loss = model::regression_loss(m, gather(gp->train.inputs, indices),
                                  gather(gp->train.targets, indices), bind);
  } else {
    const auto& lm = std::get<LmData>(data);
    Var total;
    for (std::size_t i : indices) {
      const Var l = model::lm_loss(m, lm.train.at(i), bind);
      total = total.valid() ? total + l : l;
    }
    loss = scale(total, 1.0 / static_cast<double>(indices.size()));
  }
  const Gradients grads = tape.backward(loss);
  BatchGradient out;
  out.loss = loss.value().item();
  for (const ParamRef& p : m.parameters()) {
    const auto v = bind.find(*p.tensor);
    out.grads.push_back(v ? grads[*v] : Tensor::zeros_like(*p.tensor));
  }
  return out;
}

RunMetrics train_loop(model::Model& m, const TrainData& data, const OptimConfig& cfg,
                      std::uint64_t seed, const TrainOptions& options) {
  cfg.validate();
  const bool gp_task = std::holds_alternative<data::GpDataset>(data);
  if (gp_task != (m.config.head == model::TaskHead::regression_scalar)) {
    throw ConfigError("model head does not match the data task");
  }
  const std::size_t n = train_size(data);
  if (n == 0) throw DataError("training set is empty");

  const auto start = std::chrono::steady_clock::now();
  RunMetrics run;
  auto emit = [&](const MetricRecord& r) {
    run.records.push_back(r);
    if (options.sink) options.sink(r);
  };
  for (const auto& r : evaluate(m, data, 0, options.eval_limit)) emit(r);

  const ParamList params = m.parameters();
  AdamState state;
  std::vector<std::size_t> order;
  std::size_t cursor = n;
  std::size_t epoch = 0;
  std::vector<std::size_t> batch(std::min(cfg.batch_size, n));

  for (std::size_t step = 1; step <= cfg.total_steps; ++step) {
    for (std::size_t& idx : batch) {
      if (cursor == n) {
        order = data::shuffled_order(n, seed * 1000003ULL + epoch++);
        cursor = 0;
      }
      idx = order[cursor++];
    }
    BatchGradient bg = batch_gradient(m, data, batch);
    if (!std::isfinite(bg.loss)) {
      if (!options.failure_dir.empty()) {
        model::save_checkpoint(m, options.failure_dir / "last_good.bin");
      }
      throw NumericalError("non-finite loss at step " + std::to_string(step) +
                           (options.failure_dir.empty()
                                ? std::string()
                                : "; last good parameters in " +
                                      (options.failure_dir / "last_good.bin").string()));
    }
    const double grad_norm = clip_by_global_norm(bg.grads, cfg.clip);
    const double lr = lr_schedule(step, cfg);
    adamw_step_lr(params, bg.grads, state, cfg, lr);

    if (step == 1 || step == cfg.total_steps ||
        (options.log_every && step % options.log_every == 0)) {
      emit({step, "train", "batch_loss", bg.loss});
      emit({step, "train", "grad_norm", grad_norm});
      emit({step, "train", "lr", lr});
    }
    if (step == cfg.total_steps || (options.eval_every && step % options.eval_every == 0)) {
      for (const auto& r : evaluate(m, data, step, options.eval_limit)) emit(r);
    }
  }
  run.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return run;
}

}  // namespace cem::train

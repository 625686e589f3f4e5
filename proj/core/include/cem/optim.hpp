#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "cem/params.hpp"
#include "cem/tensor.hpp"

namespace cem::train {

struct OptimConfig {
  double peak_lr = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-9;
  double weight_decay = 0.1;
  double clip = 1.0;
  double warmup_fraction = 0.05;
  double final_factor = 0.1;
  std::size_t total_steps = 500;
  std::size_t batch_size = 8;

  void validate() const;
};

void to_json(nlohmann::json& j, const OptimConfig& c);
void from_json(const nlohmann::json& j, OptimConfig& c);

// Linear warmup 0 -> peak, then cosine from peak to final_factor * peak.
// Steps past the end clamp to the final value.
double lr_schedule(std::size_t step, const OptimConfig& cfg);

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t t = 0;
};

// One AdamW update at schedule step `step` (1-based). Decoupled decay:
// p <- p (1 - lr wd) for params with decay, then the bias-corrected Adam
// step. Throws NumericalError naming the parameter on a non-finite gradient.
void adamw_step(const ParamList& params, std::span<const Tensor> grads, AdamState& state,
                const OptimConfig& cfg, std::size_t step);

// Same update at an explicit learning rate.
void adamw_step_lr(const ParamList& params, std::span<const Tensor> grads, AdamState& state,
                   const OptimConfig& cfg, double lr);

}  // namespace cem::train

#include "cem/optim.hpp"

#include <cmath>
#include <numbers>

#include "cem/error.hpp"

namespace cem::train {
namespace {

std::size_t count_field(const nlohmann::json& v, const std::string& key) {
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ConfigError("field 'optim." + key + "': expected a non-negative integer");
  }
  return v.get<std::size_t>();
}

}  // namespace

void OptimConfig::validate() const {
  if (!(peak_lr >= 0.0)) throw ConfigError("optim.peak_lr must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("optim betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw ConfigError("optim.eps must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("optim.weight_decay must be >= 0");
  if (!(clip > 0.0)) throw ConfigError("optim.clip must be positive");
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) {
    throw ConfigError("optim.warmup_fraction must lie in (0, 1)");
  }
  if (!(final_factor > 0.0 && final_factor <= 1.0)) {
    throw ConfigError("optim.final_factor must lie in (0, 1]");
  }
  if (batch_size == 0) throw ConfigError("optim.batch_size must be >= 1");
}

void to_json(nlohmann::json& j, const OptimConfig& c) {
  j = nlohmann::json{{"peak_lr", c.peak_lr},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"eps", c.eps},
                     {"weight_decay", c.weight_decay},
                     {"clip", c.clip},
                     {"warmup_fraction", c.warmup_fraction},
                     {"final_factor", c.final_factor},
                     {"total_steps", c.total_steps},
                     {"batch_size", c.batch_size}};
}

void from_json(const nlohmann::json& j, OptimConfig& c) {
  if (!j.is_object()) throw ConfigError("optim config must be an object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "peak_lr") c.peak_lr = value.get<double>();
      else if (key == "beta1") c.beta1 = value.get<double>();
      else if (key == "beta2") c.beta2 = value.get<double>();
      else if (key == "eps") c.eps = value.get<double>();
      else if (key == "weight_decay") c.weight_decay = value.get<double>();
      else if (key == "clip") c.clip = value.get<double>();
      else if (key == "warmup_fraction") c.warmup_fraction = value.get<double>();
      else if (key == "final_factor") c.final_factor = value.get<double>();
      else if (key == "total_steps") c.total_steps = count_field(value, key);
      else if (key == "batch_size") c.batch_size = count_field(value, key);
      else throw ConfigError("unknown field 'optim." + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("field 'optim." + key + "': " + e.what());
    }
  }
}

double lr_schedule(std::size_t step, const OptimConfig& cfg) {
  const double total = static_cast<double>(cfg.total_steps);
  const double floor = cfg.final_factor * cfg.peak_lr;
  if (cfg.total_steps == 0) return step == 0 ? 0.0 : floor;
  const double s = std::min(static_cast<double>(step), total);
  const double warmup = cfg.warmup_fraction * total;
  if (s < warmup) return cfg.peak_lr * s / warmup;
  const double progress = (s - warmup) / (total - warmup);
  return floor + (cfg.peak_lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void adamw_step_lr(const ParamList& params, std::span<const Tensor> grads, AdamState& state,
                   const OptimConfig& cfg, double lr) {
  if (grads.size() != params.size()) {
    throw ContractError("adamw: " + std::to_string(grads.size()) + " gradients for " +
                        std::to_string(params.size()) + " parameters");
  }
  if (state.m.empty()) {
    for (const ParamRef& p : params) {
      state.m.push_back(Tensor::zeros_like(*p.tensor));
      state.v.push_back(Tensor::zeros_like(*p.tensor));
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adamw: state size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].tensor->shape()) {
      throw DimensionError("adamw: gradient for '" + params[i].name + "' has shape " +
                           shape_string(grads[i].shape()));
    }
    for (std::size_t e = 0; e < grads[i].size(); ++e) {
      if (!std::isfinite(grads[i][e])) {
        throw NumericalError("non-finite gradient in '" + params[i].name + "' at element " +
                             std::to_string(e));
      }
    }
  }

  state.t += 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i].tensor;
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    const Tensor& g = grads[i];
    const double decay = params[i].decay ? 1.0 - lr * cfg.weight_decay : 1.0;
    for (std::size_t e = 0; e < p.size(); ++e) {
      m[e] = cfg.beta1 * m[e] + (1.0 - cfg.beta1) * g[e];
      v[e] = cfg.beta2 * v[e] + (1.0 - cfg.beta2) * g[e] * g[e];
      const double mhat = m[e] / c1;
      const double vhat = v[e] / c2;
      p[e] = p[e] * decay - lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

void adamw_step(const ParamList& params, std::span<const Tensor> grads, AdamState& state,
                const OptimConfig& cfg, std::size_t step) {
  adamw_step_lr(params, grads, state, cfg, lr_schedule(step, cfg));
}

}  // namespace cem::train

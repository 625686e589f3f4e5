#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cem/layers.hpp"
#include "cem/params.hpp"
#include "cem/tape.hpp"

namespace cem::model {

// `none` gives token-free MLP stacks (the GP regression task).
enum class AttentionKind { reference, cem, none };
enum class MlpKind { reference_gated, reference_plain, cem };
enum class TaskHead { lm_logits, regression_scalar };

const char* to_string(AttentionKind kind);
const char* to_string(MlpKind kind);
const char* to_string(TaskHead head);

struct BlockConfig {
  std::size_t model_dim = 32;   // D_h
  std::size_t heads = 4;        // K
  std::size_t head_dim = 8;     // D_r
  std::size_t hidden_dim = 64;  // D_m
  double tau = 0.0;             // 0 means sqrt(D_r)
  std::size_t attn_steps = 1;   // T_eps
  std::size_t mlp_steps = 1;    // T_xi
  double attn_step_size = 1.0;
  double mlp_step_size = 1.0;
  bool learn_step_size = false;
  AttentionKind attention = AttentionKind::cem;
  MlpKind mlp = MlpKind::cem;
  layers::DiagonalMode diagonal = layers::DiagonalMode::none;
  layers::PreconditionerMode attn_precond = layers::PreconditionerMode::identity;
  layers::PreconditionerMode mlp_precond = layers::PreconditionerMode::identity;
  std::size_t attn_precond_rank = 4;
  std::size_t mlp_precond_rank = 16;
  bool alibi = false;
  bool inner_norm = true;
  std::size_t reuse = 1;  // how many times each residual block is applied
  layers::Activation activation = layers::Activation::silu;
  double init_std = 0.02;

  double resolved_tau() const;
  void validate() const;
};

struct ModelConfig {
  TaskHead head = TaskHead::lm_logits;
  std::size_t vocab = 256;
  std::size_t input_dim = 10;
  std::size_t layers = 2;
  BlockConfig block;

  void validate() const;
};

void to_json(nlohmann::json& j, const BlockConfig& c);
void from_json(const nlohmann::json& j, BlockConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Named architecture presets. "llama-86m" .. "llama-162m" are the published
// shapes (build only); "lm-desk", "gp-cem" and "gp-gated" are desk scale.
ModelConfig preset(const std::string& name);
std::vector<std::string> preset_names();

struct BlockParams {
  std::optional<layers::RmsNormParams> norm1;
  std::optional<layers::ReferenceMhaParams> ref_attn;
  std::optional<layers::AlibiBias> ref_alibi;
  std::optional<layers::CemAttentionParams> cem_attn;
  layers::RmsNormParams norm2;
  std::optional<layers::GatedMlpParams> gated;
  std::optional<layers::PlainMlpParams> plain;
  std::optional<layers::CemMlpParams> cem_mlp;
};

struct Model {
  ModelConfig config;
  Tensor embedding;  // [vocab x D_h]        (lm)
  Tensor input_w;    // [D_h x input_dim]    (regression)
  Tensor input_b;    // [D_h]                (regression)
  std::vector<BlockParams> blocks;
  std::optional<layers::RmsNormParams> final_norm;  // lm only
  Tensor head_w;  // [vocab x D_h] or [1 x D_h]
  Tensor head_b;  // [1] (regression)

  // Every stored tensor, in a fixed order. Pointers are into this model.
  ParamList parameters();
};

Model build_model(const ModelConfig& cfg, std::uint64_t seed);

// h' = h + update per sublayer, pre-norm.
Var block_forward(const BlockParams& block, const BlockConfig& cfg, const Var& h,
                  ParamBinding& bind);

// Logits [J x vocab] for a token sequence.
Var lm_logits(const Model& m, std::span<const std::size_t> tokens, ParamBinding& bind);
// Mean next-token cross-entropy over the window.
Var lm_loss(const Model& m, std::span<const std::size_t> window, ParamBinding& bind);
// Predictions [n x 1] for inputs [n x input_dim]; rows are independent.
Var regression_forward(const Model& m, const Var& inputs, ParamBinding& bind);
Var regression_loss(const Model& m, const Tensor& inputs, const Tensor& targets,
                    ParamBinding& bind);

Tensor lm_logits(const Model& m, std::span<const std::size_t> tokens);
Tensor regression_predict(const Model& m, const Tensor& inputs);

// A reference-layer model whose weights are the tied copies of `cem`'s
// (W^V = W^K, W^O = W^Q, W^g = W, W^u = V, W^d = V^T). Requires a CEM model.
Model tied_reference_model(const Model& cem);

struct ParameterCounts {
  std::map<std::string, std::size_t> by_group;
  std::size_t attention_core = 0;  // projection matrices only
  std::size_t mlp_core = 0;
  std::size_t total = 0;
};

// Closed-form counts from the configuration.
ParameterCounts count_parameters(const ModelConfig& cfg);
ParameterCounts count_parameters(const Model& m);
// Sum of element counts over every stored tensor.
std::size_t count_parameters_brute_force(Model& m);

// Forward-pass FLOPs: 2mnk per matmul, elementwise work ignored except the
// preconditioner diagonal (one multiply per element).
struct FlopCounts {
  std::size_t embedding_or_input = 0;
  std::size_t attention = 0;
  std::size_t mlp = 0;
  std::size_t head = 0;
  std::size_t total = 0;
};
FlopCounts count_flops(const ModelConfig& cfg, std::size_t seq_len, std::size_t batch);

void save_checkpoint(Model& m, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace cem::model

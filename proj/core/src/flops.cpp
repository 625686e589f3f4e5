#include "cem/model.hpp"

// Closed-form parameter and FLOP accounting.
namespace cem::model {

using layers::DiagonalMode;
using layers::PreconditionerMode;

ParameterCounts count_parameters(const ModelConfig& cfg) {
  const BlockConfig& bc = cfg.block;
  const std::size_t d = bc.model_dim;
  const std::size_t heads = bc.heads;
  auto precond = [&](PreconditionerMode mode, std::size_t rank) -> std::size_t {
    switch (mode) {
      case PreconditionerMode::identity:
        return 0;
      case PreconditionerMode::diagonal:
        return d;
      case PreconditionerMode::diag_low_rank:
        return d + 2 * d * rank;
    }
    return 0;
  };

  std::size_t attn_core = 0, attn_extra = 0, mlp_core = 0, mlp_extra = 0;
  std::size_t norms = d;  // norm2
  std::size_t pre = 0;
  if (bc.attention != AttentionKind::none) norms += d;
  if (bc.attention == AttentionKind::reference) {
    attn_core = 4 * heads * bc.head_dim * d;
    if (bc.alibi) attn_extra += 2;
  } else if (bc.attention == AttentionKind::cem) {
    attn_core = 2 * heads * bc.head_dim * d;
    if (bc.diagonal == DiagonalMode::shared) attn_extra += d;
    if (bc.diagonal == DiagonalMode::per_head) attn_extra += heads * d;
    if (bc.alibi) attn_extra += 2;
    if (bc.learn_step_size) attn_extra += 1;
    if (bc.inner_norm) norms += d;
    pre += heads * precond(bc.attn_precond, bc.attn_precond_rank);
  }
  switch (bc.mlp) {
    case MlpKind::reference_gated:
      mlp_core = 3 * bc.hidden_dim * d;
      break;
    case MlpKind::reference_plain:
      mlp_core = 2 * bc.hidden_dim * d;
      break;
    case MlpKind::cem:
      mlp_core = 2 * bc.hidden_dim * d;
      if (bc.learn_step_size) mlp_extra += 1;
      if (bc.inner_norm) norms += d;
      pre += precond(bc.mlp_precond, bc.mlp_precond_rank);
      break;
  }

  ParameterCounts c;
  const std::size_t layers = cfg.layers;
  if (cfg.head == TaskHead::lm_logits) {
    c.by_group["embedding"] = cfg.vocab * d;
    c.by_group["head"] = cfg.vocab * d;
    norms = norms * layers + d;  // final norm
  } else {
    c.by_group["input"] = cfg.input_dim * d + d;
    c.by_group["head"] = d + 1;
    norms *= layers;
  }
  c.attention_core = attn_core * layers;
  c.mlp_core = mlp_core * layers;
  c.by_group["attention"] = (attn_core + attn_extra) * layers;
  c.by_group["mlp"] = (mlp_core + mlp_extra) * layers;
  c.by_group["norms"] = norms;
  c.by_group["preconditioners"] = pre * layers;
  for (const auto& [group, n] : c.by_group) c.total += n;
  return c;
}

ParameterCounts count_parameters(const Model& m) { return count_parameters(m.config); }

std::size_t count_parameters_brute_force(Model& m) {
  std::size_t total = 0;
  for (const ParamRef& p : m.parameters()) total += p.tensor->size();
  return total;
}

FlopCounts count_flops(const ModelConfig& cfg, std::size_t seq_len, std::size_t batch) {
  cfg.validate();
  const BlockConfig& bc = cfg.block;
  const std::size_t j = seq_len, d = bc.model_dim, k = bc.heads, r = bc.head_dim;
  const std::size_t m = bc.hidden_dim;
  auto mm = [](std::size_t a, std::size_t b, std::size_t c) { return 2 * a * b * c; };
  auto precond = [&](PreconditionerMode mode, std::size_t rank) -> std::size_t {
    if (mode == PreconditionerMode::identity) return 0;
    std::size_t f = j * d;
    if (mode == PreconditionerMode::diag_low_rank) f += 4 * mm(j, d, rank);
    return f;
  };

  std::size_t attn = 0;
  if (bc.attention == AttentionKind::reference) {
    attn = k * (4 * mm(j, d, r) + 2 * mm(j, j, r));
  } else if (bc.attention == AttentionKind::cem) {
    std::size_t step = k * (2 * mm(j, d, r) + 2 * mm(j, j, r) +
                            precond(bc.attn_precond, bc.attn_precond_rank));
    if (bc.diagonal == DiagonalMode::shared) step += mm(j, j, d);
    if (bc.diagonal == DiagonalMode::per_head) step += k * mm(j, j, d);
    attn = k * mm(j, d, r) + bc.attn_steps * step;
  }
  std::size_t mlp = 0;
  switch (bc.mlp) {
    case MlpKind::reference_gated:
      mlp = 3 * mm(j, d, m);
      break;
    case MlpKind::reference_plain:
      mlp = 2 * mm(j, d, m);
      break;
    case MlpKind::cem:
      mlp = mm(j, d, m) +
            bc.mlp_steps * (2 * mm(j, d, m) + precond(bc.mlp_precond, bc.mlp_precond_rank));
      break;
  }

  FlopCounts f;
  const std::size_t per_block = cfg.layers * bc.reuse * batch;
  f.attention = attn * per_block;
  f.mlp = mlp * per_block;
  if (cfg.head == TaskHead::lm_logits) {
    f.head = batch * mm(j, d, cfg.vocab);
  } else {
    f.embedding_or_input = batch * mm(j, cfg.input_dim, d);
    f.head = batch * mm(j, d, 1);
  }
  f.total = f.embedding_or_input + f.attention + f.mlp + f.head;
  return f;
}

}  // namespace cem::model

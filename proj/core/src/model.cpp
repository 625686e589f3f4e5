#include "cem/model.hpp"

#include <cmath>
#include <fstream>
#include <array>

#include "cem/error.hpp"
#include "cem/ops.hpp"
#include "cem/random.hpp"
#include "cem/serialize.hpp"

namespace cem::model {

using nlohmann::json;
using layers::DiagonalMode;
using layers::PreconditionerMode;

namespace {

template <typename Enum, std::size_t N>
Enum parse_enum(const std::string& field, const std::string& value,
                const std::array<Enum, N>& options) {
  std::string allowed;
  for (Enum e : options) {
    if (value == to_string(e)) return e;
    allowed += (allowed.empty() ? "" : ", ") + std::string(to_string(e));
  }
  throw ConfigError("field '" + field + "': unknown value '" + value +
                    "' (expected one of " + allowed + ")");
}

const char* activation_name(layers::Activation a) {
  switch (a) {
    case layers::Activation::silu:
      return "silu";
    case layers::Activation::sigmoid:
      return "sigmoid";
    case layers::Activation::softplus:
      return "softplus";
  }
  return "silu";
}

layers::Activation activation_from(const std::string& field, const std::string& s) {
  if (s == "silu") return layers::Activation::silu;
  if (s == "sigmoid") return layers::Activation::sigmoid;
  if (s == "softplus") return layers::Activation::softplus;
  throw ConfigError("field '" + field + "': unknown activation '" + s +
                    "' (expected silu, sigmoid or softplus)");
}

template <typename T>
T get(const json& j, const std::string& key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("field '" + key + "': " + e.what());
  }
}

std::size_t get_count(const json& j, const std::string& key) {
  const json& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ConfigError("field '" + key + "': expected a non-negative integer");
  }
  return v.get<std::size_t>();
}

void require_positive(std::size_t v, const char* name) {
  if (v == 0) throw ConfigError(std::string(name) + " must be >= 1");
}

Tensor tied_down(const Tensor& v) { return transpose(v); }

}  // namespace

const char* to_string(AttentionKind kind) {
  switch (kind) {
    case AttentionKind::reference:
      return "reference";
    case AttentionKind::cem:
      return "cem";
    case AttentionKind::none:
      return "none";
  }
  return "none";
}

const char* to_string(MlpKind kind) {
  switch (kind) {
    case MlpKind::reference_gated:
      return "reference-gated";
    case MlpKind::reference_plain:
      return "reference-plain";
    case MlpKind::cem:
      return "cem";
  }
  return "cem";
}

const char* to_string(TaskHead head) {
  switch (head) {
    case TaskHead::lm_logits:
      return "lm-logits";
    case TaskHead::regression_scalar:
      return "regression-scalar";
  }
  return "lm-logits";
}

double BlockConfig::resolved_tau() const {
  return tau > 0.0 ? tau : std::sqrt(static_cast<double>(head_dim));
}

void BlockConfig::validate() const {
  require_positive(model_dim, "model_dim");
  require_positive(heads, "heads");
  require_positive(head_dim, "head_dim");
  require_positive(hidden_dim, "hidden_dim");
  require_positive(attn_steps, "attn_steps");
  require_positive(mlp_steps, "mlp_steps");
  require_positive(reuse, "reuse");
  if (tau < 0.0 || !std::isfinite(tau)) {
    throw ConfigError("tau must be positive (or 0 for sqrt(head_dim))");
  }
  if (!std::isfinite(attn_step_size) || !std::isfinite(mlp_step_size)) {
    throw ConfigError("step sizes must be finite");
  }
  if (attn_precond == PreconditionerMode::diag_low_rank) {
    require_positive(attn_precond_rank, "attn_precond_rank");
  }
  if (mlp_precond == PreconditionerMode::diag_low_rank) {
    require_positive(mlp_precond_rank, "mlp_precond_rank");
  }
  if (!(init_std > 0.0)) throw ConfigError("init_std must be positive");
}

void ModelConfig::validate() const {
  if (layers == 0) throw ConfigError("layers must be >= 1");
  block.validate();
  if (head == TaskHead::lm_logits) {
    require_positive(vocab, "vocab");
    if (block.attention == AttentionKind::none) {
      throw ConfigError("lm-logits models need an attention kind other than none");
    }
  } else {
    require_positive(input_dim, "input_dim");
    if (block.attention != AttentionKind::none) {
      throw ConfigError(
          "regression-scalar models treat rows as independent points; "
          "block.attention must be none");
    }
  }
}

void to_json(json& j, const BlockConfig& c) {
  j = json{{"model_dim", c.model_dim},
           {"heads", c.heads},
           {"head_dim", c.head_dim},
           {"hidden_dim", c.hidden_dim},
           {"tau", c.tau},
           {"attn_steps", c.attn_steps},
           {"mlp_steps", c.mlp_steps},
           {"attn_step_size", c.attn_step_size},
           {"mlp_step_size", c.mlp_step_size},
           {"learn_step_size", c.learn_step_size},
           {"attention", to_string(c.attention)},
           {"mlp", to_string(c.mlp)},
           {"diagonal", layers::to_string(c.diagonal)},
           {"attn_precond", layers::to_string(c.attn_precond)},
           {"mlp_precond", layers::to_string(c.mlp_precond)},
           {"attn_precond_rank", c.attn_precond_rank},
           {"mlp_precond_rank", c.mlp_precond_rank},
           {"alibi", c.alibi},
           {"inner_norm", c.inner_norm},
           {"reuse", c.reuse},
           {"activation", activation_name(c.activation)},
           {"init_std", c.init_std}};
}

void from_json(const json& j, BlockConfig& c) {
  if (!j.is_object()) throw ConfigError("block config must be an object");
  for (const auto& [key, value] : j.items()) {
    if (key == "model_dim") c.model_dim = get_count(j, key);
    else if (key == "heads") c.heads = get_count(j, key);
    else if (key == "head_dim") c.head_dim = get_count(j, key);
    else if (key == "hidden_dim") c.hidden_dim = get_count(j, key);
    else if (key == "tau") c.tau = get<double>(j, key);
    else if (key == "attn_steps") c.attn_steps = get_count(j, key);
    else if (key == "mlp_steps") c.mlp_steps = get_count(j, key);
    else if (key == "attn_step_size") c.attn_step_size = get<double>(j, key);
    else if (key == "mlp_step_size") c.mlp_step_size = get<double>(j, key);
    else if (key == "learn_step_size") c.learn_step_size = get<bool>(j, key);
    else if (key == "attention") {
      c.attention = parse_enum(key, get<std::string>(j, key),
                               std::array{AttentionKind::reference, AttentionKind::cem,
                                          AttentionKind::none});
    } else if (key == "mlp") {
      c.mlp = parse_enum(key, get<std::string>(j, key),
                         std::array{MlpKind::reference_gated, MlpKind::reference_plain,
                                    MlpKind::cem});
    } else if (key == "diagonal") {
      c.diagonal = parse_enum(key, get<std::string>(j, key),
                              std::array{DiagonalMode::none, DiagonalMode::shared,
                                         DiagonalMode::per_head});
    } else if (key == "attn_precond" || key == "mlp_precond") {
      auto mode = parse_enum(key, get<std::string>(j, key),
                             std::array{PreconditionerMode::identity,
                                        PreconditionerMode::diagonal,
                                        PreconditionerMode::diag_low_rank});
      (key == "attn_precond" ? c.attn_precond : c.mlp_precond) = mode;
    } else if (key == "attn_precond_rank") c.attn_precond_rank = get_count(j, key);
    else if (key == "mlp_precond_rank") c.mlp_precond_rank = get_count(j, key);
    else if (key == "alibi") c.alibi = get<bool>(j, key);
    else if (key == "inner_norm") c.inner_norm = get<bool>(j, key);
    else if (key == "reuse") c.reuse = get_count(j, key);
    else if (key == "activation") c.activation = activation_from(key, get<std::string>(j, key));
    else if (key == "init_std") c.init_std = get<double>(j, key);
    else throw ConfigError("unknown field 'block." + key + "'");
  }
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"head", to_string(c.head)},
           {"vocab", c.vocab},
           {"input_dim", c.input_dim},
           {"layers", c.layers},
           {"block", c.block}};
}

void from_json(const json& j, ModelConfig& c) {
  if (!j.is_object()) throw ConfigError("model config must be an object");
  if (j.contains("preset")) c = preset(get<std::string>(j, "preset"));
  for (const auto& [key, value] : j.items()) {
    if (key == "preset") continue;
    if (key == "head") {
      c.head = parse_enum(key, get<std::string>(j, key),
                          std::array{TaskHead::lm_logits, TaskHead::regression_scalar});
    } else if (key == "vocab") c.vocab = get_count(j, key);
    else if (key == "input_dim") c.input_dim = get_count(j, key);
    else if (key == "layers") c.layers = get_count(j, key);
    else if (key == "block") from_json(value, c.block);
    else throw ConfigError("unknown field 'model." + key + "'");
  }
}

ModelConfig preset(const std::string& name) {
  ModelConfig c;
  auto llama = [&](std::size_t dim, std::size_t layers, std::size_t heads,
                   std::size_t hidden) {
    c.head = TaskHead::lm_logits;
    c.vocab = 32000;
    c.layers = layers;
    c.block.model_dim = dim;
    c.block.heads = heads;
    c.block.head_dim = dim / heads;
    c.block.hidden_dim = hidden;
    c.block.attention = AttentionKind::reference;
    c.block.mlp = MlpKind::reference_gated;
  };
  if (name == "llama-86m") {
    llama(672, 8, 8, 1792);
  } else if (name == "llama-108m") {
    llama(672, 12, 12, 1792);
  } else if (name == "llama-134m") {
    llama(768, 12, 12, 2048);
  } else if (name == "llama-162m") {
    llama(864, 12, 12, 2304);
  } else if (name == "lm-desk") {
    c.head = TaskHead::lm_logits;
    c.vocab = 256;
    c.layers = 2;
    c.block.model_dim = 32;
    c.block.heads = 4;
    c.block.head_dim = 8;
    c.block.hidden_dim = 64;
    c.block.attn_steps = 2;
    c.block.mlp_steps = 2;
    c.block.diagonal = DiagonalMode::shared;
    c.block.attn_precond = PreconditionerMode::diag_low_rank;
    c.block.mlp_precond = PreconditionerMode::diag_low_rank;
    c.block.alibi = true;
  } else if (name == "gp-cem" || name == "gp-gated") {
    c.head = TaskHead::regression_scalar;
    c.input_dim = 10;
    c.layers = 1;
    c.block.model_dim = 16;
    c.block.hidden_dim = 32;
    c.block.attention = AttentionKind::none;
    c.block.mlp = name == "gp-cem" ? MlpKind::cem : MlpKind::reference_gated;
    c.block.init_std = 0.2;
  } else {
    std::string known;
    for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown preset '" + name + "' (known: " + known + ")");
  }
  return c;
}

std::vector<std::string> preset_names() {
  return {"llama-86m", "llama-108m", "llama-134m", "llama-162m",
          "lm-desk",   "gp-cem",     "gp-gated"};
}

ParamList Model::parameters() {
  ParamList out;
  if (config.head == TaskHead::lm_logits) {
    out.push_back({"embedding", &embedding, ParamGroup::embedding, true});
  } else {
    out.push_back({"input.w", &input_w, ParamGroup::input, true});
    out.push_back({"input.b", &input_b, ParamGroup::input, false});
  }
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    BlockParams& b = blocks[l];
    const std::string p = "blocks." + std::to_string(l);
    if (b.norm1) layers::append_params(p + ".norm1", *b.norm1, out);
    if (b.ref_attn) layers::append_params(p + ".attn", *b.ref_attn, out);
    if (b.ref_alibi) {
      out.push_back({p + ".attn.alibi.self", &b.ref_alibi->self_bias,
                     ParamGroup::attention, false});
      out.push_back({p + ".attn.alibi.cross", &b.ref_alibi->cross_bias,
                     ParamGroup::attention, false});
    }
    if (b.cem_attn) layers::append_params(p + ".attn", *b.cem_attn, out);
    layers::append_params(p + ".norm2", b.norm2, out);
    if (b.gated) layers::append_params(p + ".mlp", *b.gated, out);
    if (b.plain) layers::append_params(p + ".mlp", *b.plain, out);
    if (b.cem_mlp) layers::append_params(p + ".mlp", *b.cem_mlp, out);
  }
  if (final_norm) layers::append_params("final_norm", *final_norm, out);
  out.push_back({"head.w", &head_w, ParamGroup::head, true});
  if (config.head == TaskHead::regression_scalar) {
    out.push_back({"head.b", &head_b, ParamGroup::head, false});
  }
  return out;
}

Model build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const BlockConfig& bc = cfg.block;
  const std::size_t d = bc.model_dim;
  const double sd = bc.init_std;
  Rng rng(seed);
  Model m;
  m.config = cfg;
  if (cfg.head == TaskHead::lm_logits) {
    m.embedding = rng.normal_tensor({cfg.vocab, d}, sd);
  } else {
    m.input_w = rng.normal_tensor({d, cfg.input_dim}, sd);
    m.input_b = Tensor({d});
  }
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    BlockParams b;
    if (bc.attention != AttentionKind::none) {
      b.norm1 = layers::RmsNormParams::ones(d);
    }
    if (bc.attention == AttentionKind::reference) {
      b.ref_attn = layers::ReferenceMhaParams::init(bc.heads, d, bc.head_dim, sd, rng);
      if (bc.alibi) b.ref_alibi = layers::AlibiBias::geometric(bc.heads);
    } else if (bc.attention == AttentionKind::cem) {
      layers::CemAttentionParams a;
      for (std::size_t k = 0; k < bc.heads; ++k) {
        a.wq.push_back(rng.normal_tensor({bc.head_dim, d}, sd));
        a.wk.push_back(rng.normal_tensor({bc.head_dim, d}, sd));
      }
      a.diagonal = bc.diagonal;
      const std::size_t n_diag = bc.diagonal == DiagonalMode::none     ? 0
                                 : bc.diagonal == DiagonalMode::shared ? 1
                                                                       : bc.heads;
      for (std::size_t k = 0; k < n_diag; ++k) a.diag.emplace_back(Shape{d});
      for (std::size_t k = 0; k < bc.heads; ++k) {
        a.precond.push_back(layers::PreconditionerParams::init(
            bc.attn_precond, d, bc.attn_precond_rank, rng));
      }
      if (bc.alibi) a.alibi = layers::AlibiBias::geometric(bc.heads);
      if (bc.inner_norm) a.inner_norm = layers::RmsNormParams::ones(d);
      a.tau = bc.resolved_tau();
      a.steps = bc.attn_steps;
      a.step_size = Tensor::scalar(bc.attn_step_size);
      a.learn_step_size = bc.learn_step_size;
      b.cem_attn = std::move(a);
    }
    b.norm2 = layers::RmsNormParams::ones(d);
    switch (bc.mlp) {
      case MlpKind::reference_gated:
        b.gated = layers::GatedMlpParams::init(d, bc.hidden_dim, sd, rng);
        break;
      case MlpKind::reference_plain:
        b.plain = layers::PlainMlpParams::init(d, bc.hidden_dim, sd, rng);
        break;
      case MlpKind::cem: {
        layers::CemMlpParams p;
        p.w = rng.normal_tensor({bc.hidden_dim, d}, sd);
        p.v = rng.normal_tensor({bc.hidden_dim, d}, sd);
        p.precond = layers::PreconditionerParams::init(bc.mlp_precond, d,
                                                       bc.mlp_precond_rank, rng);
        if (bc.inner_norm) p.inner_norm = layers::RmsNormParams::ones(d);
        p.steps = bc.mlp_steps;
        p.step_size = Tensor::scalar(bc.mlp_step_size);
        p.learn_step_size = bc.learn_step_size;
        b.cem_mlp = std::move(p);
        break;
      }
    }
    m.blocks.push_back(std::move(b));
  }
  if (cfg.head == TaskHead::lm_logits) {
    m.final_norm = layers::RmsNormParams::ones(d);
    m.head_w = rng.normal_tensor({cfg.vocab, d}, sd);
  } else {
    m.head_w = rng.normal_tensor({1, d}, sd);
    m.head_b = Tensor({1});
  }
  return m;
}

Var block_forward(const BlockParams& block, const BlockConfig& cfg, const Var& h_in,
                  ParamBinding& bind) {
  Var h = h_in;
  for (std::size_t r = 0; r < cfg.reuse; ++r) {
    if (block.ref_attn || block.cem_attn) {
      const Var n = layers::rmsnorm(h, *block.norm1, bind);
      if (block.ref_attn) {
        h = h + layers::reference_mha(n, *block.ref_attn, cfg.resolved_tau(), bind,
                                      block.ref_alibi ? &*block.ref_alibi : nullptr);
      } else {
        h = h + layers::cem_attention(n, n, *block.cem_attn, bind).update;
      }
    }
    const Var n = layers::rmsnorm(h, block.norm2, bind);
    if (block.gated) {
      h = h + layers::reference_gated_mlp(n, *block.gated, cfg.activation, bind);
    } else if (block.plain) {
      h = h + layers::plain_mlp(n, *block.plain, cfg.activation, bind);
    } else {
      h = h + layers::cem_mlp(n, *block.cem_mlp, bind).update;
    }
  }
  return h;
}

Var lm_logits(const Model& m, std::span<const std::size_t> tokens, ParamBinding& bind) {
  if (m.config.head != TaskHead::lm_logits) {
    throw ContractError("lm_logits called on a regression model");
  }
  Var h = gather_rows(bind(m.embedding), tokens);
  for (const BlockParams& b : m.blocks) h = block_forward(b, m.config.block, h, bind);
  h = layers::rmsnorm(h, *m.final_norm, bind);
  return matmul(h, bind(m.head_w), false, true);
}

Var lm_loss(const Model& m, std::span<const std::size_t> window, ParamBinding& bind) {
  if (window.size() < 2) throw DataError("an LM window needs at least 2 tokens");
  const Var logits = lm_logits(m, window.first(window.size() - 1), bind);
  const Var logp = log_softmax_lastdim(logits);
  return neg(mean(pick_lastdim(logp, window.subspan(1))));
}

Var regression_forward(const Model& m, const Var& inputs, ParamBinding& bind) {
  if (m.config.head != TaskHead::regression_scalar) {
    throw ContractError("regression_forward called on an LM model");
  }
  Var h = matmul(inputs, bind(m.input_w), false, true) + bind(m.input_b);
  for (const BlockParams& b : m.blocks) h = block_forward(b, m.config.block, h, bind);
  return matmul(h, bind(m.head_w), false, true) + bind(m.head_b);
}

Var regression_loss(const Model& m, const Tensor& inputs, const Tensor& targets,
                    ParamBinding& bind) {
  const Var pred = regression_forward(m, bind.constant(inputs), bind);
  if (pred.shape() != targets.shape()) {
    throw DimensionError("targets " + shape_string(targets.shape()) +
                         " do not match predictions " + shape_string(pred.shape()));
  }
  return mean(square(pred - bind.constant(targets)));
}

Tensor lm_logits(const Model& m, std::span<const std::size_t> tokens) {
  Tape tape(false);
  ParamBinding bind(tape, false);
  return lm_logits(m, tokens, bind).value();
}

Tensor regression_predict(const Model& m, const Tensor& inputs) {
  Tape tape(false);
  ParamBinding bind(tape, false);
  return regression_forward(m, tape.constant(inputs), bind).value();
}

Model tied_reference_model(const Model& cem) {
  Model ref = cem;
  BlockConfig& bc = ref.config.block;
  if (bc.attention == AttentionKind::cem) bc.attention = AttentionKind::reference;
  if (bc.mlp == MlpKind::cem) {
    bc.mlp = MlpKind::reference_gated;
    bc.activation = layers::Activation::silu;
  }
  for (BlockParams& b : ref.blocks) {
    if (b.cem_attn) {
      layers::ReferenceMhaParams r;
      r.wq = b.cem_attn->wq;
      r.wk = b.cem_attn->wk;
      r.wv = b.cem_attn->wk;
      r.wo = b.cem_attn->wq;
      b.ref_attn = std::move(r);
      b.ref_alibi = b.cem_attn->alibi;
      b.cem_attn.reset();
    }
    if (b.cem_mlp) {
      b.gated = layers::GatedMlpParams{b.cem_mlp->w, b.cem_mlp->v,
                                       tied_down(b.cem_mlp->v)};
      b.cem_mlp.reset();
    }
  }
  return ref;
}

void save_checkpoint(Model& m, const std::filesystem::path& path) {
  NamedTensors tensors;
  for (const ParamRef& p : m.parameters()) tensors.emplace_back(p.name, *p.tensor);
  save_tensors(path, tensors);
  std::filesystem::path sidecar = path;
  sidecar += ".json";
  std::ofstream out(sidecar);
  if (!out) throw DataError("cannot write " + sidecar.string());
  out << json{{"version", kTensorFileVersion}, {"model", m.config}}.dump(2) << "\n";
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::filesystem::path sidecar = path;
  sidecar += ".json";
  std::ifstream in(sidecar);
  if (!in) throw DataError("missing checkpoint sidecar " + sidecar.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("bad checkpoint sidecar: " + std::string(e.what()));
  }
  if (!j.contains("version")) throw DataError("checkpoint sidecar has no version field");
  if (j.at("version").get<std::uint32_t>() != kTensorFileVersion) {
    throw DataError("unsupported checkpoint version");
  }
  Model m = build_model(j.at("model").get<ModelConfig>(), 0);
  const NamedTensors stored = load_tensors(path);
  ParamList params = m.parameters();
  if (stored.size() != params.size()) {
    throw DataError("checkpoint holds " + std::to_string(stored.size()) +
                    " tensors, model expects " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, t] = stored[i];
    if (name != params[i].name || t.shape() != params[i].tensor->shape()) {
      throw DataError("checkpoint tensor '" + name + "' " + shape_string(t.shape()) +
                      " does not match '" + params[i].name + "' " +
                      shape_string(params[i].tensor->shape()));
    }
    *params[i].tensor = t;
  }
  return m;
}

}  // namespace cem::model

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "cem/error.hpp"
#include "cem/model.hpp"
#include "cem/ops.hpp"
#include "cem/serialize.hpp"
#include "cem/verify.hpp"
#include "oracles.hpp"

using namespace cem;
using namespace cem::model;

namespace {

ModelConfig tiny_lm(AttentionKind a, MlpKind m) {
  ModelConfig c;
  c.vocab = 13;
  c.layers = 2;
  c.block.model_dim = 8;
  c.block.heads = 2;
  c.block.head_dim = 4;
  c.block.hidden_dim = 12;
  c.block.attention = a;
  c.block.mlp = m;
  return c;
}

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "cem_model_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Model, ClosedFormCountsMatchStoredTensors) {
  std::vector<ModelConfig> configs;
  for (auto a : {AttentionKind::reference, AttentionKind::cem})
    for (auto m : {MlpKind::reference_gated, MlpKind::reference_plain, MlpKind::cem})
      configs.push_back(tiny_lm(a, m));
  auto mlp_only = preset("gp-cem");
  mlp_only.block.mlp = MlpKind::reference_plain;
  configs.push_back(mlp_only);
  auto rich = tiny_lm(AttentionKind::cem, MlpKind::cem);
  rich.block.diagonal = layers::DiagonalMode::per_head;
  rich.block.attn_precond = layers::PreconditionerMode::diag_low_rank;
  rich.block.mlp_precond = layers::PreconditionerMode::diagonal;
  rich.block.alibi = true;
  rich.block.learn_step_size = true;
  configs.push_back(rich);
  auto gp = preset("gp-cem");
  configs.push_back(gp);
  configs.push_back(preset("gp-gated"));
  configs.push_back(preset("lm-desk"));
  for (const auto& cfg : configs) {
    Model m = build_model(cfg, 3);
    EXPECT_EQ(count_parameters(cfg).total, count_parameters_brute_force(m));
    EXPECT_EQ(count_parameters(m).total, count_parameters(cfg).total);
    std::size_t groups = 0;
    for (const auto& [name, n] : count_parameters(cfg).by_group) groups += n;
    EXPECT_EQ(groups, count_parameters(cfg).total);
  }
}

TEST(Model, PublishedShapeSizes) {
  // vocab 32000, D 672, 8 layers, D_m 1792: two vocab tables, four D x D
  // attention projections, three D x D_m MLP matrices, two norms per block
  // and a final norm.
  const std::size_t d = 672, m = 1792, v = 32000;
  const std::size_t want = 2 * v * d + 8 * (4 * d * d + 3 * d * m + 2 * d) + d;
  EXPECT_EQ(count_parameters(preset("llama-86m")).total, want);
  EXPECT_EQ(want, 86371488u);
  for (const auto& name : {"llama-86m", "llama-108m", "llama-134m", "llama-162m"}) {
    auto cfg = preset(name);
    const auto ref = count_parameters(cfg);
    cfg.block.attention = AttentionKind::cem;
    cfg.block.mlp = MlpKind::cem;
    const auto cem = count_parameters(cfg);
    EXPECT_EQ(2 * cem.attention_core, ref.attention_core) << name;
    EXPECT_EQ(3 * cem.mlp_core, 2 * ref.mlp_core) << name;
  }
  EXPECT_THROW(preset("llama-7b"), ConfigError);
}

TEST(Model, FlopsForAHandTracedConfig) {
  // J=3, D=4, K=2, D_r=2, D_m=5, vocab 7, one layer, batch 1.
  ModelConfig c;
  c.vocab = 7;
  c.layers = 1;
  c.block.model_dim = 4;
  c.block.heads = 2;
  c.block.head_dim = 2;
  c.block.hidden_dim = 5;
  c.block.attention = AttentionKind::reference;
  c.block.mlp = MlpKind::reference_gated;
  // per head: q,k,v 3 x (2*3*4*2) = 144, scores 2*3*3*2 = 36, mix 36,
  // output 2*3*2*4 = 48 -> 264; MLP 3 x 2*3*4*5 = 360; head 2*3*4*7 = 168.
  auto f = count_flops(c, 3, 1);
  EXPECT_EQ(f.attention, 528u);
  EXPECT_EQ(f.mlp, 360u);
  EXPECT_EQ(f.head, 168u);
  EXPECT_EQ(f.total, 1056u);
  EXPECT_EQ(count_flops(c, 3, 4).total, 4 * 1056u);

  // CEM with T=2 for both sublayers, identity preconditioners:
  // keys 2 x 48 once; per step per head query 48 + scores 36 + mix 36 +
  // back-projection 48 = 168 -> 96 + 2*2*168 = 768.
  // MLP gamma 120 once, per step 240 -> 120 + 480 = 600.
  c.block.attention = AttentionKind::cem;
  c.block.mlp = MlpKind::cem;
  c.block.attn_steps = 2;
  c.block.mlp_steps = 2;
  f = count_flops(c, 3, 1);
  EXPECT_EQ(f.attention, 768u);
  EXPECT_EQ(f.mlp, 600u);
}

TEST(Model, ConfigJsonRoundTripAndStrictness) {
  auto cfg = preset("lm-desk");
  cfg.block.tau = 1.5;
  cfg.block.reuse = 2;
  nlohmann::json j = cfg;
  ModelConfig back = j.get<ModelConfig>();
  EXPECT_EQ(nlohmann::json(back), j);

  j["block"]["heads_count"] = 3;
  try {
    (void)j.get<ModelConfig>();
    FAIL() << "unknown field accepted";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("heads_count"), std::string::npos);
  }
  auto bad = preset("lm-desk");
  bad.block.head_dim = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Model, CheckpointRoundTripIsBitExact) {
  auto cfg = preset("lm-desk");
  Model m = build_model(cfg, 17);
  const auto path = temp_file("desk.ckpt");
  save_checkpoint(m, path);
  Model back = load_checkpoint(path);
  EXPECT_EQ(nlohmann::json(back.config), nlohmann::json(cfg));
  auto a = m.parameters(), b = back.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_EQ(*a[i].tensor, *b[i].tensor) << a[i].name;
  }
  const std::vector<std::size_t> tokens = {3, 70, 101, 9};
  EXPECT_EQ(lm_logits(m, tokens), lm_logits(back, tokens));
}

TEST(Model, TensorFileRejectsCorruption) {
  const auto path = temp_file("bad.ckpt");
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOPE";
  }
  EXPECT_THROW(load_tensors(path), Error);
  EXPECT_THROW(load_tensors(temp_file("missing.ckpt")), Error);

  NamedTensors t = {{"a", Tensor::matrix({{1, 2}, {3, 4}})}, {"b", Tensor::scalar(-0.5)}};
  save_tensors(path, t);
  auto back = load_tensors(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].second, t[0].second);
  EXPECT_EQ(back[1].second.item(), -0.5);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  EXPECT_THROW(load_tensors(path), Error);
}

TEST(Model, LogitsAreCausal) {
  for (auto a : {AttentionKind::reference, AttentionKind::cem}) {
    auto cfg = tiny_lm(a, MlpKind::cem);
    cfg.block.attn_steps = 3;
    cfg.block.alibi = true;
    Model m = build_model(cfg, 5);
    std::vector<std::size_t> t1 = {1, 2, 3, 4, 5}, t2 = {1, 2, 3, 11, 0};
    const Tensor l1 = lm_logits(m, t1), l2 = lm_logits(m, t2);
    EXPECT_LT(max_abs_diff(slice_rows(l1, 0, 3), slice_rows(l2, 0, 3)), 1e-15);
    EXPECT_GT(max_abs_diff(slice_rows(l1, 3, 5), slice_rows(l2, 3, 5)), 1e-8);
  }
}

TEST(Model, LossIsMeanNextTokenCrossEntropy) {
  Model m = build_model(tiny_lm(AttentionKind::cem, MlpKind::cem), 6);
  const std::vector<std::size_t> w = {4, 8, 1, 12, 0};
  const Tensor logits = lm_logits(m, std::span(w).first(4));
  double want = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    double mx = -1e300, z = 0.0;
    for (std::size_t v = 0; v < 13; ++v) mx = std::max(mx, logits.at(i, v));
    for (std::size_t v = 0; v < 13; ++v) z += std::exp(logits.at(i, v) - mx);
    want += -(logits.at(i, w[i + 1]) - mx - std::log(z));
  }
  Tape tape(false);
  ParamBinding bind(tape, false);
  EXPECT_NEAR(lm_loss(m, w, bind).value().item(), want / 4.0, 1e-13);
}

TEST(Model, RegressionRowsAreIndependent) {
  Model m = build_model(preset("gp-cem"), 7);
  Rng rng(1);
  const Tensor x = rng.uniform_tensor({5, 10}, 0.0, 1.0);
  const Tensor all = regression_predict(m, x);
  ASSERT_EQ(all.shape(), (Shape{5, 1}));
  for (std::size_t r = 0; r < 5; ++r) {
    const Tensor one = regression_predict(m, slice_rows(x, r, r + 1));
    EXPECT_NEAR(one.item(), all.at(r, 0), 1e-14);
  }
  EXPECT_THROW(regression_predict(m, rng.uniform_tensor({2, 9}, 0.0, 1.0)), DimensionError);
}

TEST(Model, TapeGradientsMatchFiniteDifferences) {
  Model m = verify::random_cem_stack(21);
  const std::vector<std::size_t> w = {1, 5, 2, 9, 3, 7};
  const auto report = verify::check_model_gradients(
      m, [&](const Model& mm, ParamBinding& bind) { return lm_loss(mm, w, bind); }, 12, 4);
  EXPECT_GT(report.tensors.size(), 10u);
  EXPECT_LT(report.max_rel_error(), 1e-5);
}

TEST(Model, TiedReferenceReproducesPureCemStack) {
  auto cfg = tiny_lm(AttentionKind::cem, MlpKind::cem);
  cfg.block.inner_norm = false;
  cfg.layers = 1;
  Model cem = build_model(cfg, 8);
  Rng rng(99);
  for (auto& p : cem.parameters()) {
    if (p.group == ParamGroup::attention || p.group == ParamGroup::mlp)
      *p.tensor = rng.normal_tensor(p.tensor->shape(), 0.3);
  }
  Model ref = tied_reference_model(cem);
  const std::vector<std::size_t> t = {2, 4, 6, 8, 10};
  EXPECT_LT(max_abs_diff(lm_logits(cem, t), lm_logits(ref, t)), 1e-11);
}

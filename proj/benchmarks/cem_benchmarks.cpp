#include <benchmark/benchmark.h>

#include "cem/data.hpp"
#include "cem/layers.hpp"
#include "cem/model.hpp"
#include "cem/ops.hpp"
#include "cem/random.hpp"

using namespace cem;

namespace {

layers::CemAttentionParams attention_params(std::size_t dim, std::size_t steps, Rng& rng) {
  layers::CemAttentionParams p;
  const std::size_t heads = 4, rank = dim / heads;
  for (std::size_t k = 0; k < heads; ++k) {
    p.wq.push_back(rng.normal_tensor({rank, dim}, 0.1));
    p.wk.push_back(rng.normal_tensor({rank, dim}, 0.1));
    p.precond.push_back(layers::PreconditionerParams::init(
        layers::PreconditionerMode::diag_low_rank, dim, 4, rng));
  }
  p.diagonal = layers::DiagonalMode::shared;
  p.diag.push_back(rng.normal_tensor({dim}, 0.1));
  p.alibi = layers::AlibiBias::geometric(heads);
  p.inner_norm = layers::RmsNormParams::ones(dim);
  p.tau = std::sqrt(static_cast<double>(rank));
  p.steps = steps;
  return p;
}

layers::CemMlpParams mlp_params(std::size_t dim, std::size_t steps, Rng& rng) {
  layers::CemMlpParams p;
  p.w = rng.normal_tensor({2 * dim, dim}, 0.1);
  p.v = rng.normal_tensor({2 * dim, dim}, 0.1);
  p.precond = layers::PreconditionerParams::init(layers::PreconditionerMode::diag_low_rank, dim,
                                                 16, rng);
  p.inner_norm = layers::RmsNormParams::ones(dim);
  p.steps = steps;
  return p;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor a = rng.normal_tensor({n, n}), b = rng.normal_tensor({n, n});
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(128)->Arg(256);

void BM_CemAttentionForward(benchmark::State& state) {
  Rng rng(2);
  const auto p = attention_params(32, static_cast<std::size_t>(state.range(1)), rng);
  const Tensor h = rng.normal_tensor({static_cast<std::size_t>(state.range(0)), 32});
  for (auto _ : state) benchmark::DoNotOptimize(layers::cem_attention(h, h, p));
}
BENCHMARK(BM_CemAttentionForward)->Args({64, 1})->Args({64, 2})->Args({64, 4})->Args({256, 2});

void BM_CemAttentionBackward(benchmark::State& state) {
  Rng rng(3);
  const auto p = attention_params(32, static_cast<std::size_t>(state.range(1)), rng);
  const Tensor h = rng.normal_tensor({static_cast<std::size_t>(state.range(0)), 32});
  for (auto _ : state) {
    Tape tape;
    ParamBinding bind(tape);
    const Var x = tape.leaf(h);
    const Var loss = sum(square(layers::cem_attention(x, x, p, bind).state));
    benchmark::DoNotOptimize(tape.backward(loss));
  }
}
BENCHMARK(BM_CemAttentionBackward)->Args({64, 1})->Args({64, 2})->Args({64, 4});

void BM_CemMlpForward(benchmark::State& state) {
  Rng rng(4);
  const auto p = mlp_params(32, static_cast<std::size_t>(state.range(1)), rng);
  const Tensor h = rng.normal_tensor({static_cast<std::size_t>(state.range(0)), 32});
  for (auto _ : state) benchmark::DoNotOptimize(layers::cem_mlp(h, p));
}
BENCHMARK(BM_CemMlpForward)->Args({64, 1})->Args({64, 2})->Args({64, 4});

void BM_CemMlpBackward(benchmark::State& state) {
  Rng rng(5);
  const auto p = mlp_params(32, static_cast<std::size_t>(state.range(1)), rng);
  const Tensor h = rng.normal_tensor({static_cast<std::size_t>(state.range(0)), 32});
  for (auto _ : state) {
    Tape tape;
    ParamBinding bind(tape);
    const Var x = tape.leaf(h);
    const Var loss = sum(square(layers::cem_mlp(x, p, bind).state));
    benchmark::DoNotOptimize(tape.backward(loss));
  }
}
BENCHMARK(BM_CemMlpBackward)->Args({64, 1})->Args({64, 2})->Args({64, 4});

void BM_LmDeskTrainStep(benchmark::State& state) {
  auto m = model::build_model(model::preset("lm-desk"), 6);
  std::vector<std::size_t> window(64);
  for (std::size_t i = 0; i < window.size(); ++i) window[i] = (i * 37) % 256;
  for (auto _ : state) {
    Tape tape;
    ParamBinding bind(tape);
    benchmark::DoNotOptimize(tape.backward(model::lm_loss(m, window, bind)));
  }
}
BENCHMARK(BM_LmDeskTrainStep)->Unit(benchmark::kMillisecond);

void BM_GpSample(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) {
    benchmark::DoNotOptimize(data::gp_sample(data::desk_kernel(data::KernelKind::rbf), n, 7));
  }
}
BENCHMARK(BM_GpSample)->Arg(500)->Arg(2000)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cem/tensor.hpp"

namespace cem::data {

enum class KernelKind { rbf, matern, periodic, rational_quadratic, non_stationary };

const char* to_string(KernelKind kind);
KernelKind kernel_kind_from_string(const std::string& s);

struct GpKernelSpec {
  KernelKind kind = KernelKind::rbf;
  double lengthscale = 1.0;
  double variance = 1.0;
  double period = 1.0;  // periodic, per input dimension
  double alpha = 1.0;   // rational quadratic
  double nu = 2.5;      // Matern: 0.5, 1.5 or 2.5

  void validate() const;
  double operator()(std::span<const double> x, std::span<const double> y) const;
};

// Kernels used for the desk-scale ordering experiment: lengthscale 1, or 5
// for the periodic kernel (its product over ten dimensions is already rough).
GpKernelSpec desk_kernel(KernelKind kind);

void to_json(nlohmann::json& j, const GpKernelSpec& s);
void from_json(const nlohmann::json& j, GpKernelSpec& s);

// Gram matrix K[i][j] = k(a_i, b_j) over rows.
Tensor kernel_matrix(const GpKernelSpec& spec, const Tensor& a, const Tensor& b);

enum class Split { train, test };
const char* to_string(Split split);

struct RegressionBatch {
  Tensor inputs;   // [n x input_dim]
  Tensor targets;  // [n x 1]
  Split split = Split::train;
};

struct GpDataset {
  RegressionBatch train;
  RegressionBatch test;
  double jitter = 0.0;  // diagonal jitter the factorization needed
};

// Noise-free GP prior sample at n_points uniform inputs on [0,1]^input_dim.
// The first round(train_fraction * n) points form the train split.
GpDataset gp_sample(const GpKernelSpec& spec, std::size_t n_points, std::uint64_t seed,
                    std::size_t input_dim = 10, double train_fraction = 0.8);

// Draws L z with K + jitter I = L L^T; jitter starts at 1e-8 and grows 10x,
// at most 6 times. Returns the targets as [n x 1].
Tensor sample_gp_targets(const GpKernelSpec& spec, const Tensor& inputs,
                         std::uint64_t seed, double* jitter_used = nullptr);

void write_csv(const std::filesystem::path& path, const std::vector<RegressionBatch>& batches);

using TokenWindow = std::vector<std::size_t>;

// Byte tokens (vocab 256) of the file chunked into full windows of seq_len;
// the trailing remainder is dropped.
std::vector<TokenWindow> ingest_text(const std::filesystem::path& path, std::size_t seq_len);
std::vector<TokenWindow> chunk_bytes(const std::string& bytes, std::size_t seq_len);
std::string detokenize(const TokenWindow& window);

// Deterministic permutation of 0..n-1.
std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed);

}  // namespace cem::data

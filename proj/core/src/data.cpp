#include "cem/data.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <numbers>

#include "cem/error.hpp"
#include "cem/random.hpp"

namespace cem::data {
namespace {

constexpr double kInitialJitter = 1e-8;
constexpr int kMaxJitterEscalations = 6;

double squared_distance(std::span<const double> x, std::span<const double> y) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    s += d * d;
  }
  return s;
}

double matern(double r, double ell, double nu) {
  if (nu == 0.5) return std::exp(-r / ell);
  if (nu == 1.5) {
    const double a = std::sqrt(3.0) * r / ell;
    return (1.0 + a) * std::exp(-a);
  }
  const double a = std::sqrt(5.0) * r / ell;
  return (1.0 + a + a * a / 3.0) * std::exp(-a);
}

}  // namespace

const char* to_string(KernelKind kind) {
  switch (kind) {
    case KernelKind::rbf:
      return "rbf";
    case KernelKind::matern:
      return "matern";
    case KernelKind::periodic:
      return "periodic";
    case KernelKind::rational_quadratic:
      return "rational-quadratic";
    case KernelKind::non_stationary:
      return "non-stationary";
  }
  return "rbf";
}

KernelKind kernel_kind_from_string(const std::string& s) {
  for (KernelKind k : {KernelKind::rbf, KernelKind::matern, KernelKind::periodic,
                       KernelKind::rational_quadratic, KernelKind::non_stationary}) {
    if (s == to_string(k)) return k;
  }
  throw ConfigError("unknown kernel '" + s +
                    "' (expected rbf, matern, periodic, rational-quadratic or "
                    "non-stationary)");
}

const char* to_string(Split split) { return split == Split::train ? "train" : "test"; }

void GpKernelSpec::validate() const {
  if (!(lengthscale > 0.0) || !(variance > 0.0) || !(period > 0.0) || !(alpha > 0.0)) {
    throw ConfigError("kernel scale parameters must be positive");
  }
  if (kind == KernelKind::matern && nu != 0.5 && nu != 1.5 && nu != 2.5) {
    throw ConfigError("Matern nu must be 0.5, 1.5 or 2.5");
  }
}

double GpKernelSpec::operator()(std::span<const double> x, std::span<const double> y) const {
  if (x.size() != y.size()) throw DimensionError("kernel inputs differ in dimension");
  const double ell2 = lengthscale * lengthscale;
  switch (kind) {
    case KernelKind::rbf:
      return variance * std::exp(-0.5 * squared_distance(x, y) / ell2);
    case KernelKind::matern:
      return variance * matern(std::sqrt(squared_distance(x, y)), lengthscale, nu);
    case KernelKind::periodic: {
      double log_k = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double s = std::sin(std::numbers::pi * std::abs(x[i] - y[i]) / period);
        log_k -= 2.0 * s * s / ell2;
      }
      return variance * std::exp(log_k);
    }
    case KernelKind::rational_quadratic:
      return variance *
             std::pow(1.0 + squared_distance(x, y) / (2.0 * alpha * ell2), -alpha);
    case KernelKind::non_stationary: {
      // Gibbs kernel with l(x) = l0 (1 + x_1).
      const double lx = lengthscale * (1.0 + x[0]);
      const double ly = lengthscale * (1.0 + y[0]);
      const double sum = lx * lx + ly * ly;
      if (!(lx > 0.0) || !(ly > 0.0)) {
        throw DomainError("non-stationary lengthscale must stay positive");
      }
      const double prefactor =
          std::pow(2.0 * lx * ly / sum, 0.5 * static_cast<double>(x.size()));
      return variance * prefactor * std::exp(-squared_distance(x, y) / sum);
    }
  }
  return 0.0;
}

GpKernelSpec desk_kernel(KernelKind kind) {
  GpKernelSpec s;
  s.kind = kind;
  s.lengthscale = kind == KernelKind::periodic ? 5.0 : 1.0;
  return s;
}

void to_json(nlohmann::json& j, const GpKernelSpec& s) {
  j = nlohmann::json{{"kind", to_string(s.kind)}, {"lengthscale", s.lengthscale},
                     {"variance", s.variance},    {"period", s.period},
                     {"alpha", s.alpha},          {"nu", s.nu}};
}

void from_json(const nlohmann::json& j, GpKernelSpec& s) {
  if (!j.is_object()) throw ConfigError("kernel spec must be an object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "kind") s.kind = kernel_kind_from_string(value.get<std::string>());
      else if (key == "lengthscale") s.lengthscale = value.get<double>();
      else if (key == "variance") s.variance = value.get<double>();
      else if (key == "period") s.period = value.get<double>();
      else if (key == "alpha") s.alpha = value.get<double>();
      else if (key == "nu") s.nu = value.get<double>();
      else throw ConfigError("unknown field 'kernel." + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("field 'kernel." + key + "': " + e.what());
    }
  }
}

Tensor kernel_matrix(const GpKernelSpec& spec, const Tensor& a, const Tensor& b) {
  spec.validate();
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw DimensionError("kernel_matrix: incompatible inputs " + shape_string(a.shape()) +
                         " and " + shape_string(b.shape()));
  }
  Tensor k({a.dim(0), b.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    for (std::size_t j = 0; j < b.dim(0); ++j) k.at(i, j) = spec(a.row(i), b.row(j));
  }
  return k;
}

Tensor sample_gp_targets(const GpKernelSpec& spec, const Tensor& inputs,
                         std::uint64_t seed, double* jitter_used) {
  const Tensor k = kernel_matrix(spec, inputs, inputs);
  for (std::size_t i = 0; i < k.size(); ++i) {
    if (!std::isfinite(k[i])) {
      throw NumericalError("kernel matrix has a non-finite entry at (" +
                           std::to_string(i / k.dim(1)) + ", " + std::to_string(i % k.dim(1)) +
                           ")");
    }
  }
  const auto n = static_cast<Eigen::Index>(inputs.dim(0));
  using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Map<const RowMatrix> kmat(k.data().data(), n, n);

  double jitter = kInitialJitter;
  for (int attempt = 0; attempt <= kMaxJitterEscalations; ++attempt, jitter *= 10.0) {
    RowMatrix shifted = kmat;
    shifted.diagonal().array() += jitter;
    Eigen::LLT<RowMatrix> llt(shifted);
    if (llt.info() != Eigen::Success) continue;
    Rng rng(seed);
    Eigen::VectorXd z(n);
    for (Eigen::Index i = 0; i < n; ++i) z[i] = rng.normal();
    const Eigen::VectorXd y = llt.matrixL() * z;
    Tensor out({inputs.dim(0), 1});
    for (Eigen::Index i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = y[i];
    if (jitter_used) *jitter_used = jitter;
    return out;
  }
  throw NumericalError("kernel matrix factorization failed after " +
                       std::to_string(kMaxJitterEscalations) +
                       " jitter escalations (last jitter " + std::to_string(jitter / 10.0) +
                       ")");
}

GpDataset gp_sample(const GpKernelSpec& spec, std::size_t n_points, std::uint64_t seed,
                    std::size_t input_dim, double train_fraction) {
  if (n_points < 2) throw InputError("gp_sample needs at least 2 points");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ConfigError("train fraction must lie in (0, 1)");
  }
  Rng rng(seed);
  const Tensor inputs = rng.uniform_tensor({n_points, input_dim});
  GpDataset out;
  const Tensor targets =
      sample_gp_targets(spec, inputs, seed * 0x9E3779B97F4A7C15ULL + 1, &out.jitter);
  auto n_train = static_cast<std::size_t>(std::lround(train_fraction * n_points));
  n_train = std::clamp<std::size_t>(n_train, 1, n_points - 1);
  out.train = {slice_rows(inputs, 0, n_train), slice_rows(targets, 0, n_train), Split::train};
  out.test = {slice_rows(inputs, n_train, n_points), slice_rows(targets, n_train, n_points),
              Split::test};
  return out;
}

void write_csv(const std::filesystem::path& path, const std::vector<RegressionBatch>& batches) {
  if (batches.empty()) throw DataError("nothing to export");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path.string());
  const std::size_t dim = batches.front().inputs.dim(1);
  for (std::size_t c = 0; c < dim; ++c) out << "x" << c << ",";
  out << "y,split\n" << std::setprecision(17);
  for (const RegressionBatch& b : batches) {
    for (std::size_t r = 0; r < b.inputs.dim(0); ++r) {
      for (double v : b.inputs.row(r)) out << v << ",";
      out << b.targets[r] << "," << to_string(b.split) << "\n";
    }
  }
}

std::vector<TokenWindow> chunk_bytes(const std::string& bytes, std::size_t seq_len) {
  if (seq_len == 0) throw ConfigError("seq_len must be >= 1");
  if (bytes.empty()) throw DataError("text corpus is empty");
  std::vector<TokenWindow> out;
  for (std::size_t start = 0; start + seq_len <= bytes.size(); start += seq_len) {
    TokenWindow w(seq_len);
    for (std::size_t i = 0; i < seq_len; ++i) {
      w[i] = static_cast<unsigned char>(bytes[start + i]);
    }
    out.push_back(std::move(w));
  }
  return out;
}

std::vector<TokenWindow> ingest_text(const std::filesystem::path& path, std::size_t seq_len) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.empty()) throw DataError(path.string() + " is empty");
  return chunk_bytes(bytes, seq_len);
}

std::string detokenize(const TokenWindow& window) {
  std::string s;
  s.reserve(window.size());
  for (std::size_t t : window) s.push_back(static_cast<char>(t));
  return s;
}

std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  return order;
}

}  // namespace cem::data

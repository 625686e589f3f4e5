#include "cem/akima.hpp"

#include <algorithm>
#include <cmath>

#include "cem/error.hpp"

namespace cem::train {
namespace {

constexpr std::size_t kMinKnots = 5;
constexpr std::size_t kScanIntervals = 1000;

}  // namespace

AkimaSpline::AkimaSpline(std::vector<double> xs, std::vector<double> ys)
    : xs_(std::move(xs)), ys_(std::move(ys)) {
  if (xs_.size() != ys_.size()) throw InputError("akima: xs and ys differ in length");
  if (xs_.size() < kMinKnots) {
    throw InputError("akima: need at least 5 knots, got " + std::to_string(xs_.size()));
  }
  for (std::size_t i = 0; i < xs_.size(); ++i) {
    if (!std::isfinite(xs_[i]) || !std::isfinite(ys_[i])) {
      throw InputError("akima: knots must be finite");
    }
    if (i > 0 && !(xs_[i] > xs_[i - 1])) {
      throw InputError("akima: xs must be strictly increasing (duplicate or unsorted at " +
                       std::to_string(i) + ")");
    }
  }

  const std::size_t n = xs_.size();
  // Chord slopes m[2..n] with two extrapolated slopes on each side.
  std::vector<double> m(n + 3);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    m[i + 2] = (ys_[i + 1] - ys_[i]) / (xs_[i + 1] - xs_[i]);
  }
  m[1] = 2.0 * m[2] - m[3];
  m[0] = 2.0 * m[1] - m[2];
  m[n + 1] = 2.0 * m[n] - m[n - 1];
  m[n + 2] = 2.0 * m[n + 1] - m[n];

  slopes_.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double w1 = std::abs(m[i + 3] - m[i + 2]);
    const double w2 = std::abs(m[i + 1] - m[i]);
    if (w1 + w2 == 0.0) {
      slopes_[i] = 0.5 * (m[i + 1] + m[i + 2]);
    } else {
      slopes_[i] = (w1 * m[i + 1] + w2 * m[i + 2]) / (w1 + w2);
    }
  }
}

double AkimaSpline::operator()(double x) const {
  if (x < lower() || x > upper()) {
    throw InputError("akima: x outside [" + std::to_string(lower()) + ", " +
                     std::to_string(upper()) + "]");
  }
  auto it = std::upper_bound(xs_.begin(), xs_.end(), x);
  std::size_t i = it == xs_.begin() ? 0 : static_cast<std::size_t>(it - xs_.begin()) - 1;
  if (i >= xs_.size() - 1) i = xs_.size() - 2;
  const double h = xs_[i + 1] - xs_[i];
  const double t = x - xs_[i];
  const double chord = (ys_[i + 1] - ys_[i]) / h;
  const double c2 = (3.0 * chord - 2.0 * slopes_[i] - slopes_[i + 1]) / h;
  const double c3 = (slopes_[i] + slopes_[i + 1] - 2.0 * chord) / (h * h);
  return ys_[i] + t * (slopes_[i] + t * (c2 + t * c3));
}

AkimaSpline::Minimum AkimaSpline::argmin() const {
  const double span = upper() - lower();
  const double dx = span / static_cast<double>(kScanIntervals);
  std::size_t best = 0;
  double best_y = (*this)(lower());
  for (std::size_t k = 1; k <= kScanIntervals; ++k) {
    const double x = k == kScanIntervals ? upper() : lower() + dx * static_cast<double>(k);
    const double y = (*this)(x);
    if (y < best_y) {
      best_y = y;
      best = k;
    }
  }
  double a = std::max(lower(), lower() + dx * (static_cast<double>(best) - 1.0));
  double b = std::min(upper(), lower() + dx * (static_cast<double>(best) + 1.0));
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = b - inv_phi * (b - a);
  double d = a + inv_phi * (b - a);
  for (int iter = 0; iter < 100 && (b - a) > 1e-12 * std::max(1.0, span); ++iter) {
    if ((*this)(c) < (*this)(d)) {
      b = d;
    } else {
      a = c;
    }
    c = b - inv_phi * (b - a);
    d = a + inv_phi * (b - a);
  }
  const double x_ref = 0.5 * (a + b);
  const double y_ref = (*this)(x_ref);
  const double x_best = best == kScanIntervals ? upper() : lower() + dx * static_cast<double>(best);
  if (y_ref < best_y) return {x_ref, y_ref};
  return {x_best, best_y};
}

}  // namespace cem::train

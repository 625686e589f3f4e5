#pragma once

#include <cstddef>
#include <vector>

namespace cem::train {

// Akima (1970) local cubic interpolant. Needs at least 5 strictly
// increasing knots.
class AkimaSpline {
 public:
  AkimaSpline(std::vector<double> xs, std::vector<double> ys);

  double operator()(double x) const;
  double lower() const { return xs_.front(); }
  double upper() const { return xs_.back(); }
  const std::vector<double>& slopes() const { return slopes_; }

  struct Minimum {
    double x;
    double y;
  };
  // Dense scan at 1e-3 of the span, then golden-section refinement around
  // the best sample. Ties resolve to the leftmost sample.
  Minimum argmin() const;

 private:
  std::vector<double> xs_, ys_, slopes_;
};

}  // namespace cem::train

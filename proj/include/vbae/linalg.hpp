#pragma once

#include <Eigen/Dense>

namespace vbae {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Matrix sigmoid(const Matrix& x) {
  return x.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

}  // namespace vbae

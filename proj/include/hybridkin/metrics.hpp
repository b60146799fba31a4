#pragma once

// Per-axis error summaries over position series stored as 3 x K matrices.

#include <cmath>
#include <string>

#include <Eigen/Dense>

#include "hybridkin/errors.hpp"

namespace hybridkin {

namespace detail {

inline void check_series(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& ref,
                         const char* who) {
  if (pred.rows() != 3 || ref.rows() != 3) {
    throw SizeError(std::string(who) + ": series must have 3 rows (x, y, z)");
  }
  if (pred.cols() != ref.cols()) {
    throw SizeError(std::string(who) + ": length mismatch (" +
                    std::to_string(pred.cols()) + " vs " + std::to_string(ref.cols()) + ")");
  }
  if (pred.cols() < 1) throw SizeError(std::string(who) + ": empty series");
}

}  // namespace detail

inline Eigen::Vector3d rmse(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& ref) {
  detail::check_series(pred, ref, "rmse");
  return ((pred - ref).array().square().rowwise().sum() / static_cast<double>(pred.cols()))
      .sqrt();
}

inline Eigen::Vector3d max_abs_error(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& ref) {
  detail::check_series(pred, ref, "max_abs_error");
  return (pred - ref).cwiseAbs().rowwise().maxCoeff();
}

}  // namespace hybridkin

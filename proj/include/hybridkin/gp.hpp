#pragma once

// Exact Gaussian process regression with a squared-exponential ARD kernel.
//
// Inputs are stored column-wise: X is (input_dim x N), one training point per
// column. The Gram matrix K(X,X) + noise*I is factored once with a Cholesky
// decomposition at fit time; every prediction is a pair of triangular solves.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <ceres/ceres.h>

#include "json.hpp"

#include "hybridkin/errors.hpp"

namespace hybridkin::gp {

// Added to the Gram diagonal, scaled by the signal variance.
inline constexpr double kJitterFactor = 1e-10;

struct KernelSpec {
  double signal_variance = 1.0;
  Eigen::VectorXd lengthscales;
  double noise_variance = 0.0;

  Eigen::Index input_dim() const { return lengthscales.size(); }

  void validate() const {
    if (!(signal_variance > 0.0) || !std::isfinite(signal_variance)) {
      throw InputError("kernel: signal_variance must be positive and finite");
    }
    if (lengthscales.size() == 0) {
      throw InputError("kernel: lengthscales must not be empty");
    }
    for (Eigen::Index j = 0; j < lengthscales.size(); ++j) {
      if (!(lengthscales[j] > 0.0) || !std::isfinite(lengthscales[j])) {
        throw InputError("kernel: lengthscale " + std::to_string(j) +
                         " must be positive and finite");
      }
    }
    if (!(noise_variance >= 0.0) || !std::isfinite(noise_variance)) {
      throw InputError("kernel: noise_variance must be nonnegative and finite");
    }
  }

  void validate(Eigen::Index dim) const {
    validate();
    if (lengthscales.size() != dim) {
      throw InputError("kernel: expected " + std::to_string(dim) +
                       " lengthscales, got " +
                       std::to_string(lengthscales.size()));
    }
  }
};

inline void to_json(nlohmann::json& j, const KernelSpec& k) {
  j = nlohmann::json{
      {"signal_variance", k.signal_variance},
      {"lengthscales", std::vector<double>(k.lengthscales.data(),
                                           k.lengthscales.data() +
                                               k.lengthscales.size())},
      {"noise_variance", k.noise_variance}};
}

inline void from_json(const nlohmann::json& j, KernelSpec& k) {
  k.signal_variance = j.at("signal_variance").get<double>();
  const auto ls = j.at("lengthscales").get<std::vector<double>>();
  k.lengthscales = Eigen::Map<const Eigen::VectorXd>(
      ls.data(), static_cast<Eigen::Index>(ls.size()));
  k.noise_variance = j.at("noise_variance").get<double>();
  k.validate();
}

using MeanFunction = std::function<double(const Eigen::VectorXd&)>;

inline MeanFunction zero_mean() {
  return [](const Eigen::VectorXd&) { return 0.0; };
}

inline MeanFunction constant_mean(double value) {
  return [value](const Eigen::VectorXd&) { return value; };
}

struct Posterior {
  double mean = 0.0;
  double variance = 0.0;
};

struct BatchPosterior {
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;
};

/// sigma_f^2 * exp(-1/2 sum_j ((a_j - b_j) / l_j)^2)
inline double kernel_eval(const KernelSpec& spec, const Eigen::VectorXd& a,
                          const Eigen::VectorXd& b) {
  if (a.size() != spec.input_dim() || b.size() != spec.input_dim()) {
    throw InputError("kernel_eval: input dimension mismatch (expected " +
                     std::to_string(spec.input_dim()) + ")");
  }
  double sq = 0.0;
  for (Eigen::Index j = 0; j < a.size(); ++j) {
    const double u = (a[j] - b[j]) / spec.lengthscales[j];
    sq += u * u;
  }
  return spec.signal_variance * std::exp(-0.5 * sq);
}

namespace detail {

// Inputs divided by their lengthscales, so the kernel is exp(-|u-v|^2/2).
inline Eigen::MatrixXd scaled(const Eigen::MatrixXd& X,
                              const Eigen::VectorXd& lengthscales) {
  return lengthscales.cwiseInverse().asDiagonal() * X;
}

inline double sq_dist(const Eigen::MatrixXd& A, Eigen::Index i,
                      const Eigen::MatrixXd& B, Eigen::Index j) {
  double s = 0.0;
  for (Eigen::Index d = 0; d < A.rows(); ++d) {
    const double u = A(d, i) - B(d, j);
    s += u * u;
  }
  return s;
}

// Noise-free Gram matrix K(X, X).
inline Eigen::MatrixXd gram(const KernelSpec& spec, const Eigen::MatrixXd& X) {
  const Eigen::MatrixXd U = scaled(X, spec.lengthscales);
  const Eigen::Index n = X.cols();
  Eigen::MatrixXd K(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    K(j, j) = spec.signal_variance;
    for (Eigen::Index i = j + 1; i < n; ++i) {
      const double v = spec.signal_variance * std::exp(-0.5 * sq_dist(U, i, U, j));
      K(i, j) = v;
      K(j, i) = v;
    }
  }
  return K;
}

// K(X, Xs), shape N x M.
inline Eigen::MatrixXd cross(const KernelSpec& spec, const Eigen::MatrixXd& X,
                             const Eigen::MatrixXd& Xs) {
  const Eigen::MatrixXd U = scaled(X, spec.lengthscales);
  const Eigen::MatrixXd V = scaled(Xs, spec.lengthscales);
  Eigen::MatrixXd K(X.cols(), Xs.cols());
  for (Eigen::Index j = 0; j < Xs.cols(); ++j) {
    for (Eigen::Index i = 0; i < X.cols(); ++i) {
      K(i, j) = spec.signal_variance * std::exp(-0.5 * sq_dist(U, i, V, j));
    }
  }
  return K;
}

inline double diagonal_load(const KernelSpec& spec) {
  return spec.noise_variance + kJitterFactor * spec.signal_variance;
}

inline Eigen::VectorXd evaluate_mean(const MeanFunction& mean_fn,
                                     const Eigen::MatrixXd& X) {
  Eigen::VectorXd m(X.cols());
  for (Eigen::Index i = 0; i < X.cols(); ++i) {
    m[i] = mean_fn(X.col(i));
  }
  return m;
}

}  // namespace detail

class GpModel;
GpModel fit(Eigen::MatrixXd X, Eigen::VectorXd y, KernelSpec spec,
            MeanFunction mean_fn = zero_mean());

/// A fitted, immutable GP. Safe to query from concurrent readers.
class GpModel {
 public:
  Eigen::Index size() const { return X_.cols(); }
  Eigen::Index input_dim() const { return X_.rows(); }
  const Eigen::MatrixXd& inputs() const { return X_; }
  const Eigen::VectorXd& targets() const { return y_; }
  const KernelSpec& kernel() const { return spec_; }
  const MeanFunction& mean_function() const { return mean_fn_; }
  // m(X) at the training inputs.
  const Eigen::VectorXd& prior_mean_at_inputs() const { return m_train_; }
  // K_y^{-1} (y - m(X))
  const Eigen::VectorXd& alpha() const { return alpha_; }
  Eigen::MatrixXd chol_factor() const { return llt_.matrixL(); }

  Posterior predict(const Eigen::VectorXd& x_star) const {
    const BatchPosterior b = predict_batch(Eigen::MatrixXd(x_star));
    return {b.mean[0], b.variance[0]};
  }

  /// Posterior at every column of Xs.
  BatchPosterior predict_batch(const Eigen::MatrixXd& Xs) const {
    check_dim(Xs.rows());
    const Eigen::MatrixXd Ks = detail::cross(spec_, X_, Xs);
    BatchPosterior out;
    out.mean = detail::evaluate_mean(mean_fn_, Xs) + Ks.transpose() * alpha_;
    const Eigen::MatrixXd V = llt_.matrixL().solve(Ks);
    out.variance =
        (spec_.signal_variance - V.colwise().squaredNorm().array())
            .max(0.0)
            .matrix()
            .transpose();
    return out;
  }

  double log_marginal_likelihood() const {
    const Eigen::VectorXd r = y_ - m_train_;
    const double log_det_half =
        llt_.matrixLLT().diagonal().array().log().sum();
    return -0.5 * r.dot(alpha_) - log_det_half -
           0.5 * static_cast<double>(size()) *
               std::log(2.0 * std::numbers::pi);
  }

 private:
  friend GpModel fit(Eigen::MatrixXd, Eigen::VectorXd, KernelSpec,
                     MeanFunction);
  GpModel() = default;

  void check_dim(Eigen::Index d) const {
    if (d != input_dim()) {
      throw InputError("gp: query dimension " + std::to_string(d) +
                       " does not match model input dimension " +
                       std::to_string(input_dim()));
    }
  }

  Eigen::MatrixXd X_;
  Eigen::VectorXd y_;
  KernelSpec spec_;
  MeanFunction mean_fn_;
  Eigen::VectorXd m_train_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  Eigen::VectorXd alpha_;
};

inline GpModel fit(Eigen::MatrixXd X, Eigen::VectorXd y, KernelSpec spec,
                   MeanFunction mean_fn) {
  if (X.cols() < 1) {
    throw InputError("gp fit: need at least one training point");
  }
  if (y.size() != X.cols()) {
    throw InputError("gp fit: " + std::to_string(X.cols()) +
                     " inputs but " + std::to_string(y.size()) + " targets");
  }
  spec.validate(X.rows());
  if (!mean_fn) {
    mean_fn = zero_mean();
  }
  if (spec.noise_variance == 0.0) {
    for (Eigen::Index j = 0; j < X.cols(); ++j) {
      for (Eigen::Index i = j + 1; i < X.cols(); ++i) {
        if (X.col(i) == X.col(j)) {
          throw DegenerateDataError(
              "gp fit: duplicate training inputs (columns " +
              std::to_string(j) + " and " + std::to_string(i) +
              ") with zero noise variance make the Gram matrix singular");
        }
      }
    }
  }

  GpModel model;
  model.m_train_ = detail::evaluate_mean(mean_fn, X);
  Eigen::MatrixXd K = detail::gram(spec, X);
  K.diagonal().array() += detail::diagonal_load(spec);
  model.llt_.compute(K);
  if (model.llt_.info() != Eigen::Success) {
    throw DegenerateDataError(
        "gp fit: Gram matrix K(X,X) + noise*I is not positive definite");
  }
  model.alpha_ = model.llt_.solve(y - model.m_train_);
  if (!model.alpha_.allFinite()) {
    throw DegenerateDataError("gp fit: non-finite weights; data ill-conditioned");
  }
  model.X_ = std::move(X);
  model.y_ = std::move(y);
  model.spec_ = std::move(spec);
  model.mean_fn_ = std::move(mean_fn);
  return model;
}

// ---------------------------------------------------------------------------
// Hyperparameter selection.
//
// Parameters are optimized in log space, laid out as
//   [log signal_variance, log l_1 .. log l_D, log noise_variance].

inline Eigen::VectorXd to_log_params(const KernelSpec& spec) {
  const Eigen::Index d = spec.input_dim();
  Eigen::VectorXd p(d + 2);
  p[0] = std::log(spec.signal_variance);
  p.segment(1, d) = spec.lengthscales.array().log();
  p[d + 1] = std::log(spec.noise_variance);
  return p;
}

inline KernelSpec from_log_params(const Eigen::VectorXd& p) {
  const Eigen::Index d = p.size() - 2;
  KernelSpec spec;
  spec.signal_variance = std::exp(p[0]);
  spec.lengthscales = p.segment(1, d).array().exp();
  spec.noise_variance = std::exp(p[d + 1]);
  return spec;
}

/// Log marginal likelihood of residual targets r = y - m(X) under the kernel
/// encoded by log_params; fills the gradient w.r.t. log_params when asked.
/// Returns -inf if the Gram matrix cannot be factored.
inline double log_marginal_likelihood(const Eigen::MatrixXd& X,
                                      const Eigen::VectorXd& residual,
                                      const Eigen::VectorXd& log_params,
                                      Eigen::VectorXd* gradient = nullptr) {
  const Eigen::Index n = X.cols();
  const Eigen::Index dim = X.rows();
  if (log_params.size() != dim + 2 || residual.size() != n) {
    throw InputError("log_marginal_likelihood: dimension mismatch");
  }
  const KernelSpec spec = from_log_params(log_params);
  const Eigen::MatrixXd Kf = detail::gram(spec, X);
  Eigen::MatrixXd Ky = Kf;
  const double jitter = kJitterFactor * spec.signal_variance;
  Ky.diagonal().array() += spec.noise_variance + jitter;
  const Eigen::LLT<Eigen::MatrixXd> llt(Ky);
  if (llt.info() != Eigen::Success) {
    return -std::numeric_limits<double>::infinity();
  }
  const Eigen::VectorXd alpha = llt.solve(residual);
  const double lml =
      -0.5 * residual.dot(alpha) -
      llt.matrixLLT().diagonal().array().log().sum() -
      0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
  if (gradient == nullptr) {
    return lml;
  }

  // dLML/dp = 1/2 tr((alpha alpha^T - Ky^{-1}) dKy/dp)
  Eigen::MatrixXd Q = -llt.solve(Eigen::MatrixXd::Identity(n, n));
  Q.noalias() += alpha * alpha.transpose();
  const Eigen::MatrixXd QK = Q.cwiseProduct(Kf);

  gradient->resize(dim + 2);
  (*gradient)[0] = 0.5 * (QK.sum() + jitter * Q.trace());
  for (Eigen::Index d = 0; d < dim; ++d) {
    const double inv_l2 = 1.0 / (spec.lengthscales[d] * spec.lengthscales[d]);
    double acc = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      const double xj = X(d, j);
      for (Eigen::Index i = j + 1; i < n; ++i) {
        const double u = X(d, i) - xj;
        acc += QK(i, j) * u * u;
      }
    }
    // Off-diagonal terms appear twice; the diagonal contributes nothing.
    (*gradient)[1 + d] = acc * inv_l2;
  }
  (*gradient)[dim + 1] = 0.5 * spec.noise_variance * Q.trace();
  return lml;
}

struct OptimizeOptions {
  int max_iterations = 100;
  // Log parameters are kept inside [-bound, bound].
  double log_bound = 40.0;
  // First start: noise variance as a fraction of the target second moment,
  // lengthscales as a multiple of each input's spread.
  double initial_noise_fraction = 0.1;
  double initial_lengthscale_factor = 1.0;
};

struct OptimizationResult {
  KernelSpec spec;
  double lml = -std::numeric_limits<double>::infinity();
  std::vector<double> initial_lml;  // one per restart
  std::vector<double> final_lml;
};

namespace detail {

class NegativeLml final : public ceres::FirstOrderFunction {
 public:
  NegativeLml(const Eigen::MatrixXd& X, const Eigen::VectorXd& r, double bound)
      : X_(X), r_(r), bound_(bound) {}

  bool Evaluate(const double* parameters, double* cost,
                double* gradient) const override {
    const Eigen::Map<const Eigen::VectorXd> p(parameters, NumParameters());
    if (!p.allFinite() || p.cwiseAbs().maxCoeff() > bound_) {
      return false;
    }
    Eigen::VectorXd g;
    const double lml =
        log_marginal_likelihood(X_, r_, p, gradient ? &g : nullptr);
    if (!std::isfinite(lml)) {
      return false;
    }
    *cost = -lml;
    if (gradient != nullptr) {
      if (!g.allFinite()) {
        return false;
      }
      Eigen::Map<Eigen::VectorXd>(gradient, NumParameters()) = -g;
    }
    return true;
  }

  int NumParameters() const override {
    return static_cast<int>(X_.rows()) + 2;
  }

 private:
  const Eigen::MatrixXd& X_;
  const Eigen::VectorXd& r_;
  double bound_;
};

}  // namespace detail

/// Multi-start L-BFGS ascent on the log marginal likelihood. Restart 0 starts
/// from data-derived scales; later restarts perturb those in log space.
inline OptimizationResult optimize_hyperparams_detailed(
    const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
    const MeanFunction& mean_fn, int restarts, std::uint64_t seed,
    const OptimizeOptions& options = {}) {
  if (restarts < 1) {
    throw InputError("optimize_hyperparams: restarts must be >= 1");
  }
  if (X.cols() < 1 || y.size() != X.cols()) {
    throw InputError("optimize_hyperparams: inputs and targets disagree");
  }
  const Eigen::Index dim = X.rows();
  const Eigen::VectorXd r =
      y - detail::evaluate_mean(mean_fn ? mean_fn : zero_mean(), X);

  // Second moment about the prior mean sets the output scale.
  double scale = r.squaredNorm() / static_cast<double>(r.size());
  if (!(scale > 0.0) || !std::isfinite(scale)) {
    scale = 1.0;
  }
  Eigen::VectorXd base(dim + 2);
  base[0] = std::log(scale);
  for (Eigen::Index d = 0; d < dim; ++d) {
    const Eigen::ArrayXd row = X.row(d).array();
    const double sd = std::sqrt((row - row.mean()).square().mean());
    base[1 + d] = sd > 0.0 ? std::log(options.initial_lengthscale_factor * sd) : 0.0;
  }
  base[dim + 1] = std::log(options.initial_noise_fraction * scale);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);

  OptimizationResult result;
  for (int k = 0; k < restarts; ++k) {
    Eigen::VectorXd p = base;
    if (k > 0) {
      for (Eigen::Index i = 0; i < p.size(); ++i) {
        p[i] += (i == dim + 1 ? 2.0 : 1.0) * unit(rng);
      }
    }
    p = p.cwiseMax(-options.log_bound + 1.0).cwiseMin(options.log_bound - 1.0);
    const double start = log_marginal_likelihood(X, r, p);
    result.initial_lml.push_back(start);
    if (!std::isfinite(start)) {
      result.final_lml.push_back(start);
      continue;
    }

    ceres::GradientProblem problem(
        new detail::NegativeLml(X, r, options.log_bound));
    ceres::GradientProblemSolver::Options solver_options;
    solver_options.line_search_direction_type = ceres::LBFGS;
    solver_options.max_num_iterations = options.max_iterations;
    solver_options.logging_type = ceres::SILENT;
    solver_options.minimizer_progress_to_stdout = false;
    solver_options.function_tolerance = 1e-10;
    solver_options.gradient_tolerance = 1e-8;
    solver_options.parameter_tolerance = 1e-10;
    ceres::GradientProblemSolver::Summary summary;
    Eigen::VectorXd q = p;
    ceres::Solve(solver_options, problem, q.data(), &summary);

    double lml = log_marginal_likelihood(X, r, q);
    if (!std::isfinite(lml) || lml < start) {
      q = p;
      lml = start;
    }
    result.final_lml.push_back(lml);
    if (lml > result.lml) {
      result.lml = lml;
      result.spec = from_log_params(q);
    }
  }
  if (!std::isfinite(result.lml)) {
    throw OptimizationError(
        "optimize_hyperparams: objective is non-finite at every start");
  }
  return result;
}

inline KernelSpec optimize_hyperparams(const Eigen::MatrixXd& X,
                                       const Eigen::VectorXd& y,
                                       const MeanFunction& mean_fn,
                                       int restarts, std::uint64_t seed,
                                       const OptimizeOptions& options = {}) {
  return optimize_hyperparams_detailed(X, y, mean_fn, restarts, seed, options)
      .spec;
}

}  // namespace hybridkin::gp

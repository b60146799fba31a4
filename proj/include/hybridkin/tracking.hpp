#pragma once

// Motor commands that make the analytical model trace a figure-eight in x, y
// while the roll motor follows its own profile. Tip height is left free.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hybridkin/dataset.hpp"
#include "hybridkin/errors.hpp"
#include "hybridkin/robot.hpp"
#include "hybridkin/trajectories.hpp"

namespace hybridkin {

struct TrackingOptions {
  int roll_motor = 0;
  double tolerance = 1e-10;  // m, on the x-y residual
  int max_iterations = 200;
  double fd_step = 1e-7;
};

struct TrackedPath {
  MotorTrajectory motors;
  Eigen::MatrixXd target;  // 3 x K: x, y, roll
  Eigen::MatrixXd tip;     // 3 x K: analytical model on the commands
  double max_residual = 0.0;
};

/// Motor state at sample k of a trajectory, with the previous sample as history.
inline MotorState trajectory_state(const MotorTrajectory& tr, Eigen::Index k) {
  MotorState s = MotorState::zeros(static_cast<int>(tr.theta.rows()));
  s.theta = tr.theta.col(k);
  s.theta_dot = tr.theta_dot.col(k);
  s.theta_ddot = tr.theta_ddot.col(k);
  if (k > 0) {
    s.theta_old = tr.theta.col(k - 1);
    s.theta_dot_old = tr.theta_dot.col(k - 1);
  }
  return s;
}

namespace detail {

inline Eigen::Vector2d tip_xy(const KinematicChain& chain, const Eigen::VectorXd& q) {
  return forward_kinematics(chain, chain.coupling * q).head<2>();
}

// Levenberg-Marquardt on the driving motors; q holds compensated motor angles.
inline bool solve_xy(const KinematicChain& chain, Eigen::VectorXd& q,
                     const std::vector<int>& driving, const Eigen::Vector2d& target,
                     const TrackingOptions& opt) {
  const auto m = static_cast<Eigen::Index>(driving.size());
  Eigen::Vector2d r = target - tip_xy(chain, q);
  double lambda = 1e-6;
  for (int it = 0; it < opt.max_iterations && r.norm() > opt.tolerance; ++it) {
    Eigen::MatrixXd J(2, m);
    for (Eigen::Index j = 0; j < m; ++j) {
      Eigen::VectorXd qp = q, qm = q;
      qp[driving[j]] += opt.fd_step;
      qm[driving[j]] -= opt.fd_step;
      J.col(j) = (tip_xy(chain, qp) - tip_xy(chain, qm)) / (2.0 * opt.fd_step);
    }
    bool accepted = false;
    while (lambda < 1e12) {
      const Eigen::Matrix2d A =
          J * J.transpose() + lambda * Eigen::Matrix2d::Identity() * (J * J.transpose()).trace();
      const Eigen::VectorXd dq = J.transpose() * A.ldlt().solve(r);
      Eigen::VectorXd trial = q;
      for (Eigen::Index j = 0; j < m; ++j) trial[driving[j]] += dq[j];
      const Eigen::Vector2d rt = target - tip_xy(chain, trial);
      if (rt.norm() < r.norm()) {
        q = trial;
        r = rt;
        lambda = std::max(lambda * 0.1, 1e-12);
        accepted = true;
        break;
      }
      lambda *= 10.0;
    }
    if (!accepted) break;
  }
  return r.norm() <= opt.tolerance;
}

inline Eigen::VectorXd signs_along(const Eigen::MatrixXd& vel, Eigen::Index k) {
  const Eigen::VectorXd prev =
      k > 0 ? Eigen::VectorXd(vel.col(k - 1)) : Eigen::VectorXd::Zero(vel.rows());
  return sign_state(vel.col(k), prev);
}

inline Eigen::MatrixXd differentiate_rows(const std::vector<double>& t, const Eigen::MatrixXd& v) {
  Eigen::MatrixXd d(v.rows(), v.cols());
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    const Eigen::VectorXd row = v.row(i).transpose();
    const auto di = central_difference(t, std::vector<double>(row.data(), row.data() + row.size()));
    d.row(i) = Eigen::Map<const Eigen::RowVectorXd>(di.data(), static_cast<Eigen::Index>(di.size()));
  }
  return d;
}

}  // namespace detail

/// Solves each sample from the previous one. The analytical model adds
/// c * sign(velocity) to every motor, so the solve runs on compensated angles
/// and the compensation is removed afterwards; velocities are differences of
/// the compensated angles, which keeps the signs consistent sample by sample.
inline TrackedPath lemniscate_to_motors(const KinematicChain& chain, const LemniscatePath& path,
                                        double dt, const TrackingOptions& opt = {}) {
  chain.validate();
  path.validate();
  const int n = chain.num_motors();
  if (opt.roll_motor < 0 || opt.roll_motor >= n) {
    throw InputError("lemniscate: roll motor index out of range");
  }
  std::vector<int> driving;
  for (int i = 0; i < n; ++i) {
    if (i != opt.roll_motor) driving.push_back(i);
  }

  TrackedPath out;
  auto& tr = out.motors;
  tr.t = time_grid(path.T, dt);
  const auto K = static_cast<Eigen::Index>(tr.t.size());
  out.target.resize(3, K);
  for (Eigen::Index k = 0; k < K; ++k) {
    const auto p = lemniscate(path, tr.t[static_cast<std::size_t>(k)]);
    out.target.col(k) << p.x, p.y, p.roll;
  }

  // Roll is commanded directly; its compensation feeds the x-y solve.
  Eigen::MatrixXd q = Eigen::MatrixXd::Zero(n, K);
  q.row(opt.roll_motor) = out.target.row(2);
  const Eigen::MatrixXd roll_vel = detail::differentiate_rows(tr.t, q.row(opt.roll_motor));
  const double c_roll = chain.hysteresis_gain[opt.roll_motor];

  Eigen::VectorXd qk = Eigen::VectorXd::Zero(n);
  for (Eigen::Index k = 0; k < K; ++k) {
    qk[opt.roll_motor] = q(opt.roll_motor, k) + c_roll * detail::signs_along(roll_vel, k)[0];
    if (!detail::solve_xy(chain, qk, driving, out.target.col(k).head<2>(), opt)) {
      throw TrackingInfeasibleError(static_cast<std::size_t>(k),
                                    "lemniscate: no convergence at sample " + std::to_string(k) +
                                        " (t = " + std::to_string(tr.t[static_cast<std::size_t>(k)]) +
                                        " s)");
    }
    for (int i : driving) q(i, k) = qk[i];
  }

  tr.theta_dot = detail::differentiate_rows(tr.t, q);
  tr.theta_dot.row(opt.roll_motor) = roll_vel;
  tr.theta = q;
  for (Eigen::Index k = 0; k < K; ++k) {
    const Eigen::VectorXd s = detail::signs_along(tr.theta_dot, k);
    for (int i : driving) tr.theta(i, k) -= chain.hysteresis_gain[i] * s[i];
  }
  tr.theta_ddot = detail::differentiate_rows(tr.t, tr.theta_dot);

  out.tip.resize(3, K);
  for (Eigen::Index k = 0; k < K; ++k) {
    out.tip.col(k) = analytical_model(chain, trajectory_state(tr, k));
    const double res = (out.tip.col(k).head<2>() - out.target.col(k).head<2>()).norm();
    out.max_residual = std::max(out.max_residual, res);
    if (!(res <= 1e-6)) {
      throw TrackingInfeasibleError(static_cast<std::size_t>(k),
                                    "lemniscate: residual " + std::to_string(res) +
                                        " m at sample " + std::to_string(k));
    }
  }
  return out;
}

}  // namespace hybridkin

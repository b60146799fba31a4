#pragma once

// Kinematics of a tendon-driven serial chain.
//
// Motors drive joints through a linear coupling matrix (n_joints x n_motors).
// Joint-to-tip geometry uses standard Denavit-Hartenberg rows:
//   T_i = Rz(theta_i + offset) * Tz(d) * Tx(a) * Rx(alpha)
// The simulated plant adds a play (backlash) operator on each motor before the
// coupling; the analytical model instead adds a velocity-sign offset.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include "json.hpp"

#include "hybridkin/errors.hpp"

namespace hybridkin {

struct DhRow {
  double a = 0.0;             // m
  double alpha = 0.0;         // rad
  double d = 0.0;             // m
  double theta_offset = 0.0;  // rad
  std::optional<int> joint_index;  // nullopt for a fixed transform
};

struct Interval {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
};

struct KinematicChain {
  std::vector<DhRow> dh_rows;
  Eigen::MatrixXd coupling;  // joints x motors
  Interval position;         // rad
  Interval velocity;         // rad/s
  Interval acceleration;     // rad/s^2
  Eigen::VectorXd backlash_widths;  // plant deadband per motor, rad
  Eigen::VectorXd hysteresis_gain;  // analytical compensation per motor, rad

  int num_motors() const { return static_cast<int>(coupling.cols()); }
  int num_joints() const { return static_cast<int>(coupling.rows()); }

  // Sum of |a| + |d| over all rows; no tip can be farther from the base.
  double reach() const {
    double total = 0.0;
    for (const auto& row : dh_rows) total += std::abs(row.a) + std::abs(row.d);
    return total;
  }

  void validate() const {
    const int nm = num_motors();
    const int nj = num_joints();
    if (nm < 1 || nj < 1) {
      throw InputError("chain: coupling matrix must be non-empty");
    }
    for (std::size_t r = 0; r < dh_rows.size(); ++r) {
      const auto& row = dh_rows[r];
      if (!std::isfinite(row.a) || !std::isfinite(row.alpha) ||
          !std::isfinite(row.d) || !std::isfinite(row.theta_offset)) {
        throw InputError("chain: DH row " + std::to_string(r) +
                         " has non-finite values");
      }
      if (row.joint_index && (*row.joint_index < 0 || *row.joint_index >= nj)) {
        throw InputError("chain: DH row " + std::to_string(r) +
                         " references joint " +
                         std::to_string(*row.joint_index) + " out of range");
      }
    }
    const auto check_interval = [nm](const Interval& iv, const char* name) {
      if (iv.lower.size() != nm || iv.upper.size() != nm) {
        throw InputError(std::string("chain: ") + name +
                         " limits need one entry per motor");
      }
      for (int i = 0; i < nm; ++i) {
        if (!(iv.lower[i] < iv.upper[i])) {
          throw InputError(std::string("chain: ") + name +
                           " limit interval for motor " + std::to_string(i) +
                           " is empty");
        }
      }
    };
    check_interval(position, "position");
    check_interval(velocity, "velocity");
    check_interval(acceleration, "acceleration");
    if (backlash_widths.size() != nm || hysteresis_gain.size() != nm) {
      throw InputError("chain: backlash_widths and hysteresis_gain need one "
                       "entry per motor");
    }
    if ((backlash_widths.array() < 0.0).any()) {
      throw InputError("chain: backlash widths must be >= 0");
    }
  }
};

/// Extended motor input [theta, theta_dot, theta_ddot, theta_old, theta_dot_old].
struct MotorState {
  Eigen::VectorXd theta;
  Eigen::VectorXd theta_dot;
  Eigen::VectorXd theta_ddot;
  Eigen::VectorXd theta_old;
  Eigen::VectorXd theta_dot_old;

  static MotorState zeros(int n) {
    const Eigen::VectorXd z = Eigen::VectorXd::Zero(n);
    return {z, z, z, z, z};
  }

  int num_motors() const { return static_cast<int>(theta.size()); }

  bool consistent() const {
    const auto n = theta.size();
    return theta_dot.size() == n && theta_ddot.size() == n &&
           theta_old.size() == n && theta_dot_old.size() == n;
  }

  // Flat input vector of length 5 * n_motors.
  Eigen::VectorXd encode() const {
    const auto n = theta.size();
    Eigen::VectorXd x(5 * n);
    x << theta, theta_dot, theta_ddot, theta_old, theta_dot_old;
    return x;
  }

  static MotorState decode(const Eigen::VectorXd& x) {
    if (x.size() % 5 != 0) {
      throw InputError("motor state: encoded length must be a multiple of 5");
    }
    const auto n = x.size() / 5;
    return {x.segment(0, n), x.segment(n, n), x.segment(2 * n, n),
            x.segment(3 * n, n), x.segment(4 * n, n)};
  }
};

/// Backlash memory: the joint-side position of every motor.
struct PlantState {
  Eigen::VectorXd joint_lag;

  // Play centered on the given motor positions.
  static PlantState centered(const Eigen::VectorXd& motor_theta) {
    return {motor_theta};
  }
};

inline Eigen::Matrix4d dh_transform(const DhRow& row, double q) {
  const double th = q + row.theta_offset;
  const double ct = std::cos(th), st = std::sin(th);
  const double ca = std::cos(row.alpha), sa = std::sin(row.alpha);
  Eigen::Matrix4d T;
  T << ct, -st * ca,  st * sa, row.a * ct,
       st,  ct * ca, -ct * sa, row.a * st,
       0.0,      sa,       ca, row.d,
       0.0,     0.0,      0.0, 1.0;
  return T;
}

/// Base-to-tip homogeneous transform.
inline Eigen::Matrix4d forward_pose(const KinematicChain& chain,
                                    const Eigen::VectorXd& joints) {
  if (joints.size() != chain.num_joints()) {
    throw InputError("forward_kinematics: expected " +
                     std::to_string(chain.num_joints()) + " joints, got " +
                     std::to_string(joints.size()));
  }
  Eigen::Matrix4d T = Eigen::Matrix4d::Identity();
  for (const auto& row : chain.dh_rows) {
    const double q = row.joint_index ? joints[*row.joint_index] : 0.0;
    T = T * dh_transform(row, q);
  }
  return T;
}

inline Eigen::Vector3d forward_kinematics(const KinematicChain& chain,
                                          const Eigen::VectorXd& joints) {
  return forward_pose(chain, joints).block<3, 1>(0, 3);
}

/// +1 / -1 by the sign of the current velocity; when it is exactly zero the
/// sign of the previous velocity is held (0 if that is zero too).
inline Eigen::VectorXd sign_state(const Eigen::VectorXd& theta_dot,
                                  const Eigen::VectorXd& theta_dot_old) {
  Eigen::VectorXd s(theta_dot.size());
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    const double v = theta_dot[i] != 0.0 ? theta_dot[i] : theta_dot_old[i];
    s[i] = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
  }
  return s;
}

/// Joint estimate used by the analytical model: coupling * (theta + c * s).
inline Eigen::VectorXd compensated_joints(const KinematicChain& chain,
                                          const MotorState& state) {
  if (state.num_motors() != chain.num_motors() || !state.consistent()) {
    throw InputError("analytical_model: motor state does not match chain (" +
                     std::to_string(chain.num_motors()) + " motors)");
  }
  const Eigen::VectorXd s = sign_state(state.theta_dot, state.theta_dot_old);
  return chain.coupling *
         (state.theta + chain.hysteresis_gain.cwiseProduct(s)).eval();
}

/// Tip position predicted from theta, theta_dot and theta_dot_old only.
inline Eigen::Vector3d analytical_model(const KinematicChain& chain,
                                        const MotorState& state) {
  return forward_kinematics(chain, compensated_joints(chain, state));
}

/// One step of the backlash plant. Each joint-side value is clamped into the
/// deadband [theta - w/2, theta + w/2] around its motor.
inline std::pair<PlantState, Eigen::Vector3d> plant_step(
    const KinematicChain& chain, const PlantState& plant,
    const Eigen::VectorXd& motor_theta, double dt) {
  if (!(dt > 0.0)) {
    throw InputError("plant_step: dt must be positive");
  }
  if (motor_theta.size() != chain.num_motors() ||
      plant.joint_lag.size() != chain.num_motors()) {
    throw InputError("plant_step: motor vector does not match chain");
  }
  PlantState next = plant;
  for (Eigen::Index i = 0; i < motor_theta.size(); ++i) {
    const double half = 0.5 * chain.backlash_widths[i];
    next.joint_lag[i] = std::clamp(plant.joint_lag[i], motor_theta[i] - half,
                                   motor_theta[i] + half);
  }
  const Eigen::Vector3d tip =
      forward_kinematics(chain, chain.coupling * next.joint_lag);
  return {std::move(next), tip};
}

/// Four-motor articulated tip: roll, elbow 1 (pitch), elbow 2 (yaw) and wrist
/// pitch. Each elbow motor drives a pair of serial joints through a 1:2 gear,
/// so the six joints are [roll, e1a, e1b, e2a, e2b, wrist]. Articulated length
/// at zero configuration is 38 mm along the shaft (z) axis.
inline KinematicChain default_microiges_chain() {
  constexpr double pi = std::numbers::pi;
  KinematicChain c;
  c.dh_rows = {
      {0.0, -pi / 2, 0.0, 0.0, 0},        // roll about the shaft
      {0.008, 0.0, 0.0, -pi / 2, 1},      // elbow 1, first joint (pitch)
      {0.008, pi / 2, 0.0, 0.0, 2},       // elbow 1, second joint
      {0.008, 0.0, 0.0, 0.0, 3},          // elbow 2, first joint (yaw)
      {0.008, -pi / 2, 0.0, 0.0, 4},      // elbow 2, second joint
      {0.006, 0.0, 0.0, 0.0, 5},          // wrist pitch to tip
  };
  c.coupling = Eigen::MatrixXd::Zero(6, 4);
  c.coupling(0, 0) = 1.0;
  c.coupling(1, 1) = 0.5;
  c.coupling(2, 1) = 0.5;
  c.coupling(3, 2) = 0.5;
  c.coupling(4, 2) = 0.5;
  c.coupling(5, 3) = 1.0;

  c.position.upper = Eigen::Vector4d(1.5, 1.2, 1.2, 1.0);
  c.position.lower = -c.position.upper;
  c.velocity.upper = Eigen::Vector4d::Constant(6.0);
  c.velocity.lower = -c.velocity.upper;
  c.acceleration.upper = Eigen::Vector4d::Constant(60.0);
  c.acceleration.lower = -c.acceleration.upper;
  c.backlash_widths = Eigen::Vector4d::Constant(0.05);
  // The play operator lags the motor by w/2 against the direction of motion.
  c.hysteresis_gain = -0.5 * c.backlash_widths;
  return c;
}

/// Analytical model with compensation disabled and every link length scaled.
inline KinematicChain wrong_analytical_chain(KinematicChain chain,
                                             double length_scale = 0.8) {
  for (auto& row : chain.dh_rows) {
    row.a *= length_scale;
    row.d *= length_scale;
  }
  chain.hysteresis_gain.setZero();
  return chain;
}

// --- JSON ------------------------------------------------------------------

namespace detail {

inline std::vector<double> to_std(const Eigen::VectorXd& v) {
  return {v.data(), v.data() + v.size()};
}

inline Eigen::VectorXd to_eigen(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(),
                                           static_cast<Eigen::Index>(v.size()));
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const DhRow& r) {
  j = nlohmann::json{{"a", r.a},
                     {"alpha", r.alpha},
                     {"d", r.d},
                     {"theta_offset", r.theta_offset}};
  if (r.joint_index) {
    j["joint_index"] = *r.joint_index;
  } else {
    j["joint_index"] = "fixed";
  }
}

inline void from_json(const nlohmann::json& j, DhRow& r) {
  r.a = j.at("a").get<double>();
  r.alpha = j.at("alpha").get<double>();
  r.d = j.at("d").get<double>();
  r.theta_offset = j.value("theta_offset", 0.0);
  const auto& idx = j.at("joint_index");
  if (idx.is_string()) {
    if (idx.get<std::string>() != "fixed") {
      throw ParseError("chain: joint_index must be an integer or \"fixed\"");
    }
    r.joint_index.reset();
  } else {
    r.joint_index = idx.get<int>();
  }
}

inline void to_json(nlohmann::json& j, const KinematicChain& c) {
  nlohmann::json coupling = nlohmann::json::array();
  for (int r = 0; r < c.num_joints(); ++r) {
    coupling.push_back(detail::to_std(c.coupling.row(r).transpose()));
  }
  const auto interval = [](const Interval& iv) {
    return nlohmann::json{{"min", detail::to_std(iv.lower)},
                          {"max", detail::to_std(iv.upper)}};
  };
  j = nlohmann::json{
      {"dh_rows", c.dh_rows},
      {"coupling", coupling},
      {"limits",
       {{"position", interval(c.position)},
        {"velocity", interval(c.velocity)},
        {"acceleration", interval(c.acceleration)}}},
      {"backlash_widths", detail::to_std(c.backlash_widths)},
      {"hysteresis_gain", detail::to_std(c.hysteresis_gain)}};
}

inline void from_json(const nlohmann::json& j, KinematicChain& c) {
  try {
    c.dh_rows = j.at("dh_rows").get<std::vector<DhRow>>();
    const auto rows = j.at("coupling").get<std::vector<std::vector<double>>>();
    if (rows.empty()) {
      throw InputError("chain: coupling matrix must be non-empty");
    }
    c.coupling.resize(static_cast<Eigen::Index>(rows.size()),
                      static_cast<Eigen::Index>(rows.front().size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != rows.front().size()) {
        throw InputError("chain: coupling rows have unequal lengths");
      }
      c.coupling.row(static_cast<Eigen::Index>(r)) =
          detail::to_eigen(rows[r]).transpose();
    }
    const auto& limits = j.at("limits");
    const auto interval = [&limits](const char* key) {
      const auto& v = limits.at(key);
      return Interval{detail::to_eigen(v.at("min").get<std::vector<double>>()),
                      detail::to_eigen(v.at("max").get<std::vector<double>>())};
    };
    c.position = interval("position");
    c.velocity = interval("velocity");
    c.acceleration = interval("acceleration");
    c.backlash_widths =
        detail::to_eigen(j.at("backlash_widths").get<std::vector<double>>());
    c.hysteresis_gain =
        detail::to_eigen(j.at("hysteresis_gain").get<std::vector<double>>());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("chain: ") + e.what());
  }
  c.validate();
}

inline KinematicChain load_chain(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw InputError("chain: cannot open " + path.string());
  }
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("chain: " + path.string() + ": " + e.what());
  }
  return j.get<KinematicChain>();
}

inline void save_chain(const KinematicChain& chain,
                       const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) {
    throw InputError("chain: cannot write " + path.string());
  }
  out << nlohmann::json(chain).dump(2) << '\n';
}

}  // namespace hybridkin

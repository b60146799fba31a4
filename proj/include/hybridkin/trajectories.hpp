#pragma once

// Motor-space trajectory generators: limit-scaled chirps, the three-segment
// quintic test motion, and the figure-eight Cartesian path with quintic timing.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "hybridkin/errors.hpp"
#include "hybridkin/robot.hpp"

namespace hybridkin {

enum class FrequencyUnit { Hertz, RadPerSecond };
enum class ChirpPhase { Literal, Integrated };

struct ChirpParams {
  Eigen::VectorXd a, b, psi, phi, theta0;
  std::vector<int> h;
  double omega_min = 0.1;
  double omega_max = 1.0;
  double T = std::numbers::pi / 0.1;
  FrequencyUnit unit = FrequencyUnit::Hertz;
  // Literal: argument is Omega(t) * t. Integrated: argument is the integral of Omega.
  ChirpPhase phase = ChirpPhase::Literal;

  int num_motors() const { return static_cast<int>(h.size()); }

  void validate() const {
    const auto n = static_cast<Eigen::Index>(h.size());
    if (a.size() != n || b.size() != n || psi.size() != n || phi.size() != n ||
        theta0.size() != n) {
      throw InputError("chirp: per-motor vectors must all have length " +
                       std::to_string(n));
    }
    for (int hi : h) {
      if (hi != 0 && hi != 1) throw InputError("chirp: mask entries must be 0 or 1");
    }
    if (!(omega_min <= omega_max)) throw InputError("chirp: omega_min > omega_max");
    if (!(T > 0.0)) throw InputError("chirp: T must be positive");
  }
};

struct Kinematics1d {
  double pos = 0.0;
  double vel = 0.0;
  double acc = 0.0;
};

namespace detail {

inline void check_time(double t, double T, const char* who) {
  if (!(t >= 0.0 && t <= T)) {
    throw RangeError(std::string(who) + ": t = " + std::to_string(t) +
                     " outside [0, " + std::to_string(T) + "]");
  }
}

// Phase argument and its first two time derivatives.
inline Kinematics1d chirp_phase(const ChirpParams& p, double t) {
  const double k = p.unit == FrequencyUnit::Hertz ? 2.0 * std::numbers::pi : 1.0;
  const double slope = (p.omega_max - p.omega_min) / p.T;
  if (p.phase == ChirpPhase::Literal) {
    return {k * (p.omega_min + slope * t) * t, k * (p.omega_min + 2.0 * slope * t),
            2.0 * k * slope};
  }
  return {k * (p.omega_min * t + 0.5 * slope * t * t),
          k * (p.omega_min + slope * t), k * slope};
}

// Unmasked oscillatory part for unit amplitude (a = b = 1), no offset.
inline Kinematics1d chirp_unit_wave(const ChirpParams& p, int i, double t) {
  const auto ph = chirp_phase(p, t);
  const double u = ph.pos + p.psi[i];
  const double v = ph.pos + p.phi[i];
  const double su = std::sin(u), cu = std::cos(u);
  const double sv = std::sin(v), cv = std::cos(v);
  const double w2 = ph.vel * ph.vel;
  return {su + cv, (cu - sv) * ph.vel,
          -(su + cv) * w2 + (cu - sv) * ph.acc};
}

}  // namespace detail

/// theta_i, its velocity and acceleration at time t.
inline Kinematics1d chirp_eval(const ChirpParams& p, int i, double t) {
  detail::check_time(t, p.T, "chirp_eval");
  if (i < 0 || i >= p.num_motors()) throw InputError("chirp_eval: bad motor index");
  if (p.h[i] == 0) return {};
  const auto ph = detail::chirp_phase(p, t);
  const double u = ph.pos + p.psi[i];
  const double v = ph.pos + p.phi[i];
  const double su = std::sin(u), cu = std::cos(u);
  const double sv = std::sin(v), cv = std::cos(v);
  const double w2 = ph.vel * ph.vel;
  const double a = p.a[i], b = p.b[i];
  return {a * su + b * cv + p.theta0[i],
          (a * cu - b * sv) * ph.vel,
          -(a * su + b * cv) * w2 + (a * cu - b * sv) * ph.acc};
}

struct ChirpOptions {
  double omega_min = 0.1;
  double omega_max = 1.0;
  double T = 0.0;  // <= 0 selects pi / omega_min
  FrequencyUnit unit = FrequencyUnit::Hertz;
  ChirpPhase phase = ChirpPhase::Literal;
  double grid_dt = 1e-3;
  double margin = 0.01;           // fraction of each limit half-width kept free
  double amplitude_fraction = 0.4;  // initial amplitude A as fraction of half-range
  double offset_fraction = 0.1;     // |theta0 - midpoint| <= this * half-range

  double duration() const { return T > 0.0 ? T : std::numbers::pi / omega_min; }
};

namespace detail {

inline Interval shrink(const Interval& iv, double margin) {
  const Eigen::VectorXd mid = 0.5 * (iv.lower + iv.upper);
  const Eigen::VectorXd half = 0.5 * (iv.upper - iv.lower);
  return {mid - (1.0 - margin) * half, mid + (1.0 - margin) * half};
}

// Largest s in [0, s] with lo <= base + s * g <= hi.
inline double cap_scale(double s, double base, double g, double lo, double hi) {
  if (g > 0.0) return std::min(s, (hi - base) / g);
  if (g < 0.0) return std::min(s, (lo - base) / g);
  return s;
}

}  // namespace detail

/// Random phases and offset, then the largest common amplitude scale per motor
/// that keeps position, velocity and acceleration within the shrunken limits.
inline ChirpParams fit_chirp_amplitudes(const KinematicChain& chain,
                                        const std::vector<int>& mask,
                                        std::uint64_t seed,
                                        const ChirpOptions& opt = {}) {
  const int n = chain.num_motors();
  if (static_cast<int>(mask.size()) != n) {
    throw InputError("fit_chirp_amplitudes: mask length must equal motor count");
  }
  ChirpParams p;
  p.h = mask;
  p.omega_min = opt.omega_min;
  p.omega_max = opt.omega_max;
  p.T = opt.duration();
  p.unit = opt.unit;
  p.phase = opt.phase;
  p.a = p.b = p.psi = p.phi = p.theta0 = Eigen::VectorXd::Zero(n);
  p.validate();
  if (!(opt.grid_dt > 0.0)) throw InputError("fit_chirp_amplitudes: grid_dt must be positive");

  const auto check_finite = [](const Interval& iv) {
    return iv.lower.allFinite() && iv.upper.allFinite();
  };
  if (!check_finite(chain.position) || !check_finite(chain.velocity) ||
      !check_finite(chain.acceleration)) {
    throw InputError("fit_chirp_amplitudes: chain limits must be finite");
  }
  const Interval pos = detail::shrink(chain.position, opt.margin);
  const Interval vel = detail::shrink(chain.velocity, opt.margin);
  const Interval acc = detail::shrink(chain.acceleration, opt.margin);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (int i = 0; i < n; ++i) {
    p.psi[i] = angle(rng);
    p.phi[i] = angle(rng);
    const double mid = 0.5 * (chain.position.lower[i] + chain.position.upper[i]);
    const double half = 0.5 * (chain.position.upper[i] - chain.position.lower[i]);
    p.theta0[i] = mid + opt.offset_fraction * half * unit(rng);
  }

  const auto steps = static_cast<long>(std::floor(p.T / opt.grid_dt));
  for (int i = 0; i < n; ++i) {
    const double half = 0.5 * (chain.position.upper[i] - chain.position.lower[i]);
    const double A = opt.amplitude_fraction * half;
    const double base = p.h[i] * p.theta0[i];
    const auto inside = [](double v, double lo, double hi) { return lo <= v && v <= hi; };
    if (!inside(base, pos.lower[i], pos.upper[i]) ||
        !inside(0.0, vel.lower[i], vel.upper[i]) ||
        !inside(0.0, acc.lower[i], acc.upper[i])) {
      throw InfeasibilityError("fit_chirp_amplitudes: motor " + std::to_string(i) +
                               " violates its limits at zero amplitude");
    }
    double s = 1.0;
    if (p.h[i] != 0) {
      for (long k = 0; k <= steps; ++k) {
        const double t = std::min(p.T, static_cast<double>(k) * opt.grid_dt);
        const auto w = detail::chirp_unit_wave(p, i, t);
        s = detail::cap_scale(s, base, A * w.pos, pos.lower[i], pos.upper[i]);
        s = detail::cap_scale(s, 0.0, A * w.vel, vel.lower[i], vel.upper[i]);
        s = detail::cap_scale(s, 0.0, A * w.acc, acc.lower[i], acc.upper[i]);
      }
      const auto w = detail::chirp_unit_wave(p, i, p.T);
      s = detail::cap_scale(s, base, A * w.pos, pos.lower[i], pos.upper[i]);
      s = detail::cap_scale(s, 0.0, A * w.vel, vel.lower[i], vel.upper[i]);
      s = detail::cap_scale(s, 0.0, A * w.acc, acc.lower[i], acc.upper[i]);
    }
    p.a[i] = p.b[i] = std::max(0.0, s) * A;
  }
  return p;
}

/// All 2^n binary masks, lexicographic (first motor most significant).
inline std::vector<std::vector<int>> motion_combinations(int n) {
  if (n < 1 || n > 30) throw InputError("motion_combinations: n must be in [1, 30]");
  std::vector<std::vector<int>> out;
  out.reserve(std::size_t{1} << n);
  for (std::uint32_t k = 0; k < (1u << n); ++k) {
    std::vector<int> m(n);
    for (int j = 0; j < n; ++j) m[j] = static_cast<int>((k >> (n - 1 - j)) & 1u);
    out.push_back(std::move(m));
  }
  return out;
}

// --- quintic timing --------------------------------------------------------

inline Kinematics1d quintic_blend(double t, double T) {
  detail::check_time(t, T, "quintic_s");
  const double x = t / T;
  const double x2 = x * x, x3 = x2 * x;
  return {x3 * (10.0 + x * (-15.0 + 6.0 * x)),
          30.0 * x2 * (1.0 - x) * (1.0 - x) / T,
          60.0 * x * (1.0 - x) * (1.0 - 2.0 * x) / (T * T)};
}

inline double quintic_s(double t, double T) { return quintic_blend(t, T).pos; }

struct QuinticMotion {
  Eigen::VectorXd theta_min;
  Eigen::VectorXd theta_max;
  double T = 5.0;

  void validate() const {
    if (theta_min.size() != theta_max.size()) {
      throw InputError("test motion: theta_min and theta_max differ in length");
    }
    if ((theta_min.array() > theta_max.array()).any()) {
      throw InputError("test motion: theta_min must not exceed theta_max");
    }
    if (!(T > 0.0)) throw InputError("test motion: T must be positive");
  }
};

/// 0 -> theta_max -> theta_min -> 0, one quintic segment of length T each.
inline Kinematics1d test_motion_eval(const QuinticMotion& m, int i, double t) {
  detail::check_time(t, 3.0 * m.T, "test_motion");
  const int seg = std::min(2, static_cast<int>(t / m.T));
  const double from[3] = {0.0, m.theta_max[i], m.theta_min[i]};
  const double to[3] = {m.theta_max[i], m.theta_min[i], 0.0};
  const double tau = std::clamp(t - seg * m.T, 0.0, m.T);
  const auto s = quintic_blend(tau, m.T);
  const double d = to[seg] - from[seg];
  return {from[seg] + d * s.pos, d * s.vel, d * s.acc};
}

inline double test_motion(const QuinticMotion& m, int i, double t) {
  return test_motion_eval(m, i, t).pos;
}

// --- figure-eight path -----------------------------------------------------

struct LemniscatePath {
  double scale = 6e-3;
  Eigen::Vector3d P_i{0.0, 0.0, 0.038};
  double alpha_i = 0.0;
  double alpha_f = 100.0 * std::numbers::pi / 180.0;
  double T = 6.0;

  void validate() const {
    if (!(T > 0.0)) throw InputError("lemniscate: T must be positive");
  }
};

struct LemniscatePoint {
  double x = 0.0;
  double y = 0.0;
  double roll = 0.0;
  double s = 0.0;
};

/// Curve parameter, sweeps [pi/2, 5pi/2].
inline double lemniscate_s(double t, double T) {
  detail::check_time(t, T, "lemniscate");
  const double x = t / T;
  const double x3 = x * x * x;
  return (x3 * (40.0 + x * (-60.0 + 24.0 * x)) + 1.0) * std::numbers::pi / 2.0;
}

inline LemniscatePoint lemniscate(const LemniscatePath& p, double t) {
  const double s = lemniscate_s(t, p.T);
  const double s_roll = quintic_s(t, p.T);
  const double sn = std::sin(s);
  const double r = p.scale * std::numbers::sqrt2 / (sn * sn + 1.0);
  return {r * std::cos(s) + p.P_i.x(), r * std::sin(2.0 * s) / 2.0 + p.P_i.y(),
          (p.alpha_f - p.alpha_i) * std::sin(s_roll * std::numbers::pi) + p.alpha_i,
          s};
}

// --- sampling --------------------------------------------------------------

/// Motor trajectory sampled on a uniform grid.
struct MotorTrajectory {
  std::vector<double> t;
  Eigen::MatrixXd theta;       // n_m x K
  Eigen::MatrixXd theta_dot;
  Eigen::MatrixXd theta_ddot;
};

/// Grid 0, dt, 2dt, ... up to and including T (within round-off).
inline std::vector<double> time_grid(double T, double dt) {
  if (!(dt > 0.0)) throw InputError("time grid: dt must be positive");
  const auto K = static_cast<long>(std::floor(T / dt + 1e-9));
  std::vector<double> t(static_cast<std::size_t>(K) + 1);
  for (long k = 0; k <= K; ++k) t[k] = std::min(T, static_cast<double>(k) * dt);
  return t;
}

template <typename Eval>
MotorTrajectory sample_motor_trajectory(int n, double T, double dt, Eval&& eval) {
  MotorTrajectory out;
  out.t = time_grid(T, dt);
  const auto K = static_cast<Eigen::Index>(out.t.size());
  out.theta.resize(n, K);
  out.theta_dot.resize(n, K);
  out.theta_ddot.resize(n, K);
  for (Eigen::Index k = 0; k < K; ++k) {
    for (int i = 0; i < n; ++i) {
      const Kinematics1d v = eval(i, out.t[k]);
      out.theta(i, k) = v.pos;
      out.theta_dot(i, k) = v.vel;
      out.theta_ddot(i, k) = v.acc;
    }
  }
  return out;
}

inline MotorTrajectory sample_chirp(const ChirpParams& p, double dt) {
  return sample_motor_trajectory(p.num_motors(), p.T, dt,
                                 [&](int i, double t) { return chirp_eval(p, i, t); });
}

inline MotorTrajectory sample_test_motion(const QuinticMotion& m, double dt) {
  m.validate();
  return sample_motor_trajectory(
      static_cast<int>(m.theta_min.size()), 3.0 * m.T, dt,
      [&](int i, double t) { return test_motion_eval(m, i, t); });
}

// --- JSON ------------------------------------------------------------------

NLOHMANN_JSON_SERIALIZE_ENUM(FrequencyUnit, {{FrequencyUnit::Hertz, "hz"},
                                             {FrequencyUnit::RadPerSecond, "rad_per_s"}})
NLOHMANN_JSON_SERIALIZE_ENUM(ChirpPhase, {{ChirpPhase::Literal, "literal"},
                                          {ChirpPhase::Integrated, "integrated"}})

inline void to_json(nlohmann::json& j, const ChirpParams& p) {
  j = {{"a", detail::to_std(p.a)},         {"b", detail::to_std(p.b)},
       {"psi", detail::to_std(p.psi)},     {"phi", detail::to_std(p.phi)},
       {"theta0", detail::to_std(p.theta0)}, {"h", p.h},
       {"omega_min", p.omega_min},         {"omega_max", p.omega_max},
       {"T", p.T},                         {"frequency_unit", p.unit},
       {"phase", p.phase}};
}

inline void from_json(const nlohmann::json& j, ChirpParams& p) {
  const auto vec = [&j](const char* k) {
    return detail::to_eigen(j.at(k).get<std::vector<double>>());
  };
  p.a = vec("a");
  p.b = vec("b");
  p.psi = vec("psi");
  p.phi = vec("phi");
  p.theta0 = vec("theta0");
  p.h = j.at("h").get<std::vector<int>>();
  p.omega_min = j.at("omega_min").get<double>();
  p.omega_max = j.at("omega_max").get<double>();
  p.T = j.at("T").get<double>();
  p.unit = j.value("frequency_unit", FrequencyUnit::Hertz);
  p.phase = j.value("phase", ChirpPhase::Literal);
  p.validate();
}

inline void to_json(nlohmann::json& j, const ChirpOptions& o) {
  j = {{"omega_min", o.omega_min}, {"omega_max", o.omega_max},
       {"T", o.duration()},        {"frequency_unit", o.unit},
       {"phase", o.phase},         {"grid_dt", o.grid_dt},
       {"margin", o.margin},       {"amplitude_fraction", o.amplitude_fraction},
       {"offset_fraction", o.offset_fraction}};
}

inline void from_json(const nlohmann::json& j, ChirpOptions& o) {
  const ChirpOptions d;
  o.omega_min = j.value("omega_min", d.omega_min);
  o.omega_max = j.value("omega_max", d.omega_max);
  o.T = j.contains("T") && !j.at("T").is_null() ? j.at("T").get<double>() : 0.0;
  o.unit = j.value("frequency_unit", d.unit);
  o.phase = j.value("phase", d.phase);
  o.grid_dt = j.value("grid_dt", d.grid_dt);
  o.margin = j.value("margin", d.margin);
  o.amplitude_fraction = j.value("amplitude_fraction", d.amplitude_fraction);
  o.offset_fraction = j.value("offset_fraction", d.offset_fraction);
  if (!(o.omega_min > 0.0) || !(o.omega_min <= o.omega_max)) {
    throw InputError("chirp options: need 0 < omega_min <= omega_max");
  }
  if (!(o.margin >= 0.0 && o.margin < 1.0)) {
    throw InputError("chirp options: margin must be in [0, 1)");
  }
}

inline void to_json(nlohmann::json& j, const QuinticMotion& m) {
  j = {{"theta_min", detail::to_std(m.theta_min)},
       {"theta_max", detail::to_std(m.theta_max)},
       {"T", m.T}};
}

inline void from_json(const nlohmann::json& j, QuinticMotion& m) {
  m.theta_min = detail::to_eigen(j.at("theta_min").get<std::vector<double>>());
  m.theta_max = detail::to_eigen(j.at("theta_max").get<std::vector<double>>());
  m.T = j.at("T").get<double>();
  m.validate();
}

inline void to_json(nlohmann::json& j, const LemniscatePath& p) {
  j = {{"scale", p.scale},
       {"P_i", {p.P_i.x(), p.P_i.y(), p.P_i.z()}},
       {"alpha_i", p.alpha_i},
       {"alpha_f", p.alpha_f},
       {"T", p.T}};
}

inline void from_json(const nlohmann::json& j, LemniscatePath& p) {
  const LemniscatePath d;
  p.scale = j.value("scale", d.scale);
  if (j.contains("P_i")) {
    const auto v = j.at("P_i").get<std::vector<double>>();
    if (v.size() != 3) throw InputError("lemniscate: P_i needs 3 entries");
    p.P_i = Eigen::Vector3d(v[0], v[1], v[2]);
  } else {
    p.P_i = d.P_i;
  }
  p.alpha_i = j.value("alpha_i", d.alpha_i);
  p.alpha_f = j.value("alpha_f", d.alpha_f);
  p.T = j.value("T", d.T);
  p.validate();
}

}  // namespace hybridkin

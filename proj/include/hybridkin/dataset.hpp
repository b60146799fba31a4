#pragma once

// Time-stamped motor states with tip positions: simulated generation,
// subsampling, CSV persistence and import of camera-tracked recordings.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "hybridkin/errors.hpp"
#include "hybridkin/robot.hpp"
#include "hybridkin/trajectories.hpp"

namespace hybridkin {

struct Sample {
  double t = 0.0;
  MotorState state;
  std::optional<Eigen::Vector3d> p_true;
  Eigen::Vector3d p_meas = Eigen::Vector3d::Zero();
};

struct DatasetMeta {
  std::string source = "simulated";  // simulated | real
  double noise_sigma = 0.0;
  std::string chain_config_id;
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const DatasetMeta& m) {
  j = {{"source", m.source},
       {"noise_sigma", m.noise_sigma},
       {"chain_config_id", m.chain_config_id},
       {"seed", m.seed}};
}

inline void from_json(const nlohmann::json& j, DatasetMeta& m) {
  m.source = j.value("source", std::string("simulated"));
  m.noise_sigma = j.value("noise_sigma", 0.0);
  m.chain_config_id = j.value("chain_config_id", std::string());
  m.seed = j.value("seed", std::uint64_t{0});
}

struct Dataset {
  std::vector<Sample> samples;
  DatasetMeta meta;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  int num_motors() const {
    return samples.empty() ? 0 : samples.front().state.num_motors();
  }
  bool has_truth() const {
    return std::all_of(samples.begin(), samples.end(),
                       [](const Sample& s) { return s.p_true.has_value(); });
  }

  // Encoded motor states as columns, 5 n_m x N.
  Eigen::MatrixXd inputs() const {
    Eigen::MatrixXd X(5 * num_motors(), static_cast<Eigen::Index>(size()));
    for (std::size_t k = 0; k < size(); ++k) {
      X.col(static_cast<Eigen::Index>(k)) = samples[k].state.encode();
    }
    return X;
  }

  Eigen::MatrixXd measured() const {
    Eigen::MatrixXd P(3, static_cast<Eigen::Index>(size()));
    for (std::size_t k = 0; k < size(); ++k) P.col(static_cast<Eigen::Index>(k)) = samples[k].p_meas;
    return P;
  }

  Eigen::MatrixXd truth() const {
    if (!has_truth()) throw InputError("dataset: ground truth is not available");
    Eigen::MatrixXd P(3, static_cast<Eigen::Index>(size()));
    for (std::size_t k = 0; k < size(); ++k) P.col(static_cast<Eigen::Index>(k)) = *samples[k].p_true;
    return P;
  }

  void validate() const {
    const int n = num_motors();
    for (std::size_t k = 0; k < size(); ++k) {
      const auto& s = samples[k];
      if (s.state.num_motors() != n || !s.state.consistent()) {
        throw InputError("dataset: sample " + std::to_string(k) +
                         " has a different motor count");
      }
      if (k > 0 && !(s.t > samples[k - 1].t)) {
        throw InputError("dataset: timestamps must be strictly increasing (sample " +
                         std::to_string(k) + ")");
      }
    }
  }
};

/// Runs the backlash plant along a motor trajectory, starting centered.
/// theta_old / theta_dot_old come from the previous sample (zeros first).
inline std::vector<Sample> simulate_trajectory(const KinematicChain& chain,
                                               const MotorTrajectory& tr,
                                               double dt, double t_offset = 0.0) {
  std::vector<Sample> out;
  out.reserve(tr.t.size());
  const int n = chain.num_motors();
  if (tr.theta.rows() != n) throw InputError("simulate: trajectory motor count mismatch");
  if (tr.t.empty()) return out;
  PlantState plant = PlantState::centered(tr.theta.col(0));
  Eigen::VectorXd prev_theta = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd prev_vel = Eigen::VectorXd::Zero(n);
  for (std::size_t k = 0; k < tr.t.size(); ++k) {
    const auto kk = static_cast<Eigen::Index>(k);
    Sample s;
    s.t = t_offset + tr.t[k];
    s.state = {tr.theta.col(kk), tr.theta_dot.col(kk), tr.theta_ddot.col(kk),
               prev_theta, prev_vel};
    auto [next, tip] = plant_step(chain, plant, s.state.theta, dt);
    plant = std::move(next);
    s.p_true = tip;
    s.p_meas = tip;
    prev_theta = s.state.theta;
    prev_vel = s.state.theta_dot;
    out.push_back(std::move(s));
  }
  return out;
}

inline void add_noise(Dataset& ds, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw InputError("noise: sigma must be >= 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (auto& s : ds.samples) {
    const Eigen::Vector3d base = s.p_true ? *s.p_true : s.p_meas;
    for (int a = 0; a < 3; ++a) s.p_meas[a] = base[a] + sigma * gauss(rng);
  }
  ds.meta.noise_sigma = sigma;
}

/// One plant run per chirp, concatenated on a global clock that continues
/// one dt after the previous chirp ends.
inline Dataset generate_dataset(const KinematicChain& chain,
                                const std::vector<ChirpParams>& chirps, double dt,
                                double noise_sigma, std::uint64_t seed) {
  if (!(dt > 0.0)) throw InputError("generate_dataset: dt must be positive");
  Dataset ds;
  ds.meta.source = "simulated";
  ds.meta.seed = seed;
  double offset = 0.0;
  for (const auto& p : chirps) {
    if (p.num_motors() != chain.num_motors()) {
      throw InputError("generate_dataset: chirp motor count does not match chain");
    }
    const auto tr = sample_chirp(p, dt);
    auto part = simulate_trajectory(chain, tr, dt, offset);
    offset = part.back().t + dt;
    for (auto& s : part) ds.samples.push_back(std::move(s));
  }
  add_noise(ds, noise_sigma, seed);
  return ds;
}

/// Uniform subset without replacement, original order kept.
inline Dataset subsample(const Dataset& ds, std::size_t n, std::uint64_t seed) {
  if (n < 1 || n > ds.size()) {
    throw SizeError("subsample: requested " + std::to_string(n) + " of " +
                    std::to_string(ds.size()) + " samples");
  }
  std::vector<std::size_t> all(ds.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::vector<std::size_t> picked;
  picked.reserve(n);
  std::mt19937_64 rng(seed);
  std::sample(all.begin(), all.end(), std::back_inserter(picked), n, rng);
  Dataset out;
  out.meta = ds.meta;
  out.samples.reserve(n);
  for (auto i : picked) out.samples.push_back(ds.samples[i]);
  return out;
}

// --- camera import ---------------------------------------------------------

struct CameraIntrinsics {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw InputError("camera: focal lengths must be positive");
  }
};

inline Eigen::Vector3d project_depth_to_3d(const CameraIntrinsics& in, double x,
                                           double y, double depth) {
  if (!(depth > 0.0)) {
    throw InvalidDepthError("project_depth_to_3d: depth must be positive, got " +
                            std::to_string(depth));
  }
  return {(x - in.cx) * depth / in.fx, (y - in.cy) * depth / in.fy, depth};
}

struct CalibrationTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  void validate() const {
    const double ortho = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).norm();
    if (!(ortho <= 1e-9) || !(std::abs(rotation.determinant() - 1.0) <= 1e-9)) {
      throw InputError("calibration: rotation must be orthonormal with det +1");
    }
  }

  CalibrationTransform inverse() const {
    return {rotation.transpose(), -(rotation.transpose() * translation)};
  }
};

inline Eigen::Vector3d apply_calibration(const CalibrationTransform& T,
                                         const Eigen::Vector3d& p_cam) {
  return T.rotation * p_cam + T.translation;
}

struct CameraSetup {
  CameraIntrinsics intrinsics;
  CalibrationTransform calibration;
};

inline void from_json(const nlohmann::json& j, CameraSetup& c) {
  try {
    const auto& in = j.at("intrinsics");
    c.intrinsics = {in.at("fx").get<double>(), in.at("fy").get<double>(),
                    in.at("cx").get<double>(), in.at("cy").get<double>()};
    c.calibration = {};
    if (j.contains("calibration")) {
      const auto& cal = j.at("calibration");
      const auto R = cal.at("rotation").get<std::vector<std::vector<double>>>();
      const auto t = cal.at("translation").get<std::vector<double>>();
      if (R.size() != 3 || t.size() != 3) throw ParseError("camera: calibration must be 3x3 and 3");
      for (int r = 0; r < 3; ++r) {
        if (R[r].size() != 3) throw ParseError("camera: rotation rows need 3 entries");
        for (int k = 0; k < 3; ++k) c.calibration.rotation(r, k) = R[r][k];
      }
      c.calibration.translation = Eigen::Vector3d(t[0], t[1], t[2]);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("camera: ") + e.what());
  }
  c.intrinsics.validate();
  c.calibration.validate();
}

// --- CSV -------------------------------------------------------------------

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.remove_suffix(1);
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  return s;
}

inline double parse_double(std::string_view s, std::size_t line, const std::string& col) {
  s = trim(s);
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw ParseError("csv line " + std::to_string(line) + ": cannot parse column '" +
                     col + "' value '" + std::string(s) + "'");
  }
  return v;
}

// Header lookup with column-name errors.
class CsvTable {
 public:
  CsvTable(std::istream& in, const std::string& what) : what_(what) {
    std::string line;
    if (!std::getline(in, line)) throw ParseError(what + ": missing header row");
    const auto cols = split_commas(line);
    for (std::size_t i = 0; i < cols.size(); ++i) {
      index_[std::string(trim(cols[i]))] = i;
    }
    width_ = cols.size();
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (trim(line).empty()) continue;
      auto cells = split_commas(line);
      if (cells.size() != width_) {
        throw ParseError(what + " line " + std::to_string(lineno) + ": expected " +
                         std::to_string(width_) + " fields, got " +
                         std::to_string(cells.size()));
      }
      std::vector<std::string> row;
      row.reserve(cells.size());
      for (auto c : cells) row.emplace_back(trim(c));
      rows_.push_back(std::move(row));
      lines_.push_back(lineno);
    }
  }

  bool has(const std::string& col) const { return index_.count(col) != 0; }

  std::size_t column(const std::string& col) const {
    const auto it = index_.find(col);
    if (it == index_.end()) throw ParseError(what_ + ": missing column '" + col + "'");
    return it->second;
  }

  std::size_t rows() const { return rows_.size(); }
  const std::string& cell(std::size_t r, std::size_t c) const { return rows_[r][c]; }
  double number(std::size_t r, std::size_t c, const std::string& col) const {
    return parse_double(rows_[r][c], lines_[r], col);
  }
  std::size_t line(std::size_t r) const { return lines_[r]; }

  int count_prefix(const std::string& prefix) const {
    int n = 0;
    while (has(prefix + std::to_string(n + 1))) ++n;
    return n;
  }

 private:
  std::string what_;
  std::unordered_map<std::string, std::size_t> index_;
  std::size_t width_ = 0;
  std::vector<std::vector<std::string>> rows_;
  std::vector<std::size_t> lines_;
};

inline const char* const kStateBlocks[5] = {"theta_", "thetadot_", "thetaddot_",
                                            "theta_old_", "thetadot_old_"};

inline std::filesystem::path meta_path(const std::filesystem::path& csv) {
  return std::filesystem::path(csv.string() + ".meta.json");
}

}  // namespace detail

inline std::vector<std::string> dataset_columns(int n) {
  std::vector<std::string> cols{"t"};
  for (const char* block : detail::kStateBlocks) {
    for (int i = 1; i <= n; ++i) cols.push_back(block + std::to_string(i));
  }
  for (const char* c : {"px", "py", "pz", "px_meas", "py_meas", "pz_meas"}) cols.emplace_back(c);
  return cols;
}

inline void write_csv(const Dataset& ds, std::ostream& out) {
  const int n = ds.num_motors();
  const auto cols = dataset_columns(n);
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << '\n';
  for (const auto& s : ds.samples) {
    out << detail::format_double(s.t);
    const Eigen::VectorXd x = s.state.encode();
    for (Eigen::Index i = 0; i < x.size(); ++i) out << ',' << detail::format_double(x[i]);
    for (int a = 0; a < 3; ++a) {
      out << ',';
      if (s.p_true) out << detail::format_double((*s.p_true)[a]);
    }
    for (int a = 0; a < 3; ++a) out << ',' << detail::format_double(s.p_meas[a]);
    out << '\n';
  }
}

inline void write_csv(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("write_csv: cannot open " + path.string());
  write_csv(ds, out);
  std::ofstream meta(detail::meta_path(path));
  meta << nlohmann::json(ds.meta).dump(2) << '\n';
  if (!out || !meta) throw InputError("write_csv: write failed for " + path.string());
}

inline Dataset read_csv(std::istream& in, const std::string& what = "csv") {
  detail::CsvTable table(in, what);
  const int n = table.count_prefix("theta_");
  Dataset ds;
  std::vector<std::size_t> state_cols;
  std::vector<std::string> state_names;
  const std::size_t t_col = table.column("t");
  for (const char* block : detail::kStateBlocks) {
    for (int i = 1; i <= std::max(n, 1); ++i) {
      state_names.push_back(block + std::to_string(i));
      state_cols.push_back(table.column(state_names.back()));
    }
  }
  std::size_t true_cols[3], meas_cols[3];
  const char* true_names[3] = {"px", "py", "pz"};
  const char* meas_names[3] = {"px_meas", "py_meas", "pz_meas"};
  for (int a = 0; a < 3; ++a) {
    true_cols[a] = table.column(true_names[a]);
    meas_cols[a] = table.column(meas_names[a]);
  }
  ds.samples.reserve(table.rows());
  for (std::size_t r = 0; r < table.rows(); ++r) {
    Sample s;
    s.t = table.number(r, t_col, "t");
    Eigen::VectorXd x(5 * n);
    for (int k = 0; k < 5 * n; ++k) {
      x[k] = table.number(r, state_cols[k], state_names[k]);
    }
    s.state = MotorState::decode(x);
    int present = 0;
    Eigen::Vector3d pt;
    for (int a = 0; a < 3; ++a) {
      if (!table.cell(r, true_cols[a]).empty()) {
        pt[a] = table.number(r, true_cols[a], true_names[a]);
        ++present;
      }
      s.p_meas[a] = table.number(r, meas_cols[a], meas_names[a]);
    }
    if (present == 3) {
      s.p_true = pt;
    } else if (present != 0) {
      throw ParseError(what + " line " + std::to_string(table.line(r)) +
                       ": px, py, pz must be all present or all empty");
    }
    ds.samples.push_back(std::move(s));
  }
  try {
    ds.validate();
  } catch (const InputError& e) {
    throw ParseError(what + ": " + e.what());
  }
  return ds;
}

inline Dataset read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("read_csv: cannot open " + path.string());
  Dataset ds = read_csv(in, path.string());
  const auto mp = detail::meta_path(path);
  if (std::filesystem::exists(mp)) {
    std::ifstream m(mp);
    try {
      ds.meta = nlohmann::json::parse(m).get<DatasetMeta>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(mp.string() + ": " + e.what());
    }
  }
  return ds;
}

// --- recorded data ---------------------------------------------------------

/// Three-point derivative on a non-uniform grid; one-sided at the ends.
inline std::vector<double> central_difference(const std::vector<double>& t,
                                              const std::vector<double>& v) {
  const std::size_t N = t.size();
  std::vector<double> d(N, 0.0);
  if (N < 2) return d;
  d[0] = (v[1] - v[0]) / (t[1] - t[0]);
  d[N - 1] = (v[N - 1] - v[N - 2]) / (t[N - 1] - t[N - 2]);
  for (std::size_t i = 1; i + 1 < N; ++i) {
    const double h1 = t[i] - t[i - 1];
    const double h2 = t[i + 1] - t[i];
    d[i] = (h1 * h1 * v[i + 1] - h2 * h2 * v[i - 1] + (h2 * h2 - h1 * h1) * v[i]) /
           (h1 * h2 * (h1 + h2));
  }
  return d;
}

/// Reads (t, x_px, y_px, depth_m, theta_1..n), lifts pixels to 3-D and maps
/// them into the robot base frame. Velocities and accelerations come from
/// differences over t.
inline Dataset ingest_recording(std::istream& in, const CameraSetup& cam,
                                const std::string& what = "recording") {
  detail::CsvTable table(in, what);
  const int n = table.count_prefix("theta_");
  if (n < 1) throw ParseError(what + ": missing column 'theta_1'");
  const std::size_t ct = table.column("t"), cx = table.column("x_px"),
                    cy = table.column("y_px"), cd = table.column("depth_m");
  const std::size_t N = table.rows();
  std::vector<double> t(N);
  std::vector<std::vector<double>> theta(n, std::vector<double>(N));
  Dataset ds;
  ds.meta.source = "real";
  ds.samples.resize(N);
  for (std::size_t r = 0; r < N; ++r) {
    t[r] = table.number(r, ct, "t");
    if (r > 0 && !(t[r] > t[r - 1])) {
      throw ParseError(what + " line " + std::to_string(table.line(r)) +
                       ": timestamps must be strictly increasing");
    }
    for (int i = 0; i < n; ++i) {
      const std::string col = "theta_" + std::to_string(i + 1);
      theta[i][r] = table.number(r, table.column(col), col);
    }
    const double depth = table.number(r, cd, "depth_m");
    Eigen::Vector3d p;
    try {
      p = project_depth_to_3d(cam.intrinsics, table.number(r, cx, "x_px"),
                              table.number(r, cy, "y_px"), depth);
    } catch (const InvalidDepthError& e) {
      throw InvalidDepthError(what + " line " + std::to_string(table.line(r)) + ": " +
                              e.what());
    }
    ds.samples[r].t = t[r];
    ds.samples[r].p_meas = apply_calibration(cam.calibration, p);
  }
  std::vector<std::vector<double>> vel(n), acc(n);
  for (int i = 0; i < n; ++i) {
    vel[i] = central_difference(t, theta[i]);
    acc[i] = central_difference(t, vel[i]);
  }
  for (std::size_t r = 0; r < N; ++r) {
    MotorState& s = ds.samples[r].state;
    s = MotorState::zeros(n);
    for (int i = 0; i < n; ++i) {
      s.theta[i] = theta[i][r];
      s.theta_dot[i] = vel[i][r];
      s.theta_ddot[i] = acc[i][r];
      if (r > 0) {
        s.theta_old[i] = theta[i][r - 1];
        s.theta_dot_old[i] = vel[i][r - 1];
      }
    }
  }
  return ds;
}

inline Dataset ingest_recording(const std::filesystem::path& csv,
                                const std::filesystem::path& camera_json) {
  std::ifstream cj(camera_json);
  if (!cj) throw InputError("ingest: cannot open " + camera_json.string());
  CameraSetup cam;
  try {
    cam = nlohmann::json::parse(cj).get<CameraSetup>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(camera_json.string() + ": " + e.what());
  }
  std::ifstream in(csv);
  if (!in) throw InputError("ingest: cannot open " + csv.string());
  return ingest_recording(in, cam, csv.string());
}

}  // namespace hybridkin

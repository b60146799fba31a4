#pragma once

// Data-driven tip models (three independent per-axis GPs over the encoded
// motor state) and their confidence-weighted blend with the analytical model.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "hybridkin/dataset.hpp"
#include "hybridkin/errors.hpp"
#include "hybridkin/gp.hpp"
#include "hybridkin/robot.hpp"

namespace hybridkin {

enum class VariantKind { ErrorLearning, WithPrior, NoPrior };

inline constexpr std::array<VariantKind, 3> kAllVariants = {
    VariantKind::ErrorLearning, VariantKind::WithPrior, VariantKind::NoPrior};

inline std::string variant_name(VariantKind k) {
  switch (k) {
    case VariantKind::ErrorLearning: return "GP_eps";
    case VariantKind::WithPrior: return "GP_p";
    case VariantKind::NoPrior: return "GP_np";
  }
  return "?";
}

inline std::string hybrid_name(VariantKind k) {
  switch (k) {
    case VariantKind::ErrorLearning: return "Hyb_eps";
    case VariantKind::WithPrior: return "Hyb_p";
    case VariantKind::NoPrior: return "Hyb_np";
  }
  return "?";
}

inline VariantKind parse_variant(const std::string& s) {
  for (auto k : kAllVariants) {
    if (s == variant_name(k)) return k;
  }
  if (s == "error_learning" || s == "eps") return VariantKind::ErrorLearning;
  if (s == "with_prior" || s == "p") return VariantKind::WithPrior;
  if (s == "no_prior" || s == "np") return VariantKind::NoPrior;
  throw InputError("unknown variant '" + s + "' (expected GP_eps, GP_p or GP_np)");
}

struct GpSettings {
  int restarts = 3;
  std::uint64_t seed = 0;
  int max_iterations = 80;
  // Hyperparameters are selected on a random subset of this size (0 = all).
  std::size_t hyper_subset = 250;
  // Skips selection and uses these kernels, one per axis.
  std::optional<std::array<gp::KernelSpec, 3>> fixed_kernels;
};

inline void to_json(nlohmann::json& j, const GpSettings& s) {
  j = {{"restarts", s.restarts},
       {"seed", s.seed},
       {"max_iterations", s.max_iterations},
       {"hyper_subset", s.hyper_subset}};
}

inline void from_json(const nlohmann::json& j, GpSettings& s) {
  const GpSettings d;
  s.restarts = j.value("restarts", d.restarts);
  s.seed = j.value("seed", d.seed);
  s.max_iterations = j.value("max_iterations", d.max_iterations);
  s.hyper_subset = j.value("hyper_subset", d.hyper_subset);
  if (s.restarts < 1) throw InputError("gp settings: restarts must be >= 1");
  if (s.max_iterations < 1) throw InputError("gp settings: max_iterations must be >= 1");
}

struct DataDrivenModel {
  VariantKind kind = VariantKind::NoPrior;
  std::vector<gp::GpModel> gps;           // x, y, z
  std::optional<KinematicChain> analytical;  // absent for NoPrior
  int n_motors = 0;
};

inline Eigen::MatrixXd analytical_batch(const KinematicChain& chain,
                                        const Eigen::MatrixXd& X) {
  Eigen::MatrixXd P(3, X.cols());
  for (Eigen::Index k = 0; k < X.cols(); ++k) {
    P.col(k) = analytical_model(chain, MotorState::decode(X.col(k)));
  }
  return P;
}

inline gp::MeanFunction analytical_axis_mean(const KinematicChain& chain, int axis) {
  return [chain, axis](const Eigen::VectorXd& x) {
    return analytical_model(chain, MotorState::decode(x))[axis];
  };
}

namespace detail {

inline std::vector<Eigen::Index> hyper_subset_indices(Eigen::Index n, std::size_t m,
                                                      std::uint64_t seed) {
  std::vector<Eigen::Index> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), Eigen::Index{0});
  if (m == 0 || m >= all.size()) return all;
  std::vector<Eigen::Index> out;
  std::mt19937_64 rng(seed);
  std::sample(all.begin(), all.end(), std::back_inserter(out), m, rng);
  return out;
}

}  // namespace detail

/// Per-axis targets and prior mean for a variant, then hyperparameter
/// selection and an exact fit on every training sample.
inline DataDrivenModel train_variant(VariantKind kind, const Dataset& ds,
                                     const KinematicChain& chain,
                                     const GpSettings& settings) {
  if (ds.empty()) throw InputError("train_variant: dataset is empty");
  if (ds.num_motors() != chain.num_motors()) {
    throw InputError("train_variant: dataset motor count does not match chain");
  }
  const Eigen::MatrixXd X = ds.inputs();
  const Eigen::MatrixXd Y = ds.measured();
  Eigen::MatrixXd Pa;
  if (kind != VariantKind::NoPrior) Pa = analytical_batch(chain, X);

  const auto idx = detail::hyper_subset_indices(X.cols(), settings.hyper_subset, settings.seed);
  Eigen::MatrixXd Xs(X.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) Xs.col(static_cast<Eigen::Index>(k)) = X.col(idx[k]);

  DataDrivenModel m;
  m.kind = kind;
  m.n_motors = chain.num_motors();
  if (kind != VariantKind::NoPrior) m.analytical = chain;
  for (int a = 0; a < 3; ++a) {
    Eigen::VectorXd y = Y.row(a).transpose();
    gp::MeanFunction mean;
    switch (kind) {
      case VariantKind::ErrorLearning:
        y -= Pa.row(a).transpose();
        mean = gp::zero_mean();
        break;
      case VariantKind::WithPrior:
        mean = analytical_axis_mean(chain, a);
        break;
      case VariantKind::NoPrior:
        mean = gp::constant_mean(y.mean());
        break;
    }
    gp::KernelSpec spec;
    if (settings.fixed_kernels) {
      spec = (*settings.fixed_kernels)[a];
    } else {
      Eigen::VectorXd ys(static_cast<Eigen::Index>(idx.size()));
      for (std::size_t k = 0; k < idx.size(); ++k) ys[static_cast<Eigen::Index>(k)] = y[idx[k]];
      gp::OptimizeOptions opt;
      opt.max_iterations = settings.max_iterations;
      spec = gp::optimize_hyperparams(Xs, ys, mean, settings.restarts,
                                      settings.seed + 1 + static_cast<std::uint64_t>(a), opt);
    }
    m.gps.push_back(gp::fit(X, std::move(y), std::move(spec), std::move(mean)));
  }
  return m;
}

struct AxisPrediction {
  Eigen::MatrixXd mean;      // 3 x M
  Eigen::MatrixXd variance;  // 3 x M
};

inline AxisPrediction predict_data_driven_batch(const DataDrivenModel& m,
                                                const Eigen::MatrixXd& X) {
  AxisPrediction out{Eigen::MatrixXd(3, X.cols()), Eigen::MatrixXd(3, X.cols())};
  for (int a = 0; a < 3; ++a) {
    const auto post = m.gps[a].predict_batch(X);
    out.mean.row(a) = post.mean.transpose();
    out.variance.row(a) = post.variance.transpose();
  }
  if (m.kind == VariantKind::ErrorLearning) out.mean += analytical_batch(*m.analytical, X);
  return out;
}

struct DataDrivenPoint {
  Eigen::Vector3d mean;
  Eigen::Vector3d variance;
};

inline DataDrivenPoint predict_data_driven(const DataDrivenModel& m, const MotorState& s) {
  const auto p = predict_data_driven_batch(m, s.encode());
  return {p.mean.col(0), p.variance.col(0)};
}

// --- fusion ----------------------------------------------------------------

struct WeightConfig {
  Eigen::Vector3d thresholds = Eigen::Vector3d::Constant(5e-4);

  void validate() const {
    if (!(thresholds.array() > 0.0).all()) {
      throw InputError("weights: thresholds must be positive");
    }
  }
};

/// exp(-k e^2 / var) with k = |e| / t. var = 0 gives 0 on disagreement and
/// 1 on agreement.
inline double weight_axis(double pd, double pa, double var, double t) {
  const double e = pd - pa;
  if (e == 0.0) return 1.0;
  if (var <= 0.0) return 0.0;
  const double k = std::abs(e) / t;
  return std::exp(-k * e * e / var);
}

inline Eigen::Vector3d weight(const Eigen::Vector3d& pd, const Eigen::Vector3d& pa,
                              const Eigen::Vector3d& var, const WeightConfig& cfg) {
  Eigen::Vector3d w;
  for (int a = 0; a < 3; ++a) w[a] = weight_axis(pd[a], pa[a], var[a], cfg.thresholds[a]);
  return w;
}

/// (1 - w) pd + w pa, kept inside [min, max] against round-off.
inline double blend(double pd, double pa, double w) {
  const double v = (1.0 - w) * pd + w * pa;
  return std::clamp(v, std::min(pd, pa), std::max(pd, pa));
}

struct HybridModel {
  DataDrivenModel data_driven;
  KinematicChain analytical;
  WeightConfig weights;
};

inline HybridModel make_hybrid(DataDrivenModel dd, const KinematicChain& chain,
                               const WeightConfig& w) {
  w.validate();
  if (dd.analytical && nlohmann::json(*dd.analytical) != nlohmann::json(chain)) {
    throw InputError("hybrid: data-driven and analytical chains differ");
  }
  return {std::move(dd), chain, w};
}

struct HybridBatch {
  Eigen::MatrixXd P;         // hybrid output
  Eigen::MatrixXd P_d;
  Eigen::MatrixXd var_d;
  Eigen::MatrixXd P_a;
  Eigen::MatrixXd W;
};

/// Analytical input with theta_ddot and theta_old zeroed.
inline MotorState analytical_input(const MotorState& s) {
  MotorState a = s;
  a.theta_ddot.setZero();
  a.theta_old.setZero();
  return a;
}

inline HybridBatch hybrid_predict_batch(const HybridModel& h, const Eigen::MatrixXd& X) {
  const auto dd = predict_data_driven_batch(h.data_driven, X);
  HybridBatch out;
  out.P_d = dd.mean;
  out.var_d = dd.variance;
  out.P_a.resize(3, X.cols());
  out.W.resize(3, X.cols());
  out.P.resize(3, X.cols());
  for (Eigen::Index k = 0; k < X.cols(); ++k) {
    out.P_a.col(k) = analytical_model(h.analytical, analytical_input(MotorState::decode(X.col(k))));
    for (int a = 0; a < 3; ++a) {
      const double w = weight_axis(out.P_d(a, k), out.P_a(a, k), out.var_d(a, k),
                                   h.weights.thresholds[a]);
      out.W(a, k) = w;
      out.P(a, k) = blend(out.P_d(a, k), out.P_a(a, k), w);
    }
  }
  return out;
}

inline Eigen::Vector3d hybrid_predict(const HybridModel& h, const MotorState& s) {
  return hybrid_predict_batch(h, s.encode()).P.col(0);
}

// --- bundle ----------------------------------------------------------------

NLOHMANN_JSON_SERIALIZE_ENUM(VariantKind, {{VariantKind::ErrorLearning, "GP_eps"},
                                           {VariantKind::WithPrior, "GP_p"},
                                           {VariantKind::NoPrior, "GP_np"}})

inline constexpr int kBundleVersion = 1;

/// Writes <stem>.json (metadata, kernels, chain) and <stem>.bin (inputs, then
/// the three target vectors, little-endian doubles).
inline void save_model(const HybridModel& h, const std::filesystem::path& json_path) {
  static_assert(std::endian::native == std::endian::little, "bundle assumes little-endian");
  const auto& dd = h.data_driven;
  if (dd.gps.size() != 3) throw InputError("save_model: model is not trained");
  const auto bin_path = std::filesystem::path(json_path).replace_extension(".bin");
  nlohmann::json axes = nlohmann::json::array();
  for (const auto& g : dd.gps) {
    nlohmann::json mean;
    switch (dd.kind) {
      case VariantKind::ErrorLearning: mean = {{"type", "zero"}}; break;
      case VariantKind::WithPrior: mean = {{"type", "analytical"}}; break;
      case VariantKind::NoPrior:
        mean = {{"type", "constant"}, {"value", g.prior_mean_at_inputs()[0]}};
        break;
    }
    axes.push_back({{"kernel", g.kernel()}, {"mean", mean}});
  }
  const nlohmann::json j = {{"format", "hybridkin-model"},
                            {"version", kBundleVersion},
                            {"kind", dd.kind},
                            {"thresholds", detail::to_std(h.weights.thresholds)},
                            {"chain", h.analytical},
                            {"n_motors", dd.n_motors},
                            {"input_dim", dd.gps[0].input_dim()},
                            {"n_samples", dd.gps[0].size()},
                            {"axes", axes},
                            {"data_file", bin_path.filename().string()}};
  std::ofstream out(json_path);
  if (!out) throw InputError("save_model: cannot write " + json_path.string());
  out << j.dump(2) << '\n';
  std::ofstream bin(bin_path, std::ios::binary);
  if (!bin) throw InputError("save_model: cannot write " + bin_path.string());
  const auto& X = dd.gps[0].inputs();
  bin.write(reinterpret_cast<const char*>(X.data()),
            static_cast<std::streamsize>(X.size() * sizeof(double)));
  for (const auto& g : dd.gps) {
    bin.write(reinterpret_cast<const char*>(g.targets().data()),
              static_cast<std::streamsize>(g.targets().size() * sizeof(double)));
  }
  if (!out || !bin) throw InputError("save_model: write failed");
}

/// Reads a bundle and refits the exact posterior from the stored kernels.
inline HybridModel load_model(const std::filesystem::path& json_path) {
  std::ifstream in(json_path);
  if (!in) throw InputError("load_model: cannot open " + json_path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
    if (j.at("format").get<std::string>() != "hybridkin-model") {
      throw ParseError("load_model: not a model bundle");
    }
    if (j.at("version").get<int>() != kBundleVersion) {
      throw ParseError("load_model: unsupported bundle version " +
                       std::to_string(j.at("version").get<int>()));
    }
    HybridModel h;
    h.analytical = j.at("chain").get<KinematicChain>();
    h.weights.thresholds = detail::to_eigen(j.at("thresholds").get<std::vector<double>>());
    h.weights.validate();
    auto& dd = h.data_driven;
    dd.kind = j.at("kind").get<VariantKind>();
    dd.n_motors = j.at("n_motors").get<int>();
    const auto dim = j.at("input_dim").get<Eigen::Index>();
    const auto n = j.at("n_samples").get<Eigen::Index>();
    if (dim != 5 * dd.n_motors || n < 1) throw ParseError("load_model: inconsistent sizes");
    const auto bin_path = json_path.parent_path() / j.at("data_file").get<std::string>();
    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw InputError("load_model: cannot open " + bin_path.string());
    Eigen::MatrixXd X(dim, n);
    bin.read(reinterpret_cast<char*>(X.data()), static_cast<std::streamsize>(X.size() * sizeof(double)));
    std::array<Eigen::VectorXd, 3> ys;
    for (auto& y : ys) {
      y.resize(n);
      bin.read(reinterpret_cast<char*>(y.data()), static_cast<std::streamsize>(n * sizeof(double)));
    }
    if (!bin) throw ParseError("load_model: " + bin_path.string() + " is truncated");
    if (dd.kind != VariantKind::NoPrior) dd.analytical = h.analytical;
    const auto& axes = j.at("axes");
    if (axes.size() != 3) throw ParseError("load_model: expected 3 axes");
    for (int a = 0; a < 3; ++a) {
      const auto spec = axes[a].at("kernel").get<gp::KernelSpec>();
      const auto& mean = axes[a].at("mean");
      const auto type = mean.at("type").get<std::string>();
      gp::MeanFunction fn;
      if (type == "zero") {
        fn = gp::zero_mean();
      } else if (type == "analytical") {
        fn = analytical_axis_mean(h.analytical, a);
      } else if (type == "constant") {
        fn = gp::constant_mean(mean.at("value").get<double>());
      } else {
        throw ParseError("load_model: unknown mean type '" + type + "'");
      }
      dd.gps.push_back(gp::fit(X, ys[a], spec, std::move(fn)));
    }
    return h;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("load_model: " + json_path.string() + ": " + e.what());
  }
}

}  // namespace hybridkin

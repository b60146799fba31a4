#pragma once

// End-to-end evaluation: data generation, training of every variant against a
// correct and a deliberately wrong analytical model, scoring on the training
// samples, on the whole learning dataset and on a held-out quintic motion, and
// the report files.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "hybridkin/dataset.hpp"
#include "hybridkin/errors.hpp"
#include "hybridkin/hybrid.hpp"
#include "hybridkin/metrics.hpp"
#include "hybridkin/robot.hpp"
#include "hybridkin/trajectories.hpp"

namespace hybridkin {

enum class AnalyticalMode { Correct, Wrong };

inline std::string mode_name(AnalyticalMode m) {
  return m == AnalyticalMode::Correct ? "correct" : "wrong";
}

inline AnalyticalMode parse_mode(const std::string& s) {
  if (s == "correct") return AnalyticalMode::Correct;
  if (s == "wrong") return AnalyticalMode::Wrong;
  throw InputError("unknown analytical mode '" + s + "' (expected correct or wrong)");
}

inline const std::vector<std::string> kAssertionNames = {
    "consistency", "variant_ordering", "hybrid_improvement", "hybrid_safety",
    "noise_recovery"};

struct ExperimentConfig {
  std::filesystem::path chain_file;    // empty: built-in default chain
  std::filesystem::path dataset_file;  // empty: simulate
  std::optional<double> backlash_width;
  std::optional<double> hysteresis_gain;
  std::vector<AnalyticalMode> modes{AnalyticalMode::Correct, AnalyticalMode::Wrong};
  double wrong_length_scale = 0.8;
  std::vector<VariantKind> variants{kAllVariants.begin(), kAllVariants.end()};
  Eigen::Vector3d thresholds = Eigen::Vector3d::Constant(5e-4);
  double noise_sigma = 0.01;
  double dt = 0.01;
  std::size_t subsample = 1000;  // 0 = every sample
  // Samples of the learning dataset used for scoring (0 = all of it).
  std::size_t eval_samples = 0;
  std::uint64_t seed = 1;
  ChirpOptions chirp;
  bool test_motion = true;
  double test_motion_T = 5.0;
  GpSettings gp;
  std::vector<std::string> assertions;

  void validate() const {
    if (modes.empty()) throw InputError("config: no analytical modes");
    if (variants.empty()) throw InputError("config: no variants");
    if (!(noise_sigma >= 0.0)) throw InputError("config: noise_sigma must be >= 0");
    if (!(dt > 0.0)) throw InputError("config: dt must be positive");
    if (!(wrong_length_scale > 0.0)) throw InputError("config: wrong_length_scale must be > 0");
    if (!(test_motion_T > 0.0)) throw InputError("config: test_motion_T must be positive");
    WeightConfig{thresholds}.validate();
    for (const auto& a : assertions) {
      if (std::find(kAssertionNames.begin(), kAssertionNames.end(), a) == kAssertionNames.end()) {
        throw InputError("config: unknown assertion '" + a + "'");
      }
    }
    if (backlash_width && !(*backlash_width >= 0.0)) {
      throw InputError("config: backlash_width must be >= 0");
    }
    if (!chain_file.empty() && !std::filesystem::exists(chain_file)) {
      throw InputError("config: chain file not found: " + chain_file.string());
    }
    if (!dataset_file.empty() && !std::filesystem::exists(dataset_file)) {
      throw InputError("config: dataset file not found: " + dataset_file.string());
    }
  }

  // Seeds for each random stage, all derived from one value.
  std::uint64_t chirp_seed() const { return seed; }
  std::uint64_t noise_seed() const { return seed + 1; }
  std::uint64_t subsample_seed() const { return seed + 2; }
  std::uint64_t eval_seed() const { return seed + 4; }
  GpSettings gp_settings() const {
    GpSettings g = gp;
    g.seed = seed + 3;
    return g;
  }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  std::vector<std::string> modes, variants;
  for (auto m : c.modes) modes.push_back(mode_name(m));
  for (auto v : c.variants) variants.push_back(variant_name(v));
  j = {{"chain_file", c.chain_file.generic_string()},
       {"dataset_file", c.dataset_file.generic_string()},
       {"modes", modes},
       {"wrong_length_scale", c.wrong_length_scale},
       {"variants", variants},
       {"thresholds", detail::to_std(c.thresholds)},
       {"noise_sigma", c.noise_sigma},
       {"dt", c.dt},
       {"subsample", c.subsample},
       {"eval_samples", c.eval_samples},
       {"seed", c.seed},
       {"chirp", c.chirp},
       {"test_motion", c.test_motion},
       {"test_motion_T", c.test_motion_T},
       {"gp", c.gp},
       {"assertions", c.assertions}};
  j["backlash_width"] = c.backlash_width ? nlohmann::json(*c.backlash_width) : nlohmann::json();
  j["hysteresis_gain"] = c.hysteresis_gain ? nlohmann::json(*c.hysteresis_gain) : nlohmann::json();
}

/// Relative file paths are resolved against base_dir.
inline ExperimentConfig config_from_json(const nlohmann::json& j,
                                         const std::filesystem::path& base_dir = {}) {
  ExperimentConfig c;
  try {
    const auto path = [&](const char* key) -> std::filesystem::path {
      const std::string s = j.value(key, std::string());
      if (s.empty()) return {};
      std::filesystem::path p(s);
      return p.is_relative() && !base_dir.empty() ? base_dir / p : p;
    };
    c.chain_file = path("chain_file");
    c.dataset_file = path("dataset_file");
    if (j.contains("modes")) {
      c.modes.clear();
      for (const auto& m : j.at("modes")) c.modes.push_back(parse_mode(m.get<std::string>()));
    }
    if (j.contains("variants")) {
      c.variants.clear();
      for (const auto& v : j.at("variants")) c.variants.push_back(parse_variant(v.get<std::string>()));
    }
    if (j.contains("thresholds")) {
      const auto& t = j.at("thresholds");
      if (t.is_number()) {
        c.thresholds.setConstant(t.get<double>());
      } else {
        const auto v = t.get<std::vector<double>>();
        if (v.size() != 3) throw InputError("config: thresholds needs 3 values");
        c.thresholds = Eigen::Vector3d(v[0], v[1], v[2]);
      }
    }
    c.wrong_length_scale = j.value("wrong_length_scale", c.wrong_length_scale);
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    c.dt = j.value("dt", c.dt);
    c.subsample = j.value("subsample", c.subsample);
    c.eval_samples = j.value("eval_samples", c.eval_samples);
    c.seed = j.value("seed", c.seed);
    if (j.contains("chirp")) c.chirp = j.at("chirp").get<ChirpOptions>();
    c.test_motion = j.value("test_motion", c.test_motion);
    c.test_motion_T = j.value("test_motion_T", c.test_motion_T);
    if (j.contains("gp")) c.gp = j.at("gp").get<GpSettings>();
    if (j.contains("backlash_width") && !j.at("backlash_width").is_null()) {
      c.backlash_width = j.at("backlash_width").get<double>();
    }
    if (j.contains("hysteresis_gain") && !j.at("hysteresis_gain").is_null()) {
      c.hysteresis_gain = j.at("hysteresis_gain").get<double>();
    }
    c.assertions = j.value("assertions", c.assertions);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("config: cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j, path.parent_path());
}

// --- stages ----------------------------------------------------------------

/// Runs f, prefixing any library error with the stage name. The error category
/// (input vs numerical) is kept.
template <typename F>
auto run_stage(const std::string& stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const InputError& e) {
    throw InputError("stage " + stage + ": " + e.what());
  } catch (const NumericalError& e) {
    throw NumericalError("stage " + stage + ": " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("stage " + stage + ": " + e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    throw InputError("stage " + stage + ": " + e.what());
  }
}

inline KinematicChain plant_chain(const ExperimentConfig& cfg) {
  KinematicChain c = cfg.chain_file.empty() ? default_microiges_chain() : load_chain(cfg.chain_file);
  if (cfg.backlash_width) c.backlash_widths.setConstant(*cfg.backlash_width);
  if (cfg.hysteresis_gain) {
    c.hysteresis_gain.setConstant(*cfg.hysteresis_gain);
  } else if (cfg.backlash_width) {
    c.hysteresis_gain = -0.5 * c.backlash_widths;
  }
  c.validate();
  return c;
}

inline KinematicChain analytical_chain(const ExperimentConfig& cfg, const KinematicChain& plant,
                                       AnalyticalMode mode) {
  return mode == AnalyticalMode::Correct ? plant
                                         : wrong_analytical_chain(plant, cfg.wrong_length_scale);
}

struct ExperimentData {
  KinematicChain plant;
  std::vector<ChirpParams> chirps;  // empty when the dataset was loaded
  Dataset full;
  Dataset train;     // GP training samples
  Dataset learning;  // scoring set drawn from the whole dataset
};

inline std::vector<ChirpParams> design_chirps(const ExperimentConfig& cfg,
                                              const KinematicChain& plant) {
  std::vector<ChirpParams> chirps;
  std::uint64_t k = 0;
  for (const auto& mask : motion_combinations(plant.num_motors())) {
    chirps.push_back(fit_chirp_amplitudes(plant, mask, cfg.chirp_seed() + k++, cfg.chirp));
  }
  return chirps;
}

inline Dataset simulate_dataset(const ExperimentConfig& cfg, const KinematicChain& plant,
                                const std::vector<ChirpParams>& chirps) {
  Dataset ds = generate_dataset(plant, chirps, cfg.dt, cfg.noise_sigma, cfg.noise_seed());
  ds.meta.chain_config_id = cfg.chain_file.empty() ? "default" : cfg.chain_file.filename().string();
  return ds;
}

inline ExperimentData prepare_data(const ExperimentConfig& cfg) {
  ExperimentData d;
  d.plant = plant_chain(cfg);
  if (cfg.dataset_file.empty()) {
    d.chirps = design_chirps(cfg, d.plant);
    d.full = simulate_dataset(cfg, d.plant, d.chirps);
  } else {
    d.full = read_csv(cfg.dataset_file);
    if (d.full.num_motors() != d.plant.num_motors()) {
      throw InputError("dataset motor count does not match chain");
    }
  }
  const std::size_t n_train = cfg.subsample == 0 ? d.full.size() : cfg.subsample;
  if (n_train > d.full.size()) {
    throw InputError("subsample " + std::to_string(cfg.subsample) + " exceeds dataset size " +
                     std::to_string(d.full.size()));
  }
  d.train = n_train == d.full.size() ? d.full : subsample(d.full, n_train, cfg.subsample_seed());
  d.learning = cfg.eval_samples == 0 || cfg.eval_samples >= d.full.size()
                   ? d.full
                   : subsample(d.full, cfg.eval_samples, cfg.eval_seed());
  return d;
}

/// Quintic test motion spanning the per-motor range seen in the dataset.
inline QuinticMotion test_motion_for(const ExperimentConfig& cfg, const Dataset& full) {
  QuinticMotion m;
  const Eigen::MatrixXd X = full.inputs();
  const int n = full.num_motors();
  m.theta_min = X.topRows(n).rowwise().minCoeff();
  m.theta_max = X.topRows(n).rowwise().maxCoeff();
  m.T = cfg.test_motion_T;
  return m;
}

inline Dataset simulate_test_motion(const KinematicChain& plant, const QuinticMotion& m,
                                    double dt) {
  Dataset ds;
  ds.samples = simulate_trajectory(plant, sample_test_motion(m, dt), dt, 0.0);
  for (auto& s : ds.samples) s.p_meas = *s.p_true;
  ds.meta.source = "simulated";
  return ds;
}

struct TrainedModels {
  AnalyticalMode mode = AnalyticalMode::Correct;
  std::vector<HybridModel> models;  // one per configured variant
};

inline TrainedModels train_models(const ExperimentConfig& cfg, const ExperimentData& d,
                                  AnalyticalMode mode) {
  TrainedModels out;
  out.mode = mode;
  const KinematicChain chain = analytical_chain(cfg, d.plant, mode);
  for (auto v : cfg.variants) {
    out.models.push_back(make_hybrid(train_variant(v, d.train, chain, cfg.gp_settings()), chain,
                                     WeightConfig{cfg.thresholds}));
  }
  return out;
}

// --- evaluation ------------------------------------------------------------

struct ModelSeries {
  std::string name;
  Eigen::MatrixXd P;      // 3 x K
  Eigen::MatrixXd sigma;  // data-driven standard deviation
  Eigen::MatrixXd W;      // 0 for the raw data-driven model
};

struct SetEvaluation {
  std::string name;  // "train", "learning" or "test_motion"
  std::vector<double> t;
  Eigen::MatrixXd reference;
  bool reference_is_truth = true;
  Eigen::MatrixXd analytical;
  std::vector<ModelSeries> models;
};

inline SetEvaluation evaluate_set(const std::string& name, const Dataset& ds,
                                  const TrainedModels& tm) {
  SetEvaluation ev;
  ev.name = name;
  for (const auto& s : ds.samples) ev.t.push_back(s.t);
  ev.reference_is_truth = ds.has_truth();
  ev.reference = ev.reference_is_truth ? ds.truth() : ds.measured();
  const Eigen::MatrixXd X = ds.inputs();
  const Eigen::Index K = X.cols();
  constexpr Eigen::Index kChunk = 2048;  // bounds the K(X*, X) workspace
  for (const auto& h : tm.models) {
    ModelSeries raw{variant_name(h.data_driven.kind), Eigen::MatrixXd(3, K),
                    Eigen::MatrixXd(3, K), Eigen::MatrixXd::Zero(3, K)};
    ModelSeries hyb{hybrid_name(h.data_driven.kind), Eigen::MatrixXd(3, K),
                    Eigen::MatrixXd(3, K), Eigen::MatrixXd(3, K)};
    const bool first = ev.analytical.size() == 0;
    if (first) ev.analytical.resize(3, K);
    for (Eigen::Index c0 = 0; c0 < K; c0 += kChunk) {
      const Eigen::Index w = std::min(kChunk, K - c0);
      const auto b = hybrid_predict_batch(h, X.middleCols(c0, w));
      if (first) ev.analytical.middleCols(c0, w) = b.P_a;
      raw.P.middleCols(c0, w) = b.P_d;
      raw.sigma.middleCols(c0, w) = b.var_d.cwiseMax(0.0).cwiseSqrt();
      hyb.P.middleCols(c0, w) = b.P;
      hyb.W.middleCols(c0, w) = b.W;
    }
    hyb.sigma = raw.sigma;
    ev.models.push_back(std::move(raw));
    ev.models.push_back(std::move(hyb));
  }
  return ev;
}

struct ModeEvaluation {
  AnalyticalMode mode = AnalyticalMode::Correct;
  std::map<std::string, Eigen::Vector3d> fitted_noise_sigma;
  std::vector<SetEvaluation> sets;
};

inline ModeEvaluation evaluate_mode(const ExperimentConfig& cfg, const ExperimentData& d,
                                    const TrainedModels& tm) {
  ModeEvaluation me;
  me.mode = tm.mode;
  for (const auto& h : tm.models) {
    Eigen::Vector3d s;
    for (int a = 0; a < 3; ++a) s[a] = std::sqrt(h.data_driven.gps[a].kernel().noise_variance);
    me.fitted_noise_sigma[variant_name(h.data_driven.kind)] = s;
  }
  me.sets.push_back(evaluate_set("train", d.train, tm));
  me.sets.push_back(evaluate_set("learning", d.learning, tm));
  if (cfg.test_motion) {
    const auto motion = simulate_test_motion(d.plant, test_motion_for(cfg, d.full), cfg.dt);
    me.sets.push_back(evaluate_set("test_motion", motion, tm));
  }
  return me;
}

// --- report ----------------------------------------------------------------

inline nlohmann::json metrics_json(const Eigen::MatrixXd& P, const SetEvaluation& ev) {
  return {{"rmse_vs_truth", detail::to_std(rmse(P, ev.reference))},
          {"rmse_vs_analytical", detail::to_std(rmse(P, ev.analytical))},
          {"max_abs_error", detail::to_std(max_abs_error(P, ev.reference))}};
}

inline nlohmann::json set_json(const SetEvaluation& ev) {
  nlohmann::json models = nlohmann::json::object();
  for (const auto& m : ev.models) models[m.name] = metrics_json(m.P, ev);
  models["Analytical"] = metrics_json(ev.analytical, ev);
  return {{"reference", ev.reference_is_truth ? "truth" : "measured"},
          {"n", ev.t.size()},
          {"models", models}};
}

struct AssertionResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

namespace detail {

inline Eigen::Vector3d vec3(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return {v.at(0), v.at(1), v.at(2)};
}

inline std::string fmt3(const Eigen::Vector3d& v) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "[%.4e, %.4e, %.4e]", v[0], v[1], v[2]);
  return buf;
}

inline const nlohmann::json* find_set(const nlohmann::json& report, const std::string& mode,
                                      const std::string& set) {
  const auto& modes = report.at("modes");
  if (!modes.contains(mode)) return nullptr;
  const auto& sets = modes.at(mode).at("sets");
  if (!sets.contains(set)) return nullptr;
  return &sets.at(set).at("models");
}

inline bool has_all_variants(const nlohmann::json& models) {
  for (auto v : kAllVariants) {
    if (!models.contains(variant_name(v)) || !models.contains(hybrid_name(v))) return false;
  }
  return true;
}

inline AssertionResult check_consistency(const nlohmann::json& report) {
  AssertionResult r{"consistency", true, ""};
  double worst = 0.0;
  std::string where;
  for (const auto& [mode, mj] : report.at("modes").items()) {
    for (const auto& [set, sj] : mj.at("sets").items()) {
      for (const auto& [model, m] : sj.at("models").items()) {
        // The perturbed model is wrong by construction.
        if (mode == "wrong" && model == "Analytical") continue;
        const double v = vec3(m.at("rmse_vs_truth")).maxCoeff();
        if (v >= worst) {
          worst = v;
          where = mode + "/" + set + "/" + model;
        }
      }
    }
  }
  r.passed = worst <= 1e-6;
  char buf[64];
  std::snprintf(buf, sizeof buf, "max rmse %.3e at ", worst);
  r.detail = buf + where;
  return r;
}

inline AssertionResult check_ordering(const nlohmann::json& report) {
  AssertionResult r{"variant_ordering", true, ""};
  for (const char* set : {"learning", "test_motion"}) {
    const auto* models = find_set(report, "correct", set);
    if (!models || !has_all_variants(*models)) {
      return {"variant_ordering", false, std::string("missing correct/") + set + " results"};
    }
    const auto e = vec3(models->at("GP_eps").at("rmse_vs_truth"));
    const auto p = vec3(models->at("GP_p").at("rmse_vs_truth"));
    const auto np = vec3(models->at("GP_np").at("rmse_vs_truth"));
    int np_worst = 0, eps_le_p = 0;
    for (int a = 0; a < 3; ++a) {
      np_worst += np[a] >= e[a] && np[a] >= p[a];
      eps_le_p += e[a] <= p[a];
    }
    const bool ok = np_worst == 3 && eps_le_p >= 2;
    r.passed = r.passed && ok;
    r.detail += std::string(set) + ": np worst on " + std::to_string(np_worst) +
                "/3 axes, eps<=p on " + std::to_string(eps_le_p) + "/3; ";
  }
  return r;
}

inline AssertionResult check_improvement(const nlohmann::json& report) {
  AssertionResult r{"hybrid_improvement", true, ""};
  const auto* models = find_set(report, "correct", "test_motion");
  if (!models || !has_all_variants(*models)) {
    return {r.name, false, "missing correct/test_motion results"};
  }
  for (auto v : kAllVariants) {
    const auto g = vec3(models->at(variant_name(v)).at("rmse_vs_truth"));
    const auto h = vec3(models->at(hybrid_name(v)).at("rmse_vs_truth"));
    const bool ok = (h.array() <= 1.05 * g.array()).all();
    r.passed = r.passed && ok;
    r.detail += hybrid_name(v) + "/" + variant_name(v) + " = " +
                fmt3(h.cwiseQuotient(g.cwiseMax(1e-300))) + "; ";
  }
  return r;
}

inline AssertionResult check_safety(const nlohmann::json& report) {
  AssertionResult r{"hybrid_safety", true, ""};
  const auto* models = find_set(report, "wrong", "learning");
  if (!models || !has_all_variants(*models)) return {r.name, false, "missing wrong/learning results"};
  for (auto v : kAllVariants) {
    const auto g = vec3(models->at(variant_name(v)).at("max_abs_error"));
    const auto h = vec3(models->at(hybrid_name(v)).at("max_abs_error"));
    const bool ok = (h.array() <= g.array() + 1e-9).all();
    r.passed = r.passed && ok;
    r.detail += hybrid_name(v) + " - " + variant_name(v) + " = " + fmt3(h - g) + "; ";
  }
  return r;
}

inline AssertionResult check_noise(const nlohmann::json& report) {
  AssertionResult r{"noise_recovery", true, ""};
  const double sigma = report.at("data").at("noise_sigma").get<double>();
  const auto& modes = report.at("modes");
  if (!modes.contains("correct") || !(sigma > 0.0)) {
    return {r.name, false, "needs a correct-mode run with noise_sigma > 0"};
  }
  for (const auto& [variant, s] : modes.at("correct").at("fitted_noise_sigma").items()) {
    const Eigen::Vector3d ratio = vec3(s) / sigma;
    const bool ok = (ratio.array() >= 0.5).all() && (ratio.array() <= 2.0).all();
    r.passed = r.passed && ok;
    r.detail += variant + " sigma/injected = " + fmt3(ratio) + "; ";
  }
  return r;
}

}  // namespace detail

inline AssertionResult check_assertion(const nlohmann::json& report, const std::string& name) {
  if (name == "consistency") return detail::check_consistency(report);
  if (name == "variant_ordering") return detail::check_ordering(report);
  if (name == "hybrid_improvement") return detail::check_improvement(report);
  if (name == "hybrid_safety") return detail::check_safety(report);
  if (name == "noise_recovery") return detail::check_noise(report);
  throw InputError("unknown assertion '" + name + "'");
}

inline nlohmann::json build_report(const ExperimentConfig& cfg, const ExperimentData& d,
                                   const std::vector<ModeEvaluation>& modes) {
  nlohmann::json j;
  j["format"] = "hybridkin-report";
  j["version"] = 1;
  j["config"] = cfg;
  j["data"] = {{"source", d.full.meta.source},
               {"n_samples", d.full.size()},
               {"n_train", d.train.size()},
               {"n_learning_eval", d.learning.size()},
               {"noise_sigma", d.full.meta.noise_sigma}};
  if (cfg.test_motion) {
    const auto m = test_motion_for(cfg, d.full);
    j["data"]["test_motion"] = m;
  }
  j["modes"] = nlohmann::json::object();
  for (const auto& me : modes) {
    nlohmann::json mj;
    mj["analytical_length_scale"] = me.mode == AnalyticalMode::Correct ? 1.0 : cfg.wrong_length_scale;
    mj["fitted_noise_sigma"] = nlohmann::json::object();
    for (const auto& [k, v] : me.fitted_noise_sigma) mj["fitted_noise_sigma"][k] = detail::to_std(v);
    mj["sets"] = nlohmann::json::object();
    for (const auto& s : me.sets) mj["sets"][s.name] = set_json(s);
    j["modes"][mode_name(me.mode)] = mj;
  }
  nlohmann::json checks = nlohmann::json::array();
  for (const auto& name : cfg.assertions) {
    const auto r = check_assertion(j, name);
    checks.push_back({{"name", r.name}, {"passed", r.passed}, {"detail", r.detail}});
  }
  j["assertions"] = checks;
  return j;
}

inline bool all_assertions_pass(const nlohmann::json& report) {
  for (const auto& a : report.at("assertions")) {
    if (!a.at("passed").get<bool>()) return false;
  }
  return true;
}

inline std::string render_markdown(const nlohmann::json& report) {
  std::ostringstream md;
  md << "# Tip-position model report\n\n";
  const auto& data = report.at("data");
  md << "Dataset: " << data.at("source").get<std::string>() << ", "
     << data.at("n_samples").get<std::size_t>() << " samples, "
     << data.at("n_train").get<std::size_t>() << " used for training, injected noise sigma "
     << data.at("noise_sigma").get<double>() << " m.\n";
  const char* axes = "xyz";
  const std::vector<std::pair<std::string, std::string>> rows = {
      {"rmse_vs_truth", "RMSE wrt reference"},
      {"rmse_vs_analytical", "RMSE wrt analytical"},
      {"max_abs_error", "max abs error"}};
  for (const auto& [mode, mj] : report.at("modes").items()) {
    for (const auto& [set, sj] : mj.at("sets").items()) {
      md << "\n## " << mode << " analytical model, " << set << " ("
         << sj.at("n").get<std::size_t>() << " samples, reference = "
         << sj.at("reference").get<std::string>() << ")\n\n";
      std::vector<std::string> names;
      for (const char* n : {"GP_eps", "GP_p", "GP_np", "Hyb_eps", "Hyb_p", "Hyb_np", "Analytical"}) {
        if (sj.at("models").contains(n)) names.emplace_back(n);
      }
      md << "| metric | axis |";
      for (const auto& n : names) md << ' ' << n << " |";
      md << "\n|---|---|";
      for (std::size_t i = 0; i < names.size(); ++i) md << "---|";
      md << '\n';
      for (const auto& [key, label] : rows) {
        for (int a = 0; a < 3; ++a) {
          md << "| " << label << " | " << axes[a] << " |";
          for (const auto& n : names) {
            char buf[32];
            std::snprintf(buf, sizeof buf, " %.3e |",
                          sj.at("models").at(n).at(key).at(a).get<double>());
            md << buf;
          }
          md << '\n';
        }
      }
    }
    md << "\nFitted noise sigma (m):";
    for (const auto& [v, s] : mj.at("fitted_noise_sigma").items()) {
      md << ' ' << v << " = " << detail::fmt3(detail::vec3(s)) << ';';
    }
    md << '\n';
  }
  if (!report.at("assertions").empty()) {
    md << "\n## Checks\n\n";
    for (const auto& a : report.at("assertions")) {
      md << "- " << (a.at("passed").get<bool>() ? "PASS" : "FAIL") << ' '
         << a.at("name").get<std::string>() << ": " << a.at("detail").get<std::string>() << '\n';
    }
  }
  return md.str();
}

// --- files -----------------------------------------------------------------

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw InputError("cannot write " + p.string());
  out << s;
  if (!out) throw InputError("write failed: " + p.string());
}

inline std::string predictions_csv(const SetEvaluation& ev, const ModelSeries& m) {
  using detail::format_double;
  std::ostringstream o;
  o << "t,x,y,z,sigma_x,sigma_y,sigma_z,w_x,w_y,w_z,ref_x,ref_y,ref_z,analytical_x,"
       "analytical_y,analytical_z\n";
  for (std::size_t k = 0; k < ev.t.size(); ++k) {
    const auto c = static_cast<Eigen::Index>(k);
    o << format_double(ev.t[k]);
    for (const Eigen::MatrixXd* M : {&m.P, &m.sigma, &m.W, &ev.reference, &ev.analytical}) {
      for (int a = 0; a < 3; ++a) o << ',' << format_double((*M)(a, c));
    }
    o << '\n';
  }
  return o.str();
}

/// One wide table per evaluated set: reference, analytical and every model's
/// mean and data-driven sigma.
inline std::string plotdata_csv(const SetEvaluation& ev) {
  using detail::format_double;
  const char* axes[3] = {"x", "y", "z"};
  std::ostringstream o;
  o << "t";
  for (const char* a : axes) o << ",ref_" << a;
  for (const char* a : axes) o << ",analytical_" << a;
  for (const auto& m : ev.models) {
    for (const char* a : axes) o << ',' << m.name << '_' << a;
    for (const char* a : axes) o << ',' << m.name << "_sigma_" << a;
  }
  o << '\n';
  for (std::size_t k = 0; k < ev.t.size(); ++k) {
    const auto c = static_cast<Eigen::Index>(k);
    o << format_double(ev.t[k]);
    for (int a = 0; a < 3; ++a) o << ',' << format_double(ev.reference(a, c));
    for (int a = 0; a < 3; ++a) o << ',' << format_double(ev.analytical(a, c));
    for (const auto& m : ev.models) {
      for (int a = 0; a < 3; ++a) o << ',' << format_double(m.P(a, c));
      for (int a = 0; a < 3; ++a) o << ',' << format_double(m.sigma(a, c));
    }
    o << '\n';
  }
  return o.str();
}

inline void write_evaluation_files(const std::filesystem::path& dir,
                                   const std::vector<ModeEvaluation>& modes) {
  for (const auto& me : modes) {
    for (const auto& s : me.sets) {
      const auto sub = dir / mode_name(me.mode) / s.name;
      for (const auto& m : s.models) {
        write_text(sub / ("predictions_" + m.name + ".csv"), predictions_csv(s, m));
      }
      write_text(dir / ("plotdata_" + mode_name(me.mode) + "_" + s.name + ".csv"),
                 plotdata_csv(s));
    }
  }
}

inline void write_report_files(const std::filesystem::path& dir, const nlohmann::json& report) {
  write_text(dir / "report.json", report.dump(2) + "\n");
  write_text(dir / "report.md", render_markdown(report));
}

/// Builds everything under a staging directory next to out_dir and moves it
/// into place only when every stage succeeded.
template <typename F>
void with_staging(const std::filesystem::path& out_dir, F&& build) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const fs::path staging = out_dir / ".staging";
  fs::remove_all(staging);
  fs::create_directories(staging);
  try {
    build(staging);
  } catch (...) {
    fs::remove_all(staging);
    throw;
  }
  for (const auto& e : fs::directory_iterator(staging)) {
    const fs::path dst = out_dir / e.path().filename();
    fs::remove_all(dst);
    fs::rename(e.path(), dst);
  }
  fs::remove_all(staging);
}

struct ExperimentResult {
  nlohmann::json report;
  std::vector<ModeEvaluation> modes;
};

/// Full pipeline. Writes report.json, report.md, the training subsample, model
/// bundles, per-model predictions and plot tables under out_dir.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                       const std::filesystem::path& out_dir) {
  cfg.validate();
  ExperimentResult res;
  with_staging(out_dir, [&](const std::filesystem::path& dir) {
    const auto data = run_stage("data", [&] { return prepare_data(cfg); });
    run_stage("data", [&] {
      std::filesystem::create_directories(dir / "data");
      write_csv(data.train, dir / "data" / "train.csv");
      return 0;
    });
    for (auto mode : cfg.modes) {
      const auto tm = run_stage("train/" + mode_name(mode), [&] { return train_models(cfg, data, mode); });
      run_stage("train/" + mode_name(mode), [&] {
        std::filesystem::create_directories(dir / "models" / mode_name(mode));
        for (const auto& h : tm.models) {
          save_model(h, dir / "models" / mode_name(mode) / (variant_name(h.data_driven.kind) + ".json"));
        }
        return 0;
      });
      res.modes.push_back(
          run_stage("eval/" + mode_name(mode), [&] { return evaluate_mode(cfg, data, tm); }));
    }
    res.report = run_stage("report", [&] { return build_report(cfg, data, res.modes); });
    run_stage("write", [&] {
      write_evaluation_files(dir, res.modes);
      write_report_files(dir, res.report);
      return 0;
    });
  });
  return res;
}

}  // namespace hybridkin

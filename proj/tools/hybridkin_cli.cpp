#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "hybridkin/dataset.hpp"
#include "hybridkin/experiment.hpp"
#include "hybridkin/hybrid.hpp"
#include "hybridkin/tracking.hpp"
#include "hybridkin/trajectories.hpp"

namespace fs = std::filesystem;
namespace hk = hybridkin;

namespace {

enum Exit { kOk = 0, kConfig = 1, kNumerical = 2, kAssertion = 3 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

hk::ExperimentConfig load(const Common& c) {
  hk::ExperimentConfig cfg = c.config.empty() ? hk::config_from_json(nlohmann::json::object())
                                              : hk::load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

void add_common(CLI::App* app, Common& c, bool out_required = true) {
  app->add_option("--config", c.config, "experiment config (JSON)")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "overrides the config seed");
  auto* o = app->add_option("--out", c.out, "output path");
  if (out_required) o->required();
}

std::string trajectory_csv(const hk::MotorTrajectory& tr) {
  const auto n = static_cast<int>(tr.theta.rows());
  std::ostringstream o;
  o << "t";
  for (const char* block : {"theta_", "thetadot_", "thetaddot_"}) {
    for (int i = 1; i <= n; ++i) o << ',' << block << i;
  }
  o << '\n';
  for (std::size_t k = 0; k < tr.t.size(); ++k) {
    const auto c = static_cast<Eigen::Index>(k);
    o << hk::detail::format_double(tr.t[k]);
    for (const Eigen::MatrixXd* M : {&tr.theta, &tr.theta_dot, &tr.theta_ddot}) {
      for (int i = 0; i < n; ++i) o << ',' << hk::detail::format_double((*M)(i, c));
    }
    o << '\n';
  }
  return o.str();
}

std::vector<int> parse_mask(const std::string& s, int n) {
  if (static_cast<int>(s.size()) != n) {
    throw hk::InputError("--mask needs " + std::to_string(n) + " digits of 0/1");
  }
  std::vector<int> m;
  for (char ch : s) {
    if (ch != '0' && ch != '1') throw hk::InputError("--mask must contain only 0 and 1");
    m.push_back(ch - '0');
  }
  return m;
}

int print_report_status(const nlohmann::json& report, bool assert_mode) {
  for (const auto& a : report.at("assertions")) {
    std::cout << (a.at("passed").get<bool>() ? "[PASS] " : "[FAIL] ")
              << a.at("name").get<std::string>() << ": " << a.at("detail").get<std::string>()
              << '\n';
  }
  if (assert_mode && !hk::all_assertions_pass(report)) return kAssertion;
  return kOk;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw hk::InputError("cannot open " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw hk::ParseError(p.string() + ": " + e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid analytical / Gaussian-process forward kinematics toolkit"};
  app.require_subcommand(1);

  Common gen_c, traj_c, train_c, eval_c, run_c, lem_c;
  std::string ingest, camera, traj_kind = "chirp", mask, data_path, models_dir, report_in;
  bool run_assert = false, report_assert = false;
  std::optional<double> traj_dt, lem_dt;

  auto* gen = app.add_subcommand("gen-data", "simulate a chirp dataset or ingest a recording");
  add_common(gen, gen_c);
  gen->add_option("--ingest", ingest, "recorded CSV (t, x_px, y_px, depth_m, theta_i)")
      ->check(CLI::ExistingFile);
  gen->add_option("--camera", camera, "camera intrinsics and calibration (JSON)")
      ->check(CLI::ExistingFile);

  auto* traj = app.add_subcommand("traj", "sample a motor trajectory to CSV");
  add_common(traj, traj_c);
  traj->add_option("--kind", traj_kind, "chirp | test | lemniscate")
      ->check(CLI::IsMember({"chirp", "test", "lemniscate"}));
  traj->add_option("--mask", mask, "chirp motion mask, e.g. 1011");
  traj->add_option("--dt", traj_dt, "sample period (s), default from config");

  auto* train = app.add_subcommand("train", "train every configured variant and mode");
  add_common(train, train_c);
  train->add_option("--data", data_path, "dataset CSV")->required()->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "evaluate trained bundles and write the report");
  add_common(eval, eval_c);
  eval->add_option("--data", data_path, "dataset CSV")->required()->check(CLI::ExistingFile);
  eval->add_option("--models", models_dir, "directory written by train")
      ->required()
      ->check(CLI::ExistingDirectory);
  eval->add_flag("--assert", run_assert, "exit 3 when a configured check fails");

  auto* report = app.add_subcommand("report", "render report.json as markdown");
  report->add_option("--in", report_in, "report.json")->required()->check(CLI::ExistingFile);
  std::string report_out;
  report->add_option("--out", report_out, "markdown file (stdout when omitted)");
  report->add_flag("--assert", report_assert, "exit 3 when a recorded check failed");

  auto* run = app.add_subcommand("run", "full pipeline: data, training, evaluation, report");
  add_common(run, run_c);
  run->add_flag("--assert", run_assert, "exit 3 when a configured check fails");

  auto* lem = app.add_subcommand("lemniscate", "motor commands for the figure-eight path");
  add_common(lem, lem_c);
  lem->add_option("--dt", lem_dt, "sample period (s), default from config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) {
      const auto cfg = load(gen_c);
      const fs::path out(gen_c.out);
      fs::create_directories(out);
      if (!ingest.empty()) {
        if (camera.empty()) throw hk::InputError("--ingest needs --camera");
        hk::write_csv(hk::ingest_recording(ingest, camera), out / "dataset.csv");
      } else {
        const auto plant = hk::plant_chain(cfg);
        const auto chirps = hk::design_chirps(cfg, plant);
        hk::write_csv(hk::simulate_dataset(cfg, plant, chirps), out / "dataset.csv");
        hk::write_text(out / "chirps.json", nlohmann::json(chirps).dump(2) + "\n");
      }
      std::cout << "wrote " << (out / "dataset.csv").string() << '\n';
    } else if (*traj) {
      const auto cfg = load(traj_c);
      const double dt = traj_dt.value_or(cfg.dt);
      const auto plant = hk::plant_chain(cfg);
      hk::MotorTrajectory tr;
      if (traj_kind == "chirp") {
        const auto m = mask.empty() ? std::vector<int>(plant.num_motors(), 1)
                                    : parse_mask(mask, plant.num_motors());
        tr = hk::sample_chirp(hk::fit_chirp_amplitudes(plant, m, cfg.chirp_seed(), cfg.chirp), dt);
      } else if (traj_kind == "test") {
        const auto d = hk::prepare_data(cfg);
        tr = hk::sample_test_motion(hk::test_motion_for(cfg, d.full), dt);
      } else {
        tr = hk::lemniscate_to_motors(plant, hk::LemniscatePath{}, dt).motors;
      }
      hk::write_text(traj_c.out, trajectory_csv(tr));
    } else if (*train) {
      auto cfg = load(train_c);
      cfg.dataset_file = data_path;
      const auto d = hk::run_stage("data", [&] { return hk::prepare_data(cfg); });
      for (auto mode : cfg.modes) {
        const auto tm = hk::run_stage("train/" + hk::mode_name(mode),
                                      [&] { return hk::train_models(cfg, d, mode); });
        const fs::path dir = fs::path(train_c.out) / hk::mode_name(mode);
        fs::create_directories(dir);
        for (const auto& h : tm.models) {
          hk::save_model(h, dir / (hk::variant_name(h.data_driven.kind) + ".json"));
        }
      }
      std::cout << "wrote models under " << train_c.out << '\n';
    } else if (*eval) {
      auto cfg = load(eval_c);
      cfg.dataset_file = data_path;
      const auto d = hk::run_stage("data", [&] { return hk::prepare_data(cfg); });
      std::vector<hk::ModeEvaluation> modes;
      for (auto mode : cfg.modes) {
        hk::TrainedModels tm;
        tm.mode = mode;
        for (auto v : cfg.variants) {
          tm.models.push_back(hk::run_stage("load", [&] {
            return hk::load_model(fs::path(models_dir) / hk::mode_name(mode) /
                                  (hk::variant_name(v) + ".json"));
          }));
        }
        modes.push_back(hk::run_stage("eval/" + hk::mode_name(mode),
                                      [&] { return hk::evaluate_mode(cfg, d, tm); }));
      }
      const auto rep = hk::build_report(cfg, d, modes);
      hk::with_staging(eval_c.out, [&](const fs::path& dir) {
        hk::write_evaluation_files(dir, modes);
        hk::write_report_files(dir, rep);
      });
      return print_report_status(rep, run_assert);
    } else if (*report) {
      const auto rep = read_json(report_in);
      const auto md = hk::render_markdown(rep);
      if (report_out.empty()) {
        std::cout << md;
      } else {
        hk::write_text(report_out, md);
      }
      if (report_assert && !hk::all_assertions_pass(rep)) return kAssertion;
    } else if (*run) {
      const auto cfg = load(run_c);
      const auto res = hk::run_experiment(cfg, run_c.out);
      std::cout << "wrote " << (fs::path(run_c.out) / "report.json").string() << '\n';
      return print_report_status(res.report, run_assert);
    } else if (*lem) {
      const auto cfg = load(lem_c);
      const auto plant = hk::plant_chain(cfg);
      const auto tracked = hk::lemniscate_to_motors(plant, hk::LemniscatePath{}, lem_dt.value_or(cfg.dt));
      std::ostringstream o;
      const auto& tr = tracked.motors;
      const int n = plant.num_motors();
      o << "t,target_x,target_y,target_roll,tip_x,tip_y,tip_z";
      for (int i = 1; i <= n; ++i) o << ",theta_" << i;
      for (int i = 1; i <= n; ++i) o << ",thetadot_" << i;
      o << '\n';
      for (std::size_t k = 0; k < tr.t.size(); ++k) {
        const auto c = static_cast<Eigen::Index>(k);
        o << hk::detail::format_double(tr.t[k]);
        for (int a = 0; a < 3; ++a) o << ',' << hk::detail::format_double(tracked.target(a, c));
        for (int a = 0; a < 3; ++a) o << ',' << hk::detail::format_double(tracked.tip(a, c));
        for (int i = 0; i < n; ++i) o << ',' << hk::detail::format_double(tr.theta(i, c));
        for (int i = 0; i < n; ++i) o << ',' << hk::detail::format_double(tr.theta_dot(i, c));
        o << '\n';
      }
      hk::write_text(lem_c.out, o.str());
      std::cout << "max x-y residual " << tracked.max_residual << " m\n";
    }
  } catch (const hk::InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfig;
  } catch (const hk::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << '\n';
    return kNumerical;
  }
  return kOk;
}

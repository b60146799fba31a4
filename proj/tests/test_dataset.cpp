#include <cmath>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "hybridkin/dataset.hpp"

namespace hk = hybridkin;

namespace {

std::vector<hk::ChirpParams> short_chirps(const hk::KinematicChain& c, double T,
                                          std::uint64_t seed) {
  hk::ChirpOptions o;
  o.T = T;
  std::vector<hk::ChirpParams> out;
  std::uint64_t k = 0;
  for (const auto& mask : hk::motion_combinations(c.num_motors())) {
    out.push_back(hk::fit_chirp_amplitudes(c, mask, seed + k++, o));
  }
  return out;
}

std::string to_csv_string(const hk::Dataset& ds) {
  std::ostringstream os;
  hk::write_csv(ds, os);
  return os.str();
}

void expect_same_dataset(const hk::Dataset& a, const hk::Dataset& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a.samples[k].t, b.samples[k].t);
    EXPECT_EQ(a.samples[k].state.encode(), b.samples[k].state.encode());
    EXPECT_EQ(a.samples[k].p_true.has_value(), b.samples[k].p_true.has_value());
    if (a.samples[k].p_true) EXPECT_EQ(*a.samples[k].p_true, *b.samples[k].p_true);
    EXPECT_EQ(a.samples[k].p_meas, b.samples[k].p_meas);
  }
}

Eigen::Matrix3d random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Eigen::Quaterniond q(g(rng), g(rng), g(rng), g(rng));
  return q.normalized().toRotationMatrix();
}

}  // namespace

TEST(GenerateDataset, NoiselessMeasurementsEqualTruth) {
  const auto c = hk::default_microiges_chain();
  const auto ds = hk::generate_dataset(c, short_chirps(c, 2.0, 1), 0.01, 0.0, 4);
  ASSERT_EQ(ds.size(), 16u * 201u);
  for (const auto& s : ds.samples) EXPECT_EQ(s.p_meas, *s.p_true);
  EXPECT_NO_THROW(ds.validate());
}

TEST(GenerateDataset, NoiseHasRequestedSpread) {
  const auto c = hk::default_microiges_chain();
  const auto ds = hk::generate_dataset(c, short_chirps(c, 4.0, 2), 0.01, 0.01, 5);
  ASSERT_GE(ds.size(), 5000u);
  for (int a = 0; a < 3; ++a) {
    double sum = 0.0, sq = 0.0;
    for (const auto& s : ds.samples) {
      const double e = s.p_meas[a] - (*s.p_true)[a];
      sum += e;
      sq += e * e;
    }
    const double n = static_cast<double>(ds.size());
    const double sd = std::sqrt((sq - sum * sum / n) / (n - 1));
    EXPECT_NEAR(sd, 0.01, 0.05 * 0.01);
  }
  EXPECT_EQ(ds.meta.noise_sigma, 0.01);
}

TEST(GenerateDataset, DeterministicForSeed) {
  const auto c = hk::default_microiges_chain();
  const auto ch = short_chirps(c, 1.0, 3);
  const auto a = hk::generate_dataset(c, ch, 0.01, 0.01, 9);
  const auto b = hk::generate_dataset(c, ch, 0.01, 0.01, 9);
  const auto d = hk::generate_dataset(c, ch, 0.01, 0.01, 10);
  EXPECT_EQ(to_csv_string(a), to_csv_string(b));
  EXPECT_NE(to_csv_string(a), to_csv_string(d));
}

TEST(GenerateDataset, HistoryColumnsAndClock) {
  const auto c = hk::default_microiges_chain();
  const auto ds = hk::generate_dataset(c, short_chirps(c, 1.0, 3), 0.01, 0.0, 1);
  const std::size_t per = 101;
  ASSERT_EQ(ds.size(), 16 * per);
  for (std::size_t k = 0; k < ds.size(); ++k) {
    const auto& s = ds.samples[k].state;
    if (k % per == 0) {
      EXPECT_TRUE(s.theta_old.isZero());
      EXPECT_TRUE(s.theta_dot_old.isZero());
    } else {
      EXPECT_EQ(s.theta_old, ds.samples[k - 1].state.theta);
      EXPECT_EQ(s.theta_dot_old, ds.samples[k - 1].state.theta_dot);
    }
    if (k > 0) EXPECT_GT(ds.samples[k].t, ds.samples[k - 1].t);
  }
}

TEST(GenerateDataset, IdealPlantMatchesAnalyticalModel) {
  auto c = hk::default_microiges_chain();
  c.backlash_widths.setZero();
  c.hysteresis_gain.setZero();
  const auto ds = hk::generate_dataset(c, short_chirps(c, 2.0, 7), 0.01, 0.0, 2);
  for (const auto& s : ds.samples) {
    EXPECT_EQ(*s.p_true, hk::analytical_model(c, s.state));
  }
}

TEST(GenerateDataset, BacklashMakesPlantDifferFromUncompensatedModel) {
  const auto c = hk::default_microiges_chain();
  const auto ds = hk::generate_dataset(c, short_chirps(c, 2.0, 7), 0.01, 0.0, 2);
  auto plain = c;
  plain.hysteresis_gain.setZero();
  double worst = 0.0;
  for (const auto& s : ds.samples) {
    worst = std::max(worst, (*s.p_true - hk::analytical_model(plain, s.state)).norm());
  }
  EXPECT_GT(worst, 1e-4);
}

TEST(Subsample, FullSizeIsIdentity) {
  const auto c = hk::default_microiges_chain();
  const auto ds = hk::generate_dataset(c, short_chirps(c, 1.0, 1), 0.01, 0.01, 1);
  expect_same_dataset(hk::subsample(ds, ds.size(), 3), ds);
}

TEST(Subsample, DistinctOrderedAndSeedDependent) {
  const auto c = hk::default_microiges_chain();
  const auto ds = hk::generate_dataset(c, short_chirps(c, 12.0, 1), 0.01, 0.01, 1);
  ASSERT_GT(ds.size(), 19000u);
  const auto a = hk::subsample(ds, 1000, 11);
  const auto b = hk::subsample(ds, 1000, 12);
  ASSERT_EQ(a.size(), 1000u);
  std::set<double> ta, tb;
  for (std::size_t k = 0; k < a.size(); ++k) {
    ta.insert(a.samples[k].t);
    tb.insert(b.samples[k].t);
    if (k > 0) EXPECT_GT(a.samples[k].t, a.samples[k - 1].t);
  }
  EXPECT_EQ(ta.size(), 1000u);
  EXPECT_NE(ta, tb);
  expect_same_dataset(a, hk::subsample(ds, 1000, 11));
}

TEST(Subsample, SizeErrors) {
  const auto c = hk::default_microiges_chain();
  const auto ds = hk::generate_dataset(c, short_chirps(c, 0.5, 1), 0.01, 0.0, 1);
  EXPECT_THROW(hk::subsample(ds, ds.size() + 1, 1), hk::SizeError);
  EXPECT_THROW(hk::subsample(ds, 0, 1), hk::SizeError);
}

TEST(DepthProjection, HandValues) {
  hk::CameraIntrinsics in{500.0, 400.0, 320.0, 240.0};
  EXPECT_EQ(hk::project_depth_to_3d(in, 320.0, 240.0, 0.5), Eigen::Vector3d(0, 0, 0.5));
  EXPECT_NEAR(hk::project_depth_to_3d(in, 420.0, 240.0, 0.4).x(), 0.08, 1e-15);
  const Eigen::Vector3d p = hk::project_depth_to_3d(in, 371.0, 199.0, 0.7);
  auto in2 = in;
  in2.fx *= 2.0;
  const Eigen::Vector3d q = hk::project_depth_to_3d(in2, 371.0, 199.0, 0.7);
  EXPECT_NEAR(q.x(), p.x() / 2.0, 1e-16);
  EXPECT_EQ(q.y(), p.y());
  EXPECT_EQ(q.z(), p.z());
  EXPECT_THROW(hk::project_depth_to_3d(in, 1.0, 1.0, 0.0), hk::InvalidDepthError);
  EXPECT_THROW(hk::project_depth_to_3d(in, 1.0, 1.0, -0.2), hk::InvalidDepthError);
}

TEST(DepthProjection, PinholeReprojectionRecoversPixels) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int rep = 0; rep < 1000; ++rep) {
    hk::CameraIntrinsics in{300 + 600 * u(rng), 300 + 600 * u(rng), 640 * u(rng), 480 * u(rng)};
    const double x = 640 * u(rng), y = 480 * u(rng), d = 0.05 + 3 * u(rng);
    const Eigen::Vector3d p = hk::project_depth_to_3d(in, x, y, d);
    EXPECT_NEAR(p.x() * in.fx / p.z() + in.cx, x, 1e-9);
    EXPECT_NEAR(p.y() * in.fy / p.z() + in.cy, y, 1e-9);
  }
}

TEST(Calibration, IdentityTranslationAndInverse) {
  const Eigen::Vector3d p(0.1, -0.2, 0.3);
  EXPECT_EQ(hk::apply_calibration({}, p), p);
  hk::CalibrationTransform shift;
  shift.translation = Eigen::Vector3d(1.0, 2.0, -3.0);
  EXPECT_EQ(hk::apply_calibration(shift, p), p + shift.translation);
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int rep = 0; rep < 200; ++rep) {
    hk::CalibrationTransform T{random_rotation(rng), Eigen::Vector3d(u(rng), u(rng), u(rng))};
    EXPECT_NO_THROW(T.validate());
    const Eigen::Vector3d q(u(rng), u(rng), u(rng));
    EXPECT_LE((hk::apply_calibration(T.inverse(), hk::apply_calibration(T, q)) - q).norm(), 1e-12);
  }
  hk::CalibrationTransform reflect;
  reflect.rotation(2, 2) = -1.0;
  EXPECT_THROW(reflect.validate(), hk::InputError);
}

TEST(Csv, RoundTripIsLossless) {
  const auto c = hk::default_microiges_chain();
  auto ds = hk::generate_dataset(c, short_chirps(c, 1.0, 8), 0.01, 0.01, 3);
  // Values without short decimal forms.
  ds.samples[3].t += 1.0 / 3.0 * 1e-3;
  ds.samples[5].p_meas.x() = std::nextafter(0.1, 1.0);
  std::istringstream in(to_csv_string(ds));
  expect_same_dataset(hk::read_csv(in), ds);
}

TEST(Csv, FileRoundTripKeepsMetadataAndMissingTruth) {
  const auto c = hk::default_microiges_chain();
  auto ds = hk::generate_dataset(c, short_chirps(c, 0.5, 8), 0.01, 0.01, 3);
  ds.meta.chain_config_id = "default";
  for (std::size_t k = 0; k < ds.size(); k += 2) ds.samples[k].p_true.reset();
  const auto path = std::filesystem::temp_directory_path() / "hk_dataset_roundtrip.csv";
  hk::write_csv(ds, path);
  const auto back = hk::read_csv(path);
  expect_same_dataset(back, ds);
  EXPECT_EQ(back.meta.chain_config_id, "default");
  EXPECT_EQ(back.meta.seed, 3u);
  EXPECT_EQ(back.meta.noise_sigma, 0.01);
  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".meta.json");
}

TEST(Csv, HeaderOnlyIsEmpty) {
  std::string header;
  for (const auto& col : hk::dataset_columns(4)) header += (header.empty() ? "" : ",") + col;
  std::istringstream in(header + "\n");
  EXPECT_TRUE(hk::read_csv(in).empty());
}

TEST(Csv, MissingColumnIsNamed) {
  std::string header;
  for (const auto& col : hk::dataset_columns(2)) {
    if (col == "thetaddot_2") continue;
    header += (header.empty() ? "" : ",") + col;
  }
  std::istringstream in(header + "\n");
  try {
    hk::read_csv(in);
    FAIL();
  } catch (const hk::ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("thetaddot_2"), std::string::npos) << e.what();
  }
}

TEST(Csv, MalformedRowReportsLine) {
  const auto c = hk::default_microiges_chain();
  const auto ds = hk::generate_dataset(c, short_chirps(c, 0.1, 8), 0.01, 0.0, 3);
  std::string text = to_csv_string(ds);
  // Corrupt the third data row (line 4).
  std::size_t pos = 0;
  for (int i = 0; i < 3; ++i) pos = text.find('\n', pos) + 1;
  text.replace(pos, 1, "x");
  std::istringstream in(text);
  try {
    hk::read_csv(in);
    FAIL();
  } catch (const hk::ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 4"), std::string::npos) << e.what();
  }
  std::istringstream short_row(text.substr(0, text.find('\n') + 1) + "1,2,3\n");
  EXPECT_THROW(hk::read_csv(short_row), hk::ParseError);
}

TEST(CentralDifference, ExactForQuadraticsOnUnevenGrid) {
  std::vector<double> t{0.0, 0.1, 0.25, 0.3, 0.55, 0.6};
  std::vector<double> v;
  for (double x : t) v.push_back(3.0 * x * x - 2.0 * x + 1.0);
  const auto d = hk::central_difference(t, v);
  for (std::size_t i = 1; i + 1 < t.size(); ++i) EXPECT_NEAR(d[i], 6.0 * t[i] - 2.0, 1e-12);
}

TEST(Ingest, ProjectsCalibratesAndDifferentiates) {
  std::mt19937_64 rng(2);
  hk::CameraSetup cam;
  cam.intrinsics = {610.0, 605.0, 320.0, 236.0};
  cam.calibration = {random_rotation(rng), Eigen::Vector3d(0.1, -0.05, 0.4)};
  std::ostringstream csv;
  csv << "t,x_px,y_px,depth_m,theta_1,theta_2\n";
  std::vector<Eigen::Vector3d> base;
  for (int k = 0; k < 30; ++k) {
    const double t = 0.033 * k + 0.001 * (k % 3);
    const Eigen::Vector3d pc(0.01 * std::sin(t), 0.02 * std::cos(t), 0.3 + 0.001 * k);
    const Eigen::Vector3d pb = hk::apply_calibration(cam.calibration, pc);
    base.push_back(pb);
    csv << hk::detail::format_double(t) << ','
        << hk::detail::format_double(pc.x() * cam.intrinsics.fx / pc.z() + cam.intrinsics.cx) << ','
        << hk::detail::format_double(pc.y() * cam.intrinsics.fy / pc.z() + cam.intrinsics.cy) << ','
        << hk::detail::format_double(pc.z()) << ',' << hk::detail::format_double(0.5 * t) << ','
        << hk::detail::format_double(t * t) << '\n';
  }
  std::istringstream in(csv.str());
  const auto ds = hk::ingest_recording(in, cam);
  ASSERT_EQ(ds.size(), 30u);
  EXPECT_EQ(ds.meta.source, "real");
  EXPECT_FALSE(ds.has_truth());
  for (std::size_t k = 0; k < ds.size(); ++k) {
    EXPECT_LE((ds.samples[k].p_meas - base[k]).norm(), 1e-12);
    EXPECT_NEAR(ds.samples[k].state.theta_dot[0], 0.5, 1e-9);
    if (k > 0 && k + 1 < ds.size()) {
      EXPECT_NEAR(ds.samples[k].state.theta_dot[1], 2.0 * ds.samples[k].t, 1e-9);
      EXPECT_EQ(ds.samples[k].state.theta_old, ds.samples[k - 1].state.theta);
    }
  }
}

TEST(Ingest, RejectsBadInput) {
  hk::CameraSetup cam;
  cam.intrinsics = {600.0, 600.0, 320.0, 240.0};
  std::istringstream no_theta("t,x_px,y_px,depth_m\n0,1,1,1\n");
  EXPECT_THROW(hk::ingest_recording(no_theta, cam), hk::ParseError);
  std::istringstream bad_depth("t,x_px,y_px,depth_m,theta_1\n0,1,1,0.5,0\n0.1,1,1,0,0\n");
  try {
    hk::ingest_recording(bad_depth, cam);
    FAIL();
  } catch (const hk::InvalidDepthError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
  std::istringstream backwards("t,x_px,y_px,depth_m,theta_1\n0.2,1,1,0.5,0\n0.1,1,1,0.5,0\n");
  EXPECT_THROW(hk::ingest_recording(backwards, cam), hk::ParseError);

  const nlohmann::json bad_rot = {
      {"intrinsics", {{"fx", 1.0}, {"fy", 1.0}, {"cx", 0.0}, {"cy", 0.0}}},
      {"calibration", {{"rotation", {{2, 0, 0}, {0, 1, 0}, {0, 0, 1}}}, {"translation", {0, 0, 0}}}}};
  EXPECT_THROW(bad_rot.get<hk::CameraSetup>(), hk::InputError);
}

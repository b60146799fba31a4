#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "hybridkin/gp.hpp"

namespace hk = hybridkin;
using hk::gp::KernelSpec;

namespace {

KernelSpec make_spec(double sf2, Eigen::VectorXd ls, double sn2) {
  KernelSpec s;
  s.signal_variance = sf2;
  s.lengthscales = std::move(ls);
  s.noise_variance = sn2;
  return s;
}

// Written out independently of the library's kernel code.
double se_oracle(const KernelSpec& s, const Eigen::VectorXd& a,
                 const Eigen::VectorXd& b) {
  double acc = 0.0;
  for (int j = 0; j < a.size(); ++j) {
    acc += std::pow((a[j] - b[j]) / s.lengthscales[j], 2);
  }
  return s.signal_variance * std::exp(-0.5 * acc);
}

struct DenseOracle {
  double mean;
  double variance;
};

// mu = m* + k*^T Ky^{-1} (y - m), var = k** - k*^T Ky^{-1} k*, with an explicit
// matrix inverse. The diagonal load mirrors the library's K_y definition.
DenseOracle dense_posterior(const KernelSpec& s, const Eigen::MatrixXd& X,
                            const Eigen::VectorXd& y, const Eigen::VectorXd& m,
                            const Eigen::VectorXd& xs, double ms) {
  const int n = static_cast<int>(X.cols());
  Eigen::MatrixXd K(n, n);
  Eigen::VectorXd ks(n);
  for (int i = 0; i < n; ++i) {
    ks[i] = se_oracle(s, X.col(i), xs);
    for (int j = 0; j < n; ++j) K(i, j) = se_oracle(s, X.col(i), X.col(j));
  }
  K += (s.noise_variance + hk::gp::kJitterFactor * s.signal_variance) *
       Eigen::MatrixXd::Identity(n, n);
  const Eigen::MatrixXd Kinv = K.inverse();
  return {ms + ks.dot(Kinv * (y - m)),
          se_oracle(s, xs, xs) - ks.dot(Kinv * ks)};
}

double dense_lml(const KernelSpec& s, const Eigen::MatrixXd& X,
                 const Eigen::VectorXd& r) {
  const int n = static_cast<int>(X.cols());
  Eigen::MatrixXd K(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) K(i, j) = se_oracle(s, X.col(i), X.col(j));
  K += (s.noise_variance + hk::gp::kJitterFactor * s.signal_variance) *
       Eigen::MatrixXd::Identity(n, n);
  const Eigen::PartialPivLU<Eigen::MatrixXd> lu(K);
  double logdet = 0.0;
  for (int i = 0; i < n; ++i) logdet += std::log(std::abs(lu.matrixLU()(i, i)));
  return -0.5 * r.dot(K.inverse() * r) - 0.5 * logdet -
         0.5 * n * std::log(2.0 * M_PI);
}

struct RandomInstance {
  KernelSpec spec;
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
};

RandomInstance random_instance(std::mt19937_64& rng, double noise) {
  std::uniform_int_distribution<int> n_dist(3, 50), d_dist(1, 3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int n = n_dist(rng);
  const int d = d_dist(rng);
  RandomInstance inst;
  inst.spec.signal_variance = 0.5 + 2.0 * u(rng);
  inst.spec.lengthscales.resize(d);
  for (int j = 0; j < d; ++j) inst.spec.lengthscales[j] = 0.7 + u(rng);
  inst.spec.noise_variance = noise;
  inst.X.resize(d, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) inst.X(j, i) = 12.0 * u(rng);
  inst.y.resize(n);
  for (int i = 0; i < n; ++i) inst.y[i] = std::sin(inst.X(0, i)) + u(rng);
  return inst;
}

// Inputs kept at least 0.8 lengthscales apart and smooth targets, so the
// noise-free Gram matrix is well conditioned.
RandomInstance separated_instance(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> n_dist(3, 50), d_dist(1, 3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int n = n_dist(rng);
  const int d = d_dist(rng);
  RandomInstance inst;
  inst.spec.signal_variance = 0.5 + 2.0 * u(rng);
  inst.spec.lengthscales = Eigen::VectorXd::Constant(d, 0.7 + u(rng));
  inst.spec.noise_variance = 0.0;
  // Jittered grid with cell width 1.2 l and jitter +-0.2 l.
  const double l = inst.spec.lengthscales[0];
  const int per_axis = static_cast<int>(std::ceil(std::pow(n, 1.0 / d)));
  int cells = 1;
  for (int j = 0; j < d; ++j) cells *= per_axis;
  std::vector<Eigen::VectorXd> pts;
  for (int k = 0; k < cells; ++k) {
    Eigen::VectorXd c(d);
    int rem = k;
    for (int j = 0; j < d; ++j) {
      c[j] = 1.2 * l * (rem % per_axis) + 0.4 * l * (u(rng) - 0.5);
      rem /= per_axis;
    }
    pts.push_back(c);
  }
  std::shuffle(pts.begin(), pts.end(), rng);
  pts.resize(n);
  inst.X.resize(d, n);
  inst.y.resize(n);
  for (int i = 0; i < n; ++i) {
    inst.X.col(i) = pts[i];
    inst.y[i] = std::sin(0.5 * pts[i][0]) + 0.3 * pts[i].sum();
  }
  return inst;
}

}  // namespace

TEST(KernelEval, ZeroDistanceReturnsSignalVariance) {
  const auto s = make_spec(2.5, Eigen::Vector2d(0.3, 4.0), 0.0);
  const Eigen::Vector2d a(1.7, -3.2);
  EXPECT_DOUBLE_EQ(hk::gp::kernel_eval(s, a, a), 2.5);
}

TEST(KernelEval, DecaysWithDistanceAndIsSymmetric) {
  const auto s = make_spec(1.0, Eigen::VectorXd::Ones(1), 0.0);
  const Eigen::VectorXd a = Eigen::VectorXd::Zero(1);
  const Eigen::VectorXd b = Eigen::VectorXd::Constant(1, 1.0);
  EXPECT_NEAR(hk::gp::kernel_eval(s, a, b), 0.6065306597126334, 1e-15);
  EXPECT_EQ(hk::gp::kernel_eval(s, a, b), hk::gp::kernel_eval(s, b, a));
  const Eigen::VectorXd far = Eigen::VectorXd::Constant(1, 100.0);
  EXPECT_LT(hk::gp::kernel_eval(s, a, far), 1e-300);
}

TEST(KernelEval, DimensionMismatchThrows) {
  const auto s = make_spec(1.0, Eigen::VectorXd::Ones(2), 0.0);
  EXPECT_THROW(hk::gp::kernel_eval(s, Eigen::VectorXd::Zero(3),
                                   Eigen::VectorXd::Zero(2)),
               hk::InputError);
}

TEST(KernelSpecJson, RoundTripAndValidation) {
  const auto s = make_spec(0.25, Eigen::Vector3d(1.0, 2.5, 1e-3), 1e-4);
  const nlohmann::json j = s;
  const auto back = j.get<KernelSpec>();
  EXPECT_EQ(back.signal_variance, s.signal_variance);
  EXPECT_EQ(back.lengthscales, s.lengthscales);
  EXPECT_EQ(back.noise_variance, s.noise_variance);

  nlohmann::json bad = j;
  bad["lengthscales"] = {1.0, -2.0};
  EXPECT_THROW(bad.get<KernelSpec>(), hk::InputError);
}

TEST(GpFit, SinglePointInterpolates) {
  const auto s = make_spec(1.0, Eigen::VectorXd::Ones(1), 0.0);
  const auto model = hk::gp::fit(Eigen::MatrixXd::Zero(1, 1),
                                 Eigen::VectorXd::Constant(1, 3.0), s);
  const auto post = model.predict(Eigen::VectorXd::Zero(1));
  EXPECT_NEAR(post.mean, 3.0, 1e-6);
  EXPECT_LE(post.variance, 1e-8);
  EXPECT_GE(post.variance, 0.0);
}

TEST(GpFit, DuplicateInputsWithoutNoiseAreDegenerate) {
  const auto s = make_spec(1.0, Eigen::VectorXd::Ones(2), 0.0);
  Eigen::MatrixXd X(2, 3);
  X << 0.0, 1.0, 0.0,
       2.0, 3.0, 2.0;
  try {
    hk::gp::fit(X, Eigen::Vector3d(1, 2, 1), s);
    FAIL() << "expected DegenerateDataError";
  } catch (const hk::DegenerateDataError& e) {
    EXPECT_NE(std::string(e.what()).find("duplicate"), std::string::npos);
  }
  // The same data is fine once noise is present.
  auto noisy = s;
  noisy.noise_variance = 1e-3;
  EXPECT_NO_THROW(hk::gp::fit(X, Eigen::Vector3d(1, 2, 1), noisy));
}

TEST(GpFit, TargetsEqualToPriorGiveZeroWeights) {
  const auto s = make_spec(1.0, Eigen::VectorXd::Ones(1), 1e-3);
  const hk::gp::MeanFunction m = [](const Eigen::VectorXd& x) {
    return 2.0 * x[0] + 1.0;
  };
  Eigen::MatrixXd X(1, 4);
  X << 0.0, 0.5, 2.0, 3.0;
  Eigen::VectorXd y(4);
  for (int i = 0; i < 4; ++i) y[i] = m(X.col(i));
  const auto model = hk::gp::fit(X, y, s, m);
  EXPECT_EQ(model.alpha(), Eigen::VectorXd::Zero(4));
}

TEST(GpFit, FactorizationInvariants) {
  std::mt19937_64 rng(7);
  for (int rep = 0; rep < 5; ++rep) {
    const auto inst = random_instance(rng, 1e-2);
    const auto model = hk::gp::fit(inst.X, inst.y, inst.spec);
    const int n = static_cast<int>(inst.X.cols());
    Eigen::MatrixXd Ky(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        Ky(i, j) = se_oracle(inst.spec, inst.X.col(i), inst.X.col(j));
    Ky.diagonal().array() += inst.spec.noise_variance;
    const Eigen::MatrixXd L = model.chol_factor();
    EXPECT_LE((L * L.transpose() - Ky).norm() / Ky.norm(), 1e-8);
    EXPECT_LE((Ky * model.alpha() - inst.y).norm() / inst.y.norm(), 1e-8);
  }
}

TEST(GpFit, InputsAndTargetsMustAgree) {
  const auto s = make_spec(1.0, Eigen::VectorXd::Ones(1), 0.1);
  EXPECT_THROW(hk::gp::fit(Eigen::MatrixXd::Zero(1, 3), Eigen::VectorXd::Zero(2), s),
               hk::InputError);
  EXPECT_THROW(hk::gp::fit(Eigen::MatrixXd::Zero(2, 3), Eigen::VectorXd::Zero(3), s),
               hk::InputError);
}

TEST(GpPredict, NoiseFreeInterpolationAtTrainingInputs) {
  std::mt19937_64 rng(11);
  for (int rep = 0; rep < 20; ++rep) {
    const auto inst = separated_instance(rng);
    const auto model = hk::gp::fit(inst.X, inst.y, inst.spec);
    for (int i = 0; i < inst.X.cols(); ++i) {
      const auto post = model.predict(Eigen::VectorXd(inst.X.col(i)));
      EXPECT_NEAR(post.mean, inst.y[i], 1e-6);
      EXPECT_LE(post.variance, 1e-8);
    }
  }
}

TEST(GpPredict, RevertsToPriorFarFromData) {
  const auto s = make_spec(1.7, Eigen::Vector2d(0.5, 1.0), 1e-4);
  Eigen::MatrixXd X(2, 3);
  X << 0.0, 1.0, 2.0,
       0.0, 0.5, -1.0;
  const hk::gp::MeanFunction m = [](const Eigen::VectorXd& x) { return x[1]; };
  const auto model = hk::gp::fit(X, Eigen::Vector3d(4.0, -2.0, 1.0), s, m);
  const Eigen::Vector2d far(20 * 0.5 + 2.0, 20.0 + 0.5);
  const auto post = model.predict(Eigen::VectorXd(far));
  EXPECT_NEAR(post.mean, m(far), 1e-6);
  EXPECT_NEAR(post.variance, 1.7, 1e-6);
}

TEST(GpPredict, ThreePointMatchesDenseOracle) {
  const auto s = make_spec(1.3, Eigen::VectorXd::Constant(1, 0.8), 0.05);
  Eigen::MatrixXd X(1, 3);
  X << -1.0, 0.2, 1.5;
  const Eigen::Vector3d y(0.3, -0.7, 1.1);
  const hk::gp::MeanFunction m = [](const Eigen::VectorXd& x) {
    return 0.1 * x[0];
  };
  const auto model = hk::gp::fit(X, y, s, m);
  const Eigen::Vector3d mx(-0.1, 0.02, 0.15);
  for (double q : {-2.0, -0.3, 0.7, 3.0}) {
    const Eigen::VectorXd xs = Eigen::VectorXd::Constant(1, q);
    const auto post = model.predict(xs);
    const auto ref = dense_posterior(s, X, y, mx, xs, m(xs));
    EXPECT_NEAR(post.mean, ref.mean, 1e-8);
    EXPECT_NEAR(post.variance, ref.variance, 1e-8);
  }
}

TEST(GpPredict, RandomInstancesMatchDenseOracle) {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(0.0, 12.0);
  for (int rep = 0; rep < 20; ++rep) {
    const auto inst = random_instance(rng, 1e-2);
    const auto model = hk::gp::fit(inst.X, inst.y, inst.spec);
    const Eigen::VectorXd zero = Eigen::VectorXd::Zero(inst.X.cols());
    for (int q = 0; q < 5; ++q) {
      Eigen::VectorXd xs(inst.X.rows());
      for (int j = 0; j < xs.size(); ++j) xs[j] = u(rng);
      const auto post = model.predict(xs);
      const auto ref = dense_posterior(inst.spec, inst.X, inst.y, zero, xs, 0.0);
      EXPECT_NEAR(post.mean, ref.mean, 1e-8);
      EXPECT_NEAR(post.variance, std::max(ref.variance, 0.0), 1e-8);
      EXPECT_GE(post.variance, 0.0);
    }
  }
}

TEST(GpPredict, BatchAgreesWithPointwise) {
  std::mt19937_64 rng(5);
  const auto inst = random_instance(rng, 1e-3);
  const auto model = hk::gp::fit(inst.X, inst.y, inst.spec);
  Eigen::MatrixXd Xs = Eigen::MatrixXd::Random(inst.X.rows(), 7) * 6.0;
  const auto batch = model.predict_batch(Xs);
  for (int i = 0; i < Xs.cols(); ++i) {
    const auto p = model.predict(Eigen::VectorXd(Xs.col(i)));
    EXPECT_NEAR(p.mean, batch.mean[i], 1e-12);
    EXPECT_NEAR(p.variance, batch.variance[i], 1e-12);
  }
  EXPECT_THROW(model.predict(Eigen::VectorXd::Zero(inst.X.rows() + 1)),
               hk::InputError);
}

TEST(GpPredict, DuplicateObservationNeverIncreasesVariance) {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0.0, 12.0);
  std::uniform_int_distribution<int> pick(0, 1000);
  for (int rep = 0; rep < 20; ++rep) {
    const auto inst = random_instance(rng, 5e-2);
    const auto before = hk::gp::fit(inst.X, inst.y, inst.spec);
    const int k = pick(rng) % static_cast<int>(inst.X.cols());
    Eigen::MatrixXd X2(inst.X.rows(), inst.X.cols() + 1);
    X2 << inst.X, inst.X.col(k);
    Eigen::VectorXd y2(inst.y.size() + 1);
    y2 << inst.y, inst.y[k];
    const auto after = hk::gp::fit(X2, y2, inst.spec);
    for (int q = 0; q < 10; ++q) {
      Eigen::VectorXd xs(inst.X.rows());
      for (int j = 0; j < xs.size(); ++j) xs[j] = u(rng);
      EXPECT_LE(after.predict(xs).variance, before.predict(xs).variance + 1e-12);
    }
  }
}

TEST(GpLml, SinglePointHandValue) {
  // k(0,0) + sigma_y^2 = 1 (up to the 5e-11 jitter).
  const auto s = make_spec(0.5, Eigen::VectorXd::Ones(1), 0.5);
  const auto model = hk::gp::fit(Eigen::MatrixXd::Zero(1, 1),
                                 Eigen::VectorXd::Zero(1), s);
  EXPECT_NEAR(model.log_marginal_likelihood(), -0.918938533204673, 1e-9);
}

TEST(GpLml, DataFarFromPriorLowersLikelihood) {
  std::mt19937_64 rng(3);
  const auto inst = random_instance(rng, 1e-2);
  double prev = hk::gp::fit(inst.X, inst.y, inst.spec).log_marginal_likelihood();
  for (double scale : {2.0, 4.0, 8.0}) {
    const double cur = hk::gp::fit(inst.X, Eigen::VectorXd(scale * inst.y), inst.spec)
                           .log_marginal_likelihood();
    EXPECT_LT(cur, prev);
    prev = cur;
  }
}

TEST(GpLml, MatchesDenseLogDetOracle) {
  std::mt19937_64 rng(17);
  for (int rep = 0; rep < 20; ++rep) {
    const auto inst = random_instance(rng, 1e-2);
    const auto model = hk::gp::fit(inst.X, inst.y, inst.spec);
    EXPECT_NEAR(model.log_marginal_likelihood(),
                dense_lml(inst.spec, inst.X, inst.y), 1e-8);
    // The log-parameter entry point agrees with the fitted model.
    EXPECT_NEAR(hk::gp::log_marginal_likelihood(
                    inst.X, inst.y, hk::gp::to_log_params(inst.spec)),
                model.log_marginal_likelihood(), 1e-9);
  }
}

TEST(GpLml, AnalyticGradientMatchesCentralDifferences) {
  std::mt19937_64 rng(23);
  for (int rep = 0; rep < 10; ++rep) {
    const auto inst = random_instance(rng, 3e-2);
    const Eigen::VectorXd p = hk::gp::to_log_params(inst.spec);
    Eigen::VectorXd g;
    hk::gp::log_marginal_likelihood(inst.X, inst.y, p, &g);
    const double h = 1e-5;
    for (int i = 0; i < p.size(); ++i) {
      Eigen::VectorXd pp = p, pm = p;
      pp[i] += h;
      pm[i] -= h;
      const double fd = (hk::gp::log_marginal_likelihood(inst.X, inst.y, pp) -
                         hk::gp::log_marginal_likelihood(inst.X, inst.y, pm)) /
                        (2 * h);
      EXPECT_LE(std::abs(g[i] - fd), 1e-4 * std::max(std::abs(fd), 1e-2))
          << "param " << i << " analytic " << g[i] << " fd " << fd;
    }
  }
}

TEST(GpOptimize, RecoversNoiseLevelOfSyntheticData) {
  // f ~ GP(0, SE(l=1, sf2=1)), y = f + N(0, 1e-4), N = 200.
  const int n = 200;
  std::mt19937_64 rng(31337);
  std::uniform_real_distribution<double> u(0.0, 20.0);
  std::normal_distribution<double> z(0.0, 1.0);
  Eigen::MatrixXd X(1, n);
  for (int i = 0; i < n; ++i) X(0, i) = u(rng);
  const auto truth = make_spec(1.0, Eigen::VectorXd::Ones(1), 0.0);
  Eigen::MatrixXd K(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) K(i, j) = se_oracle(truth, X.col(i), X.col(j));
  K.diagonal().array() += 1e-8;
  const Eigen::MatrixXd L = K.llt().matrixL();
  Eigen::VectorXd w(n), e(n);
  for (int i = 0; i < n; ++i) w[i] = z(rng);
  for (int i = 0; i < n; ++i) e[i] = 0.01 * z(rng);
  const Eigen::VectorXd y = L * w + e;

  const auto spec = hk::gp::optimize_hyperparams(X, y, hk::gp::zero_mean(), 4, 1);
  const double sigma = std::sqrt(spec.noise_variance);
  EXPECT_GT(sigma, 0.005);
  EXPECT_LT(sigma, 0.02);
}

TEST(GpOptimize, DeterministicForFixedSeed) {
  std::mt19937_64 rng(8);
  const auto inst = random_instance(rng, 1e-2);
  const auto a = hk::gp::optimize_hyperparams(inst.X, inst.y, hk::gp::zero_mean(), 1, 77);
  const auto b = hk::gp::optimize_hyperparams(inst.X, inst.y, hk::gp::zero_mean(), 1, 77);
  EXPECT_EQ(a.signal_variance, b.signal_variance);
  EXPECT_EQ(a.lengthscales, b.lengthscales);
  EXPECT_EQ(a.noise_variance, b.noise_variance);
}

TEST(GpOptimize, ResultDominatesEveryInitialization) {
  std::mt19937_64 rng(19);
  const auto inst = random_instance(rng, 1e-2);
  const auto res = hk::gp::optimize_hyperparams_detailed(
      inst.X, inst.y, hk::gp::zero_mean(), 5, 3);
  ASSERT_EQ(res.initial_lml.size(), 5u);
  for (std::size_t k = 0; k < res.initial_lml.size(); ++k) {
    EXPECT_GE(res.lml, res.initial_lml[k]);
    EXPECT_GE(res.final_lml[k], res.initial_lml[k]);
  }
  const double refit =
      hk::gp::fit(inst.X, inst.y, res.spec).log_marginal_likelihood();
  EXPECT_NEAR(refit, res.lml, 1e-9 * std::abs(res.lml));
}

TEST(GpOptimize, ConstantTargetsKeepSignalVarianceBounded) {
  Eigen::MatrixXd X(1, 30);
  for (int i = 0; i < 30; ++i) X(0, i) = 0.3 * i;
  const Eigen::VectorXd y = Eigen::VectorXd::Constant(30, 5.0);
  const auto spec = hk::gp::optimize_hyperparams(X, y, hk::gp::zero_mean(), 3, 5);
  // Second moment of y about the zero prior mean.
  const double second_moment = y.squaredNorm() / 30.0;
  EXPECT_LT(spec.signal_variance, 10.0 * second_moment);
}

TEST(GpOptimize, NonFiniteObjectiveEverywhereFails) {
  Eigen::MatrixXd X(1, 3);
  X << 0.0, 1.0, 2.0;
  const Eigen::Vector3d y(1.0, std::nan(""), 0.0);
  EXPECT_THROW(hk::gp::optimize_hyperparams(X, y, hk::gp::zero_mean(), 2, 1),
               hk::OptimizationError);
  EXPECT_THROW(hk::gp::optimize_hyperparams(X, Eigen::Vector3d::Zero(),
                                            hk::gp::zero_mean(), 0, 1),
               hk::InputError);
}

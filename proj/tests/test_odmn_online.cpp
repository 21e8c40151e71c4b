#include <gtest/gtest.h>

#include <cstdio>

#include "polyfm/odmn_online.hpp"

using namespace polyfm;

namespace {

const CpParams kCopper{};

StiffnessVoigt copper_stiffness() { return cubic_stiffness(kCopper.c11, kCopper.c12, kCopper.c44); }

OdmnParams random_params(int depth, std::uint64_t seed) {
  Rng rng(seed);
  return OdmnParams::random(depth, rng);
}

Eigen::VectorXd random_vector(Eigen::Index n, Rng& rng, double scale) {
  Eigen::VectorXd v(n);
  for (Eigen::Index k = 0; k < n; ++k) v(k) = scale * rng.normal();
  return v;
}

Mat3 weighted_leaf_mean(const OdmnCpModel& m, const std::vector<Mat3>& f) {
  Mat3 s = Mat3::Zero();
  for (std::size_t i = 0; i < f.size(); ++i) s += m.derived().weights[i] * f[i];
  return s;
}

}  // namespace

TEST(Downscale, ZeroInteractionIsHomogeneous) {
  const OdmnCpModel m(random_params(3, 1), kCopper);
  Mat3 fb = Mat3::Identity();
  fb(0, 1) = 0.01;
  for (const Mat3& f : m.downscale(fb, Eigen::VectorXd::Zero(m.unknowns()))) EXPECT_EQ((f - fb).norm(), 0.0);
}

TEST(Downscale, SingleNodeLaminate) {
  OdmnParams p;
  p.depth = 1;
  p.leaves = {{0.5, {}}, {0.5, {}}};
  p.nodes = {{0.0, 0.0}};
  const OdmnCpModel m(p, kCopper);
  const auto f = m.downscale(Mat3::Identity(), Vec3(1, 0, 0));
  Mat3 expect = Mat3::Zero();
  expect(0, 2) = 0.5;
  EXPECT_LT((f[0] - Mat3::Identity() - expect).norm(), 1e-15);
  EXPECT_LT((f[1] - Mat3::Identity() + expect).norm(), 1e-15);
}

TEST(Downscale, VolumeAverageIsMacroscopic) {
  const OdmnCpModel m(random_params(4, 2), kCopper);
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    Mat3 fb = Mat3::Identity();
    for (int k = 0; k < 9; ++k) fb(k / 3, k % 3) += 0.05 * rng.normal();
    const auto f = m.downscale(fb, random_vector(m.unknowns(), rng, 0.1));
    EXPECT_LT((weighted_leaf_mean(m, f) - fb).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(HillMandel, IdenticalLeavesGiveZeroResidual) {
  OdmnParams p = random_params(3, 4);
  for (auto& l : p.leaves) l.euler = p.leaves[0].euler;
  const OdmnCpModel m(p, kCopper);
  const OnlineState s0 = m.initial_state();
  Mat3 fb = Mat3::Identity();
  fb(0, 0) = 1.003;
  fb(1, 2) = 0.002;
  EXPECT_LT(m.hill_mandel_residual(s0.a, fb, s0.leaves, 1.0).norm(), 1e-15);
  const OnlineStep step = m.newton_solve(fb, s0, 1.0);
  EXPECT_LE(step.iterations, 1);
  EXPECT_LT(step.state.a.norm(), 1e-15);
}

TEST(HillMandel, ElasticResidualIsLinear) {
  // Deviation from linearity is bounded by the Green-Lagrange quadratic term, O(|a|).
  const OdmnCpModel m(random_params(3, 5), kCopper);
  const OnlineState s0 = m.initial_state();
  Rng rng(6);
  Eigen::VectorXd dir = random_vector(m.unknowns(), rng, 1.0);
  dir /= dir.norm();
  for (double size : {1e-7, 1e-6}) {
    const Eigen::VectorXd a = size * dir;
    const Eigen::VectorXd r0 = m.hill_mandel_residual(0.0 * a, Mat3::Identity(), s0.leaves, 1.0);
    const Eigen::VectorXd r1 = m.hill_mandel_residual(a, Mat3::Identity(), s0.leaves, 1.0);
    const Eigen::VectorXd r2 = m.hill_mandel_residual(2.0 * a, Mat3::Identity(), s0.leaves, 1.0);
    EXPECT_LT(((r2 - r0) - 2.0 * (r1 - r0)).norm(), (1e-8 + size) * (r1 - r0).norm()) << size;
  }
}

TEST(NewtonSolve, TangentAtIdentityMatchesLinearHomogenization) {
  const OdmnParams p = random_params(4, 7);
  const OdmnCpModel m(p, kCopper);
  const OnlineStep step = m.newton_solve(Mat3::Identity(), m.initial_state(), 1.0);
  const StiffnessVoigt online = small_strain_stiffness(step.tangent);
  const StiffnessVoigt offline = homogenize_linear(p, copper_stiffness());
  EXPECT_LT((online - offline).norm(), 5e-3 * offline.norm());
  EXPECT_LT((online - offline).norm(), 1e-9 * offline.norm());
}

TEST(NewtonSolve, PlasticStepConvergesQuadratically) {
  const OdmnCpModel m(random_params(4, 8), kCopper);
  Mat3 fb = Mat3::Identity();
  fb.diagonal() << 1.01, 0.995, 0.995;
  const OnlineStep step = m.newton_solve(fb, m.initial_state(), 10.0, 1e-13);
  const auto& h = step.residual_history;
  ASSERT_GE(h.size(), 4u);
  EXPECT_LE(step.residual, 1e-10);
  // Convergence order from the last three residuals above the roundoff floor.
  std::vector<double> tail;
  for (double v : h)
    if (v > 1e-12) tail.push_back(v);
  ASSERT_GE(tail.size(), 3u);
  const std::size_t n = tail.size();
  const double order = std::log(tail[n - 1] / tail[n - 2]) / std::log(tail[n - 2] / tail[n - 3]);
  EXPECT_GT(order, 1.8);
}

TEST(NewtonSolve, MacroTangentMatchesFiniteDifferences) {
  const OdmnCpModel m(random_params(3, 9), kCopper);
  OnlineState s = m.initial_state();
  Mat3 dir;
  dir << 1.0, 0.1, 0.0, 0.0, -0.5, 0.2, 0.1, 0.0, -0.5;
  for (int k = 1; k <= 4; ++k) s = m.newton_solve(Mat3::Identity() + (1.5e-3 * k) * dir, s, 1.5).state;
  const Mat3 fb = Mat3::Identity() + 7.5e-3 * dir;
  const OnlineStep step = m.newton_solve(fb, s, 1.5, 1e-14);
  const double h = 1e-7;
  const double scale = step.tangent.cwiseAbs().maxCoeff();
  for (int kl = 0; kl < 9; ++kl) {
    Mat3 fp = fb, fm = fb;
    fp(kl / 3, kl % 3) += h;
    fm(kl / 3, kl % 3) -= h;
    const Mat3 dp = (m.newton_solve(fp, s, 1.5, 1e-14).state.p_bar - m.newton_solve(fm, s, 1.5, 1e-14).state.p_bar) / (2 * h);
    for (int ij = 0; ij < 9; ++ij)
      EXPECT_LE(std::abs(dp(ij / 3, ij % 3) - step.tangent(ij, kl)), 1e-4 * std::max(std::abs(step.tangent(ij, kl)), 1e-2 * scale));
  }
}

TEST(Drive, ZeroAmplitudeGivesZeroStress) {
  const OdmnCpModel m(random_params(2, 10), kCopper);
  const LoadSchedule sched = LoadSchedule::uniaxial(0.0, 1e-3, 1.0, 3);
  const DriveResult r = drive(m, sched);
  for (const auto& c : r.curve) EXPECT_LT(c.p_bar.norm(), 1e-12);
}

TEST(Drive, ElasticRampMatchesUniaxialModulus) {
  const OdmnParams p = random_params(3, 11);
  const OdmnCpModel m(p, kCopper);
  LoadSchedule sched = LoadSchedule::uniaxial(1e-4, 1e-3, 0.02, 1);
  sched.segments.resize(1);
  const DriveResult r = drive(m, sched);
  const CurvePoint& last = r.curve.back();
  const double e_closed = 1.0 / homogenize_linear(p, copper_stiffness()).inverse()(0, 0);
  EXPECT_NEAR(last.p_bar(0, 0) / 1e-4, e_closed, 0.01 * e_closed);
  for (int k = 1; k < 9; ++k) {
    if (k == 3 || k == 6 || k == 7) continue;
    EXPECT_LE(std::abs(last.p_bar(k / 3, k % 3)), 1e-6 * std::abs(last.p_bar(0, 0)));
  }
  // Modulus lies between the Reuss and Voigt estimates of the leaf assembly.
  const OdmnDerived& d = m.derived();
  StiffnessVoigt cv = StiffnessVoigt::Zero(), sr = StiffnessVoigt::Zero();
  for (std::size_t i = 0; i < d.weights.size(); ++i) {
    cv += d.weights[i] * d.stiffness[i];
    sr += d.weights[i] * d.stiffness[i].inverse();
  }
  const double e = last.p_bar(0, 0) / 1e-4;
  EXPECT_LE(e, 1.0 / cv.inverse()(0, 0) * (1 + 1e-3));
  EXPECT_GE(e, 1.0 / sr(0, 0) * (1 - 1e-3));
}

TEST(Drive, LoadUnloadCycleInvariants) {
  const OdmnCpModel m(random_params(3, 12), kCopper);
  const LoadSchedule sched = LoadSchedule::uniaxial(0.006, 1e-3, 0.2, 20);
  const DriveResult r = drive(m, sched);
  ASSERT_EQ(r.segment_end.size(), 2u);
  for (const auto& c : r.curve) EXPECT_LE(c.residual, 1e-10);
  for (const auto& leaf : r.state.leaves) EXPECT_NEAR(leaf.fp.determinant(), 1.0, 1e-8);
  EXPECT_LT((weighted_leaf_mean(m, m.downscale(r.state.f_bar, r.state.a)) - r.state.f_bar).cwiseAbs().maxCoeff(), 1e-12);
  const std::size_t peak = r.segment_end[0];
  EXPECT_GT(r.curve[peak].p_bar(0, 0), 0.1);
  EXPECT_NEAR(r.curve.back().p_bar(0, 0), 0.0, 1e-9);
  // Plastic strain remains after unloading.
  EXPECT_GT(r.curve.back().f_bar(0, 0) - 1.0, 1e-3);
  const double loading = branch_modulus(r.curve, 0, peak, 0.0, 0.3);
  const double unloading = branch_modulus(r.curve, peak, r.curve.size() - 1, 0.2, 0.8);
  EXPECT_NEAR(unloading, loading, 0.02 * loading);
}

TEST(Drive, HillMandelEnergyConsistency) {
  const OdmnCpModel m(random_params(3, 13), kCopper);
  OnlineState s = m.initial_state();
  Mat3 dir;
  dir << 1.0, 0.0, 0.1, 0.0, -0.4, 0.0, 0.0, 0.2, -0.6;
  for (int k = 1; k <= 6; ++k) {
    const Mat3 fb = Mat3::Identity() + (1e-3 * k) * dir;
    const OnlineStep step = m.newton_solve(fb, s, 1.0, 1e-13);
    const auto f0 = m.downscale(s.f_bar, s.a), f1 = m.downscale(fb, step.state.a);
    const Mat3 dfb = fb - s.f_bar;
    double micro = 0.0;
    const auto pass = m.evaluate(fb, step.state.a, s.leaves, 1.0);
    for (std::size_t i = 0; i < f0.size(); ++i)
      micro += m.derived().weights[i] * (pass.leaves[i].stress.cwiseProduct(f1[i] - f0[i])).sum();
    const double macro = (step.state.p_bar.cwiseProduct(dfb)).sum();
    EXPECT_NEAR(micro, macro, 1e-8 * std::abs(macro));
    s = step.state;
  }
}

TEST(Drive, Deterministic) {
  const OdmnCpModel m(random_params(2, 14), kCopper);
  const LoadSchedule sched = LoadSchedule::uniaxial(0.003, 1e-3, 0.5, 4);
  const DriveResult a = drive(m, sched), b = drive(m, sched);
  ASSERT_EQ(a.curve.size(), b.curve.size());
  for (std::size_t k = 0; k < a.curve.size(); ++k) {
    EXPECT_EQ(a.curve[k].p_bar, b.curve[k].p_bar);
    EXPECT_EQ(a.curve[k].f_bar, b.curve[k].f_bar);
  }
}

TEST(Drive, ScheduleValidation) {
  LoadSchedule s = LoadSchedule::uniaxial();
  s.segments[0].control.fill(Control::Stress);
  EXPECT_THROW(s.validate(), Error);
  EXPECT_THROW(LoadSchedule{}.validate(), Error);
}

TEST(Metrics, Examples) {
  const StressErrors z = stress_error_metrics({1.0, 2.0}, {1.0, 2.0});
  EXPECT_EQ(z.mean_rel, 0.0);
  EXPECT_EQ(z.max_rel, 0.0);
  const StressErrors e = stress_error_metrics({1.1, 2.1}, {1.0, 2.0});
  EXPECT_NEAR(e.mean_rel, 0.05, 1e-15);
  EXPECT_NEAR(e.max_rel, 0.05, 1e-15);
  EXPECT_THROW(stress_error_metrics({1.0}, {0.0}), Error);
  EXPECT_THROW(stress_error_metrics({1.0}, {1.0, 2.0}), Error);
}

TEST(Metrics, ReportRoundTrip) {
  const std::map<std::string, StressErrors> table{
      {"S1", {0.0126, 0.0207}}, {"S2", {0.0393, 0.0868}}, {"W1", {0.0081, 0.0399}}, {"W2", {0.0069, 0.0187}}};
  const auto back = parse_metrics_report(nlohmann::json::parse(metrics_report(table).dump()));
  ASSERT_EQ(back.size(), 4u);
  for (const auto& [k, v] : table) {
    EXPECT_NEAR(back.at(k).mean_rel, v.mean_rel, 1e-15);
    EXPECT_NEAR(back.at(k).max_rel, v.max_rel, 1e-15);
  }
  EXPECT_THROW(parse_metrics_report(nlohmann::json{{"S1", {{"mean", 1}}}}), Error);
}

TEST(Export, CurveCsvAndManifest) {
  const OdmnParams p = random_params(1, 15);
  const OdmnCpModel m(p, kCopper);
  const LoadSchedule sched = LoadSchedule::uniaxial(1e-4, 1e-3, 0.05, 2);
  const DriveResult r = drive(m, sched);
  const std::string path = ::testing::TempDir() + "/curve.csv";
  write_curve_csv(path, r.curve);
  std::ifstream f(path);
  std::string header;
  std::getline(f, header);
  EXPECT_EQ(header.rfind("step,time,F11", 0), 0u);
  int rows = 0;
  for (std::string line; std::getline(f, line);) ++rows;
  EXPECT_EQ(rows, static_cast<int>(r.curve.size()));
  std::remove(path.c_str());
  const auto man = run_manifest(p, kCopper, sched, {});
  EXPECT_EQ(man.at("schedule").size(), 2u);
  EXPECT_EQ(man.at("odmn_params_hash").get<std::string>().size(), 16u);
}

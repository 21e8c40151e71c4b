#include <gtest/gtest.h>

#include <numbers>

#include "polyfm/orientation.hpp"

using namespace polyfm;

namespace {

constexpr double kPi = std::numbers::pi;

Mat3 direct_bunge(double a, double b, double g) {
  auto rz = [](double t) {
    Mat3 m;
    m << std::cos(t), -std::sin(t), 0, std::sin(t), std::cos(t), 0, 0, 0, 1;
    return m;
  };
  Mat3 rx;
  rx << 1, 0, 0, 0, std::cos(b), -std::sin(b), 0, std::sin(b), std::cos(b);
  return rz(a) * rx * rz(g);
}

// 81-component rotation oracle on the full 4th-order tensor.
Mat6 brute_rotate(const Mat6& c, const Mat3& r) {
  double full[3][3][3][3];
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k)
        for (int l = 0; l < 3; ++l) full[i][j][k][l] = c(voigt::index(i, j), voigt::index(k, l));
  Mat6 out;
  for (int I = 0; I < 6; ++I)
    for (int J = 0; J < 6; ++J) {
      const int i = voigt::kPairs[I][0], j = voigt::kPairs[I][1];
      const int k = voigt::kPairs[J][0], l = voigt::kPairs[J][1];
      double s = 0;
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b)
          for (int cc = 0; cc < 3; ++cc)
            for (int d = 0; d < 3; ++d) s += r(i, a) * r(j, b) * r(k, cc) * r(l, d) * full[a][b][cc][d];
      out(I, J) = s;
    }
  return out;
}

UnitQuaternion random_q(Rng& rng) { return random_quaternion(rng); }

}  // namespace

TEST(Quaternion, IdentityAndAxisRotation) {
  EXPECT_TRUE(quat_to_rotmat({1, 0, 0, 0}).isApprox(Mat3::Identity(), 1e-15));
  const double h = std::sqrt(0.5);
  Mat3 expected;
  expected << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  EXPECT_LT((quat_to_rotmat({h, 0, 0, h}) - expected).norm(), 1e-15);
}

TEST(Quaternion, NonUnitRejected) {
  try {
    quat_to_rotmat({1.0, 1e-3, 0, 0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvalidInput);
  }
}

TEST(Quaternion, ProductMatchesMatrixComposition) {
  Rng rng(7);
  for (int i = 0; i < 100; ++i) {
    const auto q = random_q(rng), p = random_q(rng);
    const Mat3 lhs = quat_to_rotmat(q * p);
    EXPECT_LT((lhs - quat_to_rotmat(q) * quat_to_rotmat(p)).norm(), 1e-12);
    EXPECT_LT((lhs.transpose() * lhs - Mat3::Identity()).norm(), 1e-12);
    EXPECT_NEAR(lhs.determinant(), 1.0, 1e-12);
  }
}

TEST(Quaternion, CanonicalSign) {
  EXPECT_EQ(UnitQuaternion(-0.5, 0.5, -0.5, 0.5).canonical(), UnitQuaternion(0.5, -0.5, 0.5, -0.5));
  EXPECT_EQ(UnitQuaternion(0, -1, 0, 0).canonical(), UnitQuaternion(0, 1, 0, 0));
  EXPECT_EQ(UnitQuaternion(0, 0, -0.6, 0.8).canonical(), UnitQuaternion(0, 0, 0.6, -0.8));
}

TEST(Euler, KnownValues) {
  const auto q = euler_to_quat({0, 0, 0});
  EXPECT_NEAR(q.w, 1.0, 1e-15);
  const auto qz = euler_to_quat({kPi / 2, 0, 0});
  EXPECT_NEAR(qz.w, std::sqrt(0.5), 1e-15);
  EXPECT_NEAR(qz.z, std::sqrt(0.5), 1e-15);
}

TEST(Euler, MatchesDirectBungeProduct) {
  Rng rng(11);
  for (int i = 0; i < 100; ++i) {
    const double a = rng.uniform(0, 2 * kPi), b = rng.uniform(0, kPi), g = rng.uniform(0, 2 * kPi);
    const Mat3 direct = direct_bunge(a, b, g);
    EXPECT_LT((quat_to_rotmat(euler_to_quat({a, b, g})) - direct).norm(), 1e-12);
    EXPECT_LT((euler_to_rotmat({a, b, g}) - direct).norm(), 1e-12);
    const auto back = quat_to_euler(euler_to_quat({a, b, g}));
    EXPECT_LT((euler_to_rotmat(back) - direct).norm(), 1e-11);
  }
}

TEST(Euler, GimbalLock) {
  for (double b : {0.0, kPi}) {
    const Mat3 r = direct_bunge(0.7, b, 0.4);
    const auto e = quat_to_euler(rotmat_to_quat(r));
    EXPECT_LT((euler_to_rotmat(e) - r).norm(), 1e-12);
  }
}

TEST(Euler, WrappedStaysInRange) {
  const EulerBunge e = EulerBunge{-1.0, 4.0, 9.0}.wrapped();
  EXPECT_GE(e.alpha, 0);
  EXPECT_LT(e.alpha, 2 * kPi);
  EXPECT_GE(e.beta, 0);
  EXPECT_LE(e.beta, kPi);
  EXPECT_LT((euler_to_rotmat(e) - euler_to_rotmat({-1.0, 4.0, 9.0})).norm(), 1e-12);
}

TEST(Euler, RotmatDerivativesMatchFiniteDifferences) {
  const EulerBunge e{0.3, 1.1, 2.0};
  const auto d = euler_rotmat_derivatives(e);
  const double h = 1e-6;
  for (int k = 0; k < 3; ++k) {
    EulerBunge p = e, m = e;
    (k == 0 ? p.alpha : k == 1 ? p.beta : p.gamma) += h;
    (k == 0 ? m.alpha : k == 1 ? m.beta : m.gamma) -= h;
    const Mat3 fd = (euler_to_rotmat(p) - euler_to_rotmat(m)) / (2 * h);
    EXPECT_LT((fd - d[k]).norm(), 1e-8);
  }
}

TEST(FundamentalZone, SymmetryOpsFormGroup) {
  const auto& ops = cubic_symmetry();
  for (const auto& a : ops)
    for (const auto& b : ops) {
      const auto c = (a * b).canonical();
      bool found = false;
      for (const auto& s : ops) found |= std::abs(std::abs(c.dot(s)) - 1.0) < 1e-12;
      EXPECT_TRUE(found);
    }
}

TEST(FundamentalZone, KnownRepresentatives) {
  EXPECT_EQ(reduce_to_fz({1, 0, 0, 0}), UnitQuaternion(1, 0, 0, 0));
  const double h = std::sqrt(0.5);
  const auto r = reduce_to_fz({h, 0, 0, h});
  EXPECT_NEAR(r.w, 1.0, 1e-15);
  EXPECT_NEAR(std::abs(r.x) + std::abs(r.y) + std::abs(r.z), 0.0, 1e-15);
}

TEST(FundamentalZone, OrbitReducesToSameRepresentativeAndIsIdempotent) {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const auto q = random_q(rng);
    const auto ref = reduce_to_fz(q);
    double wmax = 0;
    for (const auto& s : cubic_symmetry()) {
      const auto e = q * s;
      wmax = std::max(wmax, std::abs(e.w));
      const auto r = reduce_to_fz(e);
      EXPECT_NEAR(r.w, ref.w, 1e-14);
      EXPECT_NEAR(r.x, ref.x, 1e-14);
      EXPECT_NEAR(r.y, ref.y, 1e-14);
      EXPECT_NEAR(r.z, ref.z, 1e-14);
    }
    EXPECT_NEAR(ref.w, wmax, 1e-15);
    EXPECT_EQ(reduce_to_fz(ref), ref);
  }
}

TEST(StiffnessRotation, IsotropicUnchanged) {
  const Mat6 c = isotropic_stiffness(60.0, 30.0);
  Rng rng(5);
  for (int i = 0; i < 20; ++i) EXPECT_LT((rotate_stiffness(c, quat_to_rotmat(random_q(rng))) - c).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(StiffnessRotation, CubicInvariantUnderCubicOp) {
  const Mat6 c = cubic_stiffness(107.3, 60.8, 28.3);
  const double h = std::sqrt(0.5);
  EXPECT_LT((rotate_stiffness(c, quat_to_rotmat({h, 0, 0, h})) - c).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(StiffnessRotation, MatchesIndexSumAndPreservesSpectrum) {
  const Mat6 c = cubic_stiffness(107.3, 60.8, 28.3);
  Eigen::SelfAdjointEigenSolver<Mat6> es0(c);
  Rng rng(9);
  for (int i = 0; i < 50; ++i) {
    const Mat3 r = quat_to_rotmat(random_q(rng));
    const Mat6 rc = rotate_stiffness(c, r);
    EXPECT_LT((rc - brute_rotate(c, r)).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((rc - rc.transpose()).cwiseAbs().maxCoeff(), 1e-12);
    // Voigt 6x6 spectra differ from tensor spectra, but Bond rotation is a
    // similarity in the Mandel basis; compare Mandel-scaled eigenvalues.
    Mat6 w = Mat6::Identity();
    for (int k = 3; k < 6; ++k) w(k, k) = std::sqrt(2.0);
    Eigen::SelfAdjointEigenSolver<Mat6> es1(w * rc * w), es2(w * c * w);
    EXPECT_LT((es1.eigenvalues() - es2.eigenvalues()).cwiseAbs().maxCoeff(), 1e-8);
  }
  (void)es0;
}

TEST(Misorientation, BasicValues) {
  Rng rng(1);
  const auto q = random_q(rng);
  EXPECT_NEAR(misorientation_angle(q, q), 0.0, 1e-7);
  const auto r10 = UnitQuaternion::from_axis_angle(Vec3::UnitZ(), deg2rad(10.0));
  EXPECT_NEAR(rad2deg(misorientation_angle({1, 0, 0, 0}, r10)), 10.0, 1e-9);
}

TEST(Misorientation, BruteForceSymmetricAndOrbitZero) {
  Rng rng(2);
  const auto& ops = cubic_symmetry();
  double max_angle = 0;
  for (int i = 0; i < 100; ++i) {
    const auto a = random_q(rng), b = random_q(rng);
    double best = 10;
    for (const auto& s1 : ops)
      for (const auto& s2 : ops) best = std::min(best, rotation_angle((a * s1).conjugate() * (b * s2)));
    const double m = misorientation_angle(a, b);
    EXPECT_NEAR(m, best, 1e-9);
    EXPECT_NEAR(m, misorientation_angle(b, a), 1e-12);
    EXPECT_NEAR(misorientation_angle(a, a * ops[i % 24]), 0.0, 1e-7);
    max_angle = std::max(max_angle, m);
  }
  EXPECT_LE(rad2deg(max_angle), 62.81);
}

#pragma once

// Small fixed-size tensor helpers shared by every module.
//
// Voigt convention used throughout: index order 11, 22, 33, 23, 13, 12.
// Strains carry engineering shear (gamma_ij = 2 eps_ij), stresses do not,
// so sigma_v = C_v * eps_v and sigma_v . eps_v is the energy density.

#include <Eigen/Dense>
#include <array>
#include <cmath>

namespace polyfm {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using Vec9 = Eigen::Matrix<double, 9, 1>;
using Mat9 = Eigen::Matrix<double, 9, 9>;

/// 6x6 stiffness in Voigt form, GPa unless stated otherwise.
using StiffnessVoigt = Mat6;

namespace voigt {

inline constexpr std::array<std::array<int, 2>, 6> kPairs{{{0, 0}, {1, 1}, {2, 2}, {1, 2}, {0, 2}, {0, 1}}};

inline constexpr int index(int i, int j) {
  if (i == j) return i;
  const int s = i + j;  // (1,2)->3, (0,2)->2, (0,1)->1
  return s == 3 ? 3 : (s == 2 ? 4 : 5);
}

inline Vec6 stress_to_voigt(const Mat3& s) {
  Vec6 v;
  v << s(0, 0), s(1, 1), s(2, 2), s(1, 2), s(0, 2), s(0, 1);
  return v;
}

inline Mat3 stress_from_voigt(const Vec6& v) {
  Mat3 s;
  s << v(0), v(5), v(4), v(5), v(1), v(3), v(4), v(3), v(2);
  return s;
}

inline Vec6 strain_to_voigt(const Mat3& e) {
  Vec6 v;
  v << e(0, 0), e(1, 1), e(2, 2), e(1, 2) + e(2, 1), e(0, 2) + e(2, 0), e(0, 1) + e(1, 0);
  return v;
}

inline Mat3 strain_from_voigt(const Vec6& v) {
  Mat3 e;
  e << v(0), 0.5 * v(5), 0.5 * v(4), 0.5 * v(5), v(1), 0.5 * v(3), 0.5 * v(4), 0.5 * v(3), v(2);
  return e;
}

/// Bilinear Bond form: bond(R) = bilinear(R, R) is the stress transformation
/// sigma' = R sigma R^T in Voigt form. The derivative of bond(R) along dR is
/// bilinear(R, dR) + bilinear(dR, R).
inline Mat6 bond_bilinear(const Mat3& a, const Mat3& b) {
  Mat6 m;
  for (int I = 0; I < 6; ++I) {
    const int i = kPairs[I][0], j = kPairs[I][1];
    for (int J = 0; J < 6; ++J) {
      const int k = kPairs[J][0], l = kPairs[J][1];
      m(I, J) = a(i, k) * b(j, l);
      if (k != l) m(I, J) += a(i, l) * b(j, k);
    }
  }
  return m;
}

inline Mat6 bond(const Mat3& r) { return bond_bilinear(r, r); }

/// Full 3x3x3x3 tensor stored as 9x9 with row (i,j) = 3i+j, column (k,l) = 3k+l.
inline Mat9 to_full(const Mat6& c) {
  Mat9 t;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k)
        for (int l = 0; l < 3; ++l) t(3 * i + j, 3 * k + l) = c(index(i, j), index(k, l));
  return t;
}

inline Mat6 from_full(const Mat9& t) {
  Mat6 c;
  for (int I = 0; I < 6; ++I)
    for (int J = 0; J < 6; ++J)
      c(I, J) = t(3 * kPairs[I][0] + kPairs[I][1], 3 * kPairs[J][0] + kPairs[J][1]);
  return c;
}

}  // namespace voigt

inline StiffnessVoigt cubic_stiffness(double c11, double c12, double c44) {
  StiffnessVoigt c = StiffnessVoigt::Zero();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) c(i, j) = (i == j) ? c11 : c12;
  for (int i = 3; i < 6; ++i) c(i, i) = c44;
  return c;
}

inline StiffnessVoigt isotropic_stiffness(double lambda, double mu) {
  return cubic_stiffness(lambda + 2.0 * mu, lambda, mu);
}

/// Isotropic projection (bulk, shear) of a Voigt stiffness.
struct IsotropicModuli {
  double bulk;
  double shear;
  double lambda() const { return bulk - 2.0 * shear / 3.0; }
};

inline IsotropicModuli isotropic_projection(const StiffnessVoigt& c) {
  const double diag = c(0, 0) + c(1, 1) + c(2, 2);
  const double off = c(0, 1) + c(0, 2) + c(1, 2);
  const double shear_diag = c(3, 3) + c(4, 4) + c(5, 5);
  return {(diag + 2.0 * off) / 9.0, (diag - off + 3.0 * shear_diag) / 15.0};
}

/// Directional Young's modulus along unit direction d from compliance s = C^-1.
inline double directional_young(const Mat6& compliance, const Vec3& d) {
  // Voigt compliance maps stress to engineering strain; a uniaxial stress
  // along d has Voigt vector n, and 1/E = n^T S n.
  Mat3 dd = d * d.transpose();
  const Vec6 n = voigt::stress_to_voigt(dd);
  return 1.0 / (n.dot(compliance * n));
}

inline double frobenius(const Mat6& m) { return m.norm(); }

inline Mat3 skew(const Vec3& v) {
  Mat3 s;
  s << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return s;
}

}  // namespace polyfm

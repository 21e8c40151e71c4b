#pragma once

// Single-crystal uniaxial-stress driver shared by unit and acceptance tests.

#include <cmath>
#include <vector>

#include "polyfm/crystal_plasticity.hpp"

namespace cp_driver {

using namespace polyfm;

// Uniaxial nominal-stress driver along x: F11 prescribed, remaining P = 0.
struct Uniaxial {
  std::vector<double> strain, stress;  // F11 - 1, P11 in MPa
  CpState state;
};

inline Uniaxial uniaxial(const CrystalPlasticity& cp, const Mat3& r, double eps_max, int steps, double rate) {
  Uniaxial out;
  out.state = CpState::virgin(cp.params(), r);
  Mat3 f = Mat3::Identity();
  const double dt = eps_max / steps / rate;
  out.strain.push_back(0.0);
  out.stress.push_back(0.0);
  for (int s = 1; s <= steps; ++s) {
    f(0, 0) = 1.0 + eps_max * s / steps;
    CpResult res;
    for (int it = 0; it < 30; ++it) {
      res = cp.integrate(f, out.state, dt);
      Eigen::Matrix<double, 8, 1> rhs;
      Eigen::Matrix<double, 8, 8> jac;
      for (int a = 1; a < 9; ++a) {
        rhs(a - 1) = res.stress(a / 3, a % 3);
        for (int b = 1; b < 9; ++b) jac(a - 1, b - 1) = res.tangent(a, b);
      }
      if (rhs.cwiseAbs().maxCoeff() < 1e-12) break;
      const Eigen::Matrix<double, 8, 1> d = jac.partialPivLu().solve(-rhs);
      for (int b = 1; b < 9; ++b) f(b / 3, b % 3) += d(b - 1);
    }
    out.state = res.state;
    out.strain.push_back(f(0, 0) - 1.0);
    out.stress.push_back(1e3 * res.stress(0, 0));
  }
  return out;
}

// 0.2% offset yield of a monotone curve with initial slope e0.
inline double offset_yield(const Uniaxial& u, double e0) {
  for (std::size_t k = 1; k < u.strain.size(); ++k) {
    const double g0 = u.stress[k - 1] - e0 * (u.strain[k - 1] - 0.002);
    const double g1 = u.stress[k] - e0 * (u.strain[k] - 0.002);
    if (g0 > 0 && g1 <= 0) {
      const double t = g0 / (g0 - g1);
      return u.stress[k - 1] + t * (u.stress[k] - u.stress[k - 1]);
    }
  }
  return NAN;
}


}  // namespace cp_driver

#pragma once

// Phenomenological FCC crystal plasticity with St. Venant-Kirchhoff
// elasticity on the intermediate (lattice) configuration.
//
// Stresses are MPa inside the integrator; elastic constants and h0 are given
// in GPa and converted once in CrystalPlasticity's constructor. CpResult
// reports P and dP/dF in GPa.

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>
#include <unsupported/Eigen/MatrixFunctions>

#include "polyfm/error.hpp"
#include "polyfm/tensor.hpp"

namespace polyfm {

inline constexpr int kFccSlipCount = 12;

struct SlipSystem {
  Vec3 direction;
  Vec3 normal;
};

/// The 12 {111}<110> systems, grouped by plane.
inline const std::array<SlipSystem, kFccSlipCount>& fcc_slip_systems() {
  static const std::array<SlipSystem, kFccSlipCount> systems = [] {
    const double raw[12][6] = {
        {0, 1, -1, 1, 1, 1},    {-1, 0, 1, 1, 1, 1},   {1, -1, 0, 1, 1, 1},    //
        {0, -1, -1, -1, -1, 1}, {1, 0, 1, -1, -1, 1},  {-1, 1, 0, -1, -1, 1},  //
        {0, -1, 1, 1, -1, -1},  {-1, 0, -1, 1, -1, -1}, {1, 1, 0, 1, -1, -1},  //
        {0, 1, 1, -1, 1, -1},   {1, 0, -1, -1, 1, -1}, {-1, -1, 0, -1, 1, -1}};
    std::array<SlipSystem, kFccSlipCount> out;
    for (int a = 0; a < kFccSlipCount; ++a)
      out[a] = {Vec3(raw[a][0], raw[a][1], raw[a][2]).normalized(), Vec3(raw[a][3], raw[a][4], raw[a][5]).normalized()};
    return out;
  }();
  return systems;
}

/// Interaction class of a pair of FCC slip systems, indexing the 7-entry
/// coefficient vector: 0 self, 1 coplanar, 2 collinear, 3 Hirth,
/// 4 glissile, 6 Lomer-Cottrell. Entry 5 is the second glissile class and
/// carries the same value in the stock coefficient set.
inline int fcc_interaction_type(int a, int b) {
  const auto& sys = fcc_slip_systems();
  if (a == b) return 0;
  const Vec3 &sa = sys[a].direction, &sb = sys[b].direction, &na = sys[a].normal, &nb = sys[b].normal;
  if (std::abs(std::abs(na.dot(nb)) - 1.0) < 1e-12) return 1;
  if (std::abs(std::abs(sa.dot(sb)) - 1.0) < 1e-12) return 2;
  if (std::abs(sa.dot(sb)) < 1e-12) return 3;
  // 60 degree pair: the reaction product lies in one of the planes if glissile.
  const Vec3 product = sa.dot(sb) > 0 ? Vec3(sa - sb) : Vec3(sa + sb);
  if (std::abs(product.dot(na)) < 1e-12 || std::abs(product.dot(nb)) < 1e-12) return 4;
  return 6;
}

struct CpParams {
  double h0 = 1.02;        // GPa
  double xi_inf = 266.0;   // MPa
  double xi0 = 76.0;       // MPa
  double n = 20.0;
  double a = 3.7;
  double gamma_dot0 = 1e-3;  // 1/s
  double h_int = 0.0;
  std::array<double, 7> latent{1.0, 1.0, 5.123, 0.574, 1.123, 1.123, 1.0};
  double c11 = 107.3, c12 = 60.8, c44 = 28.3;  // GPa

  void validate() const {
    require(xi0 > 0.0 && xi_inf > 0.0, ErrorKind::InvalidConfig, "slip resistances must be positive");
    require(n >= 1.0, ErrorKind::InvalidConfig, "rate exponent must be >= 1");
    require(gamma_dot0 > 0.0, ErrorKind::InvalidConfig, "reference slip rate must be positive");
    require(a >= 1.0, ErrorKind::InvalidConfig, "hardening exponent must be >= 1");
  }
};

inline nlohmann::json to_json(const CpParams& p) {
  return {{"N_s", kFccSlipCount},  {"h0_GPa", p.h0}, {"xi_inf_MPa", p.xi_inf}, {"xi0_MPa", p.xi0},
          {"n", p.n},              {"a", p.a},       {"gamma_dot0", p.gamma_dot0}, {"h_int", p.h_int},
          {"h_sl_sl", p.latent},   {"C11_GPa", p.c11}, {"C12_GPa", p.c12},     {"C44_GPa", p.c44}};
}

inline CpParams cp_params_from_json(const nlohmann::json& j) {
  CpParams p;
  try {
    if (j.contains("N_s"))
      require(j.at("N_s").get<int>() == kFccSlipCount, ErrorKind::InvalidConfig, "only the 12 FCC slip systems are supported");
    p.h0 = j.value("h0_GPa", p.h0);
    p.xi_inf = j.value("xi_inf_MPa", p.xi_inf);
    p.xi0 = j.value("xi0_MPa", p.xi0);
    p.n = j.value("n", p.n);
    p.a = j.value("a", p.a);
    p.gamma_dot0 = j.value("gamma_dot0", p.gamma_dot0);
    p.h_int = j.value("h_int", p.h_int);
    if (j.contains("h_sl_sl")) p.latent = j.at("h_sl_sl").get<std::array<double, 7>>();
    p.c11 = j.value("C11_GPa", p.c11);
    p.c12 = j.value("C12_GPa", p.c12);
    p.c44 = j.value("C44_GPa", p.c44);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::InvalidConfig, std::string("malformed material card: ") + e.what());
  }
  p.validate();
  return p;
}

struct CpState {
  Mat3 fp = Mat3::Identity();  // plastic deformation gradient
  Mat3 f = Mat3::Identity();   // last converged total deformation gradient
  std::array<double, kFccSlipCount> xi{};
  std::array<double, kFccSlipCount> gamma{};  // accumulated |slip|

  /// Undeformed state of a crystal with lattice-to-sample rotation r.
  static CpState virgin(const CpParams& p, const Mat3& r = Mat3::Identity()) {
    CpState s;
    s.fp = r.transpose();
    s.xi.fill(p.xi0);
    s.gamma.fill(0.0);
    return s;
  }
};

struct CpResult {
  Mat3 stress;    // first Piola-Kirchhoff, GPa
  Mat9 tangent;   // dP_ij / dF_kl at (3i+j, 3k+l), GPa
  CpState state;
  int iterations = 0;
  int substeps = 1;
};

namespace detail {
inline Mat3 unit_dyad(int k) {
  Mat3 e = Mat3::Zero();
  e(k / 3, k % 3) = 1.0;
  return e;
}

/// Frechet derivative of the matrix exponential at a along e.
inline Mat3 expm_frechet(const Mat3& a, const Mat3& e) {
  Eigen::Matrix<double, 6, 6> block = Eigen::Matrix<double, 6, 6>::Zero();
  block.topLeftCorner<3, 3>() = a;
  block.topRightCorner<3, 3>() = e;
  block.bottomRightCorner<3, 3>() = a;
  const Eigen::Matrix<double, 6, 6> ex = block.exp();
  return ex.topRightCorner<3, 3>();
}
}  // namespace detail

class CrystalPlasticity {
 public:
  static constexpr int kN = kFccSlipCount;
  using VecS = Eigen::Matrix<double, kN, 1>;

  explicit CrystalPlasticity(CpParams p) : p_(p) {
    p_.validate();
    c_ = 1000.0 * cubic_stiffness(p_.c11, p_.c12, p_.c44);
    h0_ = 1000.0 * p_.h0;
    const auto& sys = fcc_slip_systems();
    for (int a = 0; a < kN; ++a) schmid_[a] = sys[a].direction * sys[a].normal.transpose();
    for (int a = 0; a < kN; ++a)
      for (int b = 0; b < kN; ++b) latent_(a, b) = p_.latent[fcc_interaction_type(a, b)];
  }

  const CpParams& params() const noexcept { return p_; }
  const Mat3& schmid(int a) const { return schmid_[a]; }
  const Eigen::Matrix<double, kN, kN>& latent_matrix() const noexcept { return latent_; }
  /// Lattice-frame stiffness in MPa.
  const StiffnessVoigt& stiffness() const noexcept { return c_; }

  /// Second Piola-Kirchhoff stress (MPa) on the intermediate configuration.
  Mat3 elastic_stress(const Mat3& fe) const {
    const Mat3 e = 0.5 * (fe.transpose() * fe - Mat3::Identity());
    return voigt::stress_from_voigt(c_ * voigt::strain_to_voigt(e));
  }

  /// Slip rates and hardening rates for resolved shear stresses tau (MPa).
  std::pair<VecS, VecS> flow_and_hardening(const VecS& tau, const VecS& xi) const {
    VecS gdot, xidot;
    for (int a = 0; a < kN; ++a) {
      require(xi(a) > 0.0, ErrorKind::InvalidInput, "slip resistance must be positive");
      const double r = tau(a) / xi(a);
      gdot(a) = p_.gamma_dot0 * std::pow(std::abs(r), p_.n) * (r > 0 ? 1.0 : (r < 0 ? -1.0 : 0.0));
    }
    for (int a = 0; a < kN; ++a) {
      double s = 0.0;
      for (int b = 0; b < kN; ++b) s += std::abs(gdot(b)) * saturation(xi(b)) * latent_(a, b);
      xidot(a) = h0_ * (1.0 + p_.h_int) * s;
    }
    return {gdot, xidot};
  }

  /// Resolved shear stresses (MPa) of a converged state.
  VecS resolved_shear(const CpState& state) const {
    const Mat3 fe = state.f * state.fp.inverse();
    const Mat3 m = fe.transpose() * fe * elastic_stress(fe);
    VecS tau;
    for (int a = 0; a < kN; ++a) tau(a) = (m.cwiseProduct(schmid_[a])).sum();
    return tau;
  }

  /// Advances `state` to total deformation F_next over dt, halving the
  /// increment on local failure (at most 20 levels).
  CpResult integrate(const Mat3& f_next, const CpState& state, double dt) const {
    require(dt > 0.0, ErrorKind::InvalidInput, "time increment must be positive");
    require(f_next.determinant() > 0.0, ErrorKind::InvalidInput, "deformation gradient must have positive determinant");
    return integrate_split(f_next, state, dt, 0);
  }

 private:
  // Working point of one implicit step.
  struct Point {
    VecS y, xi, dgamma, dgamma_dy, tau;
    Mat3 a, fpi, fe, s, ce;
  };

  double saturation(double xi) const {
    const double d = 1.0 - xi / p_.xi_inf;
    return std::pow(std::abs(d), p_.a) * (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0));
  }
  double saturation_derivative(double xi) const {
    const double d = 1.0 - xi / p_.xi_inf;
    return -(p_.a / p_.xi_inf) * std::pow(std::abs(d), p_.a - 1.0);
  }

  Point evaluate(const Mat3& f, const Mat3& fpi_n, const VecS& y, const VecS& xi, double k) const {
    Point pt;
    pt.y = y;
    pt.xi = xi;
    pt.a.setZero();
    for (int b = 0; b < kN; ++b) {
      const double ay = std::abs(y(b));
      const double pw = std::pow(ay, p_.n - 1.0);
      pt.dgamma(b) = k * pw * y(b);
      pt.dgamma_dy(b) = k * p_.n * pw;
      pt.a -= pt.dgamma(b) * schmid_[b];
    }
    pt.fpi = fpi_n * pt.a.exp();
    pt.fe = f * pt.fpi;
    pt.ce = pt.fe.transpose() * pt.fe;
    pt.s = elastic_stress(pt.fe);
    const Mat3 m = pt.ce * pt.s;
    for (int b = 0; b < kN; ++b) pt.tau(b) = (m.cwiseProduct(schmid_[b])).sum();
    return pt;
  }

  Eigen::Matrix<double, 2 * kN, 1> residual(const Point& pt, const VecS& xi_n) const {
    Eigen::Matrix<double, 2 * kN, 1> r;
    for (int a = 0; a < kN; ++a) r(a) = pt.y(a) - pt.tau(a) / pt.xi(a);
    const double pref = h0_ * (1.0 + p_.h_int);
    for (int a = 0; a < kN; ++a) {
      double s = 0.0;
      for (int b = 0; b < kN; ++b) s += std::abs(pt.dgamma(b)) * saturation(pt.xi(b)) * latent_(a, b);
      r(kN + a) = (pt.xi(a) - xi_n(a) - pref * s) / p_.xi0;
    }
    return r;
  }

  /// Directional derivative of (tau, P) at fixed state for a change dF in the
  /// total deformation and d_dgamma in the slip increments (P in MPa).
  std::pair<VecS, Mat3> linearize(const Point& pt, const Mat3& f, const Mat3& fpi_n, const Mat3& df,
                                  const VecS& d_dgamma) const {
    Mat3 da = Mat3::Zero();
    for (int b = 0; b < kN; ++b) da -= d_dgamma(b) * schmid_[b];
    const Mat3 dfpi = d_dgamma.isZero(0.0) ? Mat3::Zero() : Mat3(fpi_n * detail::expm_frechet(pt.a, da));
    const Mat3 dfe = df * pt.fpi + f * dfpi;
    const Mat3 dce = dfe.transpose() * pt.fe + pt.fe.transpose() * dfe;
    const Mat3 ds = voigt::stress_from_voigt(c_ * voigt::strain_to_voigt(0.5 * dce));
    const Mat3 dm = dce * pt.s + pt.ce * ds;
    VecS dtau;
    for (int b = 0; b < kN; ++b) dtau(b) = (dm.cwiseProduct(schmid_[b])).sum();
    const Mat3 dp = dfe * pt.s * pt.fpi.transpose() + pt.fe * ds * pt.fpi.transpose() + pt.fe * pt.s * dfpi.transpose();
    return {dtau, dp};
  }

  CpResult integrate_split(const Mat3& f_next, const CpState& state, double dt, int level) const {
    try {
      return solve_step(f_next, state, dt);
    } catch (const ConvergenceError& err) {
      if (level >= 20) throw;
      const Mat3 f_mid = state.f + 0.5 * (f_next - state.f);
      const CpResult first = integrate_split(f_mid, state, 0.5 * dt, level + 1);
      CpResult second = integrate_split(f_next, first.state, 0.5 * dt, level + 1);
      second.substeps += first.substeps;
      second.iterations += first.iterations;
      return second;
    }
  }

  using Jac = Eigen::Matrix<double, 2 * kN, 2 * kN>;
  using Vec2S = Eigen::Matrix<double, 2 * kN, 1>;

  struct Solved {
    Point pt;
    Jac jac;
    std::array<std::pair<VecS, Mat3>, kN> by_slip;
    int iterations = 0;
  };

  Jac jacobian(const Point& q, const Mat3& f, const Mat3& fpi_n, std::array<std::pair<VecS, Mat3>, kN>& by_slip) const {
    const double pref = h0_ * (1.0 + p_.h_int);
    Jac jac = Jac::Zero();
    for (int b = 0; b < kN; ++b) by_slip[b] = linearize(q, f, fpi_n, Mat3::Zero(), VecS::Unit(b));
    for (int a = 0; a < kN; ++a) {
      jac(a, a) += 1.0;
      jac(a, kN + a) += q.tau(a) / (q.xi(a) * q.xi(a));
      for (int b = 0; b < kN; ++b) jac(a, b) -= by_slip[b].first(a) / q.xi(a) * q.dgamma_dy(b);
    }
    for (int a = 0; a < kN; ++a) {
      jac(kN + a, kN + a) += 1.0 / p_.xi0;
      for (int b = 0; b < kN; ++b) {
        const double sg = q.dgamma(b) > 0 ? 1.0 : (q.dgamma(b) < 0 ? -1.0 : 0.0);
        jac(kN + a, b) -= pref * sg * saturation(q.xi(b)) * latent_(a, b) * q.dgamma_dy(b) / p_.xi0;
        jac(kN + a, kN + b) -= pref * std::abs(q.dgamma(b)) * saturation_derivative(q.xi(b)) * latent_(a, b) / p_.xi0;
      }
    }
    return jac;
  }

  // Damped Newton on (y, xi) from the given start. False if it stalls.
  bool newton(const Mat3& f, const Mat3& fpi_n, const VecS& xi_n, double k, VecS y, VecS xi, Solved& out,
              std::vector<double>& history) const {
    const double y_cap = std::pow(0.05 / k, 1.0 / p_.n);
    for (int a = 0; a < kN; ++a) y(a) = std::clamp(y(a), -y_cap, y_cap);
    Point pt = evaluate(f, fpi_n, y, xi, k);
    Vec2S r = residual(pt, xi_n);
    for (int it = 0;; ++it) {
      const double rn = r.cwiseAbs().maxCoeff();
      history.push_back(rn);
      if (!std::isfinite(rn)) return false;
      if (rn <= 1e-12 || (it >= 50 && rn <= 1e-10)) {
        out.jac = jacobian(pt, f, fpi_n, out.by_slip);
        out.pt = pt;
        out.iterations = it;
        return true;
      }
      if (it >= 50) return false;
      const Vec2S du = -jacobian(pt, f, fpi_n, out.by_slip).partialPivLu().solve(r);
      double t = 1.0;
      bool accepted = false;
      for (int ls = 0; ls <= 10 && !accepted; ++ls, t *= 0.5) {
        const VecS y_try = y + t * du.head<kN>(), xi_try = xi + t * du.tail<kN>();
        if (!(xi_try.array() > 0.0).all() || !(y_try.cwiseAbs().array() <= 2.0 * y_cap).all()) continue;
        Point cand = evaluate(f, fpi_n, y_try, xi_try, k);
        const Vec2S rc = residual(cand, xi_n);
        const double rcn = rc.cwiseAbs().maxCoeff();
        if (std::isfinite(rcn) && rcn < rn) {
          y = y_try;
          xi = xi_try;
          pt = std::move(cand);
          r = rc;
          accepted = true;
        }
      }
      if (!accepted) return false;
    }
  }

  CpResult solve_step(const Mat3& f, const CpState& state, double dt) const {
    const double k = dt * p_.gamma_dot0;
    const Mat3 fpi_n = state.fp.inverse();
    VecS xi_n;
    for (int a = 0; a < kN; ++a) xi_n(a) = state.xi[a];

    auto trial = [&](const Mat3& fl) {
      const Point tp = evaluate(fl, fpi_n, VecS::Zero(), xi_n, k);
      return VecS(tp.tau.cwiseQuotient(xi_n));
    };

    std::vector<double> history;
    Solved sol;
    int total_iterations = 0;
    if (!newton(f, fpi_n, xi_n, k, trial(f), xi_n, sol, history)) {
      // Continuation along the deformation increment; every stage is the
      // same implicit step (same dt and start state), so the end point is
      // the single-step solution.
      double lam = 0.0, dlam = 0.25;
      VecS y = VecS::Zero(), xi = xi_n;
      while (lam < 1.0) {
        const double next = std::min(1.0, lam + dlam);
        const Mat3 fl = state.f + next * (f - state.f);
        Solved stage;
        if (newton(fl, fpi_n, xi_n, k, lam == 0.0 ? trial(fl) : y, xi, stage, history)) {
          lam = next;
          y = stage.pt.y;
          xi = stage.pt.xi;
          total_iterations += stage.iterations;
          sol = std::move(stage);
          dlam = std::min(0.5, 2.0 * dlam);
        } else {
          dlam *= 0.5;
          if (dlam < 1.0 / 4096) throw ConvergenceError("local Newton did not converge", history);
        }
      }
    }
    total_iterations += sol.iterations;
    const Point& pt = sol.pt;

    CpResult out;
    out.iterations = total_iterations;
    out.state = state;
    out.state.fp = pt.fpi.inverse();
    out.state.f = f;
    for (int a = 0; a < kN; ++a) {
      out.state.xi[a] = pt.xi(a);
      out.state.gamma[a] += std::abs(pt.dgamma(a));
    }
    const Mat3 p_mpa = pt.fe * pt.s * pt.fpi.transpose();
    out.stress = 1e-3 * p_mpa;

    // Consistent tangent: implicit differentiation of the converged residual.
    const auto lu = sol.jac.partialPivLu();
    for (int kl = 0; kl < 9; ++kl) {
      const auto [dtau_f, dp_f] = linearize(pt, f, fpi_n, detail::unit_dyad(kl), VecS::Zero());
      Vec2S rhs = Vec2S::Zero();
      for (int a = 0; a < kN; ++a) rhs(a) = dtau_f(a) / pt.xi(a);
      const Vec2S du = lu.solve(rhs);
      Mat3 dp = dp_f;
      for (int b = 0; b < kN; ++b) dp += sol.by_slip[b].second * (pt.dgamma_dy(b) * du(b));
      for (int ij = 0; ij < 9; ++ij) out.tangent(ij, kl) = 1e-3 * dp(ij / 3, ij % 3);
    }
    return out;
  }

  CpParams p_;
  StiffnessVoigt c_;
  double h0_;
  std::array<Mat3, kN> schmid_;
  Eigen::Matrix<double, kN, kN> latent_;
};

}  // namespace polyfm

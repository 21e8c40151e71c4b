#pragma once

// Finite-strain online prediction with a trained ODMN: crystal-plasticity
// leaves coupled through interaction vectors, a Newton solve for the
// Hill-Mandel condition, and a mixed-control macroscopic loading driver.
// Stresses and tangents are in GPa.

#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "polyfm/crystal_plasticity.hpp"
#include "polyfm/error.hpp"
#include "polyfm/hash.hpp"
#include "polyfm/odmn.hpp"
#include "polyfm/parallel.hpp"

namespace polyfm {

struct OnlineState {
  Eigen::VectorXd a;  // 3 per active node, in slot order
  std::vector<CpState> leaves;
  Mat3 f_bar = Mat3::Identity();
  Mat3 p_bar = Mat3::Zero();
  double time = 0.0;
};

struct OnlineStep {
  OnlineState state;
  Mat9 tangent;  // dP_bar / dF_bar
  std::vector<double> residual_history;
  double residual = 0.0;  // ||r|| / sum_i W_i ||P_i|| at convergence
  int iterations = 0;
};

/// Macroscopic response of one leaf evaluation pass.
struct LeafPass {
  std::vector<CpResult> leaves;
  Eigen::VectorXd residual;
  Mat3 p_bar;
  double stress_scale = 0.0;  // sum_i W_i ||P_i||
};

class OdmnCpModel {
 public:
  /// Absolute residual floor (GPa): stress roundoff of rotated lattices.
  static constexpr double kResidualFloor = 1e-13;

  OdmnCpModel(const OdmnParams& params, const CpParams& material)
      : params_(params), cp_(material), derived_(derive(params, cubic_stiffness(material.c11, material.c12, material.c44))) {
    slot_.assign(derived_.tree.n_nodes, -1);
    for (std::size_t j = 0; j < derived_.tree.n_nodes; ++j)
      if (derived_.coeff.active[j]) {
        slot_[j] = static_cast<int>(active_.size());
        active_.push_back(j);
      }
    for (std::size_t i = 0; i < derived_.tree.n_leaves; ++i)
      if (derived_.weights[i] > 0.0) live_.push_back(i);
  }

  const OdmnParams& params() const noexcept { return params_; }
  const OdmnDerived& derived() const noexcept { return derived_; }
  const CrystalPlasticity& material() const noexcept { return cp_; }
  Eigen::Index unknowns() const noexcept { return 3 * static_cast<Eigen::Index>(active_.size()); }

  OnlineState initial_state() const {
    OnlineState s;
    s.a = Eigen::VectorXd::Zero(unknowns());
    for (const auto& leaf : params_.leaves) s.leaves.push_back(CpState::virgin(cp_.params(), euler_to_rotmat(leaf.euler)));
    return s;
  }

  /// Leaf deformation gradients F_i = F_bar + sum_j alpha_ij a_j (x) N_j.
  std::vector<Mat3> downscale(const Mat3& f_bar, const Eigen::VectorXd& a) const {
    require(a.size() == unknowns(), ErrorKind::InvalidInput, "interaction vector count does not match active nodes");
    std::vector<Mat3> f(derived_.tree.n_leaves, f_bar);
    for (std::size_t i = 0; i < f.size(); ++i)
      for (const auto& [j, is_left] : derived_.tree.ancestors[i]) {
        if (slot_[j] < 0) continue;
        const Vec3 aj = a.segment<3>(3 * slot_[j]);
        f[i] += derived_.coeff.alpha(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * aj * derived_.normals[j].transpose();
      }
    return f;
  }

  /// Integrates all weighted leaves and forms r_j = sum_i W_i alpha_ij P_i N_j.
  LeafPass evaluate(const Mat3& f_bar, const Eigen::VectorXd& a, const std::vector<CpState>& states, double dt) const {
    const auto f = downscale(f_bar, a);
    LeafPass pass;
    pass.leaves.resize(f.size());
    std::vector<std::exception_ptr> errors(live_.size());
    parallel_for(live_.size(), [&](std::size_t k) {
      const std::size_t i = live_[k];
      try {
        pass.leaves[i] = cp_.integrate(f[i], states[i], dt);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    });
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);
    pass.residual = Eigen::VectorXd::Zero(unknowns());
    pass.p_bar.setZero();
    for (std::size_t i : live_) {
      const double w = derived_.weights[i];
      const Mat3& p = pass.leaves[i].stress;
      pass.p_bar += w * p;
      pass.stress_scale += w * p.norm();
      for (const auto& [j, is_left] : derived_.tree.ancestors[i]) {
        if (slot_[j] < 0) continue;
        pass.residual.segment<3>(3 * slot_[j]) += w * alpha(i, j) * p * derived_.normals[j];
      }
    }
    return pass;
  }

  Eigen::VectorXd hill_mandel_residual(const Eigen::VectorXd& a, const Mat3& f_bar, const std::vector<CpState>& states,
                                       double dt) const {
    return evaluate(f_bar, a, states, dt).residual;
  }

  /// Solves the interaction problem at F_bar starting from `from` (states at
  /// the beginning of the step, a as initial guess).
  OnlineStep newton_solve(const Mat3& f_bar, const OnlineState& from, double dt, double tol = 1e-11) const {
    Eigen::VectorXd a = from.a;
    LeafPass pass = evaluate(f_bar, a, from.leaves, dt);
    OnlineStep out;
    const Eigen::Index m = unknowns();
    auto scaled = [](const LeafPass& lp) { return lp.residual.norm(); };
    for (int it = 0;; ++it) {
      const double rn = scaled(pass);
      out.residual_history.push_back(rn);
      if (rn <= tol * pass.stress_scale || rn <= kResidualFloor || m == 0) break;
      if (it >= 50)
        throw ConvergenceError("interaction Newton did not converge (residual " + std::to_string(rn) + ")", out.residual_history);
      const Eigen::VectorXd da = -jacobian(pass).partialPivLu().solve(pass.residual);
      double t = 1.0;
      bool accepted = false;
      for (int ls = 0; ls <= 5 && !accepted; ++ls, t *= 0.5) {
        try {
          LeafPass trial = evaluate(f_bar, a + t * da, from.leaves, dt);
          if (scaled(trial) < rn || ls == 5) {
            a += t * da;
            pass = std::move(trial);
            accepted = true;
          }
        } catch (const Error&) {
          if (ls == 5) throw ConvergenceError("leaf integration failed during line search", out.residual_history);
        }
      }
      out.iterations = it + 1;
    }
    out.residual = pass.stress_scale > 0.0 ? out.residual_history.back() / pass.stress_scale : 0.0;
    out.tangent = macro_tangent(pass);
    out.state.a = a;
    out.state.leaves = from.leaves;
    for (std::size_t i : live_) out.state.leaves[i] = pass.leaves[i].state;
    out.state.f_bar = f_bar;
    out.state.p_bar = pass.p_bar;
    out.state.time = from.time + dt;
    return out;
  }

 private:
  double alpha(std::size_t i, std::size_t j) const {
    return derived_.coeff.alpha(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }

  // vec(a (x) N) = E a with vec(A)(3p+q) = A(p,q).
  static Eigen::Matrix<double, 9, 3> embed(const Vec3& n) {
    Eigen::Matrix<double, 9, 3> e = Eigen::Matrix<double, 9, 3>::Zero();
    for (int p = 0; p < 3; ++p)
      for (int q = 0; q < 3; ++q) e(3 * p + q, p) = n(q);
    return e;
  }

  Eigen::MatrixXd jacobian(const LeafPass& pass) const {
    const Eigen::Index m = unknowns();
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(m, m);
    for (std::size_t i : live_) {
      const double w = derived_.weights[i];
      const Mat9& t = pass.leaves[i].tangent;
      for (const auto& [j, lj] : derived_.tree.ancestors[i]) {
        if (slot_[j] < 0) continue;
        const Eigen::Matrix<double, 3, 9> et = embed(derived_.normals[j]).transpose() * t;
        for (const auto& [l, ll] : derived_.tree.ancestors[i]) {
          if (slot_[l] < 0) continue;
          jac.block<3, 3>(3 * slot_[j], 3 * slot_[l]) += w * alpha(i, j) * alpha(i, l) * et * embed(derived_.normals[l]);
        }
      }
    }
    return jac;
  }

  Mat9 macro_tangent(const LeafPass& pass) const {
    const Eigen::Index m = unknowns();
    Mat9 t_bar = Mat9::Zero();
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(9, m), g = Eigen::MatrixXd::Zero(m, 9);
    for (std::size_t i : live_) {
      const double w = derived_.weights[i];
      const Mat9& t = pass.leaves[i].tangent;
      t_bar += w * t;
      for (const auto& [j, lj] : derived_.tree.ancestors[i]) {
        if (slot_[j] < 0) continue;
        const Eigen::Matrix<double, 9, 3> e = embed(derived_.normals[j]);
        h.middleCols<3>(3 * slot_[j]) += w * alpha(i, j) * t * e;
        g.middleRows<3>(3 * slot_[j]) += w * alpha(i, j) * e.transpose() * t;
      }
    }
    if (m > 0) t_bar -= h * jacobian(pass).partialPivLu().solve(g);
    return t_bar;
  }

  OdmnParams params_;
  CrystalPlasticity cp_;
  OdmnDerived derived_;
  std::vector<int> slot_;
  std::vector<std::size_t> active_;
  std::vector<std::size_t> live_;
};

/// Small-strain Voigt stiffness from a finite-strain tangent at F = I.
inline StiffnessVoigt small_strain_stiffness(const Mat9& t) {
  Mat9 s;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k)
        for (int l = 0; l < 3; ++l)
          s(3 * i + j, 3 * k + l) = 0.25 * (t(3 * i + j, 3 * k + l) + t(3 * j + i, 3 * k + l) + t(3 * i + j, 3 * l + k) +
                                            t(3 * j + i, 3 * l + k));
  return voigt::from_full(s);
}

// ---------------------------------------------------------------------------
// Loading driver

enum class Control { Deformation, Stress };

/// One linear ramp. Component (i,j) ramps from its value at segment start to
/// target(i,j): F_bar if deformation-controlled, P_bar (GPa) otherwise.
struct LoadSegment {
  std::array<Control, 9> control{};
  Mat3 target = Mat3::Identity();
  int steps = 1;
  double dt = 1e-2;
};

struct LoadSchedule {
  std::vector<LoadSegment> segments;

  void validate() const {
    require(!segments.empty(), ErrorKind::InvalidConfig, "load schedule has no segments");
    for (const auto& s : segments) {
      require(s.steps > 0 && s.dt > 0.0, ErrorKind::InvalidConfig, "segment needs positive steps and dt");
      bool any = false;
      for (auto c : s.control) any = any || c == Control::Deformation;
      require(any, ErrorKind::InvalidConfig, "each segment needs a deformation-controlled component");
    }
  }

  /// Uniaxial stress along x: ramp F11 to 1 + strain at the given rate, then
  /// unload P11 to zero. The lower triangle of F_bar is held at zero to
  /// remove the rigid rotation.
  static LoadSchedule uniaxial(double strain = 0.02, double rate = 1e-3, double dt = 1e-2, int unload_steps = 0) {
    LoadSegment load;
    load.control.fill(Control::Stress);
    load.control[0] = Control::Deformation;
    for (int k : {3, 6, 7}) load.control[static_cast<std::size_t>(k)] = Control::Deformation;
    load.target = Mat3::Zero();
    load.target(0, 0) = 1.0 + strain;
    load.dt = dt;
    load.steps = std::max(1, static_cast<int>(std::lround(std::abs(strain) / (rate * dt))));
    LoadSegment unload = load;
    unload.control[0] = Control::Stress;
    unload.target(0, 0) = 0.0;
    unload.steps = unload_steps > 0 ? unload_steps : std::max(10, load.steps / 10);
    return {{load, unload}};
  }
};

inline const char* to_string(Control c) { return c == Control::Deformation ? "F" : "P"; }

inline nlohmann::json to_json(const LoadSchedule& s) {
  nlohmann::json segs = nlohmann::json::array();
  for (const auto& seg : s.segments) {
    std::string ctl;
    std::vector<double> target;
    for (int k = 0; k < 9; ++k) {
      ctl += to_string(seg.control[static_cast<std::size_t>(k)]);
      target.push_back(seg.target(k / 3, k % 3));
    }
    segs.push_back({{"control", ctl}, {"target", target}, {"steps", seg.steps}, {"dt", seg.dt}});
  }
  return segs;
}

struct CurvePoint {
  int step = 0;
  double time = 0.0;
  Mat3 f_bar, p_bar;
  double residual = 0.0;  // relative Hill-Mandel residual
  int iterations = 0;
  int substeps = 1;
};

struct DriveResult {
  std::vector<CurvePoint> curve;
  OnlineState state;
  std::vector<std::size_t> segment_end;  // curve index of the last point of each segment
};

struct DriveOptions {
  double inner_tolerance = 1e-11;
  double outer_tolerance = 1e-9;  // relative to max |P_bar|
  int max_outer = 25;
  int max_substep_levels = 10;
};

namespace detail {
inline OnlineStep advance(const OdmnCpModel& model, const OnlineState& from, const LoadSegment& seg, const Mat3& target,
                          const Mat3& guess, double dt, const DriveOptions& opt) {
  std::vector<int> free;
  for (int k = 0; k < 9; ++k)
    if (seg.control[static_cast<std::size_t>(k)] == Control::Stress) free.push_back(k);
  Mat3 f = guess;
  for (int k = 0; k < 9; ++k)
    if (seg.control[static_cast<std::size_t>(k)] == Control::Deformation) f(k / 3, k % 3) = target(k / 3, k % 3);
  std::vector<double> history;
  OnlineState start = from;
  for (int it = 0;; ++it) {
    require(f.determinant() > 0.0, ErrorKind::Convergence, "macroscopic deformation lost positive determinant");
    OnlineStep step = model.newton_solve(f, start, dt, opt.inner_tolerance);
    start.a = step.state.a;
    if (free.empty()) return step;
    const Eigen::Index nf = static_cast<Eigen::Index>(free.size());
    Eigen::VectorXd res(nf);
    Eigen::MatrixXd jac(nf, nf);
    for (Eigen::Index r = 0; r < nf; ++r) {
      const int k = free[static_cast<std::size_t>(r)];
      res(r) = step.state.p_bar(k / 3, k % 3) - target(k / 3, k % 3);
      for (Eigen::Index c = 0; c < nf; ++c) jac(r, c) = step.tangent(k, free[static_cast<std::size_t>(c)]);
    }
    const double scale = std::max(step.state.p_bar.cwiseAbs().maxCoeff(), target.cwiseAbs().maxCoeff());
    const double rn = res.cwiseAbs().maxCoeff();
    history.push_back(rn);
    if (rn <= opt.outer_tolerance * scale || rn <= 1e-14) return step;
    if (it >= opt.max_outer) throw ConvergenceError("mixed-control Newton did not converge", history);
    const Eigen::VectorXd d = jac.partialPivLu().solve(-res);
    for (Eigen::Index r = 0; r < nf; ++r) {
      const int k = free[static_cast<std::size_t>(r)];
      f(k / 3, k % 3) += d(r);
    }
  }
}

inline Mat3 control_values(const LoadSegment& seg, const OnlineState& s) {
  Mat3 v;
  for (int k = 0; k < 9; ++k)
    v(k / 3, k % 3) = seg.control[static_cast<std::size_t>(k)] == Control::Deformation ? s.f_bar(k / 3, k % 3) : s.p_bar(k / 3, k % 3);
  return v;
}

// Advances from `from` to `target` over dt, halving on failure.
inline std::pair<OnlineStep, int> advance_split(const OdmnCpModel& model, const OnlineState& from, const LoadSegment& seg,
                                                const Mat3& target, const Mat3& guess, double dt, const DriveOptions& opt,
                                                int level) {
  try {
    return {advance(model, from, seg, target, guess, dt, opt), 1};
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::Convergence || level >= opt.max_substep_levels) throw;
    const Mat3 start = control_values(seg, from);
    const Mat3 mid = 0.5 * (start + target);
    const Mat3 mid_guess = 0.5 * (from.f_bar + guess);
    auto [first, n1] = advance_split(model, from, seg, mid, mid_guess, 0.5 * dt, opt, level + 1);
    auto [second, n2] = advance_split(model, first.state, seg, target, guess, 0.5 * dt, opt, level + 1);
    second.iterations += first.iterations;
    return {second, n1 + n2};
  }
}
}  // namespace detail

inline DriveResult drive(const OdmnCpModel& model, const LoadSchedule& schedule, const DriveOptions& opt = {}) {
  schedule.validate();
  DriveResult out;
  out.state = model.initial_state();
  out.curve.push_back({0, 0.0, out.state.f_bar, out.state.p_bar, 0.0, 0, 1});
  int step_no = 0;
  for (const auto& seg : schedule.segments) {
    const Mat3 start = detail::control_values(seg, out.state);
    Mat3 prev_increment = Mat3::Zero();
    for (int s = 1; s <= seg.steps; ++s) {
      const Mat3 target = start + (seg.target - start) * (static_cast<double>(s) / seg.steps);
      const Mat3 guess = out.state.f_bar + prev_increment;
      auto [step, substeps] = detail::advance_split(model, out.state, seg, target, guess, seg.dt, opt, 0);
      prev_increment = step.state.f_bar - out.state.f_bar;
      out.state = std::move(step.state);
      out.curve.push_back({++step_no, out.state.time, out.state.f_bar, out.state.p_bar, step.residual, step.iterations, substeps});
    }
    out.segment_end.push_back(out.curve.size() - 1);
  }
  return out;
}

/// Uniaxial modulus of curve points [begin, end]: least-squares slope of the
/// Cauchy stress sigma_11 against ln F11 over points whose |sigma_11| lies in
/// [lo, hi] times the branch peak.
inline double branch_modulus(const std::vector<CurvePoint>& curve, std::size_t begin, std::size_t end, double lo, double hi) {
  require(begin < end && end < curve.size(), ErrorKind::InvalidInput, "invalid curve branch");
  auto cauchy = [&](std::size_t k) {
    const CurvePoint& c = curve[k];
    return (c.p_bar * c.f_bar.transpose())(0, 0) / c.f_bar.determinant();
  };
  double peak = 0.0;
  for (std::size_t k = begin; k <= end; ++k) peak = std::max(peak, std::abs(cauchy(k)));
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int n = 0;
  for (std::size_t k = begin; k <= end; ++k) {
    const double y = cauchy(k), x = std::log(curve[k].f_bar(0, 0));
    if (std::abs(y) < lo * peak || std::abs(y) > hi * peak) continue;
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    ++n;
  }
  require(n >= 2, ErrorKind::InvalidInput, "too few points in the stress window");
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

// ---------------------------------------------------------------------------
// Error metrics and export

struct StressErrors {
  double mean_rel = 0.0;
  double max_rel = 0.0;
};

inline StressErrors stress_error_metrics(const std::vector<double>& pred, const std::vector<double>& ref) {
  require(pred.size() == ref.size() && !ref.empty(), ErrorKind::InvalidInput, "stress histories must have equal nonzero length");
  double peak = 0.0;
  for (double v : ref) peak = std::max(peak, std::abs(v));
  require(peak > 0.0, ErrorKind::InvalidLabel, "reference stress history is identically zero");
  StressErrors e;
  for (std::size_t k = 0; k < ref.size(); ++k) {
    const double d = std::abs(ref[k] - pred[k]) / peak;
    e.mean_rel += d;
    e.max_rel = std::max(e.max_rel, d);
  }
  e.mean_rel /= static_cast<double>(ref.size());
  return e;
}

/// Per-texture error report, values in percent.
inline nlohmann::json metrics_report(const std::map<std::string, StressErrors>& by_texture) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, e] : by_texture) j[name] = {{"mean_rel_percent", 100.0 * e.mean_rel}, {"max_rel_percent", 100.0 * e.max_rel}};
  return j;
}

inline std::map<std::string, StressErrors> parse_metrics_report(const nlohmann::json& j) {
  std::map<std::string, StressErrors> out;
  try {
    for (const auto& [name, v] : j.items())
      out[name] = {v.at("mean_rel_percent").get<double>() / 100.0, v.at("max_rel_percent").get<double>() / 100.0};
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Io, std::string("malformed metrics report: ") + e.what());
  }
  return out;
}

inline void write_curve_csv(const std::string& path, const std::vector<CurvePoint>& curve) {
  std::ofstream f(path);
  require(static_cast<bool>(f), ErrorKind::Io, "cannot open " + path + " for writing");
  f.precision(17);
  f << "step,time";
  for (const char* m : {"F", "P"})
    for (int i = 1; i <= 3; ++i)
      for (int j = 1; j <= 3; ++j) f << ',' << m << i << j;
  f << '\n';
  for (const auto& c : curve) {
    f << c.step << ',' << c.time;
    for (const Mat3* m : {&c.f_bar, &c.p_bar})
      for (int k = 0; k < 9; ++k) f << ',' << (*m)(k / 3, k % 3);
    f << '\n';
  }
}

inline nlohmann::json run_manifest(const OdmnParams& p, const CpParams& cp, const LoadSchedule& s, const DriveOptions& opt) {
  return {{"odmn_params_hash", hex64(fnv1a64(to_json(p).dump()))},
          {"material", to_json(cp)},
          {"schedule", to_json(s)},
          {"tolerances", {{"hill_mandel_relative", opt.inner_tolerance}, {"mixed_control_relative", opt.outer_tolerance}}},
          {"max_substep_levels", opt.max_substep_levels},
          {"threads", thread_count()}};
}

}  // namespace polyfm

#pragma once

// Rotation algebra for cubic crystals.
//
// Conventions:
//  * quaternions are (w, x, y, z) with Hamilton product; the rotation matrix
//    of q is the active rotation taking crystal-frame vectors to the sample
//    frame, R(q p) = R(q) R(p);
//  * Bunge Euler angles (alpha, beta, gamma) give R = Rz(alpha) Rx(beta) Rz(gamma);
//  * crystal symmetry acts on the right: q and q s are the same orientation
//    for each of the 24 proper cubic rotations s.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "polyfm/error.hpp"
#include "polyfm/rng.hpp"
#include "polyfm/tensor.hpp"

namespace polyfm {

using RotationMatrix = Mat3;

struct UnitQuaternion {
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }
  double dot(const UnitQuaternion& o) const { return w * o.w + x * o.x + y * o.y + z * o.z; }
  UnitQuaternion conjugate() const { return {w, -x, -y, -z}; }
  UnitQuaternion operator-() const { return {-w, -x, -y, -z}; }

  /// Sign representative with w > 0, or first nonzero of (x, y, z) > 0 when w = 0.
  UnitQuaternion canonical() const {
    const double comps[4] = {w, x, y, z};
    for (double c : comps) {
      if (c > 0.0) return *this;
      if (c < 0.0) return -*this;
    }
    return *this;
  }

  UnitQuaternion normalized() const {
    const double n = norm();
    return {w / n, x / n, y / n, z / n};
  }

  /// Normalizes and canonicalizes; rejects vectors far from unit length.
  static UnitQuaternion make(double w, double x, double y, double z) {
    UnitQuaternion q{w, x, y, z};
    require(std::abs(q.norm() - 1.0) <= 1e-9, ErrorKind::InvalidInput, "quaternion is not unit-norm");
    return q.normalized().canonical();
  }

  static UnitQuaternion from_axis_angle(const Vec3& axis, double angle) {
    const Vec3 a = axis.normalized();
    const double s = std::sin(0.5 * angle);
    return UnitQuaternion{std::cos(0.5 * angle), a.x() * s, a.y() * s, a.z() * s}.canonical();
  }

  friend bool operator==(const UnitQuaternion&, const UnitQuaternion&) = default;
};

inline UnitQuaternion operator*(const UnitQuaternion& a, const UnitQuaternion& b) {
  return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
          a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
          a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
          a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

/// Bunge Z-X-Z angles in radians.
struct EulerBunge {
  double alpha = 0.0, beta = 0.0, gamma = 0.0;

  /// Same rotation with alpha, gamma in [0, 2pi) and beta in [0, pi].
  EulerBunge wrapped() const {
    constexpr double two_pi = 2.0 * std::numbers::pi;
    double a = alpha, b = std::fmod(beta, two_pi), g = gamma;
    if (b < 0.0) b += two_pi;
    if (b > std::numbers::pi) {
      // Rz(a) Rx(-b) Rz(g) = Rz(a + pi) Rx(b) Rz(g + pi)
      b = two_pi - b;
      a += std::numbers::pi;
      g += std::numbers::pi;
    }
    a = std::fmod(a, two_pi);
    if (a < 0.0) a += two_pi;
    g = std::fmod(g, two_pi);
    if (g < 0.0) g += two_pi;
    if (a >= two_pi) a = 0.0;
    if (g >= two_pi) g = 0.0;
    return {a, b, g};
  }
};

inline Mat3 rot_x(double t) {
  Mat3 r;
  r << 1, 0, 0, 0, std::cos(t), -std::sin(t), 0, std::sin(t), std::cos(t);
  return r;
}

inline Mat3 rot_z(double t) {
  Mat3 r;
  r << std::cos(t), -std::sin(t), 0, std::sin(t), std::cos(t), 0, 0, 0, 1;
  return r;
}

inline Mat3 euler_to_rotmat(const EulerBunge& e) { return rot_z(e.alpha) * rot_x(e.beta) * rot_z(e.gamma); }

/// Derivatives of the Bunge rotation matrix with respect to (alpha, beta, gamma).
inline std::array<Mat3, 3> euler_rotmat_derivatives(const EulerBunge& e) {
  Mat3 dz;
  dz << 0, -1, 0, 1, 0, 0, 0, 0, 0;
  Mat3 dx;
  dx << 0, 0, 0, 0, 0, -1, 0, 1, 0;
  const Mat3 za = rot_z(e.alpha), xb = rot_x(e.beta), zg = rot_z(e.gamma);
  return {dz * za * xb * zg, za * dx * xb * zg, za * xb * dz * zg};
}

inline RotationMatrix quat_to_rotmat(const UnitQuaternion& q) {
  require(std::abs(q.norm() - 1.0) <= 1e-9, ErrorKind::InvalidInput, "quaternion is not unit-norm");
  const double w = q.w, x = q.x, y = q.y, z = q.z;
  RotationMatrix r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

inline UnitQuaternion rotmat_to_quat(const RotationMatrix& r) {
  // Shepperd's method: branch on the largest of the four squared components.
  const double tr = r.trace();
  const double cand[4] = {tr, r(0, 0), r(1, 1), r(2, 2)};
  const int k = static_cast<int>(std::max_element(cand, cand + 4) - cand);
  UnitQuaternion q;
  if (k == 0) {
    const double s = 2.0 * std::sqrt(1.0 + tr);
    q = {0.25 * s, (r(2, 1) - r(1, 2)) / s, (r(0, 2) - r(2, 0)) / s, (r(1, 0) - r(0, 1)) / s};
  } else if (k == 1) {
    const double s = 2.0 * std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2));
    q = {(r(2, 1) - r(1, 2)) / s, 0.25 * s, (r(0, 1) + r(1, 0)) / s, (r(0, 2) + r(2, 0)) / s};
  } else if (k == 2) {
    const double s = 2.0 * std::sqrt(1.0 - r(0, 0) + r(1, 1) - r(2, 2));
    q = {(r(0, 2) - r(2, 0)) / s, (r(0, 1) + r(1, 0)) / s, 0.25 * s, (r(1, 2) + r(2, 1)) / s};
  } else {
    const double s = 2.0 * std::sqrt(1.0 - r(0, 0) - r(1, 1) + r(2, 2));
    q = {(r(1, 0) - r(0, 1)) / s, (r(0, 2) + r(2, 0)) / s, (r(1, 2) + r(2, 1)) / s, 0.25 * s};
  }
  return q.normalized().canonical();
}

inline UnitQuaternion euler_to_quat(const EulerBunge& e) {
  const EulerBunge w = e.wrapped();
  const UnitQuaternion qa{std::cos(0.5 * w.alpha), 0, 0, std::sin(0.5 * w.alpha)};
  const UnitQuaternion qb{std::cos(0.5 * w.beta), std::sin(0.5 * w.beta), 0, 0};
  const UnitQuaternion qg{std::cos(0.5 * w.gamma), 0, 0, std::sin(0.5 * w.gamma)};
  return (qa * qb * qg).normalized().canonical();
}

inline EulerBunge quat_to_euler(const UnitQuaternion& q) {
  const Mat3 r = quat_to_rotmat(q);
  const double beta = std::acos(std::clamp(r(2, 2), -1.0, 1.0));
  double alpha, gamma;
  if (std::abs(std::sin(beta)) > 1e-10) {
    alpha = std::atan2(r(0, 2), -r(1, 2));
    gamma = std::atan2(r(2, 0), r(2, 1));
  } else {
    // Gimbal lock: only alpha + gamma (beta = 0) or alpha - gamma (beta = pi)
    // is defined; put all of it into alpha.
    alpha = std::atan2(r(1, 0), r(0, 0));
    gamma = 0.0;
  }
  return EulerBunge{alpha, beta, gamma}.wrapped();
}

/// The 24 proper rotations of the cubic point group m-3m as quaternions.
inline const std::array<UnitQuaternion, 24>& cubic_symmetry() {
  static const std::array<UnitQuaternion, 24> ops = [] {
    const double c = std::sqrt(0.5);
    return std::array<UnitQuaternion, 24>{{
        {1, 0, 0, 0},
        // 180 deg about <100>
        {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1},
        // +-90 deg about <100>
        {c, c, 0, 0}, {c, -c, 0, 0}, {c, 0, c, 0}, {c, 0, -c, 0}, {c, 0, 0, c}, {c, 0, 0, -c},
        // +-120 deg about <111>
        {0.5, 0.5, 0.5, 0.5}, {0.5, -0.5, -0.5, -0.5}, {0.5, 0.5, -0.5, -0.5}, {0.5, -0.5, 0.5, 0.5},
        {0.5, -0.5, 0.5, -0.5}, {0.5, 0.5, -0.5, 0.5}, {0.5, -0.5, -0.5, 0.5}, {0.5, 0.5, 0.5, -0.5},
        // 180 deg about <110>
        {0, c, c, 0}, {0, c, -c, 0}, {0, c, 0, c}, {0, c, 0, -c}, {0, 0, c, c}, {0, 0, c, -c},
    }};
  }();
  return ops;
}

namespace detail {
inline constexpr double kTieTolerance = 1e-12;

/// True when a is the preferred fundamental-zone representative over b.
inline bool fz_prefer(const UnitQuaternion& a, const UnitQuaternion& b) {
  if (a.w > b.w + kTieTolerance) return true;
  if (b.w > a.w + kTieTolerance) return false;
  if (a.x != b.x) return a.x > b.x;
  if (a.y != b.y) return a.y > b.y;
  return a.z > b.z;
}
}  // namespace detail

/// Cubic-equivalent representative q s with the largest scalar part.
inline UnitQuaternion reduce_to_fz(const UnitQuaternion& q) {
  require(std::abs(q.norm() - 1.0) <= 1e-9, ErrorKind::InvalidInput, "quaternion is not unit-norm");
  UnitQuaternion best = q.canonical();
  for (const auto& s : cubic_symmetry()) {
    const UnitQuaternion c = (q * s).canonical();
    if (detail::fz_prefer(c, best)) best = c;
  }
  return best;
}

/// Cosine of half the disorientation angle, max_s |q1 . (q2 s)|.
inline double disorientation_cos_half(const UnitQuaternion& q1, const UnitQuaternion& q2) {
  double best = 0.0;
  for (const auto& s : cubic_symmetry()) best = std::max(best, std::abs(q1.dot(q2 * s)));
  return std::min(best, 1.0);
}

/// Minimum rotation angle between q1 and q2 over cubic symmetry, radians.
inline double misorientation_angle(const UnitQuaternion& q1, const UnitQuaternion& q2) {
  return 2.0 * std::acos(disorientation_cos_half(q1, q2));
}

/// Rotation angle of a single quaternion (no symmetry), radians in [0, pi].
inline double rotation_angle(const UnitQuaternion& q) {
  return 2.0 * std::acos(std::min(1.0, std::abs(q.w)));
}

/// C'_ijkl = R_ia R_jb R_kc R_ld C_abcd in Voigt form.
inline StiffnessVoigt rotate_stiffness(const StiffnessVoigt& c, const RotationMatrix& r) {
  const Mat6 m = voigt::bond(r);
  StiffnessVoigt out = m * c * m.transpose();
  return 0.5 * (out + out.transpose());
}

/// Haar-uniform random rotation (Shoemake's subgroup algorithm).
inline UnitQuaternion random_quaternion(Rng& rng) {
  const double u1 = rng.uniform(), u2 = rng.uniform(), u3 = rng.uniform();
  const double a = std::sqrt(1.0 - u1), b = std::sqrt(u1);
  const double t2 = 2.0 * std::numbers::pi * u2, t3 = 2.0 * std::numbers::pi * u3;
  return UnitQuaternion{b * std::cos(t3), a * std::sin(t2), a * std::cos(t2), b * std::sin(t3)}
      .normalized()
      .canonical();
}

inline Vec3 random_unit_vector(Rng& rng) {
  const double z = rng.uniform(-1.0, 1.0);
  const double t = 2.0 * std::numbers::pi * rng.uniform();
  const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
  return {r * std::cos(t), r * std::sin(t), z};
}

/// Rotation angle drawn so that the rotation is Haar-uniform inside the ball
/// of radius max_angle around the identity (density proportional to 1 - cos).
inline double random_ball_angle(Rng& rng, double max_angle) {
  if (max_angle <= 0.0) return 0.0;
  const double target = rng.uniform() * (max_angle - std::sin(max_angle));
  double w = std::cbrt(6.0 * target);  // small-angle start
  w = std::min(w, max_angle);
  for (int it = 0; it < 50; ++it) {
    const double f = w - std::sin(w) - target;
    const double df = 1.0 - std::cos(w);
    if (df <= 0.0) break;
    const double step = f / df;
    w = std::clamp(w - step, 0.0, max_angle);
    if (std::abs(step) < 1e-15) break;
  }
  return w;
}

/// Haar-uniform rotation within max_angle of the identity.
inline UnitQuaternion random_ball_rotation(Rng& rng, double max_angle) {
  const Vec3 axis = random_unit_vector(rng);
  const double angle = random_ball_angle(rng, max_angle);
  return UnitQuaternion::from_axis_angle(axis, angle);
}

inline double deg2rad(double d) { return d * std::numbers::pi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / std::numbers::pi; }

}  // namespace polyfm

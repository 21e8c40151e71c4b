#pragma once

// Periodic small-strain linear-elastic homogenization with the basic
// fixed-point spectral scheme and an isotropic reference medium.

#include <fftw3.h>

#include <array>
#include <cmath>
#include <complex>
#include <cstring>
#include <memory>
#include <mutex>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "polyfm/error.hpp"
#include "polyfm/hash.hpp"
#include "polyfm/orientation.hpp"
#include "polyfm/parallel.hpp"
#include "polyfm/rve.hpp"
#include "polyfm/tensor.hpp"

namespace polyfm {

struct SpectralOptions {
  double tolerance = 1e-8;
  int max_iterations = 1000;
};

/// Converged strain field and volume averages for one macroscopic load.
struct ElasticSolution {
  std::vector<Vec6> strain;  // per voxel, Voigt with engineering shear
  Vec6 mean_stress = Vec6::Zero();
  Vec6 mean_strain = Vec6::Zero();
  int iterations = 0;
  double residual = 0.0;
  std::vector<double> residual_history;
};

struct HomogenizationResult {
  StiffnessVoigt c_bar = StiffnessVoigt::Zero();
  double raw_asymmetry = 0.0;  // max |C - C^T| before symmetrization
  int iterations = 0;          // worst case over the six loads
  double residual = 0.0;
  std::string config_hash;
};

namespace detail {

struct FftwFree {
  void operator()(void* p) const noexcept { fftw_free(p); }
};
template <class T>
using FftwBuffer = std::unique_ptr<T[], FftwFree>;

template <class T>
FftwBuffer<T> fftw_buffer(std::size_t n) {
  auto* p = static_cast<T*>(fftw_malloc(sizeof(T) * n));
  if (!p) throw std::bad_alloc();
  return FftwBuffer<T>(p);
}

/// The FFTW planner is not thread-safe.
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

/// Batched 3D real transforms of six fields on an (nz, ny, nx) grid.
class SixFieldFft {
 public:
  explicit SixFieldFft(const Dims& d)
      : dims_(d),
        real_n_(d.voxels()),
        complex_n_(std::size_t{d.nz} * d.ny * (d.nx / 2 + 1)),
        real_(fftw_buffer<double>(6 * real_n_)),
        spec_(fftw_buffer<fftw_complex>(6 * complex_n_)),
        scratch_(fftw_buffer<fftw_complex>(6 * complex_n_)) {
    const int n[3] = {static_cast<int>(d.nz), static_cast<int>(d.ny), static_cast<int>(d.nx)};
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    forward_ = fftw_plan_many_dft_r2c(3, n, 6, real_.get(), nullptr, 1, static_cast<int>(real_n_), spec_.get(),
                                      nullptr, 1, static_cast<int>(complex_n_), FFTW_ESTIMATE);
    backward_ = fftw_plan_many_dft_c2r(3, n, 6, scratch_.get(), nullptr, 1, static_cast<int>(complex_n_), real_.get(),
                                       nullptr, 1, static_cast<int>(real_n_), FFTW_ESTIMATE);
    if (!forward_ || !backward_) fail(ErrorKind::Numeric, "FFTW plan creation failed");
  }
  SixFieldFft(const SixFieldFft&) = delete;
  SixFieldFft& operator=(const SixFieldFft&) = delete;
  ~SixFieldFft() {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    fftw_destroy_plan(forward_);
    fftw_destroy_plan(backward_);
  }

  double* real(int c) { return real_.get() + c * real_n_; }
  fftw_complex* spectrum(int c) { return spec_.get() + c * complex_n_; }
  std::size_t real_size() const { return real_n_; }
  std::size_t complex_size() const { return complex_n_; }

  void forward() { fftw_execute(forward_); }
  /// Unnormalized inverse of `src` (six spectra) into the real buffers.
  void backward(const fftw_complex* src) {
    std::memcpy(scratch_.get(), src, sizeof(fftw_complex) * 6 * complex_n_);
    fftw_execute(backward_);
  }

 private:
  Dims dims_;
  std::size_t real_n_, complex_n_;
  FftwBuffer<double> real_;
  FftwBuffer<fftw_complex> spec_, scratch_;
  fftw_plan forward_ = nullptr, backward_ = nullptr;
};

/// Nyquist planes of even grids have no well-defined derivative; their strain
/// fluctuation is held at zero and they are left out of the residual.
inline bool is_nyquist(std::size_t i, std::uint32_t n) { return n % 2 == 0 && 2 * i == n; }

inline double wave_number(std::size_t i, std::uint32_t n) {
  const double k = (2 * i > n) ? static_cast<double>(i) - static_cast<double>(n) : static_cast<double>(i);
  return 2.0 * std::numbers::pi * k / static_cast<double>(n);
}

}  // namespace detail

/// Spectral solver for a voxel field of per-grain stiffnesses.
class SpectralSolver {
 public:
  SpectralSolver(Dims dims, std::vector<std::uint32_t> phase, std::vector<StiffnessVoigt> stiffness,
                 SpectralOptions opts = {})
      : dims_(dims), phase_(std::move(phase)), stiffness_(std::move(stiffness)), opts_(opts), fft_(dims) {
    require(phase_.size() == dims_.voxels(), ErrorKind::InvalidInput, "phase map size does not match dims");
    require(opts_.tolerance > 0.0, ErrorKind::InvalidConfig, "tolerance must be positive");
    require(opts_.max_iterations >= 1, ErrorKind::InvalidConfig, "max_iterations must be >= 1");
    for (const auto& c : stiffness_) {
      Eigen::SelfAdjointEigenSolver<Mat6> es(0.5 * (c + c.transpose()));
      require(es.eigenvalues().minCoeff() > 0.0, ErrorKind::InvalidInput, "stiffness is not positive definite");
    }
    StiffnessVoigt mean = StiffnessVoigt::Zero();
    std::vector<double> count(stiffness_.size(), 0.0);
    for (auto p : phase_) {
      require(p < stiffness_.size(), ErrorKind::InvalidInput, "phase id out of range");
      count[p] += 1.0;
    }
    for (std::size_t p = 0; p < stiffness_.size(); ++p) mean += count[p] * stiffness_[p];
    mean /= static_cast<double>(phase_.size());
    reference_ = isotropic_projection(mean);
  }

  const IsotropicModuli& reference() const noexcept { return reference_; }

  /// Solves for the periodic strain field whose average is eps_macro
  /// (Voigt, engineering shear).
  ElasticSolution solve(const Vec6& eps_macro) {
    const std::size_t nv = dims_.voxels(), nc = fft_.complex_size();
    const double inv_n = 1.0 / static_cast<double>(nv);
    const double mu0 = reference_.shear, lam0 = reference_.lambda();
    const double coupling = (lam0 + mu0) / (lam0 + 2.0 * mu0);
    const std::size_t hx = dims_.nx / 2 + 1;

    // Strain spectrum in tensor components (11, 22, 33, 23, 13, 12).
    std::vector<std::complex<double>> eps_hat(6 * nc, 0.0);
    const Mat3 e_macro = voigt::strain_from_voigt(eps_macro);
    for (int c = 0; c < 6; ++c) {
      const auto [i, j] = voigt::kPairs[c];
      eps_hat[c * nc] = e_macro(i, j) * static_cast<double>(nv);
    }

    ElasticSolution sol;
    sol.strain.resize(nv);
    const Vec6 eng_scale = (Vec6() << 1, 1, 1, 2, 2, 2).finished();
    for (int it = 1;; ++it) {
      fft_.backward(reinterpret_cast<const fftw_complex*>(eps_hat.data()));
      parallel_for(nv, [&](std::size_t v) {
        Vec6 e;
        for (int c = 0; c < 6; ++c) e(c) = fft_.real(c)[v] * inv_n * eng_scale(c);
        sol.strain[v] = e;
        const Vec6 s = stiffness_[phase_[v]] * e;
        for (int c = 0; c < 6; ++c) fft_.real(c)[v] = s(c);
      });
      fft_.forward();

      // Equilibrium residual sqrt(<|div sigma|^2>) / |<sigma>| via Parseval.
      std::vector<double> partial(dims_.nz, 0.0);
      std::array<std::complex<double>, 6> s0;
      for (int c = 0; c < 6; ++c) s0[c] = {fft_.spectrum(c)[0][0], fft_.spectrum(c)[0][1]};
      parallel_for(dims_.nz, [&](std::size_t z) {
        double acc = 0.0;
        for (std::size_t y = 0; y < dims_.ny; ++y)
          for (std::size_t x = 0; x < hx; ++x) {
            const std::size_t k = x + hx * (y + dims_.ny * z);
            if (k == 0) continue;
            if (detail::is_nyquist(x, dims_.nx) || detail::is_nyquist(y, dims_.ny) || detail::is_nyquist(z, dims_.nz)) {
              for (int c = 0; c < 6; ++c) eps_hat[c * nc + k] = 0.0;
              continue;
            }
            const Vec3 xi(detail::wave_number(x, dims_.nx), detail::wave_number(y, dims_.ny),
                          detail::wave_number(z, dims_.nz));
            std::array<std::complex<double>, 6> s;
            for (int c = 0; c < 6; ++c) s[c] = {fft_.spectrum(c)[k][0], fft_.spectrum(c)[k][1]};
            const std::complex<double> tau[3] = {s[0] * xi(0) + s[5] * xi(1) + s[4] * xi(2),
                                                 s[5] * xi(0) + s[1] * xi(1) + s[3] * xi(2),
                                                 s[4] * xi(0) + s[3] * xi(1) + s[2] * xi(2)};
            const double mult = x == 0 ? 1.0 : 2.0;
            acc += mult * (std::norm(tau[0]) + std::norm(tau[1]) + std::norm(tau[2]));

            const double xi2 = xi.squaredNorm();
            const std::complex<double> n_tau = (tau[0] * xi(0) + tau[1] * xi(1) + tau[2] * xi(2)) / xi2;
            std::complex<double> u[3];
            for (int a = 0; a < 3; ++a) u[a] = (tau[a] - coupling * n_tau * xi(a)) / (mu0 * xi2);
            for (int c = 0; c < 6; ++c) {
              const auto [i, j] = voigt::kPairs[c];
              eps_hat[c * nc + k] -= 0.5 * (xi(i) * u[j] + xi(j) * u[i]);
            }
          }
        partial[z] = acc;
      });
      double total = 0.0;
      for (double p : partial) total += p;
      double mean_norm2 = 0.0;
      for (int c = 0; c < 6; ++c) mean_norm2 += (c < 3 ? 1.0 : 2.0) * std::norm(s0[c]);
      const double residual = mean_norm2 > 0.0 ? std::sqrt(total / mean_norm2) : std::sqrt(total) * inv_n;
      sol.residual_history.push_back(residual);

      if (residual <= opts_.tolerance) {
        sol.iterations = it;
        sol.residual = residual;
        for (int c = 0; c < 6; ++c) sol.mean_stress(c) = s0[c].real() * inv_n;
        Vec6 mean_e = Vec6::Zero();
        for (const auto& e : sol.strain) mean_e += e;
        sol.mean_strain = mean_e * inv_n;
        return sol;
      }
      if (it >= opts_.max_iterations || !std::isfinite(residual))
        throw ConvergenceError("spectral solver did not reach tolerance " + std::to_string(opts_.tolerance) + " in " +
                                   std::to_string(it) + " iterations (residual " + std::to_string(residual) + ")",
                               sol.residual_history);
    }
  }

 private:
  Dims dims_;
  std::vector<std::uint32_t> phase_;
  std::vector<StiffnessVoigt> stiffness_;
  SpectralOptions opts_;
  IsotropicModuli reference_{};
  detail::SixFieldFft fft_;
};

/// Crystal stiffness rotated into the sample frame for every grain.
inline std::vector<StiffnessVoigt> grain_stiffnesses(const Rve& rve, const StiffnessVoigt& c_crystal) {
  std::vector<StiffnessVoigt> out;
  out.reserve(rve.grain_orientations.size());
  for (const auto& q : rve.grain_orientations) out.push_back(rotate_stiffness(c_crystal, quat_to_rotmat(q)));
  return out;
}

inline ElasticSolution solve_unit_strain(const Rve& rve, const StiffnessVoigt& c_crystal, const Vec6& eps_macro,
                                         SpectralOptions opts = {}) {
  rve.validate();
  SpectralSolver solver(rve.dims(), rve.grain_map.grain_id, grain_stiffnesses(rve, c_crystal), opts);
  return solver.solve(eps_macro);
}

inline std::string solver_config_hash(const SpectralOptions& opts, const StiffnessVoigt& c_crystal) {
  nlohmann::json j{{"scheme", "basic"}, {"tolerance", opts.tolerance}, {"max_iterations", opts.max_iterations}};
  for (int a = 0; a < 6; ++a)
    for (int b = a; b < 6; ++b) j["c_crystal"].push_back(c_crystal(a, b));
  return hex64(fnv1a64(j.dump()));
}

/// Effective stiffness from the six unit macroscopic strains; column k is the
/// mean stress under unit strain k.
inline HomogenizationResult homogenize_phases(const Dims& dims, const std::vector<std::uint32_t>& phase,
                                              const std::vector<StiffnessVoigt>& stiffness, SpectralOptions opts = {}) {
  SpectralSolver solver(dims, phase, stiffness, opts);
  HomogenizationResult res;
  for (int k = 0; k < 6; ++k) {
    const ElasticSolution sol = solver.solve(Vec6::Unit(k));
    res.c_bar.col(k) = sol.mean_stress;
    res.iterations = std::max(res.iterations, sol.iterations);
    res.residual = std::max(res.residual, sol.residual);
  }
  res.raw_asymmetry = (res.c_bar - res.c_bar.transpose()).cwiseAbs().maxCoeff();
  res.c_bar = (0.5 * (res.c_bar + res.c_bar.transpose())).eval();
  return res;
}

inline HomogenizationResult homogenize_elastic(const Rve& rve, const StiffnessVoigt& c_crystal, SpectralOptions opts = {}) {
  rve.validate();
  HomogenizationResult res = homogenize_phases(rve.dims(), rve.grain_map.grain_id, grain_stiffnesses(rve, c_crystal), opts);
  res.config_hash = solver_config_hash(opts, c_crystal);
  return res;
}

/// Voigt (arithmetic) and Reuss (harmonic) averages over voxels.
struct StiffnessBounds {
  StiffnessVoigt voigt;
  StiffnessVoigt reuss;
};

inline StiffnessBounds stiffness_bounds(const Rve& rve, const StiffnessVoigt& c_crystal) {
  const auto cs = grain_stiffnesses(rve, c_crystal);
  const auto sizes = rve.grain_map.grain_sizes();
  StiffnessVoigt v = StiffnessVoigt::Zero(), s = StiffnessVoigt::Zero();
  const double n = static_cast<double>(rve.dims().voxels());
  for (std::size_t g = 0; g < cs.size(); ++g) {
    const double f = static_cast<double>(sizes[g]) / n;
    v += f * cs[g];
    s += f * cs[g].inverse();
  }
  return {v, s.inverse()};
}

/// max/min directional Young's modulus over a Fibonacci sphere, minus one.
inline double young_anisotropy(const StiffnessVoigt& c, int directions = 2000) {
  const Mat6 compliance = c.inverse();
  double lo = 1e300, hi = 0.0;
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < directions; ++i) {
    const double z = 1.0 - 2.0 * (i + 0.5) / directions;
    const double r = std::sqrt(1.0 - z * z);
    const Vec3 d(r * std::cos(golden * i), r * std::sin(golden * i), z);
    const double e = directional_young(compliance, d);
    lo = std::min(lo, e);
    hi = std::max(hi, e);
  }
  return hi / lo - 1.0;
}

inline nlohmann::json to_json(const HomogenizationResult& r) {
  nlohmann::json c = nlohmann::json::array();
  for (int a = 0; a < 6; ++a)
    for (int b = a; b < 6; ++b) c.push_back(r.c_bar(a, b));
  return {{"c_bar_upper", c}, {"iterations", r.iterations}, {"residual", r.residual}, {"config_hash", r.config_hash}};
}

inline StiffnessVoigt stiffness_from_upper(const nlohmann::json& upper) {
  require(upper.is_array() && upper.size() == 21, ErrorKind::Io, "expected 21 upper-triangle stiffness entries");
  StiffnessVoigt c;
  int k = 0;
  for (int a = 0; a < 6; ++a)
    for (int b = a; b < 6; ++b) c(a, b) = c(b, a) = upper[k++].get<double>();
  return c;
}

}  // namespace polyfm

#pragma once

// Periodic equiaxed polycrystal synthesis on a voxel grid.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "polyfm/error.hpp"
#include "polyfm/orientation.hpp"
#include "polyfm/parallel.hpp"
#include "polyfm/rng.hpp"
#include "polyfm/texture.hpp"

namespace polyfm {

struct Dims {
  std::uint32_t nx = 0, ny = 0, nz = 0;

  std::size_t voxels() const noexcept { return std::size_t{nx} * ny * nz; }
  /// Linear index with x fastest.
  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const noexcept { return x + nx * (y + ny * z); }
  friend bool operator==(const Dims&, const Dims&) = default;
};

struct GrainMap {
  Dims dims;
  std::vector<std::uint32_t> grain_id;  // x-fastest
  std::uint32_t n_grains = 0;

  void validate() const {
    require(grain_id.size() == dims.voxels(), ErrorKind::InvalidInput, "grain map size does not match dims");
    std::vector<std::uint8_t> seen(n_grains, 0);
    for (auto g : grain_id) {
      require(g < n_grains, ErrorKind::InvalidInput, "grain id out of range");
      seen[g] = 1;
    }
    for (auto s : seen) require(s != 0, ErrorKind::InvalidInput, "grain without voxels");
  }

  std::vector<std::size_t> grain_sizes() const {
    std::vector<std::size_t> sizes(n_grains, 0);
    for (auto g : grain_id) ++sizes[g];
    return sizes;
  }
};

struct Rve {
  GrainMap grain_map;
  std::vector<UnitQuaternion> grain_orientations;

  const Dims& dims() const noexcept { return grain_map.dims; }

  void validate() const {
    grain_map.validate();
    require(grain_orientations.size() == grain_map.n_grains, ErrorKind::InvalidInput,
            "orientation count does not match grain count");
  }

  const UnitQuaternion& voxel_orientation(std::size_t v) const { return grain_orientations[grain_map.grain_id[v]]; }
};

namespace detail {
inline double periodic_delta(double a, double b, double n) {
  double d = std::abs(a - b);
  return d > 0.5 * n ? n - d : d;
}
}  // namespace detail

/// Voronoi tessellation about explicit seed points (voxel units, periodic).
/// Voxel centres sit at integer + 0.5. Seeds that capture no voxel are dropped
/// and the surviving grains are numbered in seed order.
inline GrainMap periodic_voronoi_from_seeds(const Dims& dims, const std::vector<std::array<double, 3>>& seeds) {
  require(!seeds.empty(), ErrorKind::InvalidConfig, "at least one seed is required");
  require(seeds.size() <= dims.voxels(), ErrorKind::InvalidConfig, "more seeds than voxels");
  GrainMap gm;
  gm.dims = dims;
  gm.grain_id.assign(dims.voxels(), 0);
  const double nx = dims.nx, ny = dims.ny, nz = dims.nz;
  const std::size_t ns = seeds.size();

  parallel_for(dims.nz, [&](std::size_t z) {
    for (std::size_t y = 0; y < dims.ny; ++y)
      for (std::size_t x = 0; x < dims.nx; ++x) {
        const double px = x + 0.5, py = y + 0.5, pz = z + 0.5;
        double best = std::numeric_limits<double>::max();
        std::uint32_t best_s = 0;
        for (std::size_t s = 0; s < ns; ++s) {
          const double dx = detail::periodic_delta(px, seeds[s][0], nx);
          const double dy = detail::periodic_delta(py, seeds[s][1], ny);
          const double dz = detail::periodic_delta(pz, seeds[s][2], nz);
          const double d2 = dx * dx + dy * dy + dz * dz;
          if (d2 < best) {
            best = d2;
            best_s = static_cast<std::uint32_t>(s);
          }
        }
        gm.grain_id[dims.index(x, y, z)] = best_s;
      }
  });

  std::vector<std::uint32_t> relabel(ns, std::numeric_limits<std::uint32_t>::max());
  for (auto g : gm.grain_id) relabel[g] = 0;
  std::uint32_t next = 0;
  for (auto& r : relabel)
    if (r == 0) r = next++;
  for (auto& g : gm.grain_id) g = relabel[g];
  gm.n_grains = next;
  return gm;
}

/// Hard-core exclusion radius as a fraction of the mean seed spacing
/// (V / n)^(1/3). Zero gives a Poisson seed field.
inline constexpr double kDefaultSeedExclusion = 0.7;

/// Random sequential addition of seeds with a periodic exclusion radius.
/// Falls back to unconstrained draws once the attempt budget runs out.
inline std::vector<std::array<double, 3>> random_seeds(const Dims& dims, std::size_t n_seeds, std::uint64_t seed,
                                                        double exclusion = kDefaultSeedExclusion) {
  Rng rng = Rng::stream(seed, {0x564f524fULL});
  const double spacing = std::cbrt(static_cast<double>(dims.voxels()) / static_cast<double>(n_seeds));
  const double min_d2 = std::pow(exclusion * spacing, 2);
  const std::size_t budget = 1000 * n_seeds;
  std::vector<std::array<double, 3>> seeds;
  seeds.reserve(n_seeds);
  std::size_t attempts = 0;
  while (seeds.size() < n_seeds) {
    const std::array<double, 3> p{rng.uniform(0.0, dims.nx), rng.uniform(0.0, dims.ny), rng.uniform(0.0, dims.nz)};
    bool accept = ++attempts > budget || min_d2 == 0.0;
    if (!accept) {
      accept = true;
      for (const auto& q : seeds) {
        const double dx = detail::periodic_delta(p[0], q[0], dims.nx);
        const double dy = detail::periodic_delta(p[1], q[1], dims.ny);
        const double dz = detail::periodic_delta(p[2], q[2], dims.nz);
        if (dx * dx + dy * dy + dz * dz < min_d2) {
          accept = false;
          break;
        }
      }
    }
    if (accept) seeds.push_back(p);
  }
  return seeds;
}

/// Periodic Voronoi grain map with hard-core random seeds.
inline GrainMap generate_periodic_voronoi(const Dims& dims, std::size_t n_seeds, std::uint64_t seed,
                                          double exclusion = kDefaultSeedExclusion) {
  require(n_seeds >= 1, ErrorKind::InvalidConfig, "n_seeds must be >= 1");
  require(n_seeds <= dims.voxels(), ErrorKind::InvalidConfig, "n_seeds exceeds the voxel count");
  return periodic_voronoi_from_seeds(dims, random_seeds(dims, n_seeds, seed, exclusion));
}

/// Orientation source for grain assignment.
using OrientationSource = std::variant<OdfSampler, TextureSampler>;

/// One draw per grain in grain-id order.
inline Rve assign_orientations(GrainMap gm, const OrientationSource& source, Rng& rng) {
  gm.validate();
  Rve rve;
  rve.grain_orientations.reserve(gm.n_grains);
  for (std::uint32_t g = 0; g < gm.n_grains; ++g) {
    const UnitQuaternion q = std::visit(
        [&](const auto& s) -> UnitQuaternion {
          if constexpr (std::is_same_v<std::decay_t<decltype(s)>, OdfSampler>)
            return s.draw(rng);
          else
            return s.next(rng);
        },
        source);
    rve.grain_orientations.push_back(reduce_to_fz(q));
  }
  rve.grain_map = std::move(gm);
  return rve;
}

/// Voxel quaternion field, layout ((z * ny + y) * nx + x) * 4 + c.
struct QuaternionField {
  Dims dims;
  std::vector<double> data;

  const double* voxel(std::size_t v) const { return data.data() + 4 * v; }
};

inline QuaternionField rve_to_tensor(const Rve& rve) {
  rve.validate();
  QuaternionField f;
  f.dims = rve.dims();
  f.data.resize(4 * f.dims.voxels());
  for (std::size_t v = 0; v < f.dims.voxels(); ++v) {
    const UnitQuaternion q = rve.voxel_orientation(v).canonical();
    f.data[4 * v + 0] = q.w;
    f.data[4 * v + 1] = q.x;
    f.data[4 * v + 2] = q.y;
    f.data[4 * v + 3] = q.z;
  }
  return f;
}

/// Unordered pairs of grains sharing a voxel face, wrap-around included.
inline std::set<std::pair<std::uint32_t, std::uint32_t>> grain_adjacency(const GrainMap& gm, bool periodic = true) {
  std::set<std::pair<std::uint32_t, std::uint32_t>> adj;
  const Dims& d = gm.dims;
  for (std::size_t z = 0; z < d.nz; ++z)
    for (std::size_t y = 0; y < d.ny; ++y)
      for (std::size_t x = 0; x < d.nx; ++x) {
        const auto a = gm.grain_id[d.index(x, y, z)];
        const std::size_t nb[3][3] = {{x + 1, y, z}, {x, y + 1, z}, {x, y, z + 1}};
        for (const auto& n : nb) {
          std::size_t ux = n[0], uy = n[1], uz = n[2];
          if (ux == d.nx || uy == d.ny || uz == d.nz) {
            if (!periodic) continue;
            ux %= d.nx;
            uy %= d.ny;
            uz %= d.nz;
          }
          const auto b = gm.grain_id[d.index(ux, uy, uz)];
          if (a != b) adj.emplace(std::min(a, b), std::max(a, b));
        }
      }
  return adj;
}

/// Per-grain aspect ratio sqrt(l_max / l_min) of the voxel second-moment
/// tensor, treating voxels as unit cubes and unwrapping positions periodically
/// about the grain's first voxel.
inline std::vector<double> grain_aspect_ratios(const GrainMap& gm) {
  const Dims& d = gm.dims;
  const std::uint32_t ng = gm.n_grains;
  std::vector<std::array<double, 3>> ref(ng);
  std::vector<std::uint8_t> has_ref(ng, 0);
  std::vector<Vec3> sum(ng, Vec3::Zero());
  std::vector<Mat3> sum2(ng, Mat3::Zero());
  std::vector<double> count(ng, 0.0);
  auto unwrap = [](double v, double r, double n) {
    double dv = v - r;
    if (dv > 0.5 * n) dv -= n;
    if (dv < -0.5 * n) dv += n;
    return dv;
  };
  for (std::size_t z = 0; z < d.nz; ++z)
    for (std::size_t y = 0; y < d.ny; ++y)
      for (std::size_t x = 0; x < d.nx; ++x) {
        const auto g = gm.grain_id[d.index(x, y, z)];
        if (!has_ref[g]) {
          ref[g] = {double(x), double(y), double(z)};
          has_ref[g] = 1;
        }
        const Vec3 p(unwrap(x, ref[g][0], d.nx), unwrap(y, ref[g][1], d.ny), unwrap(z, ref[g][2], d.nz));
        sum[g] += p;
        sum2[g] += p * p.transpose();
        count[g] += 1.0;
      }
  std::vector<double> ratios(ng);
  for (std::uint32_t g = 0; g < ng; ++g) {
    const Vec3 mean = sum[g] / count[g];
    Mat3 cov = sum2[g] / count[g] - mean * mean.transpose() + Mat3::Identity() / 12.0;
    Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
    const auto ev = es.eigenvalues();
    ratios[g] = std::sqrt(ev(2) / ev(0));
  }
  return ratios;
}

// ---------------------------------------------------------------------------
// Binary format (little-endian):
//   "RVE1", u32 nx, ny, nz, n_grains, n_grains x 4 float64 (w, x, y, z),
//   nx*ny*nz u32 grain ids (x fastest).

static_assert(std::endian::native == std::endian::little, "RVE binary I/O assumes a little-endian host");

inline void write_rve(const std::string& path, const Rve& rve) {
  rve.validate();
  std::ofstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorKind::Io, "cannot open " + path + " for writing");
  f.write("RVE1", 4);
  const std::uint32_t hdr[4] = {rve.dims().nx, rve.dims().ny, rve.dims().nz, rve.grain_map.n_grains};
  f.write(reinterpret_cast<const char*>(hdr), sizeof(hdr));
  for (const auto& q : rve.grain_orientations) {
    const double c[4] = {q.w, q.x, q.y, q.z};
    f.write(reinterpret_cast<const char*>(c), sizeof(c));
  }
  f.write(reinterpret_cast<const char*>(rve.grain_map.grain_id.data()),
          static_cast<std::streamsize>(rve.grain_map.grain_id.size() * sizeof(std::uint32_t)));
  require(static_cast<bool>(f), ErrorKind::Io, "write failed for " + path);
}

inline Rve read_rve(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorKind::Io, "cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  require(f && std::memcmp(magic, "RVE1", 4) == 0, ErrorKind::Io, path + ": bad magic");
  std::uint32_t hdr[4];
  f.read(reinterpret_cast<char*>(hdr), sizeof(hdr));
  require(static_cast<bool>(f), ErrorKind::Io, path + ": truncated header");
  Rve rve;
  rve.grain_map.dims = {hdr[0], hdr[1], hdr[2]};
  rve.grain_map.n_grains = hdr[3];
  rve.grain_orientations.resize(hdr[3]);
  for (auto& q : rve.grain_orientations) {
    double c[4];
    f.read(reinterpret_cast<char*>(c), sizeof(c));
    q = {c[0], c[1], c[2], c[3]};
  }
  rve.grain_map.grain_id.resize(rve.grain_map.dims.voxels());
  f.read(reinterpret_cast<char*>(rve.grain_map.grain_id.data()),
         static_cast<std::streamsize>(rve.grain_map.grain_id.size() * sizeof(std::uint32_t)));
  require(static_cast<bool>(f), ErrorKind::Io, path + ": truncated body");
  rve.validate();
  return rve;
}

/// JSON sidecar written next to the binary RVE.
inline nlohmann::json rve_sidecar(const Rve& rve, std::uint64_t seed, const nlohmann::json& source) {
  return {{"format", "RVE1"},
          {"dims", {rve.dims().nx, rve.dims().ny, rve.dims().nz}},
          {"n_grains", rve.grain_map.n_grains},
          {"seed", seed},
          {"source", source}};
}

}  // namespace polyfm

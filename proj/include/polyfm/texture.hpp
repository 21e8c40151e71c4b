#pragma once

// Discrete orientation distribution functions over a fundamental-zone grid,
// hierarchical simplex sampling of the texture hull, and the parametric
// texture families (S1, S2, W1, W2) used for the nonlinear dataset.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "polyfm/error.hpp"
#include "polyfm/orientation.hpp"
#include "polyfm/rng.hpp"

namespace polyfm {

/// Orientations covering the cubic fundamental zone at a given angular resolution.
///
/// The point count is the fundamental-zone volume divided by the volume of a
/// cell whose edge equals the resolution in the volume-preserving homochoric
/// parameterization (edge = resolution / 2 there). Points are then spread by
/// farthest-point selection over a dense Rodrigues-lattice candidate set,
/// starting from the identity. Construction is deterministic.
class FundamentalGrid {
 public:
  static std::size_t count_for_resolution(double resolution_deg) {
    const double fz_volume = std::numbers::pi * std::numbers::pi / 24.0;
    const double edge = 0.5 * deg2rad(resolution_deg);
    return static_cast<std::size_t>(std::floor(fz_volume / (edge * edge * edge)));
  }

  explicit FundamentalGrid(double resolution_deg) : resolution_deg_(resolution_deg) {
    require(resolution_deg >= 5.0 && resolution_deg <= 20.0, ErrorKind::InvalidConfig,
            "grid resolution must lie in [5, 20] degrees");
    select_points();
    build_index();
  }

  /// Grid over explicit orientations (fundamental-zone reduced on entry).
  FundamentalGrid(double resolution_deg, std::vector<UnitQuaternion> orientations)
      : resolution_deg_(resolution_deg), orientations_(std::move(orientations)) {
    require(!orientations_.empty(), ErrorKind::InvalidInput, "grid needs at least one orientation");
    for (auto& q : orientations_) q = reduce_to_fz(q);
    build_index();
  }

  double resolution_deg() const noexcept { return resolution_deg_; }
  std::size_t size() const noexcept { return orientations_.size(); }
  const std::vector<UnitQuaternion>& orientations() const noexcept { return orientations_; }
  const UnitQuaternion& operator[](std::size_t j) const { return orientations_[j]; }

  /// Index of the grid orientation with the smallest misorientation to q
  /// (lowest index on ties).
  std::size_t nearest(const UnitQuaternion& q) const {
    const std::size_t n = sym_w_.size();
    double best = -1.0;
    std::size_t best_k = 0;
    for (std::size_t k = 0; k < n; ++k) {
      const double d = std::abs(q.w * sym_w_[k] + q.x * sym_x_[k] + q.y * sym_y_[k] + q.z * sym_z_[k]);
      if (d > best) {
        best = d;
        best_k = k;
      }
    }
    return best_k / 24;
  }

  /// Nearest grid orientation for a q already known to lie within
  /// `radius_rad` of grid point `hint`, with radius_rad <= resolution.
  std::size_t nearest_near(const UnitQuaternion& q, std::size_t hint) const {
    double best = -1.0;
    std::size_t best_j = hint;
    for (std::size_t j : neighbours_[hint]) {
      const double d = disorientation_cos_half(q, orientations_[j]);
      if (d > best || (d == best && j < best_j)) {
        best = d;
        best_j = j;
      }
    }
    return best_j;
  }

  /// Grid points within twice the resolution of j (including j), ascending.
  const std::vector<std::size_t>& neighbours(std::size_t j) const { return neighbours_[j]; }

  /// Process-wide cached grid; construction at 10 degrees takes about a second.
  static std::shared_ptr<const FundamentalGrid> cached(double resolution_deg) {
    static std::mutex mutex;
    static std::map<double, std::shared_ptr<const FundamentalGrid>> cache;
    std::lock_guard<std::mutex> lock(mutex);
    auto it = cache.find(resolution_deg);
    if (it != cache.end()) return it->second;
    auto grid = std::make_shared<const FundamentalGrid>(resolution_deg);
    cache.emplace(resolution_deg, grid);
    return grid;
  }

 private:
  void select_points() {
    const std::size_t target = count_for_resolution(resolution_deg_);
    const double res = deg2rad(resolution_deg_);

    // Candidates: Rodrigues lattice restricted to the cubic fundamental zone
    // (|r_i| <= tan(pi/8), |r_1| + |r_2| + |r_3| <= 1).
    const double rmax = std::tan(std::numbers::pi / 8.0);
    const double step = std::tan(0.5 * res) / 4.0;
    const int half = static_cast<int>(std::ceil(rmax / step));
    std::vector<UnitQuaternion> cand;
    for (int i = -half; i <= half; ++i)
      for (int j = -half; j <= half; ++j)
        for (int k = -half; k <= half; ++k) {
          const double r1 = i * step, r2 = j * step, r3 = k * step;
          if (std::abs(r1) > rmax + 1e-12 || std::abs(r2) > rmax + 1e-12 || std::abs(r3) > rmax + 1e-12) continue;
          if (std::abs(r1) + std::abs(r2) + std::abs(r3) > 1.0 + 1e-12) continue;
          const UnitQuaternion q = UnitQuaternion{1.0, r1, r2, r3}.normalized();
          cand.push_back(reduce_to_fz(q));
        }

    // Farthest-point selection in the misorientation metric. closeness[c]
    // holds max_s |c . (p s)| over selected p (larger = closer).
    const std::size_t m = cand.size();
    std::vector<double> cw(m), cx(m), cy(m), cz(m);
    for (std::size_t c = 0; c < m; ++c) {
      cw[c] = cand[c].w;
      cx[c] = cand[c].x;
      cy[c] = cand[c].y;
      cz[c] = cand[c].z;
    }
    std::vector<double> closeness(m, -1.0);
    std::size_t next = 0;
    for (std::size_t c = 1; c < m; ++c)
      if (cand[c].w > cand[next].w) next = c;

    orientations_.reserve(target);
    const auto& ops = cubic_symmetry();
    while (orientations_.size() < target) {
      const UnitQuaternion p = cand[next];
      orientations_.push_back(p);
      double pw[24], px[24], py[24], pz[24];
      for (int s = 0; s < 24; ++s) {
        const UnitQuaternion ps = p * ops[s];
        pw[s] = ps.w;
        px[s] = ps.x;
        py[s] = ps.y;
        pz[s] = ps.z;
      }
      double worst = 2.0;
      std::size_t worst_c = 0;
      for (std::size_t c = 0; c < m; ++c) {
        double best = closeness[c];
        for (int s = 0; s < 24; ++s) {
          const double d = std::abs(cw[c] * pw[s] + cx[c] * px[s] + cy[c] * py[s] + cz[c] * pz[s]);
          best = std::max(best, d);
        }
        closeness[c] = best;
        if (best < worst) {
          worst = best;
          worst_c = c;
        }
      }
      next = worst_c;
    }
  }

  void build_index() {
    const auto& ops = cubic_symmetry();
    const double res = deg2rad(resolution_deg_);
    const std::size_t n = orientations_.size();
    sym_w_.resize(24 * n);
    sym_x_.resize(24 * n);
    sym_y_.resize(24 * n);
    sym_z_.resize(24 * n);
    for (std::size_t j = 0; j < n; ++j)
      for (int s = 0; s < 24; ++s) {
        const UnitQuaternion ps = orientations_[j] * ops[s];
        sym_w_[24 * j + s] = ps.w;
        sym_x_[24 * j + s] = ps.x;
        sym_y_[24 * j + s] = ps.y;
        sym_z_[24 * j + s] = ps.z;
      }

    const double cos_cut = std::cos(0.5 * std::min(2.0 * res, std::numbers::pi));
    neighbours_.assign(n, {});
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = 0; b < n; ++b)
        if (disorientation_cos_half(orientations_[a], orientations_[b]) >= cos_cut) neighbours_[a].push_back(b);
  }

  double resolution_deg_;
  std::vector<UnitQuaternion> orientations_;
  std::vector<double> sym_w_, sym_x_, sym_y_, sym_z_;
  std::vector<std::vector<std::size_t>> neighbours_;
};

/// Discrete ODF: probability weights over the grid orientations.
struct Odf {
  std::vector<double> weights;

  std::size_t size() const noexcept { return weights.size(); }

  static Odf uniform(std::size_t j) { return Odf{std::vector<double>(j, 1.0 / static_cast<double>(j))}; }

  static Odf delta(std::size_t j, std::size_t k) {
    Odf o{std::vector<double>(j, 0.0)};
    o.weights.at(k) = 1.0;
    return o;
  }

  /// Texture-hull membership: nonnegative, each <= 1, summing to one.
  void validate() const {
    require(!weights.empty(), ErrorKind::InvalidInput, "empty ODF");
    double sum = 0.0;
    for (double p : weights) {
      require(std::isfinite(p) && p >= 0.0 && p <= 1.0, ErrorKind::InvalidInput, "ODF weight outside [0, 1]");
      sum += p;
    }
    require(std::abs(sum - 1.0) <= 1e-12, ErrorKind::InvalidInput, "ODF weights do not sum to one");
  }

  std::size_t support_size(double threshold = 1e-9) const {
    return static_cast<std::size_t>(std::count_if(weights.begin(), weights.end(), [&](double p) { return p > threshold; }));
  }
};

namespace detail {
/// Grid indices sorted by quaternion components, so that samplers can refer
/// to orientations independently of the grid's storage order.
inline std::vector<std::size_t> canonical_order(const FundamentalGrid& grid) {
  std::vector<std::size_t> order(grid.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto& o = grid.orientations();
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (o[a].w != o[b].w) return o[a].w < o[b].w;
    if (o[a].x != o[b].x) return o[a].x < o[b].x;
    if (o[a].y != o[b].y) return o[a].y < o[b].y;
    return o[a].z < o[b].z;
  });
  return order;
}

}  // namespace detail

/// Hierarchical simplex sampling of the texture hull. For each sample a face
/// dimension d is drawn log-uniformly over {0, ..., J-1}, d + 1 distinct
/// vertices are chosen uniformly, and barycentric weights come from a flat
/// Dirichlet on that face.
inline std::vector<Odf> hss_sample(const FundamentalGrid& grid, std::size_t count, std::uint64_t seed) {
  require(count >= 1, ErrorKind::InvalidConfig, "HSS sample count must be >= 1");
  const std::size_t j = grid.size();
  const auto order = detail::canonical_order(grid);
  std::vector<Odf> out;
  out.reserve(count);
  std::vector<std::size_t> pool(j);
  for (std::size_t s = 0; s < count; ++s) {
    Rng rng = Rng::stream(seed, {0x455353ULL, s});
    const double u = rng.uniform();
    std::size_t support = static_cast<std::size_t>(std::floor(std::exp(u * std::log(static_cast<double>(j) + 1.0))));
    support = std::clamp<std::size_t>(support, 1, j);

    std::iota(pool.begin(), pool.end(), std::size_t{0});
    for (std::size_t k = 0; k < support; ++k) {
      const std::size_t pick = k + rng.index(j - k);
      std::swap(pool[k], pool[pick]);
    }
    Odf odf{std::vector<double>(j, 0.0)};
    double total = 0.0;
    std::vector<double> e(support);
    for (std::size_t k = 0; k < support; ++k) {
      e[k] = rng.exponential();
      total += e[k];
    }
    for (std::size_t k = 0; k < support; ++k) odf.weights[order[pool[k]]] = e[k] / total;
    out.push_back(std::move(odf));
  }
  return out;
}

/// Draws orientations from a discrete ODF. A grid index is chosen with
/// probability p_j, then the orientation is perturbed by a Haar-uniform
/// rotation of angle <= spread that stays inside grid point j's cell.
class OdfSampler {
 public:
  OdfSampler(const Odf& odf, std::shared_ptr<const FundamentalGrid> grid, double spread_deg)
      : grid_(std::move(grid)), spread_(deg2rad(spread_deg)) {
    odf.validate();
    require(odf.size() == grid_->size(), ErrorKind::InvalidInput, "ODF length does not match the grid");
    require(spread_deg >= 0.0 && spread_deg <= grid_->resolution_deg(), ErrorKind::InvalidConfig,
            "in-cell spread must lie in [0, resolution]");
    cdf_.resize(odf.size());
    std::partial_sum(odf.weights.begin(), odf.weights.end(), cdf_.begin());
  }

  std::size_t draw_index(Rng& rng) const {
    const double u = rng.uniform() * cdf_.back();
    auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    std::size_t k = static_cast<std::size_t>(it - cdf_.begin());
    if (k >= cdf_.size()) k = cdf_.size() - 1;
    while (k > 0 && cdf_[k] == cdf_[k - 1]) --k;  // never land on a zero-weight bin
    return k;
  }

  UnitQuaternion draw(Rng& rng) const { return draw_with_index(rng).first; }

  std::pair<UnitQuaternion, std::size_t> draw_with_index(Rng& rng) const {
    const std::size_t k = draw_index(rng);
    const UnitQuaternion& centre = (*grid_)[k];
    if (spread_ <= 0.0) return {centre, k};
    for (int attempt = 0; attempt < 10000; ++attempt) {
      const UnitQuaternion q = reduce_to_fz(centre * random_ball_rotation(rng, spread_));
      if (grid_->nearest_near(q, k) == k) return {q, k};
    }
    return {centre, k};
  }

 private:
  std::shared_ptr<const FundamentalGrid> grid_;
  double spread_;
  std::vector<double> cdf_;
};

inline UnitQuaternion odf_sample_orientation(const Odf& odf, std::shared_ptr<const FundamentalGrid> grid,
                                             double spread_deg, Rng& rng) {
  return OdfSampler(odf, std::move(grid), spread_deg).draw(rng);
}

enum class TextureKind { S1, S2, W1, W2 };

inline const char* to_string(TextureKind k) {
  switch (k) {
    case TextureKind::S1: return "S1";
    case TextureKind::S2: return "S2";
    case TextureKind::W1: return "W1";
    case TextureKind::W2: return "W2";
  }
  return "?";
}

inline TextureKind texture_kind_from_string(const std::string& s) {
  if (s == "S1") return TextureKind::S1;
  if (s == "S2") return TextureKind::S2;
  if (s == "W1") return TextureKind::W1;
  if (s == "W2") return TextureKind::W2;
  fail(ErrorKind::InvalidConfig, "unknown texture kind '" + s + "'");
}

/// Mixture texture: each dominant orientation carries `weight` against unit
/// weight for every other grid orientation; draws near a dominant orientation
/// are spread over `sigma` degrees.
struct TextureSpec {
  TextureKind kind = TextureKind::W1;
  std::vector<UnitQuaternion> dominant;
  double weight = 1.0;
  double sigma = 1.0;

  void validate() const {
    const std::size_t expected = kind == TextureKind::W1 ? 0 : (kind == TextureKind::W2 ? 2 : 1);
    require(dominant.size() == expected, ErrorKind::InvalidConfig,
            std::string("texture ") + to_string(kind) + " needs " + std::to_string(expected) + " dominant orientations");
    require(weight > 0.0 && sigma >= 0.0, ErrorKind::InvalidConfig, "texture weight/sigma must be positive");
  }

  /// The four dataset families with dominant orientations drawn at random.
  static TextureSpec family(TextureKind kind, Rng& rng) {
    TextureSpec t;
    t.kind = kind;
    switch (kind) {
      case TextureKind::S1: t.weight = 500000.0; t.sigma = 1.0; break;
      case TextureKind::S2: t.weight = 500000.0; t.sigma = 8.0; break;
      case TextureKind::W1: t.weight = 1.0; t.sigma = 1.0; break;
      case TextureKind::W2: t.weight = 500000.0; t.sigma = 10.0; break;
    }
    const std::size_t n = kind == TextureKind::W1 ? 0 : (kind == TextureKind::W2 ? 2 : 1);
    for (std::size_t i = 0; i < n; ++i) t.dominant.push_back(reduce_to_fz(random_quaternion(rng)));
    return t;
  }
};

class TextureSampler {
 public:
  TextureSampler(TextureSpec spec, std::size_t grid_count) : spec_(std::move(spec)), j_(grid_count) {
    spec_.validate();
    const double nd = static_cast<double>(spec_.dominant.size());
    p_dominant_ = nd * spec_.weight / (nd * spec_.weight + (static_cast<double>(j_) - nd));
  }

  /// Probability that a draw comes from one of the dominant lobes.
  double dominant_probability() const noexcept { return p_dominant_; }

  UnitQuaternion next(Rng& rng) const {
    if (!spec_.dominant.empty() && rng.uniform() < p_dominant_) {
      const std::size_t lobe = spec_.dominant.size() == 1 ? 0 : rng.index(spec_.dominant.size());
      const UnitQuaternion d = spec_.dominant[lobe] * random_ball_rotation(rng, deg2rad(spec_.sigma));
      return reduce_to_fz(d.normalized());
    }
    return reduce_to_fz(random_quaternion(rng));
  }

  const TextureSpec& spec() const noexcept { return spec_; }

 private:
  TextureSpec spec_;
  std::size_t j_;
  double p_dominant_ = 0.0;
};

/// Fraction of SO(3) volume in each grid cell, by Monte Carlo.
inline std::vector<double> estimate_cell_volumes(const FundamentalGrid& grid, std::size_t samples, Rng& rng) {
  std::vector<double> v(grid.size(), 0.0);
  for (std::size_t i = 0; i < samples; ++i) v[grid.nearest(random_quaternion(rng))] += 1.0;
  for (double& x : v) x /= static_cast<double>(samples);
  return v;
}

/// Texture index (integral of f^2 over orientation space) estimated from a
/// sample of orientations binned into grid cells of known volume fraction.
/// Uses the unbiased estimate of sum p_j^2.
inline double texture_index(const FundamentalGrid& grid, const std::vector<UnitQuaternion>& draws,
                            const std::vector<double>& cell_volumes) {
  std::vector<double> counts(grid.size(), 0.0);
  for (const auto& q : draws) counts[grid.nearest(q)] += 1.0;
  const double n = static_cast<double>(draws.size());
  double ti = 0.0;
  for (std::size_t j = 0; j < counts.size(); ++j) {
    if (cell_volumes[j] <= 0.0) continue;
    ti += counts[j] * (counts[j] - 1.0) / (n * (n - 1.0)) / cell_volumes[j];
  }
  return ti;
}

// ---------------------------------------------------------------------------
// Import / export: CSV "index,weight" plus a JSON manifest.

inline void write_odf_csv(const std::string& path, const Odf& odf) {
  std::ofstream f(path);
  require(static_cast<bool>(f), ErrorKind::Io, "cannot open " + path + " for writing");
  f << "index,weight\n";
  f.precision(17);
  for (std::size_t j = 0; j < odf.size(); ++j) f << j << ',' << odf.weights[j] << '\n';
  require(static_cast<bool>(f), ErrorKind::Io, "write failed for " + path);
}

inline Odf read_odf_csv(const std::string& path) {
  std::ifstream f(path);
  require(static_cast<bool>(f), ErrorKind::Io, "cannot open " + path);
  std::string line;
  std::getline(f, line);
  require(line == "index,weight", ErrorKind::Io, path + ": expected header 'index,weight'");
  Odf odf;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::size_t idx;
    char comma;
    double w;
    require(static_cast<bool>(ss >> idx >> comma >> w) && comma == ',', ErrorKind::Io, path + ": malformed row '" + line + "'");
    require(idx == odf.weights.size(), ErrorKind::Io, path + ": indices must be consecutive from 0");
    odf.weights.push_back(w);
  }
  return odf;
}

inline nlohmann::json odf_manifest(const FundamentalGrid& grid, std::uint64_t seed) {
  return {{"grid_resolution_deg", grid.resolution_deg()}, {"J", grid.size()}, {"seed", seed}};
}

}  // namespace polyfm

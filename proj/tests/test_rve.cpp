#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>

#include "polyfm/rve.hpp"

using namespace polyfm;

namespace {
const Dims kDims{45, 45, 45};
}

TEST(Voronoi, GrainCountNearTarget) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto gm = generate_periodic_voronoi(kDims, 810, seed);
    EXPECT_GE(gm.n_grains, 790u);
    EXPECT_LE(gm.n_grains, 810u);
    EXPECT_NO_THROW(gm.validate());
  }
}

TEST(Voronoi, SingleSeedOwnsEverything) {
  const auto gm = generate_periodic_voronoi(kDims, 1, 3);
  EXPECT_EQ(gm.n_grains, 1u);
  EXPECT_EQ(gm.grain_sizes()[0], 91125u);
}

TEST(Voronoi, TooManySeeds) {
  try {
    generate_periodic_voronoi({2, 2, 2}, 9, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvalidConfig);
  }
}

TEST(Voronoi, DeterministicPerSeed) {
  EXPECT_EQ(generate_periodic_voronoi({20, 20, 20}, 40, 5).grain_id, generate_periodic_voronoi({20, 20, 20}, 40, 5).grain_id);
}

TEST(Voronoi, TranslationCovariance) {
  const Dims d{24, 20, 18};
  auto seeds = random_seeds(d, 60, 11);
  const auto base = periodic_voronoi_from_seeds(d, seeds);
  for (auto& s : seeds) s[0] = std::fmod(s[0] + 1.0, double(d.nx));
  const auto shifted = periodic_voronoi_from_seeds(d, seeds);
  for (std::size_t z = 0; z < d.nz; ++z)
    for (std::size_t y = 0; y < d.ny; ++y)
      for (std::size_t x = 0; x < d.nx; ++x)
        EXPECT_EQ(shifted.grain_id[d.index((x + 1) % d.nx, y, z)], base.grain_id[d.index(x, y, z)]);
}

TEST(Voronoi, ThreadedMatchesSerial) {
  const Dims d{30, 30, 30};
  const auto seeds = random_seeds(d, 100, 2);
  const auto serial = periodic_voronoi_from_seeds(d, seeds);
  setenv("POLYFM_THREADS", "4", 1);
  const auto threaded = periodic_voronoi_from_seeds(d, seeds);
  unsetenv("POLYFM_THREADS");
  EXPECT_EQ(serial.grain_id, threaded.grain_id);
}

TEST(Voronoi, EquiaxedGrains) {
  const auto ar = grain_aspect_ratios(generate_periodic_voronoi(kDims, 810, 1));
  const double mean = std::accumulate(ar.begin(), ar.end(), 0.0) / ar.size();
  EXPECT_LE(mean, 1.6);
}

TEST(Voronoi, PeriodicAdjacencyMatchesTiledCentre) {
  const Dims d{16, 16, 16};
  const auto gm = generate_periodic_voronoi(d, 30, 9);
  // 3x3x3 tiling; the non-periodic adjacency of faces touching the centre
  // copy must reproduce the wrap-around adjacency of the original.
  const Dims t{48, 48, 48};
  std::set<std::pair<std::uint32_t, std::uint32_t>> tiled;
  auto id = [&](std::size_t x, std::size_t y, std::size_t z) { return gm.grain_id[d.index(x % 16, y % 16, z % 16)]; };
  for (std::size_t z = 16; z < 32; ++z)
    for (std::size_t y = 16; y < 32; ++y)
      for (std::size_t x = 16; x < 32; ++x) {
        const auto a = id(x, y, z);
        const std::size_t nb[6][3] = {{x + 1, y, z}, {x - 1, y, z}, {x, y + 1, z}, {x, y - 1, z}, {x, y, z + 1}, {x, y, z - 1}};
        for (const auto& n : nb) {
          const auto b = id(n[0], n[1], n[2]);
          if (a != b) tiled.emplace(std::min(a, b), std::max(a, b));
        }
      }
  (void)t;
  EXPECT_EQ(grain_adjacency(gm), tiled);
  EXPECT_LE(grain_adjacency(gm, false).size(), tiled.size());
}

TEST(Assign, DeltaOdfGivesSingleOrientation) {
  const auto g = FundamentalGrid::cached(10.0);
  Rng rng(0);
  const auto rve = assign_orientations(generate_periodic_voronoi({20, 20, 20}, 50, 1),
                                       OdfSampler(Odf::delta(g->size(), 7), g, 0.0), rng);
  for (const auto& q : rve.grain_orientations) EXPECT_EQ(q, (*g)[7]);
}

TEST(Assign, UniformOdfVolumeWeightedHistogramNearUniform) {
  const auto g = FundamentalGrid::cached(10.0);
  std::vector<double> mass(g->size(), 0.0);
  double total = 0;
  for (std::uint64_t r = 0; r < 20; ++r) {
    Rng rng = Rng::stream(r, {1});
    const auto rve = assign_orientations(generate_periodic_voronoi(kDims, 810, r),
                                         OdfSampler(Odf::uniform(g->size()), g, g->resolution_deg()), rng);
    const auto sizes = rve.grain_map.grain_sizes();
    for (std::uint32_t k = 0; k < rve.grain_map.n_grains; ++k) {
      mass[g->nearest(rve.grain_orientations[k])] += double(sizes[k]);
      total += double(sizes[k]);
    }
  }
  double tv = 0;
  for (double m : mass) tv += std::abs(m / total - 1.0 / g->size());
  EXPECT_LT(0.5 * tv, 0.15);
}

TEST(Assign, SharpTextureHasLargeIndex) {
  const auto g = FundamentalGrid::cached(10.0);
  Rng rng(4);
  const auto rve = assign_orientations(generate_periodic_voronoi(kDims, 810, 2),
                                       TextureSampler(TextureSpec::family(TextureKind::S1, rng), g->size()), rng);
  Rng vr(5);
  const auto volumes = estimate_cell_volumes(*g, 50000, vr);
  EXPECT_GT(texture_index(*g, rve.grain_orientations, volumes), 50.0);
}

TEST(Assign, OrientationsIndependentOfMapContent) {
  const auto g = FundamentalGrid::cached(10.0);
  const OdfSampler src(Odf::uniform(g->size()), g, 10.0);
  Rng a(6), b(6);
  const auto r1 = assign_orientations(generate_periodic_voronoi({12, 12, 12}, 20, 1), src, a);
  const auto r2 = assign_orientations(generate_periodic_voronoi({12, 12, 12}, 20, 2), src, b);
  const std::size_t n = std::min(r1.grain_orientations.size(), r2.grain_orientations.size());
  for (std::size_t k = 0; k < n; ++k) EXPECT_EQ(r1.grain_orientations[k], r2.grain_orientations[k]);
}

TEST(Tensor, IdentityGrainAndUnitNorms) {
  GrainMap gm{{5, 4, 3}, std::vector<std::uint32_t>(60, 0), 1};
  const Rve single{gm, {UnitQuaternion{}}};
  const auto f = rve_to_tensor(single);
  for (std::size_t v = 0; v < 60; ++v) {
    EXPECT_EQ(f.voxel(v)[0], 1.0);
    EXPECT_EQ(f.voxel(v)[1] + f.voxel(v)[2] + f.voxel(v)[3], 0.0);
  }
  const auto g = FundamentalGrid::cached(10.0);
  Rng rng(2);
  const auto rve = assign_orientations(generate_periodic_voronoi({15, 15, 15}, 30, 3),
                                       OdfSampler(Odf::uniform(g->size()), g, 10.0), rng);
  const auto t = rve_to_tensor(rve);
  for (std::size_t v = 0; v < t.dims.voxels(); ++v) {
    const double* q = t.voxel(v);
    EXPECT_NEAR(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3], 1.0, 1e-12);
    EXPECT_GE(q[0], 0.0);
    const auto& ref = rve.grain_orientations[rve.grain_map.grain_id[v]].canonical();
    EXPECT_EQ(q[0], ref.w);
    EXPECT_EQ(q[3], ref.z);
  }
}

TEST(Io, BinaryRoundTrip) {
  const auto g = FundamentalGrid::cached(10.0);
  Rng rng(2);
  const auto rve = assign_orientations(generate_periodic_voronoi({9, 8, 7}, 12, 3),
                                       OdfSampler(Odf::uniform(g->size()), g, 10.0), rng);
  const auto path = (std::filesystem::temp_directory_path() / "polyfm_rve.bin").string();
  write_rve(path, rve);
  EXPECT_EQ(std::filesystem::file_size(path), 4 + 16 + 12 * 32 + 9 * 8 * 7 * 4u);
  const auto back = read_rve(path);
  EXPECT_EQ(back.grain_map.grain_id, rve.grain_map.grain_id);
  EXPECT_EQ(back.grain_orientations, rve.grain_orientations);
  std::filesystem::remove(path);
  EXPECT_THROW(read_rve(path), Error);
}

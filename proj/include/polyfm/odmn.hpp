#pragma once

// Orientation-aware interaction-based deep material network: binary tree of
// depth N whose leaves carry a weight logit z and Bunge angles, and whose
// internal nodes carry an interface normal. Nodes are stored in heap order
// (children of j are 2j+1 and 2j+2).

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "polyfm/error.hpp"
#include "polyfm/optim.hpp"
#include "polyfm/orientation.hpp"
#include "polyfm/parallel.hpp"
#include "polyfm/rng.hpp"
#include "polyfm/tensor.hpp"

namespace polyfm {

/// Subtree weight below which a node's interaction is switched off.
inline constexpr double kInactiveWeight = 1e-8;

struct OdmnLeaf {
  double z = 0.5;
  EulerBunge euler;
};

struct OdmnNode {
  double theta = 0.0;
  double phi = 0.0;
};

struct OdmnParams {
  int depth = 0;
  std::vector<OdmnLeaf> leaves;
  std::vector<OdmnNode> nodes;

  static std::size_t leaf_count(int depth) { return std::size_t{1} << depth; }
  static std::size_t node_count(int depth) { return leaf_count(depth) - 1; }
  static std::size_t parameter_count(int depth) { return 4 * leaf_count(depth) + 2 * node_count(depth); }
  std::size_t parameter_count() const { return parameter_count(depth); }

  void validate() const {
    require(depth >= 0 && depth <= 12, ErrorKind::InvalidConfig, "ODMN depth must lie in [0, 12]");
    require(leaves.size() == leaf_count(depth) && nodes.size() == node_count(depth), ErrorKind::InvalidInput,
            "ODMN parameter arrays do not match the depth");
  }

  /// z ~ U(0.2, 0.8), normal angles ~ U(0, 1), orientations uniform on SO(3).
  static OdmnParams random(int depth, Rng& rng) {
    OdmnParams p;
    p.depth = depth;
    p.leaves.resize(leaf_count(depth));
    p.nodes.resize(node_count(depth));
    for (auto& l : p.leaves) {
      l.z = rng.uniform(0.2, 0.8);
      l.euler = quat_to_euler(random_quaternion(rng));
    }
    for (auto& n : p.nodes) {
      n.theta = rng.uniform();
      n.phi = rng.uniform();
    }
    return p;
  }

  /// Flat layout: (z, alpha, beta, gamma) per leaf, then (theta, phi) per node.
  Eigen::VectorXd to_vector() const {
    Eigen::VectorXd v(static_cast<Eigen::Index>(parameter_count()));
    Eigen::Index k = 0;
    for (const auto& l : leaves) {
      v(k++) = l.z;
      v(k++) = l.euler.alpha;
      v(k++) = l.euler.beta;
      v(k++) = l.euler.gamma;
    }
    for (const auto& n : nodes) {
      v(k++) = n.theta;
      v(k++) = n.phi;
    }
    return v;
  }

  static OdmnParams from_vector(int depth, const Eigen::VectorXd& v) {
    require(static_cast<std::size_t>(v.size()) == parameter_count(depth), ErrorKind::InvalidInput,
            "parameter vector length does not match the depth");
    OdmnParams p;
    p.depth = depth;
    p.leaves.resize(leaf_count(depth));
    p.nodes.resize(node_count(depth));
    Eigen::Index k = 0;
    for (auto& l : p.leaves) {
      l.z = v(k++);
      l.euler = {v(k), v(k + 1), v(k + 2)};
      k += 3;
    }
    for (auto& n : p.nodes) {
      n.theta = v(k++);
      n.phi = v(k++);
    }
    return p;
  }
};

/// Static tree topology for a given depth.
struct OdmnTree {
  int depth = 0;
  std::size_t n_leaves = 1, n_nodes = 0;
  /// (node, leaf is under the left child), root first.
  std::vector<std::vector<std::pair<std::size_t, bool>>> ancestors;
  /// Leaf ranges [first, last) under the left and right child of each node.
  std::vector<std::pair<std::size_t, std::size_t>> left, right;

  explicit OdmnTree(int d) : depth(d), n_leaves(OdmnParams::leaf_count(d)), n_nodes(OdmnParams::node_count(d)) {
    ancestors.resize(n_leaves);
    for (std::size_t i = 0; i < n_leaves; ++i) {
      std::size_t h = n_nodes + i;
      while (h > 0) {
        const std::size_t parent = (h - 1) / 2;
        ancestors[i].emplace_back(parent, h == 2 * parent + 1);
        h = parent;
      }
      std::reverse(ancestors[i].begin(), ancestors[i].end());
    }
    left.resize(n_nodes);
    right.resize(n_nodes);
    for (std::size_t j = 0; j < n_nodes; ++j) {
      const int level = static_cast<int>(std::floor(std::log2(static_cast<double>(j + 1))));
      const std::size_t pos = j + 1 - (std::size_t{1} << level);
      const std::size_t span = std::size_t{1} << (depth - level);
      left[j] = {pos * span, pos * span + span / 2};
      right[j] = {pos * span + span / 2, (pos + 1) * span};
    }
  }
};

inline Vec3 direction_from_angles(double theta, double phi) {
  theta -= std::floor(theta);
  phi -= std::floor(phi);
  const double st = std::sin(std::numbers::pi * theta), ct = std::cos(std::numbers::pi * theta);
  const double cp = std::cos(2.0 * std::numbers::pi * phi), sp = std::sin(2.0 * std::numbers::pi * phi);
  return {cp * st, sp * st, ct};
}

/// d(normal)/d(theta) and d(normal)/d(phi).
inline std::pair<Vec3, Vec3> direction_derivatives(double theta, double phi) {
  const double pi = std::numbers::pi;
  const double st = std::sin(pi * theta), ct = std::cos(pi * theta);
  const double cp = std::cos(2 * pi * phi), sp = std::sin(2 * pi * phi);
  return {Vec3(pi * cp * ct, pi * sp * ct, -pi * st), Vec3(-2 * pi * sp * st, 2 * pi * cp * st, 0.0)};
}

inline std::vector<double> leaf_weights(const std::vector<double>& z) {
  double total = 0.0;
  for (double v : z) total += std::max(v, 0.0);
  require(total > 0.0, ErrorKind::DegenerateWeights, "all leaf weight logits are non-positive");
  std::vector<double> w(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) w[i] = std::max(z[i], 0.0) / total;
  return w;
}

/// Zero-mean subtree coefficients: alpha(i, j) for leaf i and node j.
struct InteractionCoefficients {
  Eigen::MatrixXd alpha;
  std::vector<bool> active;
  std::vector<double> w_left, w_right;
};

inline InteractionCoefficients interaction_coefficients(const std::vector<double>& w, const OdmnTree& tree) {
  require(w.size() == tree.n_leaves, ErrorKind::InvalidInput, "weight count does not match the tree");
  InteractionCoefficients ic;
  ic.alpha = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(tree.n_leaves), static_cast<Eigen::Index>(tree.n_nodes));
  ic.active.assign(tree.n_nodes, false);
  ic.w_left.assign(tree.n_nodes, 0.0);
  ic.w_right.assign(tree.n_nodes, 0.0);
  for (std::size_t j = 0; j < tree.n_nodes; ++j) {
    const auto [l0, l1] = tree.left[j];
    const auto [r0, r1] = tree.right[j];
    const double wl = std::accumulate(w.begin() + l0, w.begin() + l1, 0.0);
    const double wr = std::accumulate(w.begin() + r0, w.begin() + r1, 0.0);
    ic.w_left[j] = wl;
    ic.w_right[j] = wr;
    if (wl <= kInactiveWeight || wr <= kInactiveWeight) continue;
    ic.active[j] = true;
    const double s = wl + wr;
    for (std::size_t i = l0; i < l1; ++i) ic.alpha(i, j) = wr / s;
    for (std::size_t i = r0; i < r1; ++i) ic.alpha(i, j) = -wl / s;
  }
  return ic;
}

/// Voigt (engineering shear) vector of sym(a x n) as a 6x3 map of a.
inline Eigen::Matrix<double, 6, 3> interface_map(const Vec3& n) {
  Eigen::Matrix<double, 6, 3> b;
  b << n(0), 0, 0,     //
      0, n(1), 0,      //
      0, 0, n(2),      //
      0, n(2), n(1),   //
      n(2), 0, n(0),   //
      n(1), n(0), 0;
  return b;
}

struct OdmnDerived {
  OdmnTree tree;
  std::vector<double> weights;
  std::vector<Vec3> normals;
  InteractionCoefficients coeff;
  std::vector<StiffnessVoigt> stiffness;  // per leaf, sample frame
};

/// Weights, normals and coefficients; leaf stiffnesses supplied explicitly.
inline OdmnDerived derive(const OdmnParams& p, std::vector<StiffnessVoigt> leaf_stiffness) {
  p.validate();
  require(leaf_stiffness.size() == p.leaves.size(), ErrorKind::InvalidInput, "one stiffness per leaf is required");
  OdmnDerived d{OdmnTree(p.depth), {}, {}, {}, std::move(leaf_stiffness)};
  std::vector<double> z(p.leaves.size());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = p.leaves[i].z;
  d.weights = leaf_weights(z);
  d.normals.reserve(p.nodes.size());
  for (const auto& n : p.nodes) d.normals.push_back(direction_from_angles(n.theta, n.phi));
  d.coeff = interaction_coefficients(d.weights, d.tree);
  return d;
}

inline OdmnDerived derive(const OdmnParams& p, const StiffnessVoigt& c_crystal) {
  std::vector<StiffnessVoigt> cs;
  cs.reserve(p.leaves.size());
  for (const auto& l : p.leaves) cs.push_back(rotate_stiffness(c_crystal, euler_to_rotmat(l.euler)));
  return derive(p, std::move(cs));
}

/// Solution of the small-strain interaction problem for all six unit strains.
struct OdmnLinearSolution {
  StiffnessVoigt c_bar;
  StiffnessVoigt c_voigt;
  std::vector<std::size_t> active_nodes;  // slot -> node
  std::vector<int> slot;                  // node -> slot or -1
  Eigen::MatrixXd amplitudes;             // 3 * active x 6, a = amplitudes * strain

  /// Leaf strain (Voigt, engineering shear) under macroscopic strain.
  Vec6 leaf_strain(const OdmnDerived& d, std::size_t leaf, const Vec6& eps) const {
    Vec6 e = eps;
    for (const auto& [j, is_left] : d.tree.ancestors[leaf]) {
      if (slot[j] < 0) continue;
      const Vec3 a = amplitudes.middleRows(3 * slot[j], 3) * eps;
      e += d.coeff.alpha(leaf, j) * interface_map(d.normals[j]) * a;
    }
    return e;
  }
};

inline OdmnLinearSolution solve_linear(const OdmnDerived& d) {
  OdmnLinearSolution s;
  s.slot.assign(d.tree.n_nodes, -1);
  for (std::size_t j = 0; j < d.tree.n_nodes; ++j)
    if (d.coeff.active[j]) {
      s.slot[j] = static_cast<int>(s.active_nodes.size());
      s.active_nodes.push_back(j);
    }
  const Eigen::Index m = 3 * static_cast<Eigen::Index>(s.active_nodes.size());
  Eigen::MatrixXd k = Eigen::MatrixXd::Zero(m, m), f = Eigen::MatrixXd::Zero(m, 6);
  s.c_voigt.setZero();
  std::vector<Eigen::Matrix<double, 6, 3>> maps(d.tree.n_nodes);
  for (std::size_t j = 0; j < d.tree.n_nodes; ++j) maps[j] = interface_map(d.normals[j]);

  for (std::size_t i = 0; i < d.tree.n_leaves; ++i) {
    const double w = d.weights[i];
    if (w == 0.0) continue;
    const Mat6& c = d.stiffness[i];
    s.c_voigt += w * c;
    for (const auto& [j, lj] : d.tree.ancestors[i]) {
      if (s.slot[j] < 0) continue;
      const double aj = d.coeff.alpha(i, j);
      const Eigen::Matrix<double, 3, 6> btc = maps[j].transpose() * c;
      f.middleRows(3 * s.slot[j], 3) += w * aj * btc;
      for (const auto& [l, ll] : d.tree.ancestors[i]) {
        if (s.slot[l] < 0) continue;
        k.block(3 * s.slot[j], 3 * s.slot[l], 3, 3) += w * aj * d.coeff.alpha(i, l) * btc * maps[l];
      }
    }
  }
  if (m == 0) {
    s.amplitudes.resize(0, 6);
    s.c_bar = s.c_voigt;
    return s;
  }
  Eigen::LLT<Eigen::MatrixXd> llt(k);
  if (llt.info() != Eigen::Success) {
    std::string nodes;
    for (auto j : s.active_nodes) nodes += " " + std::to_string(j);
    fail(ErrorKind::Numeric, "singular ODMN interaction system; active nodes:" + nodes);
  }
  s.amplitudes = -llt.solve(f);
  s.c_bar = s.c_voigt + f.transpose() * s.amplitudes;
  s.c_bar = (0.5 * (s.c_bar + s.c_bar.transpose())).eval();
  return s;
}

inline StiffnessVoigt homogenize_linear(const OdmnParams& p, const StiffnessVoigt& c_crystal) {
  return solve_linear(derive(p, c_crystal)).c_bar;
}

inline double loss_relative_frobenius(const StiffnessVoigt& c_pred, const StiffnessVoigt& c_dns) {
  const double ref = c_dns.norm();
  require(ref > 0.0, ErrorKind::InvalidLabel, "reference stiffness has zero norm");
  return (c_dns - c_pred).norm() / ref;
}

struct LossAndGradient {
  double loss = 0.0;
  Eigen::VectorXd gradient;
};

/// Gradient of a scalar with respect to the flat parameters, given the
/// derivative of that scalar with respect to C_bar (symmetric 6x6). Uses the
/// stationarity of the interaction problem, so no derivative of the solve
/// itself is needed.
inline Eigen::VectorXd backprop_stiffness(const OdmnParams& p, const StiffnessVoigt& c_crystal, const OdmnDerived& d,
                                          const OdmnLinearSolution& s, const Mat6& dl_dcbar) {
  const std::size_t nl = d.tree.n_leaves, nn = d.tree.n_nodes;
  const Mat6 g = 0.5 * (dl_dcbar + dl_dcbar.transpose());
  const Eigen::MatrixXd& x = s.amplitudes;
  const Eigen::Index m = x.rows();

  std::vector<double> g_w(nl, 0.0);
  std::vector<Eigen::Matrix<double, 6, 3>> g_map(nn, Eigen::Matrix<double, 6, 3>::Zero());
  Eigen::MatrixXd g_alpha = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(nl), static_cast<Eigen::Index>(nn));
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p.parameter_count()));
  std::vector<Eigen::Matrix<double, 6, 3>> maps(nn);
  for (std::size_t j = 0; j < nn; ++j) maps[j] = interface_map(d.normals[j]);

  for (std::size_t i = 0; i < nl; ++i) {
    const Mat6& c = d.stiffness[i];
    const double w = d.weights[i];
    // T = I + G_i X
    Mat6 t = Mat6::Identity();
    for (const auto& [j, lj] : d.tree.ancestors[i])
      if (s.slot[j] >= 0) t += d.coeff.alpha(i, j) * maps[j] * x.middleRows(3 * s.slot[j], 3);
    const Mat6 tgt = t * g * t.transpose();
    g_w[i] = (tgt.cwiseProduct(c)).sum();

    // Orientation: dC_i = dM C M^T + M C dM^T.
    const Mat6 g_c = w * tgt;
    const Mat3 r = euler_to_rotmat(p.leaves[i].euler);
    const Mat6 bond_r = voigt::bond(r);
    const auto dr = euler_rotmat_derivatives(p.leaves[i].euler);
    for (int a = 0; a < 3; ++a) {
      const Mat6 dm = voigt::bond_bilinear(r, dr[a]) + voigt::bond_bilinear(dr[a], r);
      grad(4 * static_cast<Eigen::Index>(i) + 1 + a) = 2.0 * g_c.cwiseProduct(dm * c_crystal * bond_r.transpose()).sum();
    }

    if (m == 0 || w == 0.0) continue;
    // dL/dG_i = 2 w C_i T G X^T.
    const Eigen::MatrixXd g_gi = 2.0 * w * (c * t * g) * x.transpose();
    for (const auto& [j, lj] : d.tree.ancestors[i]) {
      if (s.slot[j] < 0) continue;
      const Eigen::Matrix<double, 6, 3> blk = g_gi.middleCols(3 * s.slot[j], 3);
      g_alpha(i, j) = blk.cwiseProduct(maps[j]).sum();
      g_map[j] += d.coeff.alpha(i, j) * blk;
    }
  }

  // Coefficients depend on the subtree weights.
  for (std::size_t j = 0; j < nn; ++j) {
    if (!d.coeff.active[j]) continue;
    const double wl = d.coeff.w_left[j], wr = d.coeff.w_right[j], s2 = (wl + wr) * (wl + wr);
    double total = 0.0;
    for (std::size_t i = d.tree.left[j].first; i < d.tree.right[j].second; ++i) total += g_alpha(i, j);
    for (std::size_t i = d.tree.left[j].first; i < d.tree.left[j].second; ++i) g_w[i] += total * (-wr / s2);
    for (std::size_t i = d.tree.right[j].first; i < d.tree.right[j].second; ++i) g_w[i] += total * (wl / s2);
  }

  // W = relu(z) / sum relu(z).
  double zsum = 0.0, gw_dot_w = 0.0;
  for (std::size_t i = 0; i < nl; ++i) {
    zsum += std::max(p.leaves[i].z, 0.0);
    gw_dot_w += g_w[i] * d.weights[i];
  }
  for (std::size_t i = 0; i < nl; ++i)
    grad(4 * static_cast<Eigen::Index>(i)) = p.leaves[i].z > 0.0 ? (g_w[i] - gw_dot_w) / zsum : 0.0;

  // Normals.
  const Eigen::Index node_base = 4 * static_cast<Eigen::Index>(nl);
  for (std::size_t j = 0; j < nn; ++j) {
    if (!d.coeff.active[j]) continue;
    const auto& gm = g_map[j];
    const Vec3 g_n(gm(0, 0) + gm(4, 2) + gm(5, 1), gm(1, 1) + gm(3, 2) + gm(5, 0), gm(2, 2) + gm(3, 1) + gm(4, 0));
    const auto [dt, dp] = direction_derivatives(p.nodes[j].theta, p.nodes[j].phi);
    grad(node_base + 2 * static_cast<Eigen::Index>(j)) = g_n.dot(dt);
    grad(node_base + 2 * static_cast<Eigen::Index>(j) + 1) = g_n.dot(dp);
  }
  return grad;
}

inline LossAndGradient grad_params(const OdmnParams& p, const StiffnessVoigt& c_crystal, const StiffnessVoigt& c_dns) {
  const OdmnDerived d = derive(p, c_crystal);
  const OdmnLinearSolution s = solve_linear(d);
  LossAndGradient out;
  out.loss = loss_relative_frobenius(s.c_bar, c_dns);
  const double diff = (s.c_bar - c_dns).norm();
  if (diff == 0.0) {
    out.gradient = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p.parameter_count()));
    return out;
  }
  const Mat6 dl = (s.c_bar - c_dns) / (diff * c_dns.norm());
  out.gradient = backprop_stiffness(p, c_crystal, d, s, dl);
  return out;
}

/// Keeps periodic coordinates in a canonical window without changing the map.
inline void wrap_periodic(OdmnParams& p) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  auto wrap = [](double v, double period) { return v - period * std::floor(v / period); };
  for (auto& l : p.leaves) l.euler = {wrap(l.euler.alpha, two_pi), wrap(l.euler.beta, two_pi), wrap(l.euler.gamma, two_pi)};
  for (auto& n : p.nodes) {
    n.theta = wrap(n.theta, 1.0);
    n.phi = wrap(n.phi, 1.0);
  }
}

// ---------------------------------------------------------------------------
// Offline training

struct StiffnessSample {
  StiffnessVoigt c_crystal;
  StiffnessVoigt c_dns;
};

/// Cubic single-crystal constants: log-uniform C11 in [50, 250] GPa,
/// C12/C11 in [0.3, 0.7], Zener ratio 2 C44 / (C11 - C12) in [0.5, 3].
inline StiffnessVoigt sample_cubic_triplet(Rng& rng) {
  const double c11 = std::exp(rng.uniform(std::log(50.0), std::log(250.0)));
  const double c12 = c11 * rng.uniform(0.3, 0.7);
  const double zener = rng.uniform(0.5, 3.0);
  return cubic_stiffness(c11, c12, 0.5 * zener * (c11 - c12));
}

struct OdmnTrainConfig {
  int depth = 6;
  int epochs = 500;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double validation_fraction = 0.2;
  std::uint64_t seed = 0;
};

struct OdmnEpochRecord {
  int epoch;
  double train_loss;
  double validation_loss;
};

struct OdmnTrainResult {
  OdmnParams params;  // best validation
  double best_validation = 0.0;
  std::vector<OdmnEpochRecord> history;
};

inline double mean_loss(const OdmnParams& p, const std::vector<StiffnessSample>& samples,
                        const std::vector<std::size_t>& idx) {
  if (idx.empty()) return 0.0;
  std::vector<double> losses(idx.size());
  parallel_for(idx.size(), [&](std::size_t k) {
    losses[k] = loss_relative_frobenius(homogenize_linear(p, samples[idx[k]].c_crystal), samples[idx[k]].c_dns);
  });
  return std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(idx.size());
}

/// Deterministic train/validation split (validation = trailing block after a
/// seeded shuffle).
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double fraction,
                                                                                   std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng = Rng::stream(seed, {0x53504c54ULL});
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.index(i)]);
  std::size_t n_val = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
  if (n > 1) n_val = std::min(n_val, n - 1);
  else n_val = 0;
  return {std::vector<std::size_t>(idx.begin(), idx.end() - static_cast<std::ptrdiff_t>(n_val)),
          std::vector<std::size_t>(idx.end() - static_cast<std::ptrdiff_t>(n_val), idx.end())};
}

inline OdmnTrainResult train_offline(const std::vector<StiffnessSample>& samples, const OdmnTrainConfig& cfg,
                                     const OdmnParams* init = nullptr) {
  require(!samples.empty(), ErrorKind::InvalidConfig, "training needs at least one sample");
  require(cfg.batch_size >= 1 && cfg.epochs >= 0, ErrorKind::InvalidConfig, "invalid batch size or epoch count");
  Rng init_rng = Rng::stream(cfg.seed, {0x494e4954ULL});
  OdmnParams params = init ? *init : OdmnParams::random(cfg.depth, init_rng);
  params.validate();
  const auto [train, val] = split_indices(samples.size(), cfg.validation_fraction, cfg.seed);
  const auto& monitor = val.empty() ? train : val;

  const std::size_t batches = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const long total_steps = static_cast<long>(batches) * cfg.epochs;
  Adam adam(static_cast<Eigen::Index>(params.parameter_count()), {cfg.learning_rate});
  Eigen::VectorXd theta = params.to_vector();

  OdmnTrainResult out;
  out.params = params;
  out.best_validation = mean_loss(params, samples, monitor);
  std::vector<std::size_t> order = train;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle = Rng::stream(cfg.seed, {0x45504f43ULL, static_cast<std::uint64_t>(epoch)});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.index(i)]);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * cfg.batch_size, hi = std::min(order.size(), lo + cfg.batch_size);
      std::vector<LossAndGradient> per(hi - lo);
      parallel_for(hi - lo, [&](std::size_t k) {
        per[k] = grad_params(params, samples[order[lo + k]].c_crystal, samples[order[lo + k]].c_dns);
      });
      Eigen::VectorXd grad = Eigen::VectorXd::Zero(theta.size());
      double batch_loss = 0.0;
      for (const auto& r : per) {
        if (!std::isfinite(r.loss) || !r.gradient.allFinite())
          fail(ErrorKind::Numeric, "non-finite ODMN loss or gradient at epoch " + std::to_string(epoch));
        grad += r.gradient;
        batch_loss += r.loss;
      }
      grad /= static_cast<double>(per.size());
      epoch_loss += batch_loss;
      adam.step(theta, grad, cosine_lr(cfg.learning_rate, adam.steps(), total_steps));
      params = OdmnParams::from_vector(params.depth, theta);
      wrap_periodic(params);
      theta = params.to_vector();
    }
    const double v = mean_loss(params, samples, monitor);
    out.history.push_back({epoch, epoch_loss / static_cast<double>(order.size()), v});
    if (v < out.best_validation) {
      out.best_validation = v;
      out.params = params;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const OdmnParams& p, const nlohmann::json& metadata = nlohmann::json::object()) {
  nlohmann::json leaves = nlohmann::json::array(), nodes = nlohmann::json::array();
  for (const auto& l : p.leaves) leaves.push_back({l.z, l.euler.alpha, l.euler.beta, l.euler.gamma});
  for (const auto& n : p.nodes) nodes.push_back({n.theta, n.phi});
  return {{"depth", p.depth}, {"leaves", leaves}, {"nodes", nodes}, {"metadata", metadata}};
}

inline OdmnParams odmn_params_from_json(const nlohmann::json& j) {
  try {
    OdmnParams p;
    p.depth = j.at("depth").get<int>();
    for (const auto& l : j.at("leaves")) p.leaves.push_back({l.at(0).get<double>(), {l.at(1).get<double>(), l.at(2).get<double>(), l.at(3).get<double>()}});
    for (const auto& n : j.at("nodes")) p.nodes.push_back({n.at(0).get<double>(), n.at(1).get<double>()});
    p.validate();
    return p;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Io, std::string("malformed ODMN parameter file: ") + e.what());
  }
}

inline void write_loss_csv(const std::string& path, const std::vector<OdmnEpochRecord>& history) {
  std::ofstream f(path);
  require(static_cast<bool>(f), ErrorKind::Io, "cannot open " + path + " for writing");
  f.precision(17);
  f << "epoch,train_loss,validation_loss\n";
  for (const auto& r : history) f << r.epoch << ',' << r.train_loss << ',' << r.validation_loss << '\n';
}

}  // namespace polyfm

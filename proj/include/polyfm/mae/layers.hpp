#pragma once

// Transformer building blocks with explicit forward caches and manual
// backward passes. All parameters live in one flat vector (ParamSet) so the
// optimizer, checkpointing and finite-difference checks see a single array.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "polyfm/error.hpp"
#include "polyfm/rng.hpp"

namespace polyfm::mae {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

struct ParamEntry {
  std::string name;
  Eigen::Index offset, rows, cols;
};

/// Named row-major tensors packed into one flat vector.
class ParamSet {
 public:
  int add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    require(!index_.count(name), ErrorKind::InvalidInput, "duplicate parameter " + name);
    entries_.push_back({name, size_, rows, cols});
    size_ += rows * cols;
    index_[name] = static_cast<int>(entries_.size() - 1);
    return static_cast<int>(entries_.size() - 1);
  }

  Eigen::Index size() const noexcept { return size_; }
  const std::vector<ParamEntry>& entries() const noexcept { return entries_; }
  int id(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), ErrorKind::InvalidInput, "unknown parameter " + name);
    return it->second;
  }

  Eigen::Map<RowMat> view(Eigen::VectorXd& flat, int id) const {
    const auto& e = entries_[static_cast<std::size_t>(id)];
    return Eigen::Map<RowMat>(flat.data() + e.offset, e.rows, e.cols);
  }
  Eigen::Map<const RowMat> view(const Eigen::VectorXd& flat, int id) const {
    const auto& e = entries_[static_cast<std::size_t>(id)];
    return Eigen::Map<const RowMat>(flat.data() + e.offset, e.rows, e.cols);
  }

 private:
  std::vector<ParamEntry> entries_;
  std::map<std::string, int> index_;
  Eigen::Index size_ = 0;
};

inline void init_xavier(Eigen::Map<RowMat> w, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-limit, limit);
}

inline void init_normal(Eigen::Map<RowMat> w, Rng& rng, double std) {
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = std * rng.normal();
}

// ---------------------------------------------------------------------------

struct Linear {
  int w = -1, b = -1;

  static Linear create(ParamSet& ps, const std::string& name, Eigen::Index in, Eigen::Index out) {
    return {ps.add(name + ".w", in, out), ps.add(name + ".b", 1, out)};
  }
  void init(const ParamSet& ps, Eigen::VectorXd& theta, Rng& rng) const {
    init_xavier(ps.view(theta, w), rng);
    ps.view(theta, b).setZero();
  }
  RowMat forward(const ParamSet& ps, const Eigen::VectorXd& theta, const RowMat& x) const {
    RowMat y = x * ps.view(theta, w);
    y.rowwise() += ps.view(theta, b).row(0);
    return y;
  }
  RowMat backward(const ParamSet& ps, const Eigen::VectorXd& theta, const RowMat& x, const RowMat& dy,
                  Eigen::VectorXd& grad) const {
    ps.view(grad, w).noalias() += x.transpose() * dy;
    ps.view(grad, b).row(0) += dy.colwise().sum();
    return dy * ps.view(theta, w).transpose();
  }
};

struct LayerNorm {
  int g = -1, b = -1;
  static constexpr double kEps = 1e-6;

  struct Cache {
    RowMat xhat;
    Eigen::VectorXd inv_std;
  };

  static LayerNorm create(ParamSet& ps, const std::string& name, Eigen::Index dim) {
    return {ps.add(name + ".g", 1, dim), ps.add(name + ".b", 1, dim)};
  }
  void init(const ParamSet& ps, Eigen::VectorXd& theta) const {
    ps.view(theta, g).setOnes();
    ps.view(theta, b).setZero();
  }
  RowMat forward(const ParamSet& ps, const Eigen::VectorXd& theta, const RowMat& x, Cache& c) const {
    const Eigen::Index n = x.rows(), d = x.cols();
    c.xhat.resize(n, d);
    c.inv_std.resize(n);
    for (Eigen::Index r = 0; r < n; ++r) {
      const double mean = x.row(r).mean();
      const double var = (x.row(r).array() - mean).square().mean();
      c.inv_std(r) = 1.0 / std::sqrt(var + kEps);
      c.xhat.row(r) = (x.row(r).array() - mean) * c.inv_std(r);
    }
    RowMat y = c.xhat.array().rowwise() * ps.view(theta, g).row(0).array();
    y.rowwise() += ps.view(theta, b).row(0);
    return y;
  }
  RowMat backward(const ParamSet& ps, const Eigen::VectorXd& theta, const Cache& c, const RowMat& dy,
                  Eigen::VectorXd& grad) const {
    ps.view(grad, g).row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
    ps.view(grad, b).row(0) += dy.colwise().sum();
    const RowMat dxhat = dy.array().rowwise() * ps.view(theta, g).row(0).array();
    const double d = static_cast<double>(dy.cols());
    RowMat dx(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
      const double s1 = dxhat.row(r).sum();
      const double s2 = dxhat.row(r).dot(c.xhat.row(r));
      dx.row(r) = (c.inv_std(r) / d) * (d * dxhat.row(r).array() - s1 - c.xhat.row(r).array() * s2);
    }
    return dx;
  }
};

/// Tanh-form GELU.
inline RowMat gelu(const RowMat& x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::tanh(k * (v + 0.044715 * v * v * v))); });
}

inline RowMat gelu_backward(const RowMat& x, const RowMat& dy) {
  constexpr double k = 0.7978845608028654;
  const RowMat d = x.unaryExpr([](double v) {
    const double u = k * (v + 0.044715 * v * v * v);
    const double t = std::tanh(u);
    return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * k * (1.0 + 3.0 * 0.044715 * v * v);
  });
  return d.cwiseProduct(dy);
}

struct Attention {
  Linear qkv, proj;
  int heads = 1;
  Eigen::Index dim = 0;

  struct Cache {
    RowMat x, qkv, context;
    std::vector<RowMat> probs;
  };

  static Attention create(ParamSet& ps, const std::string& name, Eigen::Index dim, int heads) {
    require(heads > 0 && dim % heads == 0, ErrorKind::InvalidConfig, "embedding width must be divisible by the head count");
    return {Linear::create(ps, name + ".qkv", dim, 3 * dim), Linear::create(ps, name + ".proj", dim, dim), heads, dim};
  }
  void init(const ParamSet& ps, Eigen::VectorXd& theta, Rng& rng) const {
    qkv.init(ps, theta, rng);
    proj.init(ps, theta, rng);
  }

  RowMat forward(const ParamSet& ps, const Eigen::VectorXd& theta, const RowMat& x, Cache& c) const {
    const Eigen::Index t = x.rows(), dh = dim / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    c.x = x;
    c.qkv = qkv.forward(ps, theta, x);
    c.context.resize(t, dim);
    c.probs.resize(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      const auto q = c.qkv.middleCols(h * dh, dh);
      const auto k = c.qkv.middleCols(dim + h * dh, dh);
      const auto v = c.qkv.middleCols(2 * dim + h * dh, dh);
      RowMat s = scale * (q * k.transpose());
      for (Eigen::Index r = 0; r < t; ++r) {
        const double m = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - m).exp();
        s.row(r) /= s.row(r).sum();
      }
      c.context.middleCols(h * dh, dh) = s * v;
      c.probs[static_cast<std::size_t>(h)] = std::move(s);
    }
    return proj.forward(ps, theta, c.context);
  }

  RowMat backward(const ParamSet& ps, const Eigen::VectorXd& theta, const Cache& c, const RowMat& dy,
                  Eigen::VectorXd& grad) const {
    const Eigen::Index t = c.x.rows(), dh = dim / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const RowMat dctx = proj.backward(ps, theta, c.context, dy, grad);
    RowMat dqkv = RowMat::Zero(t, 3 * dim);
    for (int h = 0; h < heads; ++h) {
      const RowMat& a = c.probs[static_cast<std::size_t>(h)];
      const auto q = c.qkv.middleCols(h * dh, dh);
      const auto k = c.qkv.middleCols(dim + h * dh, dh);
      const auto v = c.qkv.middleCols(2 * dim + h * dh, dh);
      const auto dctx_h = dctx.middleCols(h * dh, dh);
      const RowMat da = dctx_h * v.transpose();
      dqkv.middleCols(2 * dim + h * dh, dh) = a.transpose() * dctx_h;
      RowMat ds = a.cwiseProduct(da);
      const Eigen::VectorXd rows = ds.rowwise().sum();
      ds -= a.cwiseProduct(rows.replicate(1, t));
      dqkv.middleCols(h * dh, dh) = scale * (ds * k);
      dqkv.middleCols(dim + h * dh, dh) = scale * (ds.transpose() * q);
    }
    return qkv.backward(ps, theta, c.x, dqkv, grad);
  }
};

/// Pre-norm residual block: x + attn(ln(x)), then + mlp(ln(.)).
struct Block {
  LayerNorm ln1, ln2;
  Attention attn;
  Linear fc1, fc2;

  struct Cache {
    LayerNorm::Cache ln1, ln2;
    Attention::Cache attn;
    RowMat h_norm, hidden_pre, hidden;
  };

  static Block create(ParamSet& ps, const std::string& name, Eigen::Index dim, int heads, int mlp_ratio) {
    Block b;
    b.ln1 = LayerNorm::create(ps, name + ".ln1", dim);
    b.attn = Attention::create(ps, name + ".attn", dim, heads);
    b.ln2 = LayerNorm::create(ps, name + ".ln2", dim);
    b.fc1 = Linear::create(ps, name + ".mlp.fc1", dim, mlp_ratio * dim);
    b.fc2 = Linear::create(ps, name + ".mlp.fc2", mlp_ratio * dim, dim);
    return b;
  }
  void init(const ParamSet& ps, Eigen::VectorXd& theta, Rng& rng) const {
    ln1.init(ps, theta);
    ln2.init(ps, theta);
    attn.init(ps, theta, rng);
    fc1.init(ps, theta, rng);
    fc2.init(ps, theta, rng);
  }

  RowMat forward(const ParamSet& ps, const Eigen::VectorXd& theta, const RowMat& x, Cache& c) const {
    RowMat h = x + attn.forward(ps, theta, ln1.forward(ps, theta, x, c.ln1), c.attn);
    c.h_norm = ln2.forward(ps, theta, h, c.ln2);
    c.hidden_pre = fc1.forward(ps, theta, c.h_norm);
    c.hidden = gelu(c.hidden_pre);
    return h + fc2.forward(ps, theta, c.hidden);
  }

  RowMat backward(const ParamSet& ps, const Eigen::VectorXd& theta, const Cache& c, const RowMat& dy,
                  Eigen::VectorXd& grad) const {
    const RowMat dhidden = fc2.backward(ps, theta, c.hidden, dy, grad);
    const RowMat dpre = gelu_backward(c.hidden_pre, dhidden);
    const RowMat dhn = fc1.backward(ps, theta, c.h_norm, dpre, grad);
    const RowMat dh = dy + ln2.backward(ps, theta, c.ln2, dhn, grad);
    const RowMat dattn_in = attn.backward(ps, theta, c.attn, dh, grad);
    return dh + ln1.backward(ps, theta, c.ln1, dattn_in, grad);
  }
};

}  // namespace polyfm::mae

#pragma once

#include <algorithm>
#include <cfenv>
#include <cmath>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "polyfm/error.hpp"
#include "polyfm/mae/layers.hpp"
#include "polyfm/odmn.hpp"
#include "polyfm/rng.hpp"
#include "polyfm/rve.hpp"

namespace polyfm::mae {

enum class HeadKind { None, Stiffness, Odmn };

inline const char* to_string(HeadKind h) {
  switch (h) {
    case HeadKind::None: return "none";
    case HeadKind::Stiffness: return "stiffness";
    case HeadKind::Odmn: return "odmn";
  }
  return "none";
}

inline HeadKind head_kind_from_string(const std::string& s) {
  if (s == "none") return HeadKind::None;
  if (s == "stiffness") return HeadKind::Stiffness;
  if (s == "odmn") return HeadKind::Odmn;
  fail(ErrorKind::InvalidConfig, "unknown head kind '" + s + "'");
}

struct MaeConfig {
  int side = 16;
  int patch = 4;
  int channels = 4;
  int embed = 96;
  int encoder_blocks = 2;
  int encoder_heads = 4;
  int decoder_embed = 48;
  int decoder_blocks = 1;
  int decoder_heads = 4;
  int mlp_ratio = 4;
  double mask_ratio = 0.4;
  HeadKind head = HeadKind::None;
  int odmn_depth = 6;

  int grid() const { return side / patch; }
  int patches() const { return grid() * grid() * grid(); }
  int patch_features() const { return patch * patch * patch * channels; }
  int head_outputs() const {
    switch (head) {
      case HeadKind::Stiffness: return 3;
      case HeadKind::Odmn: return static_cast<int>(OdmnParams::parameter_count(odmn_depth));
      case HeadKind::None: return 0;
    }
    return 0;
  }

  void validate() const {
    require(side > 0 && patch > 0 && side % patch == 0, ErrorKind::InvalidConfig,
            "RVE side must be a positive multiple of the patch size");
    require(channels == 4, ErrorKind::InvalidConfig, "quaternion fields have 4 channels");
    require(embed > 0 && embed % 6 == 0, ErrorKind::InvalidConfig, "encoder width must be divisible by 6");
    require(decoder_embed > 0 && decoder_embed % 6 == 0, ErrorKind::InvalidConfig, "decoder width must be divisible by 6");
    require(encoder_heads > 0 && embed % encoder_heads == 0, ErrorKind::InvalidConfig,
            "encoder width must be divisible by the encoder head count");
    require(decoder_heads > 0 && decoder_embed % decoder_heads == 0, ErrorKind::InvalidConfig,
            "decoder width must be divisible by the decoder head count");
    require(encoder_blocks >= 0 && decoder_blocks >= 0 && mlp_ratio >= 1, ErrorKind::InvalidConfig,
            "invalid block counts or MLP ratio");
    require(mask_ratio >= 0.2 && mask_ratio <= 0.9, ErrorKind::InvalidConfig, "mask ratio must lie in [0.2, 0.9]");
    require(mask_ratio * patches() >= 1.0, ErrorKind::InvalidConfig, "mask ratio leaves no masked patch");
    if (head == HeadKind::Odmn) require(odmn_depth >= 0 && odmn_depth <= 12, ErrorKind::InvalidConfig, "invalid ODMN depth");
  }
};

inline nlohmann::json to_json(const MaeConfig& c) {
  return {{"side", c.side},
          {"patch", c.patch},
          {"channels", c.channels},
          {"embed", c.embed},
          {"encoder_blocks", c.encoder_blocks},
          {"encoder_heads", c.encoder_heads},
          {"decoder_embed", c.decoder_embed},
          {"decoder_blocks", c.decoder_blocks},
          {"decoder_heads", c.decoder_heads},
          {"mlp_ratio", c.mlp_ratio},
          {"mask_ratio", c.mask_ratio},
          {"head", to_string(c.head)},
          {"odmn_depth", c.odmn_depth}};
}

inline MaeConfig mae_config_from_json(const nlohmann::json& j) {
  MaeConfig c;
  try {
    c.side = j.value("side", c.side);
    c.patch = j.value("patch", c.patch);
    c.channels = j.value("channels", c.channels);
    c.embed = j.value("embed", c.embed);
    c.encoder_blocks = j.value("encoder_blocks", c.encoder_blocks);
    c.encoder_heads = j.value("encoder_heads", c.encoder_heads);
    c.decoder_embed = j.value("decoder_embed", c.decoder_embed);
    c.decoder_blocks = j.value("decoder_blocks", c.decoder_blocks);
    c.decoder_heads = j.value("decoder_heads", c.decoder_heads);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.mask_ratio = j.value("mask_ratio", c.mask_ratio);
    c.head = head_kind_from_string(j.value("head", std::string("none")));
    c.odmn_depth = j.value("odmn_depth", c.odmn_depth);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::InvalidConfig, std::string("malformed model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Tokenization

/// Splits a cubic field into non-overlapping cubes. Patch k = (pz*G + py)*G + px
/// (x fastest); feature ((lz*P + ly)*P + lx)*4 + c.
inline RowMat patchify(const QuaternionField& f, int patch) {
  const Dims& d = f.dims;
  require(d.nx == d.ny && d.ny == d.nz, ErrorKind::InvalidConfig, "patchify needs a cubic field");
  require(patch > 0 && d.nx % static_cast<std::uint32_t>(patch) == 0, ErrorKind::InvalidConfig,
          "field side is not divisible by the patch size");
  require(f.data.size() == 4 * d.voxels(), ErrorKind::InvalidInput, "field data does not match its dims");
  const int g = static_cast<int>(d.nx) / patch;
  RowMat out(g * g * g, patch * patch * patch * 4);
  for (int pz = 0; pz < g; ++pz)
    for (int py = 0; py < g; ++py)
      for (int px = 0; px < g; ++px) {
        const int k = (pz * g + py) * g + px;
        for (int lz = 0; lz < patch; ++lz)
          for (int ly = 0; ly < patch; ++ly)
            for (int lx = 0; lx < patch; ++lx) {
              const double* q = f.voxel(d.index(px * patch + lx, py * patch + ly, pz * patch + lz));
              const int base = ((lz * patch + ly) * patch + lx) * 4;
              for (int c = 0; c < 4; ++c) out(k, base + c) = q[c];
            }
      }
  return out;
}

inline QuaternionField unpatchify(const RowMat& patches, int patch) {
  const int g = static_cast<int>(std::lround(std::cbrt(static_cast<double>(patches.rows()))));
  require(g * g * g == patches.rows() && patches.cols() == patch * patch * patch * 4, ErrorKind::InvalidInput,
          "patch matrix does not describe a cubic field");
  QuaternionField f;
  const auto side = static_cast<std::uint32_t>(g * patch);
  f.dims = {side, side, side};
  f.data.resize(4 * f.dims.voxels());
  for (int pz = 0; pz < g; ++pz)
    for (int py = 0; py < g; ++py)
      for (int px = 0; px < g; ++px) {
        const int k = (pz * g + py) * g + px;
        for (int lz = 0; lz < patch; ++lz)
          for (int ly = 0; ly < patch; ++ly)
            for (int lx = 0; lx < patch; ++lx) {
              const std::size_t v = f.dims.index(px * patch + lx, py * patch + ly, pz * patch + lz);
              const int base = ((lz * patch + ly) * patch + lx) * 4;
              for (int c = 0; c < 4; ++c) f.data[4 * v + c] = patches(k, base + c);
            }
      }
  return f;
}

/// Flips every voxel quaternion to w >= 0.
inline void canonicalize_signs(QuaternionField& f) {
  for (std::size_t v = 0; v < f.dims.voxels(); ++v) {
    double* q = f.data.data() + 4 * v;
    if (q[0] < 0.0)
      for (int c = 0; c < 4; ++c) q[c] = -q[c];
  }
}

/// Row 0 is the class token (zeros); row 1 + k holds [x | y | z] encodings of
/// patch k, each axis interleaving sin and cos of pos / 10000^(2i / (width/3)).
inline RowMat positional_encoding_3d(int grid, int width) {
  require(grid > 0 && width > 0 && width % 6 == 0, ErrorKind::InvalidConfig, "encoding width must be divisible by 6");
  const int axis = width / 3;
  RowMat pe = RowMat::Zero(1 + grid * grid * grid, width);
  auto fill = [&](Eigen::Index row, int offset, int pos) {
    for (int i = 0; i < axis / 2; ++i) {
      const double angle = pos / std::pow(10000.0, 2.0 * i / axis);
      pe(row, offset + 2 * i) = std::sin(angle);
      pe(row, offset + 2 * i + 1) = std::cos(angle);
    }
  };
  for (int gz = 0; gz < grid; ++gz)
    for (int gy = 0; gy < grid; ++gy)
      for (int gx = 0; gx < grid; ++gx) {
        const Eigen::Index row = 1 + (gz * grid + gy) * grid + gx;
        fill(row, 0, gx);
        fill(row, axis, gy);
        fill(row, 2 * axis, gz);
      }
  return pe;
}

struct MaskPlan {
  std::vector<int> visible;
  std::vector<int> masked;
};

/// Masked count is ratio * n rounded half to even.
inline int masked_count(int n_patches, double ratio) {
  require(ratio > 0.0 && ratio < 1.0, ErrorKind::InvalidConfig, "mask ratio must lie in (0, 1)");
  // Snap away representation noise so that e.g. 0.9 * 125 is treated as the tie 112.5.
  const double x = std::round(ratio * n_patches * 1e9) / 1e9;
  const int prev = std::fegetround();
  std::fesetround(FE_TONEAREST);
  const int m = static_cast<int>(std::nearbyint(x));
  std::fesetround(prev);
  return m;
}

inline MaskPlan mask_patches(int n_patches, double ratio, Rng& rng) {
  require(n_patches >= 2, ErrorKind::InvalidConfig, "masking needs at least two patches");
  const int m = masked_count(n_patches, ratio);
  require(m >= 1 && m < n_patches, ErrorKind::InvalidConfig, "mask ratio leaves an empty visible or masked set");
  std::vector<int> order(static_cast<std::size_t>(n_patches));
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  MaskPlan plan;
  plan.masked.assign(order.begin(), order.begin() + m);
  plan.visible.assign(order.begin() + m, order.end());
  std::sort(plan.masked.begin(), plan.masked.end());
  std::sort(plan.visible.begin(), plan.visible.end());
  return plan;
}

// ---------------------------------------------------------------------------
// Head output mapping

inline double sigmoid(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }
inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

/// Raw head outputs -> ODMN parameters: z by softplus, Euler angles by
/// 2pi/pi/2pi-scaled sigmoids, normal angles by sigmoid. Returns the
/// parameter vector and its elementwise derivative.
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> squash_odmn(const Eigen::VectorXd& raw, int depth) {
  require(static_cast<std::size_t>(raw.size()) == OdmnParams::parameter_count(depth), ErrorKind::InvalidInput,
          "head output length does not match the ODMN depth");
  constexpr double two_pi = 2.0 * std::numbers::pi;
  Eigen::VectorXd v(raw.size()), dv(raw.size());
  const Eigen::Index leaf_end = 4 * static_cast<Eigen::Index>(OdmnParams::leaf_count(depth));
  for (Eigen::Index k = 0; k < raw.size(); ++k) {
    const double s = sigmoid(raw(k));
    double scale = 1.0;
    if (k < leaf_end) {
      switch (k % 4) {
        case 0:
          v(k) = softplus(raw(k));
          dv(k) = s;
          continue;
        case 2: scale = std::numbers::pi; break;
        default: scale = two_pi; break;
      }
    }
    v(k) = scale * s;
    dv(k) = scale * s * (1.0 - s);
  }
  return {v, dv};
}

// ---------------------------------------------------------------------------
// Model

struct Stack {
  std::vector<Block> blocks;
  LayerNorm norm;

  struct Cache {
    std::vector<Block::Cache> blocks;
    LayerNorm::Cache norm;
  };

  static Stack create(ParamSet& ps, const std::string& prefix, int n, Eigen::Index dim, int heads, int mlp_ratio) {
    Stack s;
    for (int b = 0; b < n; ++b) s.blocks.push_back(Block::create(ps, prefix + ".blocks." + std::to_string(b), dim, heads, mlp_ratio));
    s.norm = LayerNorm::create(ps, prefix + ".norm", dim);
    return s;
  }
  void init(const ParamSet& ps, Eigen::VectorXd& theta, Rng& rng) const {
    for (const auto& b : blocks) b.init(ps, theta, rng);
    norm.init(ps, theta);
  }
  RowMat forward(const ParamSet& ps, const Eigen::VectorXd& theta, RowMat x, Cache& c, const char* stage) const {
    c.blocks.resize(blocks.size());
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      x = blocks[b].forward(ps, theta, x, c.blocks[b]);
      if (!x.allFinite()) fail(ErrorKind::Numeric, std::string("non-finite activations in ") + stage + " block " + std::to_string(b));
    }
    return norm.forward(ps, theta, x, c.norm);
  }
  RowMat backward(const ParamSet& ps, const Eigen::VectorXd& theta, const Cache& c, const RowMat& dy,
                  Eigen::VectorXd& grad) const {
    RowMat dx = norm.backward(ps, theta, c.norm, dy, grad);
    for (std::size_t b = blocks.size(); b-- > 0;) dx = blocks[b].backward(ps, theta, c.blocks[b], dx, grad);
    return dx;
  }
};

struct PretrainResult {
  double loss = 0.0;
  RowMat reconstruction;  // one row per masked patch, in plan order
};

struct ForwardOutput {
  double loss = 0.0;
  Eigen::VectorXd output;  // head values (Task I) or squashed ODMN parameters (Task II)
};

class MaeModel {
 public:
  explicit MaeModel(MaeConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    const int d = cfg_.patch_features();
    patch_embed_ = Linear::create(ps_, "encoder.patch_embed", d, cfg_.embed);
    cls_ = ps_.add("encoder.cls_token", 1, cfg_.embed);
    encoder_ = Stack::create(ps_, "encoder", cfg_.encoder_blocks, cfg_.embed, cfg_.encoder_heads, cfg_.mlp_ratio);
    decoder_embed_ = Linear::create(ps_, "decoder.embed", cfg_.embed, cfg_.decoder_embed);
    mask_token_ = ps_.add("decoder.mask_token", 1, cfg_.decoder_embed);
    decoder_ = Stack::create(ps_, "decoder", cfg_.decoder_blocks, cfg_.decoder_embed, cfg_.decoder_heads, cfg_.mlp_ratio);
    decoder_pred_ = Linear::create(ps_, "decoder.pred", cfg_.decoder_embed, d);
    if (cfg_.head != HeadKind::None) head_ = Linear::create(ps_, std::string("head.") + to_string(cfg_.head), cfg_.embed, cfg_.head_outputs());
    pe_enc_ = positional_encoding_3d(cfg_.grid(), cfg_.embed);
    pe_dec_ = positional_encoding_3d(cfg_.grid(), cfg_.decoder_embed);
  }

  const MaeConfig& config() const noexcept { return cfg_; }
  const ParamSet& params() const noexcept { return ps_; }
  Eigen::Index size() const noexcept { return ps_.size(); }

  Eigen::VectorXd initialize(std::uint64_t seed) const {
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(ps_.size());
    Rng rng = Rng::stream(seed, {0x4d4145ULL});
    patch_embed_.init(ps_, theta, rng);
    init_normal(ps_.view(theta, cls_), rng, 0.02);
    encoder_.init(ps_, theta, rng);
    decoder_embed_.init(ps_, theta, rng);
    init_normal(ps_.view(theta, mask_token_), rng, 0.02);
    decoder_.init(ps_, theta, rng);
    init_normal(ps_.view(theta, decoder_pred_.w), rng, 0.02);
    if (head_) head_->init(ps_, theta, rng);
    return theta;
  }

  bool is_head_param(int id) const { return head_ && (id == head_->w || id == head_->b); }

  /// 1 on head weights, 0 elsewhere; multiplies gradients of a frozen encoder.
  Eigen::VectorXd head_mask() const {
    Eigen::VectorXd m = Eigen::VectorXd::Zero(ps_.size());
    for (int id = 0; id < static_cast<int>(ps_.entries().size()); ++id)
      if (is_head_param(id)) ps_.view(m, id).setOnes();
    return m;
  }

  // -------------------------------------------------------------------------
  // Pretraining

  /// Masked reconstruction loss (1/|M|) sum_i (1/d) |pred_i - target_i|^2.
  /// When grad is given, accumulates dloss/dtheta into it; when target_grad is
  /// given, stores dloss/dpatches for the target side.
  PretrainResult pretrain(const Eigen::VectorXd& theta, const RowMat& patches, const MaskPlan& plan,
                          Eigen::VectorXd* grad = nullptr, RowMat* target_grad = nullptr) const {
    check_patches(patches);
    require(!plan.masked.empty() && !plan.visible.empty(), ErrorKind::InvalidConfig,
            "pretraining needs non-empty visible and masked sets");
    require(plan.masked.size() + plan.visible.size() == static_cast<std::size_t>(cfg_.patches()), ErrorKind::InvalidInput,
            "mask plan does not cover every patch");
    const auto nv = static_cast<Eigen::Index>(plan.visible.size());
    const Eigen::Index np = cfg_.patches(), d = cfg_.patch_features();

    EncoderCache enc;
    const RowMat latent = encode(theta, patches, plan.visible, enc);

    const RowMat projected = decoder_embed_.forward(ps_, theta, latent);
    RowMat dec_in(1 + np, cfg_.decoder_embed);
    dec_in.row(0) = projected.row(0);
    for (Eigen::Index k = 0; k < nv; ++k) dec_in.row(1 + plan.visible[static_cast<std::size_t>(k)]) = projected.row(1 + k);
    for (int m : plan.masked) dec_in.row(1 + m) = ps_.view(theta, mask_token_).row(0);
    dec_in += pe_dec_;
    Stack::Cache dec_cache;
    const RowMat dec_out = decoder_.forward(ps_, theta, dec_in, dec_cache, "decoder");
    const RowMat pred = decoder_pred_.forward(ps_, theta, dec_out);
    if (!pred.allFinite()) fail(ErrorKind::Numeric, "non-finite reconstruction in decoder prediction layer");

    PretrainResult out;
    out.reconstruction.resize(static_cast<Eigen::Index>(plan.masked.size()), d);
    const double norm = 1.0 / (static_cast<double>(plan.masked.size()) * static_cast<double>(d));
    RowMat dpred = RowMat::Zero(1 + np, d);
    if (target_grad) *target_grad = RowMat::Zero(np, d);
    for (std::size_t i = 0; i < plan.masked.size(); ++i) {
      const int m = plan.masked[i];
      const RowVec diff = pred.row(1 + m) - patches.row(m);
      out.reconstruction.row(static_cast<Eigen::Index>(i)) = pred.row(1 + m);
      out.loss += norm * diff.squaredNorm();
      dpred.row(1 + m) = 2.0 * norm * diff;
      if (target_grad) target_grad->row(m) = -2.0 * norm * diff;
    }
    if (!grad) return out;

    const RowMat ddec_out = decoder_pred_.backward(ps_, theta, dec_out, dpred, *grad);
    const RowMat ddec_in = decoder_.backward(ps_, theta, dec_cache, ddec_out, *grad);
    RowMat dprojected(1 + nv, cfg_.decoder_embed);
    dprojected.row(0) = ddec_in.row(0);
    for (Eigen::Index k = 0; k < nv; ++k) dprojected.row(1 + k) = ddec_in.row(1 + plan.visible[static_cast<std::size_t>(k)]);
    for (int m : plan.masked) ps_.view(*grad, mask_token_).row(0) += ddec_in.row(1 + m);
    const RowMat dlatent = decoder_embed_.backward(ps_, theta, latent, dprojected, *grad);
    encode_backward(theta, enc, dlatent, *grad);
    return out;
  }

  // -------------------------------------------------------------------------
  // Downstream heads (all patches visible)

  /// Normalized class-token embedding.
  RowVec cls_embedding(const Eigen::VectorXd& theta, const RowMat& patches) const {
    check_patches(patches);
    EncoderCache enc;
    return encode(theta, patches, all_patches(), enc).row(0);
  }

  Eigen::VectorXd head_raw(const Eigen::VectorXd& theta, const RowMat& patches) const {
    require(head_.has_value(), ErrorKind::InvalidConfig, "model has no downstream head");
    const RowVec cls = cls_embedding(theta, patches);
    return head_->forward(ps_, theta, cls).row(0).transpose();
  }

  /// Task I: mean squared error of the three standardized stiffness values.
  ForwardOutput stiffness_loss(const Eigen::VectorXd& theta, const RowMat& patches, const Eigen::Vector3d& target,
                               Eigen::VectorXd* grad = nullptr) const {
    require(cfg_.head == HeadKind::Stiffness, ErrorKind::InvalidConfig, "model has no stiffness head");
    HeadPass pass = head_forward(theta, patches);
    ForwardOutput out;
    out.output = pass.raw;
    const Eigen::Vector3d diff = pass.raw - target;
    out.loss = diff.squaredNorm() / 3.0;
    if (grad) head_backward(theta, pass, (2.0 / 3.0) * diff, *grad);
    return out;
  }

  /// Task II: relative Frobenius error of the ODMN prediction built from the
  /// squashed head output, differentiated through the linear homogenization.
  ForwardOutput odmn_loss(const Eigen::VectorXd& theta, const RowMat& patches, const StiffnessVoigt& c_crystal,
                          const StiffnessVoigt& c_reference, Eigen::VectorXd* grad = nullptr) const {
    require(cfg_.head == HeadKind::Odmn, ErrorKind::InvalidConfig, "model has no ODMN head");
    HeadPass pass = head_forward(theta, patches);
    const auto [values, dvalues] = squash_odmn(pass.raw, cfg_.odmn_depth);
    const OdmnParams p = OdmnParams::from_vector(cfg_.odmn_depth, values);
    const LossAndGradient lg = grad_params(p, c_crystal, c_reference);
    ForwardOutput out{lg.loss, values};
    if (grad) head_backward(theta, pass, lg.gradient.cwiseProduct(dvalues), *grad);
    return out;
  }

  OdmnParams predict_odmn(const Eigen::VectorXd& theta, const RowMat& patches) const {
    require(cfg_.head == HeadKind::Odmn, ErrorKind::InvalidConfig, "model has no ODMN head");
    return OdmnParams::from_vector(cfg_.odmn_depth, squash_odmn(head_raw(theta, patches), cfg_.odmn_depth).first);
  }

 private:
  struct EncoderCache {
    RowMat tokens_in;
    std::vector<int> positions;
    Stack::Cache stack;
  };

  struct HeadPass {
    EncoderCache enc;
    RowMat latent;
    Eigen::VectorXd raw;
  };

  void check_patches(const RowMat& patches) const {
    require(patches.rows() == cfg_.patches() && patches.cols() == cfg_.patch_features(), ErrorKind::InvalidInput,
            "patch matrix shape does not match the model config");
    require(patches.allFinite(), ErrorKind::Numeric, "non-finite input patches");
  }

  std::vector<int> all_patches() const {
    std::vector<int> idx(static_cast<std::size_t>(cfg_.patches()));
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
  }

  RowMat encode(const Eigen::VectorXd& theta, const RowMat& patches, const std::vector<int>& positions,
                EncoderCache& c) const {
    const auto n = static_cast<Eigen::Index>(positions.size());
    c.positions = positions;
    c.tokens_in.resize(n, cfg_.patch_features());
    for (Eigen::Index k = 0; k < n; ++k) c.tokens_in.row(k) = patches.row(positions[static_cast<std::size_t>(k)]);
    const RowMat embedded = patch_embed_.forward(ps_, theta, c.tokens_in);
    RowMat x(1 + n, cfg_.embed);
    x.row(0) = ps_.view(theta, cls_).row(0) + pe_enc_.row(0);
    for (Eigen::Index k = 0; k < n; ++k) x.row(1 + k) = embedded.row(k) + pe_enc_.row(1 + positions[static_cast<std::size_t>(k)]);
    if (!x.allFinite()) fail(ErrorKind::Numeric, "non-finite activations in patch embedding");
    return encoder_.forward(ps_, theta, std::move(x), c.stack, "encoder");
  }

  void encode_backward(const Eigen::VectorXd& theta, const EncoderCache& c, const RowMat& dlatent,
                       Eigen::VectorXd& grad) const {
    const RowMat dx = encoder_.backward(ps_, theta, c.stack, dlatent, grad);
    ps_.view(grad, cls_).row(0) += dx.row(0);
    patch_embed_.backward(ps_, theta, c.tokens_in, dx.bottomRows(dx.rows() - 1), grad);
  }

  HeadPass head_forward(const Eigen::VectorXd& theta, const RowMat& patches) const {
    check_patches(patches);
    HeadPass pass;
    pass.latent = encode(theta, patches, all_patches(), pass.enc);
    pass.raw = head_->forward(ps_, theta, pass.latent.topRows(1)).row(0).transpose();
    if (!pass.raw.allFinite()) fail(ErrorKind::Numeric, "non-finite head output");
    return pass;
  }

  void head_backward(const Eigen::VectorXd& theta, const HeadPass& pass, const Eigen::VectorXd& draw,
                     Eigen::VectorXd& grad) const {
    const RowMat dcls = head_->backward(ps_, theta, pass.latent.topRows(1), draw.transpose(), grad);
    RowMat dlatent = RowMat::Zero(pass.latent.rows(), pass.latent.cols());
    dlatent.row(0) = dcls.row(0);
    encode_backward(theta, pass.enc, dlatent, grad);
  }

  MaeConfig cfg_;
  ParamSet ps_;
  Linear patch_embed_;
  int cls_ = -1;
  Stack encoder_;
  Linear decoder_embed_;
  int mask_token_ = -1;
  Stack decoder_;
  Linear decoder_pred_;
  std::optional<Linear> head_;
  RowMat pe_enc_, pe_dec_;
};

}  // namespace polyfm::mae

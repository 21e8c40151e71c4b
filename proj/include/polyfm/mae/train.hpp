#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "polyfm/error.hpp"
#include "polyfm/mae/model.hpp"
#include "polyfm/odmn.hpp"
#include "polyfm/optim.hpp"
#include "polyfm/parallel.hpp"
#include "polyfm/rng.hpp"

namespace polyfm::mae {

/// Patch matrix of an RVE with canonical quaternion signs.
inline RowMat rve_patches(const Rve& rve, int patch) {
  QuaternionField f = rve_to_tensor(rve);
  canonicalize_signs(f);
  return patchify(f, patch);
}

/// Reconstruction loss of predicting every masked patch by the dataset-mean
/// quaternion, averaged over all patches (the expectation over random masks).
inline double mean_quaternion_baseline(const std::vector<RowMat>& data) {
  require(!data.empty(), ErrorKind::InvalidInput, "baseline needs data");
  Eigen::Vector4d mean = Eigen::Vector4d::Zero();
  double count = 0.0;
  for (const auto& x : data) {
    for (Eigen::Index c = 0; c < 4; ++c)
      for (Eigen::Index k = c; k < x.cols(); k += 4) mean(c) += x.col(k).sum();
    count += static_cast<double>(x.size()) / 4.0;
  }
  mean /= count;
  double loss = 0.0;
  for (const auto& x : data) {
    RowMat diff = x;
    for (Eigen::Index k = 0; k < x.cols(); ++k) diff.col(k).array() -= mean(k % 4);
    loss += diff.squaredNorm() / static_cast<double>(x.size());
  }
  return loss / static_cast<double>(data.size());
}

inline MaskPlan sample_mask(const MaeConfig& cfg, std::uint64_t seed, std::uint64_t step, std::uint64_t sample) {
  Rng rng = Rng::stream(seed, {0x4d41534bULL, step, sample});
  return mask_patches(cfg.patches(), cfg.mask_ratio, rng);
}

/// Mean masked loss over the data set under fixed evaluation masks.
inline double evaluate_pretrain(const MaeModel& model, const Eigen::VectorXd& theta, const std::vector<RowMat>& data,
                                std::uint64_t mask_seed) {
  std::vector<double> losses(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    losses[i] = model.pretrain(theta, data[i], sample_mask(model.config(), mask_seed, ~0ULL, i)).loss;
  });
  return std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(data.size());
}

struct TrainOptions {
  long steps = 200;          // pretraining optimizer steps
  int epochs = 20;           // downstream epochs
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  double validation_fraction = 0.2;
  std::uint64_t seed = 0;
};

struct StepRecord {
  long step;
  double train_loss;
  double eval_loss;
};

struct PretrainOutcome {
  Eigen::VectorXd theta;  // last finite parameters
  std::string aborted;    // non-empty when a non-finite loss stopped training
  double initial_eval = 0.0;
  double final_eval = 0.0;
  std::vector<StepRecord> history;
};

namespace detail {

/// Per-sample gradients in parallel, summed in sample order.
template <class Fn>
double batch_gradient(Eigen::Index n_params, const std::vector<std::size_t>& batch, Fn&& sample_grad,
                      Eigen::VectorXd& grad) {
  std::vector<Eigen::VectorXd> per(batch.size());
  std::vector<double> losses(batch.size());
  parallel_for(batch.size(), [&](std::size_t k) {
    per[k] = Eigen::VectorXd::Zero(n_params);
    losses[k] = sample_grad(k, batch[k], per[k]);
  });
  grad = Eigen::VectorXd::Zero(n_params);
  double loss = 0.0;
  for (std::size_t k = 0; k < batch.size(); ++k) {
    if (!std::isfinite(losses[k]) || !per[k].allFinite()) fail(ErrorKind::Numeric, "non-finite loss or gradient in batch");
    grad += per[k];
    loss += losses[k];
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  grad *= inv;
  return loss * inv;
}

inline void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.index(i)]);
}

}  // namespace detail

/// Masked-reconstruction pretraining with Adam and cosine decay. Batches walk
/// a reshuffled permutation of the data; evaluation uses fixed masks.
inline PretrainOutcome pretrain(const MaeModel& model, Eigen::VectorXd theta, const std::vector<RowMat>& data,
                                const TrainOptions& opt, long eval_every = 0) {
  require(!data.empty() && opt.batch_size >= 1 && opt.steps >= 0, ErrorKind::InvalidConfig, "invalid pretraining setup");
  const std::uint64_t eval_seed = Rng::stream(opt.seed, {0x4556414cULL}).next_u64();
  PretrainOutcome out;
  out.initial_eval = evaluate_pretrain(model, theta, data, eval_seed);
  Adam adam(theta.size(), {opt.learning_rate});
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();
  long pass = 0;
  for (long step = 0; step < opt.steps; ++step) {
    std::vector<std::size_t> batch;
    while (batch.size() < std::min(opt.batch_size, data.size())) {
      if (cursor == order.size()) {
        Rng rng = Rng::stream(opt.seed, {0x53485546ULL, static_cast<std::uint64_t>(pass++)});
        detail::shuffle(order, rng);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    Eigen::VectorXd grad;
    double loss = 0.0;
    try {
      loss = detail::batch_gradient(theta.size(), batch,
          [&](std::size_t, std::size_t i, Eigen::VectorXd& g) {
            return model.pretrain(theta, data[i], sample_mask(model.config(), opt.seed, static_cast<std::uint64_t>(step), i), &g).loss;
          },
          grad);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Numeric) throw;
      out.aborted = "step " + std::to_string(step) + ": " + e.what();
      break;
    }
    adam.step(theta, grad, cosine_lr(opt.learning_rate, step, opt.steps));
    double eval = std::nan("");
    if (eval_every > 0 && ((step + 1) % eval_every == 0 || step + 1 == opt.steps))
      eval = evaluate_pretrain(model, theta, data, eval_seed);
    out.history.push_back({step, loss, eval});
  }
  out.final_eval = evaluate_pretrain(model, theta, data, eval_seed);
  out.theta = std::move(theta);
  return out;
}

// ---------------------------------------------------------------------------
// Supervised fine-tuning (encoder + head)

struct EpochRecord {
  int epoch;
  double train_loss;
  double validation_loss;
};

struct FinetuneOutcome {
  Eigen::VectorXd theta;  // best validation
  std::string aborted;
  double best_validation = 0.0;
  std::vector<EpochRecord> history;
  std::vector<std::size_t> train, validation;
};

/// sample_loss(theta, i, grad*) returns the loss of sample i and accumulates
/// its gradient when grad is non-null.
using SampleLoss = std::function<double(const Eigen::VectorXd&, std::size_t, Eigen::VectorXd*)>;

inline double mean_sample_loss(const Eigen::VectorXd& theta, const std::vector<std::size_t>& idx, const SampleLoss& fn) {
  if (idx.empty()) return 0.0;
  std::vector<double> l(idx.size());
  parallel_for(idx.size(), [&](std::size_t k) { l[k] = fn(theta, idx[k], nullptr); });
  return std::accumulate(l.begin(), l.end(), 0.0) / static_cast<double>(idx.size());
}

/// gradient_mask, when given, multiplies every gradient (frozen parameters = 0).
inline FinetuneOutcome finetune(Eigen::VectorXd theta, std::size_t n_samples, const SampleLoss& fn,
                                const TrainOptions& opt, const Eigen::VectorXd* gradient_mask = nullptr) {
  require(n_samples >= 1 && opt.batch_size >= 1 && opt.epochs >= 0, ErrorKind::InvalidConfig, "invalid fine-tuning setup");
  FinetuneOutcome out;
  std::tie(out.train, out.validation) = split_indices(n_samples, opt.validation_fraction, opt.seed);
  const auto& monitor = out.validation.empty() ? out.train : out.validation;
  const std::size_t batches = (out.train.size() + opt.batch_size - 1) / opt.batch_size;
  const long total = static_cast<long>(batches) * opt.epochs;
  Adam adam(theta.size(), {opt.learning_rate});
  out.theta = theta;
  out.best_validation = mean_sample_loss(theta, monitor, fn);
  std::vector<std::size_t> order = out.train;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    Rng rng = Rng::stream(opt.seed, {0x46494e45ULL, static_cast<std::uint64_t>(epoch)});
    detail::shuffle(order, rng);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * opt.batch_size, hi = std::min(order.size(), lo + opt.batch_size);
      const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(lo), order.begin() + static_cast<std::ptrdiff_t>(hi));
      Eigen::VectorXd grad;
      try {
        epoch_loss += static_cast<double>(batch.size()) *
                      detail::batch_gradient(theta.size(), batch,
                          [&](std::size_t, std::size_t i, Eigen::VectorXd& g) { return fn(theta, i, &g); }, grad);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::Numeric) throw;
        out.aborted = "epoch " + std::to_string(epoch) + ": " + e.what();
        return out;
      }
      if (gradient_mask) grad.array() *= gradient_mask->array();
      adam.step(theta, grad, cosine_lr(opt.learning_rate, adam.steps(), total));
    }
    const double v = mean_sample_loss(theta, monitor, fn);
    out.history.push_back({epoch, epoch_loss / static_cast<double>(order.size()), v});
    if (v < out.best_validation) {
      out.best_validation = v;
      out.theta = theta;
    }
  }
  return out;
}

/// Per-column mean and standard deviation over the given rows.
struct Standardizer {
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  Eigen::Vector3d scale = Eigen::Vector3d::Ones();

  static Standardizer fit(const std::vector<Eigen::Vector3d>& y, const std::vector<std::size_t>& rows) {
    require(!rows.empty(), ErrorKind::InvalidInput, "standardizer needs samples");
    Standardizer s;
    for (auto r : rows) s.mean += y[r];
    s.mean /= static_cast<double>(rows.size());
    Eigen::Vector3d var = Eigen::Vector3d::Zero();
    for (auto r : rows) var += (y[r] - s.mean).cwiseAbs2();
    var /= static_cast<double>(rows.size());
    s.scale = var.cwiseSqrt().unaryExpr([](double v) { return v > 1e-12 ? v : 1.0; });
    return s;
  }
  Eigen::Vector3d forward(const Eigen::Vector3d& v) const { return (v - mean).cwiseQuotient(scale); }
  Eigen::Vector3d inverse(const Eigen::Vector3d& v) const { return v.cwiseProduct(scale) + mean; }
};

inline nlohmann::json to_json(const Standardizer& s) {
  return {{"mean", {s.mean(0), s.mean(1), s.mean(2)}}, {"scale", {s.scale(0), s.scale(1), s.scale(2)}}};
}

inline Standardizer standardizer_from_json(const nlohmann::json& j) {
  Standardizer s;
  for (int k = 0; k < 3; ++k) {
    s.mean(k) = j.at("mean").at(k).get<double>();
    s.scale(k) = j.at("scale").at(k).get<double>();
  }
  return s;
}

/// Coefficient of determination 1 - SS_res / SS_tot.
inline double compute_r2(const std::vector<double>& pred, const std::vector<double>& truth) {
  require(pred.size() == truth.size() && truth.size() >= 2, ErrorKind::InvalidInput, "R2 needs two equal-length series");
  const double mean = std::accumulate(truth.begin(), truth.end(), 0.0) / static_cast<double>(truth.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ss_res += (pred[i] - truth[i]) * (pred[i] - truth[i]);
    ss_tot += (truth[i] - mean) * (truth[i] - mean);
  }
  require(ss_tot > 0.0, ErrorKind::InvalidInput, "R2 is undefined for constant truth");
  return 1.0 - ss_res / ss_tot;
}

// ---------------------------------------------------------------------------
// Checkpoints: "PFMCKPT1", u64 header length, JSON header, float32 arrays in
// header order (row-major, little-endian).

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'P', 'F', 'M', 'C', 'K', 'P', 'T', '1'};

struct Checkpoint {
  MaeConfig config;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<std::string> names;
  std::vector<RowMat> tensors;
};

inline void write_checkpoint(const std::string& path, const MaeModel& model, const Eigen::VectorXd& theta,
                             const nlohmann::json& metadata = nlohmann::json::object()) {
  require(theta.size() == model.size(), ErrorKind::InvalidInput, "parameter vector does not match the model");
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& e : model.params().entries()) tensors.push_back({{"name", e.name}, {"shape", {e.rows, e.cols}}});
  const std::string header = nlohmann::json{{"config", to_json(model.config())}, {"metadata", metadata}, {"tensors", tensors}}.dump();
  std::ofstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorKind::Io, "cannot open " + path + " for writing");
  f.write(kCheckpointMagic, sizeof kCheckpointMagic);
  const std::uint64_t len = header.size();
  f.write(reinterpret_cast<const char*>(&len), sizeof len);
  f.write(header.data(), static_cast<std::streamsize>(header.size()));
  std::vector<float> buf(static_cast<std::size_t>(theta.size()));
  for (Eigen::Index k = 0; k < theta.size(); ++k) buf[static_cast<std::size_t>(k)] = static_cast<float>(theta(k));
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  require(static_cast<bool>(f), ErrorKind::Io, "failed writing checkpoint " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorKind::Io, "cannot open checkpoint " + path);
  char magic[8];
  std::uint64_t len = 0;
  f.read(magic, sizeof magic);
  f.read(reinterpret_cast<char*>(&len), sizeof len);
  require(f && std::memcmp(magic, kCheckpointMagic, sizeof magic) == 0 && len < (1ULL << 30), ErrorKind::Io,
          "not a checkpoint file: " + path);
  std::string header(len, '\0');
  f.read(header.data(), static_cast<std::streamsize>(len));
  require(static_cast<bool>(f), ErrorKind::Io, "truncated checkpoint header in " + path);
  Checkpoint ck;
  try {
    const auto j = nlohmann::json::parse(header);
    ck.config = mae_config_from_json(j.at("config"));
    ck.metadata = j.at("metadata");
    for (const auto& t : j.at("tensors")) {
      const auto rows = t.at("shape").at(0).get<Eigen::Index>(), cols = t.at("shape").at(1).get<Eigen::Index>();
      std::vector<float> buf(static_cast<std::size_t>(rows * cols));
      f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
      require(static_cast<bool>(f), ErrorKind::Io, "truncated checkpoint data in " + path);
      RowMat m(rows, cols);
      for (std::size_t k = 0; k < buf.size(); ++k) m.data()[k] = buf[k];
      ck.names.push_back(t.at("name").get<std::string>());
      ck.tensors.push_back(std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Io, "malformed checkpoint header in " + path + ": " + e.what());
  }
  return ck;
}

/// Copies every same-named, same-shaped tensor into theta; returns the count.
inline std::size_t load_matching(const MaeModel& model, const Checkpoint& ck, Eigen::VectorXd& theta) {
  std::size_t copied = 0;
  for (std::size_t k = 0; k < ck.names.size(); ++k) {
    const auto& entries = model.params().entries();
    const auto it = std::find_if(entries.begin(), entries.end(), [&](const ParamEntry& e) { return e.name == ck.names[k]; });
    if (it == entries.end() || it->rows != ck.tensors[k].rows() || it->cols != ck.tensors[k].cols()) continue;
    model.params().view(theta, static_cast<int>(it - entries.begin())) = ck.tensors[k];
    ++copied;
  }
  return copied;
}

inline void write_cls_csv(const std::string& path, const std::vector<std::string>& ids, const std::vector<RowVec>& cls) {
  require(ids.size() == cls.size(), ErrorKind::InvalidInput, "one identifier per embedding");
  std::ofstream f(path);
  require(static_cast<bool>(f), ErrorKind::Io, "cannot open " + path + " for writing");
  f.precision(9);
  f << "rve";
  if (!cls.empty())
    for (Eigen::Index k = 0; k < cls.front().size(); ++k) f << ",cls" << k;
  f << '\n';
  for (std::size_t i = 0; i < ids.size(); ++i) {
    f << ids[i];
    for (Eigen::Index k = 0; k < cls[i].size(); ++k) f << ',' << cls[i](k);
    f << '\n';
  }
}

}  // namespace polyfm::mae

#pragma once

// Orchestration of the full workflow: dataset generation, stiffness labels,
// pretraining and downstream training, online prediction, metrics and CLS
// export. Each stage writes into <output_dir>/<stage>/ with a manifest.json
// that records the resolved configuration, its hash and the stage seed.

#include <array>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <toml.hpp>

#include "polyfm/crystal_plasticity.hpp"
#include "polyfm/error.hpp"
#include "polyfm/fft_elastic.hpp"
#include "polyfm/hash.hpp"
#include "polyfm/mae/train.hpp"
#include "polyfm/odmn.hpp"
#include "polyfm/odmn_online.hpp"
#include "polyfm/parallel.hpp"
#include "polyfm/rng.hpp"
#include "polyfm/rve.hpp"
#include "polyfm/texture.hpp"

namespace polyfm::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kVersion = "polyfm 0.1.0";

// ---------------------------------------------------------------------------
// Configuration

struct DatasetConfig {
  std::string mode = "hss";  // "hss" or "families"
  int count = 8;             // hss mode
  int per_family = 2;        // families mode: S1, S2, W1, W2 each
  int side = 16;
  int grains = 12;
  double grid_resolution_deg = 10.0;
  double spread_deg = 10.0;
};

struct LabelConfig {
  std::array<double, 3> crystal{107.3, 60.8, 28.3};  // C11, C12, C44 in GPa
  int triplets = 0;  // extra sampled cubic triplets per RVE
  double tolerance = 1e-8;
  int max_iterations = 1000;
};

struct TrainConfig {
  long steps = 200;
  int epochs = 20;
  int batch_size = 8;
  double learning_rate = 1e-3;
  double validation_fraction = 0.2;
  std::string pretrained;
  bool freeze_encoder = false;
};

struct OdmnStageConfig {
  int depth = 6;
  int epochs = 200;
  int batch_size = 16;
  double learning_rate = 1e-2;
  int rve = 0;
};

struct PredictConfig {
  std::string checkpoint;
  std::string material;
  double strain = 0.02;
  double rate = 1e-3;
  double dt = 0.2;
  int unload_steps = 0;
  std::vector<int> rves;
  std::string reference_dir;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "run";
  DatasetConfig dataset;
  LabelConfig labels;
  mae::MaeConfig model;
  TrainConfig train;
  OdmnStageConfig odmn;
  PredictConfig predict;
  std::string export_checkpoint;

  void validate() const {
    require(dataset.mode == "hss" || dataset.mode == "families", ErrorKind::InvalidConfig,
            "dataset.mode must be 'hss' or 'families'");
    require(dataset.count >= 1 && dataset.per_family >= 1, ErrorKind::InvalidConfig, "dataset counts must be >= 1");
    require(dataset.side >= 2 && dataset.grains >= 1, ErrorKind::InvalidConfig, "invalid RVE side or grain count");
    require(dataset.grid_resolution_deg > 0.0 && dataset.spread_deg >= 0.0 &&
                dataset.spread_deg <= dataset.grid_resolution_deg,
            ErrorKind::InvalidConfig, "spread must lie in [0, grid resolution]");
    require(labels.triplets >= 0 && labels.tolerance > 0.0 && labels.max_iterations > 0, ErrorKind::InvalidConfig,
            "invalid label settings");
    require(train.validation_fraction > 0.0 && train.validation_fraction < 1.0, ErrorKind::InvalidConfig,
            "train.validation_fraction must lie in (0, 1)");
    require(train.steps >= 0 && train.epochs >= 0 && train.batch_size >= 1 && train.learning_rate > 0.0,
            ErrorKind::InvalidConfig, "invalid training settings");
    require(odmn.depth >= 0 && odmn.depth <= 12 && odmn.epochs >= 0 && odmn.batch_size >= 1 && odmn.rve >= 0,
            ErrorKind::InvalidConfig, "invalid odmn settings");
    require(predict.strain != 0.0 && predict.rate > 0.0 && predict.dt > 0.0 && predict.unload_steps >= 0,
            ErrorKind::InvalidConfig, "invalid predict schedule");
    require(model.side == dataset.side, ErrorKind::InvalidConfig, "model.side must equal dataset.side");
    model.validate();
    for (const auto* p : {&train.pretrained, &predict.checkpoint, &predict.material, &export_checkpoint})
      require(p->empty() || fs::exists(*p), ErrorKind::InvalidConfig, "referenced file does not exist: " + *p);
    require(predict.reference_dir.empty() || fs::is_directory(predict.reference_dir), ErrorKind::InvalidConfig,
            "predict.reference_dir is not a directory: " + predict.reference_dir);
  }
};

inline json to_json(const RunConfig& c) {
  json model = mae::to_json(c.model);
  model.erase("head");
  return {{"seed", c.seed},
          {"output_dir", c.output_dir},
          {"dataset",
           {{"mode", c.dataset.mode},
            {"count", c.dataset.count},
            {"per_family", c.dataset.per_family},
            {"side", c.dataset.side},
            {"grains", c.dataset.grains},
            {"grid_resolution_deg", c.dataset.grid_resolution_deg},
            {"spread_deg", c.dataset.spread_deg}}},
          {"labels",
           {{"crystal", c.labels.crystal},
            {"triplets", c.labels.triplets},
            {"tolerance", c.labels.tolerance},
            {"max_iterations", c.labels.max_iterations}}},
          {"model", model},
          {"train",
           {{"steps", c.train.steps},
            {"epochs", c.train.epochs},
            {"batch_size", c.train.batch_size},
            {"learning_rate", c.train.learning_rate},
            {"validation_fraction", c.train.validation_fraction},
            {"pretrained", c.train.pretrained},
            {"freeze_encoder", c.train.freeze_encoder}}},
          {"odmn",
           {{"depth", c.odmn.depth},
            {"epochs", c.odmn.epochs},
            {"batch_size", c.odmn.batch_size},
            {"learning_rate", c.odmn.learning_rate},
            {"rve", c.odmn.rve}}},
          {"predict",
           {{"checkpoint", c.predict.checkpoint},
            {"material", c.predict.material},
            {"strain", c.predict.strain},
            {"rate", c.predict.rate},
            {"dt", c.predict.dt},
            {"unload_steps", c.predict.unload_steps},
            {"rves", c.predict.rves},
            {"reference_dir", c.predict.reference_dir}}},
          {"export", {{"checkpoint", c.export_checkpoint}}}};
}

namespace detail {

inline json toml_to_json(const toml::node& n) {
  if (const auto* t = n.as_table()) {
    json j = json::object();
    for (auto&& [k, v] : *t) j[std::string(k.str())] = toml_to_json(v);
    return j;
  }
  if (const auto* a = n.as_array()) {
    json j = json::array();
    for (auto&& v : *a) j.push_back(toml_to_json(v));
    return j;
  }
  if (auto v = n.value_exact<std::int64_t>()) return *v;
  if (auto v = n.value_exact<double>()) return *v;
  if (auto v = n.value_exact<bool>()) return *v;
  if (auto v = n.value_exact<std::string>()) return *v;
  fail(ErrorKind::InvalidConfig, "unsupported TOML value type (dates and times are not used)");
}

/// Reads `key` from section `s` into `out`, converting integers to doubles
/// where needed.
template <class T>
void read(const json& s, const char* key, T& out, std::set<std::string>& seen) {
  seen.insert(key);
  if (!s.contains(key)) return;
  try {
    out = s.at(key).get<T>();
  } catch (const json::exception&) {
    fail(ErrorKind::InvalidConfig, std::string("config key '") + key + "' has the wrong type");
  }
}

inline void reject_unknown(const json& s, const std::string& section, const std::set<std::string>& seen) {
  for (const auto& [k, v] : s.items())
    require(seen.count(k) != 0, ErrorKind::InvalidConfig,
            "unknown config key '" + (section.empty() ? k : section + "." + k) + "'");
}

}  // namespace detail

inline RunConfig run_config_from_json(const json& j) {
  require(j.is_object(), ErrorKind::InvalidConfig, "config root must be a table");
  RunConfig c;
  std::set<std::string> root;
  detail::read(j, "seed", c.seed, root);
  detail::read(j, "output_dir", c.output_dir, root);
  auto section = [&](const char* name) {
    root.insert(name);
    return j.contains(name) ? j.at(name) : json::object();
  };
  {
    const json s = section("dataset");
    std::set<std::string> seen;
    detail::read(s, "mode", c.dataset.mode, seen);
    detail::read(s, "count", c.dataset.count, seen);
    detail::read(s, "per_family", c.dataset.per_family, seen);
    detail::read(s, "side", c.dataset.side, seen);
    detail::read(s, "grains", c.dataset.grains, seen);
    detail::read(s, "grid_resolution_deg", c.dataset.grid_resolution_deg, seen);
    detail::read(s, "spread_deg", c.dataset.spread_deg, seen);
    detail::reject_unknown(s, "dataset", seen);
  }
  {
    const json s = section("labels");
    std::set<std::string> seen;
    detail::read(s, "crystal", c.labels.crystal, seen);
    detail::read(s, "triplets", c.labels.triplets, seen);
    detail::read(s, "tolerance", c.labels.tolerance, seen);
    detail::read(s, "max_iterations", c.labels.max_iterations, seen);
    detail::reject_unknown(s, "labels", seen);
  }
  {
    const json s = section("model");
    std::set<std::string> seen;
    c.model.side = c.dataset.side;
    detail::read(s, "side", c.model.side, seen);
    detail::read(s, "patch", c.model.patch, seen);
    detail::read(s, "channels", c.model.channels, seen);
    detail::read(s, "embed", c.model.embed, seen);
    detail::read(s, "encoder_blocks", c.model.encoder_blocks, seen);
    detail::read(s, "encoder_heads", c.model.encoder_heads, seen);
    detail::read(s, "decoder_embed", c.model.decoder_embed, seen);
    detail::read(s, "decoder_blocks", c.model.decoder_blocks, seen);
    detail::read(s, "decoder_heads", c.model.decoder_heads, seen);
    detail::read(s, "mlp_ratio", c.model.mlp_ratio, seen);
    detail::read(s, "mask_ratio", c.model.mask_ratio, seen);
    detail::read(s, "odmn_depth", c.model.odmn_depth, seen);
    detail::reject_unknown(s, "model", seen);
  }
  {
    const json s = section("train");
    std::set<std::string> seen;
    detail::read(s, "steps", c.train.steps, seen);
    detail::read(s, "epochs", c.train.epochs, seen);
    detail::read(s, "batch_size", c.train.batch_size, seen);
    detail::read(s, "learning_rate", c.train.learning_rate, seen);
    detail::read(s, "validation_fraction", c.train.validation_fraction, seen);
    detail::read(s, "pretrained", c.train.pretrained, seen);
    detail::read(s, "freeze_encoder", c.train.freeze_encoder, seen);
    detail::reject_unknown(s, "train", seen);
  }
  {
    const json s = section("odmn");
    std::set<std::string> seen;
    detail::read(s, "depth", c.odmn.depth, seen);
    detail::read(s, "epochs", c.odmn.epochs, seen);
    detail::read(s, "batch_size", c.odmn.batch_size, seen);
    detail::read(s, "learning_rate", c.odmn.learning_rate, seen);
    detail::read(s, "rve", c.odmn.rve, seen);
    detail::reject_unknown(s, "odmn", seen);
  }
  {
    const json s = section("predict");
    std::set<std::string> seen;
    detail::read(s, "checkpoint", c.predict.checkpoint, seen);
    detail::read(s, "material", c.predict.material, seen);
    detail::read(s, "strain", c.predict.strain, seen);
    detail::read(s, "rate", c.predict.rate, seen);
    detail::read(s, "dt", c.predict.dt, seen);
    detail::read(s, "unload_steps", c.predict.unload_steps, seen);
    detail::read(s, "rves", c.predict.rves, seen);
    detail::read(s, "reference_dir", c.predict.reference_dir, seen);
    detail::reject_unknown(s, "predict", seen);
  }
  {
    const json s = section("export");
    std::set<std::string> seen;
    detail::read(s, "checkpoint", c.export_checkpoint, seen);
    detail::reject_unknown(s, "export", seen);
  }
  detail::reject_unknown(j, "", root);
  c.validate();
  return c;
}

/// Parses "section.key=value"; the value is read as a TOML literal and falls
/// back to a plain string.
inline void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  require(eq != std::string::npos && eq > 0, ErrorKind::InvalidConfig, "override must look like key=value: " + assignment);
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    const toml::table t = toml::parse("v = " + text);
    value = detail::toml_to_json(*t.get("v"));
  } catch (const toml::parse_error&) {
    value = text;
  }
  json* node = &j;
  std::size_t start = 0;
  for (;;) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    require(!key.empty(), ErrorKind::InvalidConfig, "empty key in override " + assignment);
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    if (!node->contains(key)) (*node)[key] = json::object();
    node = &(*node)[key];
    start = dot + 1;
  }
}

inline json read_toml(const std::string& path) {
  try {
    return detail::toml_to_json(toml::parse_file(path));
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << "cannot parse " << path << ": " << e.description() << " (line " << e.source().begin.line << ")";
    fail(fs::exists(path) ? ErrorKind::InvalidConfig : ErrorKind::Io, msg.str());
  }
}

inline RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  json j = path.empty() ? json::object() : read_toml(path);
  for (const auto& o : overrides) apply_override(j, o);
  return run_config_from_json(j);
}

inline std::string config_hash(const RunConfig& c) { return hex64(fnv1a64(to_json(c).dump())); }

// ---------------------------------------------------------------------------
// Seeds and file helpers

enum class Stage : std::uint64_t { Dataset = 1, Labels, Pretrain, Task1, Task2, OdmnDirect, Predict, Export };

/// Independent per-stage seed derived from the master seed.
inline std::uint64_t stage_seed(const RunConfig& c, Stage s) {
  return Rng::stream(c.seed, {0x5354414745ULL, static_cast<std::uint64_t>(s)}).next_u64();
}

inline fs::path stage_dir(const RunConfig& c, const std::string& stage) {
  fs::path d = fs::path(c.output_dir) / stage;
  std::error_code ec;
  fs::create_directories(d, ec);
  require(!ec, ErrorKind::Io, "cannot create directory " + d.string() + ": " + ec.message());
  return d;
}

inline void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path);
  require(static_cast<bool>(f), ErrorKind::Io, "cannot open " + path.string() + " for writing");
  f << j.dump(2) << '\n';
  require(static_cast<bool>(f), ErrorKind::Io, "write failed for " + path.string());
}

inline json read_json(const fs::path& path) {
  std::ifstream f(path);
  require(static_cast<bool>(f), ErrorKind::Io, "cannot open " + path.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    fail(ErrorKind::Io, "malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline void write_manifest(const fs::path& dir, const std::string& command, const RunConfig& c, Stage s,
                           const json& extra = json::object()) {
  json m = {{"command", command},
            {"code_version", kVersion},
            {"config_hash", config_hash(c)},
            {"config", to_json(c)},
            {"seeds", {{"master", c.seed}, {"stage", stage_seed(c, s)}}},
            {"threads", thread_count()}};
  for (const auto& [k, v] : extra.items()) m[k] = v;
  write_json(dir / "manifest.json", m);
}

/// Wall-clock stats live apart from the reproducible outputs.
inline void write_timing(const fs::path& dir, std::chrono::steady_clock::time_point t0) {
  write_json(dir / "timing.json",
             {{"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()},
              {"threads", thread_count()}});
}

// ---------------------------------------------------------------------------
// Dataset

struct DatasetEntry {
  std::string id;
  std::string family;  // "hss" or the texture family
  std::string rve_file;
};

inline std::vector<DatasetEntry> load_dataset(const RunConfig& c) {
  const fs::path dir = fs::path(c.output_dir) / "dataset";
  const json m = read_json(dir / "manifest.json");
  std::vector<DatasetEntry> out;
  try {
    for (const auto& e : m.at("entries"))
      out.push_back({e.at("id").get<std::string>(), e.at("family").get<std::string>(), (dir / e.at("rve").get<std::string>()).string()});
  } catch (const json::exception& e) {
    fail(ErrorKind::Io, std::string("malformed dataset manifest: ") + e.what());
  }
  require(!out.empty(), ErrorKind::InvalidInput, "dataset is empty; run gen-dataset first");
  return out;
}

inline std::string sample_id(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "rve_%04zu", i);
  return buf;
}

/// Writes RVEs with HSS textures (hss mode) or the four texture families.
inline std::vector<DatasetEntry> cmd_gen_dataset(const RunConfig& c) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path dir = stage_dir(c, "dataset");
  const std::uint64_t seed = stage_seed(c, Stage::Dataset);
  auto grid = FundamentalGrid::cached(c.dataset.grid_resolution_deg);
  const auto side = static_cast<std::uint32_t>(c.dataset.side);
  const Dims dims{side, side, side};

  std::vector<std::string> families;
  std::vector<Odf> odfs;
  if (c.dataset.mode == "hss") {
    odfs = hss_sample(*grid, static_cast<std::size_t>(c.dataset.count), seed);
    families.assign(odfs.size(), "hss");
  } else {
    for (const char* f : {"S1", "S2", "W1", "W2"})
      for (int k = 0; k < c.dataset.per_family; ++k) families.emplace_back(f);
  }

  std::vector<DatasetEntry> entries(families.size());
  std::vector<json> sources(families.size());
  parallel_for(families.size(), [&](std::size_t i) {
    const std::uint64_t voronoi_seed = Rng::stream(seed, {i, 0}).next_u64();
    Rng rng = Rng::stream(seed, {i, 1});
    GrainMap gm = generate_periodic_voronoi(dims, static_cast<std::size_t>(c.dataset.grains), voronoi_seed);
    Rve rve;
    json source;
    if (families[i] == "hss") {
      rve = assign_orientations(std::move(gm), OdfSampler(odfs[i], grid, c.dataset.spread_deg), rng);
      const std::string odf_file = sample_id(i) + "_odf.csv";
      write_odf_csv((dir / odf_file).string(), odfs[i]);
      double total = 0.0;
      for (double w : odfs[i].weights) total += w;
      source = {{"kind", "hss"}, {"odf", odf_file}, {"odf_weight_sum", total}, {"support", odfs[i].support_size()},
                {"grid", odf_manifest(*grid, seed)}, {"spread_deg", c.dataset.spread_deg}};
    } else {
      const TextureSpec spec = TextureSpec::family(texture_kind_from_string(families[i]), rng);
      rve = assign_orientations(std::move(gm), TextureSampler(spec, grid->size()), rng);
      json dominant = json::array();
      for (const auto& q : spec.dominant) dominant.push_back({q.w, q.x, q.y, q.z});
      source = {{"kind", families[i]}, {"dominant", dominant}, {"weight", spec.weight}, {"sigma_deg", spec.sigma}};
    }
    const std::string file = sample_id(i) + ".rve";
    write_rve((dir / file).string(), rve);
    write_json(dir / (sample_id(i) + ".json"), rve_sidecar(rve, voronoi_seed, source));
    entries[i] = {sample_id(i), families[i], (dir / file).string()};
    sources[i] = source;
  });

  json list = json::array();
  for (std::size_t i = 0; i < entries.size(); ++i)
    list.push_back({{"id", entries[i].id}, {"family", entries[i].family}, {"rve", sample_id(i) + ".rve"}, {"source", sources[i]}});
  write_manifest(dir, "gen-dataset", c, Stage::Dataset, {{"mode", c.dataset.mode}, {"entries", list}});
  write_timing(dir, t0);
  return entries;
}

// ---------------------------------------------------------------------------
// Stiffness labels

struct Label {
  std::string rve;
  int triplet = 0;
  StiffnessVoigt c_crystal;
  StiffnessVoigt c_bar;
  bool ok = false;
};

/// Triplet 0 is the configured crystal; 1..K are sampled cubic constants.
inline StiffnessVoigt label_crystal(const RunConfig& c, std::size_t rve, int k) {
  if (k == 0) return cubic_stiffness(c.labels.crystal[0], c.labels.crystal[1], c.labels.crystal[2]);
  Rng rng = Rng::stream(stage_seed(c, Stage::Labels), {rve, static_cast<std::uint64_t>(k)});
  return sample_cubic_triplet(rng);
}

inline std::string label_file(const std::string& rve, int k) { return rve + "_c" + std::to_string(k) + ".json"; }

inline std::vector<Label> cmd_label_stiffness(const RunConfig& c) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto entries = load_dataset(c);
  const fs::path dir = stage_dir(c, "labels");
  const int per = 1 + c.labels.triplets;
  std::vector<Label> labels(entries.size() * static_cast<std::size_t>(per));
  std::vector<std::string> status(labels.size());
  const SpectralOptions opts{c.labels.tolerance, c.labels.max_iterations};
  parallel_for(entries.size(), [&](std::size_t i) {
    const Rve rve = read_rve(entries[i].rve_file);
    for (int k = 0; k < per; ++k) {
      const std::size_t slot = i * static_cast<std::size_t>(per) + static_cast<std::size_t>(k);
      Label& l = labels[slot];
      l.rve = entries[i].id;
      l.triplet = k;
      l.c_crystal = label_crystal(c, i, k);
      json out = {{"rve", l.rve}, {"triplet", k}, {"crystal_upper", json::array()}};
      for (int a = 0; a < 6; ++a)
        for (int b = a; b < 6; ++b) out["crystal_upper"].push_back(l.c_crystal(a, b));
      try {
        const HomogenizationResult h = homogenize_elastic(rve, l.c_crystal, opts);
        l.c_bar = h.c_bar;
        l.ok = true;
        out.update(to_json(h));
        out["status"] = status[slot] = "ok";
      } catch (const ConvergenceError& e) {
        out["status"] = status[slot] = "not-converged";
        out["error"] = e.what();
      }
      write_json(dir / label_file(l.rve, k), out);
    }
  });
  json list = json::array();
  for (std::size_t s = 0; s < labels.size(); ++s)
    list.push_back({{"rve", labels[s].rve}, {"triplet", labels[s].triplet}, {"file", label_file(labels[s].rve, labels[s].triplet)}, {"status", status[s]}});
  write_manifest(dir, "label-stiffness", c, Stage::Labels, {{"labels", list}});
  write_timing(dir, t0);
  return labels;
}

inline std::vector<Label> load_labels(const RunConfig& c) {
  const fs::path dir = fs::path(c.output_dir) / "labels";
  const json m = read_json(dir / "manifest.json");
  std::vector<Label> out;
  try {
    for (const auto& e : m.at("labels")) {
      const json j = read_json(dir / e.at("file").get<std::string>());
      Label l;
      l.rve = j.at("rve").get<std::string>();
      l.triplet = j.at("triplet").get<int>();
      l.c_crystal = stiffness_from_upper(j.at("crystal_upper"));
      l.ok = j.at("status") == "ok";
      if (l.ok) l.c_bar = stiffness_from_upper(j.at("c_bar_upper"));
      out.push_back(l);
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::Io, std::string("malformed label manifest: ") + e.what());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

enum class Task { Pretrain, Task1, Task2Offline, OdmnDirect };

inline Task task_from_string(const std::string& s) {
  if (s == "pretrain") return Task::Pretrain;
  if (s == "task1") return Task::Task1;
  if (s == "task2-offline") return Task::Task2Offline;
  if (s == "odmn-direct") return Task::OdmnDirect;
  fail(ErrorKind::InvalidConfig, "unknown training task '" + s + "'");
}

inline const char* to_string(Task t) {
  switch (t) {
    case Task::Pretrain: return "pretrain";
    case Task::Task1: return "task1";
    case Task::Task2Offline: return "task2-offline";
    case Task::OdmnDirect: return "odmn-direct";
  }
  return "?";
}

struct TrainReport {
  fs::path checkpoint;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::string aborted;
  json metrics = json::object();
};

inline mae::TrainOptions train_options(const RunConfig& c, Stage s) {
  mae::TrainOptions o;
  o.steps = c.train.steps;
  o.epochs = c.train.epochs;
  o.batch_size = static_cast<std::size_t>(c.train.batch_size);
  o.learning_rate = c.train.learning_rate;
  o.validation_fraction = c.train.validation_fraction;
  o.seed = stage_seed(c, s);
  return o;
}

inline std::vector<mae::RowMat> load_patches(const std::vector<DatasetEntry>& entries, int patch) {
  std::vector<mae::RowMat> out(entries.size());
  parallel_for(entries.size(), [&](std::size_t i) { out[i] = mae::rve_patches(read_rve(entries[i].rve_file), patch); });
  return out;
}

inline Eigen::VectorXd initial_weights(const RunConfig& c, const mae::MaeModel& model, Stage s) {
  Eigen::VectorXd theta = model.initialize(stage_seed(c, s));
  if (!c.train.pretrained.empty()) {
    const auto copied = mae::load_matching(model, mae::read_checkpoint(c.train.pretrained), theta);
    require(copied > 0, ErrorKind::InvalidConfig, "pretrained checkpoint shares no tensors with the model");
  }
  return theta;
}

inline void write_epoch_csv(const fs::path& path, const std::vector<mae::EpochRecord>& h) {
  std::ofstream f(path);
  require(static_cast<bool>(f), ErrorKind::Io, "cannot open " + path.string() + " for writing");
  f.precision(17);
  f << "epoch,train_loss,validation_loss\n";
  for (const auto& r : h) f << r.epoch << ',' << r.train_loss << ',' << r.validation_loss << '\n';
}

inline const Label* find_label(const std::vector<Label>& labels, const std::string& rve, int k) {
  for (const auto& l : labels)
    if (l.rve == rve && l.triplet == k) return &l;
  return nullptr;
}

inline Eigen::Vector3d normal_moduli(const StiffnessVoigt& c) { return {c(0, 0), c(1, 1), c(2, 2)}; }

inline TrainReport train_pretrain(const RunConfig& c, const fs::path& dir) {
  const auto entries = load_dataset(c);
  mae::MaeConfig mc = c.model;
  mc.head = mae::HeadKind::None;
  const mae::MaeModel model(mc);
  const auto data = load_patches(entries, mc.patch);
  const auto out = mae::pretrain(model, initial_weights(c, model, Stage::Pretrain), data, train_options(c, Stage::Pretrain), 10);
  TrainReport r{dir / "checkpoint.bin", out.initial_eval, out.final_eval, out.aborted};
  const double baseline = mae::mean_quaternion_baseline(data);
  r.metrics = {{"initial_loss", out.initial_eval}, {"final_loss", out.final_eval}, {"mean_quaternion_baseline", baseline}};
  mae::write_checkpoint(r.checkpoint.string(), model, out.theta, {{"task", "pretrain"}, {"steps", out.history.size()}});
  std::ofstream f(dir / "loss.csv");
  require(static_cast<bool>(f), ErrorKind::Io, "cannot write " + (dir / "loss.csv").string());
  f.precision(17);
  f << "step,train_loss,eval_loss\n";
  for (const auto& h : out.history) {
    f << h.step << ',' << h.train_loss << ',';
    if (!std::isnan(h.eval_loss)) f << h.eval_loss;
    f << '\n';
  }
  return r;
}

/// Task I fine-tuning; reports validation R2 per normal modulus.
inline TrainReport train_task1(const RunConfig& c, const fs::path& dir) {
  const auto entries = load_dataset(c);
  const auto labels = load_labels(c);
  std::vector<DatasetEntry> usable;
  std::vector<Eigen::Vector3d> raw;
  for (const auto& e : entries)
    if (const Label* l = find_label(labels, e.id, 0); l && l->ok) {
      usable.push_back(e);
      raw.push_back(normal_moduli(l->c_bar));
    }
  require(usable.size() >= 2, ErrorKind::InvalidInput, "task1 needs at least two labelled RVEs");
  mae::MaeConfig mc = c.model;
  mc.head = mae::HeadKind::Stiffness;
  const mae::MaeModel model(mc);
  const auto data = load_patches(usable, mc.patch);
  const auto opt = train_options(c, Stage::Task1);
  const auto [train_idx, val_idx] = split_indices(usable.size(), opt.validation_fraction, opt.seed);
  const auto scaler = mae::Standardizer::fit(raw, train_idx);
  std::vector<Eigen::Vector3d> y(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) y[i] = scaler.forward(raw[i]);
  const mae::SampleLoss fn = [&](const Eigen::VectorXd& t, std::size_t i, Eigen::VectorXd* g) {
    return model.stiffness_loss(t, data[i], y[i], g).loss;
  };
  const Eigen::VectorXd mask = model.head_mask();
  const Eigen::VectorXd theta0 = initial_weights(c, model, Stage::Task1);
  const auto out = mae::finetune(theta0, usable.size(), fn, opt, c.train.freeze_encoder ? &mask : nullptr);

  const auto& monitor = val_idx.empty() ? train_idx : val_idx;
  json r2 = json::object();
  std::array<std::vector<double>, 3> pred, truth;
  for (auto i : monitor) {
    const Eigen::Vector3d p = scaler.inverse(model.head_raw(out.theta, data[i]));
    for (int k = 0; k < 3; ++k) {
      pred[k].push_back(p(k));
      truth[k].push_back(raw[i](k));
    }
  }
  const char* names[3] = {"C11", "C22", "C33"};
  for (int k = 0; k < 3; ++k) {
    try {
      r2[names[k]] = mae::compute_r2(pred[k], truth[k]);
    } catch (const Error&) {
      r2[names[k]] = nullptr;
    }
  }
  TrainReport r{dir / "checkpoint.bin", out.history.empty() ? out.best_validation : out.history.front().validation_loss,
                out.best_validation, out.aborted};
  r.metrics = {{"validation_mse", out.best_validation}, {"r2", r2}};
  json split = json::array();
  for (auto i : val_idx) split.push_back(usable[i].id);
  mae::write_checkpoint(r.checkpoint.string(), model, out.theta,
                        {{"task", "task1"}, {"standardizer", mae::to_json(scaler)}, {"validation", split}});
  write_epoch_csv(dir / "loss.csv", out.history);
  return r;
}

inline TrainReport train_task2(const RunConfig& c, const fs::path& dir) {
  const auto entries = load_dataset(c);
  const auto labels = load_labels(c);
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < entries.size(); ++i) index[entries[i].id] = i;
  mae::MaeConfig mc = c.model;
  mc.head = mae::HeadKind::Odmn;
  const mae::MaeModel model(mc);
  const auto data = load_patches(entries, mc.patch);
  std::vector<const Label*> samples;
  for (const auto& l : labels)
    if (l.ok) samples.push_back(&l);
  require(!samples.empty(), ErrorKind::InvalidInput, "task2-offline needs converged labels");
  const mae::SampleLoss fn = [&](const Eigen::VectorXd& t, std::size_t i, Eigen::VectorXd* g) {
    const Label& l = *samples[i];
    return model.odmn_loss(t, data[index.at(l.rve)], l.c_crystal, l.c_bar, g).loss;
  };
  const Eigen::VectorXd mask = model.head_mask();
  const auto out = mae::finetune(initial_weights(c, model, Stage::Task2), samples.size(), fn, train_options(c, Stage::Task2),
                                 c.train.freeze_encoder ? &mask : nullptr);
  TrainReport r{dir / "checkpoint.bin", out.history.empty() ? out.best_validation : out.history.front().validation_loss,
                out.best_validation, out.aborted};
  r.metrics = {{"validation_loss", out.best_validation}};
  mae::write_checkpoint(r.checkpoint.string(), model, out.theta, {{"task", "task2-offline"}});
  write_epoch_csv(dir / "loss.csv", out.history);
  return r;
}

inline TrainReport train_odmn_direct(const RunConfig& c, const fs::path& dir) {
  const auto entries = load_dataset(c);
  require(static_cast<std::size_t>(c.odmn.rve) < entries.size(), ErrorKind::InvalidConfig, "odmn.rve is out of range");
  const std::string& id = entries[static_cast<std::size_t>(c.odmn.rve)].id;
  std::vector<StiffnessSample> samples;
  for (const auto& l : load_labels(c))
    if (l.ok && l.rve == id) samples.push_back({l.c_crystal, l.c_bar});
  require(!samples.empty(), ErrorKind::InvalidInput, "no converged labels for " + id);
  OdmnTrainConfig tc;
  tc.depth = c.odmn.depth;
  tc.epochs = c.odmn.epochs;
  tc.batch_size = static_cast<std::size_t>(c.odmn.batch_size);
  tc.learning_rate = c.odmn.learning_rate;
  tc.validation_fraction = c.train.validation_fraction;
  tc.seed = stage_seed(c, Stage::OdmnDirect);
  const auto out = train_offline(samples, tc);
  TrainReport r{dir / "odmn_params.json", out.history.empty() ? out.best_validation : out.history.front().validation_loss,
                out.best_validation, ""};
  r.metrics = {{"validation_loss", out.best_validation}, {"rve", id}, {"samples", samples.size()}};
  write_json(r.checkpoint, to_json(out.params, {{"rve", id}, {"validation_loss", out.best_validation}}));
  write_loss_csv((dir / "loss.csv").string(), out.history);
  return r;
}

inline TrainReport cmd_train(const RunConfig& c, Task task) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path dir = stage_dir(c, fs::path("train") / to_string(task));
  TrainReport r;
  Stage stage = Stage::Pretrain;
  switch (task) {
    case Task::Pretrain: r = train_pretrain(c, dir); break;
    case Task::Task1: r = train_task1(c, dir); stage = Stage::Task1; break;
    case Task::Task2Offline: r = train_task2(c, dir); stage = Stage::Task2; break;
    case Task::OdmnDirect: r = train_odmn_direct(c, dir); stage = Stage::OdmnDirect; break;
  }
  json extra = {{"task", to_string(task)}, {"checkpoint", r.checkpoint.filename().string()}, {"metrics", r.metrics}};
  if (!r.aborted.empty()) extra["aborted"] = r.aborted;
  write_manifest(dir, "train", c, stage, extra);
  write_timing(dir, t0);
  if (!r.aborted.empty()) fail(ErrorKind::Numeric, "training diverged (" + r.aborted + "); last good checkpoint kept");
  return r;
}

// ---------------------------------------------------------------------------
// Online prediction

struct PredictedCurve {
  std::string rve;
  std::string family;
  DriveResult result;
  double peak_stress = 0.0;       // GPa, nominal P11
  double max_hill_mandel = 0.0;   // relative residual over the run
};

inline std::vector<std::size_t> predict_selection(const RunConfig& c, const std::vector<DatasetEntry>& entries) {
  std::vector<std::size_t> sel;
  if (!c.predict.rves.empty()) {
    for (int i : c.predict.rves) {
      require(i >= 0 && static_cast<std::size_t>(i) < entries.size(), ErrorKind::InvalidConfig, "predict.rves index out of range");
      sel.push_back(static_cast<std::size_t>(i));
    }
    return sel;
  }
  std::set<std::string> seen;
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].family == "hss" || seen.insert(entries[i].family).second) sel.push_back(i);
  return sel;
}

inline CpParams predict_material(const RunConfig& c) {
  if (!c.predict.material.empty()) return cp_params_from_json(read_json(c.predict.material));
  CpParams p;
  p.c11 = c.labels.crystal[0];
  p.c12 = c.labels.crystal[1];
  p.c44 = c.labels.crystal[2];
  return p;
}

inline std::vector<double> curve_column(const std::vector<CurvePoint>& curve, int row, int col) {
  std::vector<double> v;
  for (const auto& p : curve) v.push_back(p.p_bar(row, col));
  return v;
}

/// Reads the P11 column of a curve CSV written by write_curve_csv.
inline std::vector<double> read_curve_p11(const fs::path& path) {
  std::ifstream f(path);
  require(static_cast<bool>(f), ErrorKind::Io, "cannot open " + path.string());
  std::string line;
  std::getline(f, line);
  int col = -1, k = 0;
  std::stringstream hs(line);
  for (std::string cell; std::getline(hs, cell, ','); ++k)
    if (cell == "P11") col = k;
  require(col >= 0, ErrorKind::Io, path.string() + ": no P11 column");
  std::vector<double> out;
  while (std::getline(f, line)) {
    std::stringstream ls(line);
    std::string cell;
    for (int i = 0; i <= col; ++i) std::getline(ls, cell, ',');
    try {
      out.push_back(std::stod(cell));
    } catch (const std::exception&) {
      fail(ErrorKind::Io, path.string() + ": malformed row '" + line + "'");
    }
  }
  return out;
}

inline std::vector<PredictedCurve> cmd_predict(const RunConfig& c) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto entries = load_dataset(c);
  const fs::path dir = stage_dir(c, "predict");
  std::string ckpt = c.predict.checkpoint;
  if (ckpt.empty()) {
    const fs::path mae_ckpt = fs::path(c.output_dir) / "train" / "task2-offline" / "checkpoint.bin";
    const fs::path direct = fs::path(c.output_dir) / "train" / "odmn-direct" / "odmn_params.json";
    ckpt = fs::exists(mae_ckpt) ? mae_ckpt.string() : direct.string();
  }
  require(fs::exists(ckpt), ErrorKind::Io, "no checkpoint to predict from: " + ckpt);
  const bool direct = fs::path(ckpt).extension() == ".json";
  std::optional<mae::MaeModel> model;
  Eigen::VectorXd theta;
  OdmnParams fixed;
  if (direct) {
    fixed = odmn_params_from_json(read_json(ckpt));
  } else {
    const mae::Checkpoint ck = mae::read_checkpoint(ckpt);
    require(ck.config.head == mae::HeadKind::Odmn, ErrorKind::InvalidConfig, "predict needs a task2-offline checkpoint");
    model.emplace(ck.config);
    theta = Eigen::VectorXd::Zero(model->size());
    require(mae::load_matching(*model, ck, theta) == model->params().entries().size(), ErrorKind::Io,
            "checkpoint does not match its own config");
  }
  const CpParams material = predict_material(c);
  const LoadSchedule schedule = LoadSchedule::uniaxial(c.predict.strain, c.predict.rate, c.predict.dt, c.predict.unload_steps);
  const DriveOptions dopt;

  const auto selection = predict_selection(c, entries);
  std::vector<PredictedCurve> curves(selection.size());
  std::vector<OdmnParams> params(selection.size());
  parallel_for(selection.size(), [&](std::size_t s) {
    const std::size_t i = selection[s];
    params[s] = direct ? fixed : model->predict_odmn(theta, mae::rve_patches(read_rve(entries[i].rve_file), model->config().patch));
    const OdmnCpModel cp(params[s], material);
    PredictedCurve& pc = curves[s];
    pc = {entries[i].id, entries[i].family, drive(cp, schedule, dopt)};
    for (const auto& pt : pc.result.curve) {
      pc.peak_stress = std::max(pc.peak_stress, std::abs(pt.p_bar(0, 0)));
      pc.max_hill_mandel = std::max(pc.max_hill_mandel, pt.residual);
    }
  });

  std::map<std::string, StressErrors> errors;
  json summary = json::array();
  for (std::size_t s = 0; s < curves.size(); ++s) {
    const PredictedCurve& pc = curves[s];
    const std::string name = "curve_" + pc.rve + ".csv";
    write_curve_csv((dir / name).string(), pc.result.curve);
    write_json(dir / ("odmn_" + pc.rve + ".json"), to_json(params[s], {{"rve", pc.rve}}));
    json row = {{"rve", pc.rve}, {"family", pc.family}, {"curve", name}, {"peak_P11_GPa", pc.peak_stress},
                {"max_hill_mandel_residual", pc.max_hill_mandel}, {"steps", pc.result.curve.size() - 1}};
    if (!c.predict.reference_dir.empty() && fs::exists(fs::path(c.predict.reference_dir) / name)) {
      const auto ref = read_curve_p11(fs::path(c.predict.reference_dir) / name);
      const StressErrors e = stress_error_metrics(curve_column(pc.result.curve, 0, 0), ref);
      errors[pc.family == "hss" ? pc.rve : pc.family + ":" + pc.rve] = e;
      row["mean_rel_error"] = e.mean_rel;
      row["max_rel_error"] = e.max_rel;
    }
    summary.push_back(row);
  }
  write_json(dir / "summary.json", summary);
  if (!errors.empty()) write_json(dir / "metrics.json", metrics_report(errors));
  write_manifest(dir, "predict", c, Stage::Predict,
                 {{"checkpoint", ckpt}, {"schedule", to_json(schedule)}, {"material", to_json(material)}});
  write_timing(dir, t0);
  return curves;
}

// ---------------------------------------------------------------------------
// Metrics and CLS export

/// Collects Task I R2, loss-curve paths and curve errors into one report.
inline json cmd_metrics(const RunConfig& c) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path root(c.output_dir);
  const fs::path dir = stage_dir(c, "metrics");
  json report = json::object();
  json curves = json::array();
  for (const char* task : {"pretrain", "task1", "task2-offline", "odmn-direct"}) {
    const fs::path p = root / "train" / task / "loss.csv";
    if (fs::exists(p)) curves.push_back(fs::relative(p, root).string());
    const fs::path m = root / "train" / task / "manifest.json";
    if (fs::exists(m)) report["train"][task] = read_json(m).value("metrics", json::object());
  }
  report["loss_curves"] = curves;
  if (fs::exists(root / "predict" / "summary.json")) report["predict"] = read_json(root / "predict" / "summary.json");
  if (fs::exists(root / "predict" / "metrics.json")) report["stress_errors_percent"] = read_json(root / "predict" / "metrics.json");
  const json r2 = report.value("train", json::object()).value("task1", json::object()).value("r2", json::object());
  for (const auto& [k, v] : r2.items())
    if (!v.is_null()) require(v.get<double>() <= 1.0 + 1e-12, ErrorKind::Numeric, "R2 above one for " + k);
  write_json(dir / "metrics.json", report);
  write_manifest(dir, "metrics", c, Stage::Predict);
  write_timing(dir, t0);
  return report;
}

inline fs::path cmd_export_cls(const RunConfig& c) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto entries = load_dataset(c);
  const std::string ckpt = c.export_checkpoint.empty()
                               ? (fs::path(c.output_dir) / "train" / "pretrain" / "checkpoint.bin").string()
                               : c.export_checkpoint;
  const mae::Checkpoint ck = mae::read_checkpoint(ckpt);
  const mae::MaeModel model(ck.config);
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(model.size());
  mae::load_matching(model, ck, theta);
  std::vector<std::string> ids(entries.size());
  std::vector<mae::RowVec> cls(entries.size());
  parallel_for(entries.size(), [&](std::size_t i) {
    ids[i] = entries[i].id;
    cls[i] = model.cls_embedding(theta, mae::rve_patches(read_rve(entries[i].rve_file), ck.config.patch));
  });
  const fs::path dir = stage_dir(c, "cls");
  mae::write_cls_csv((dir / "cls.csv").string(), ids, cls);
  write_manifest(dir, "export-cls", c, Stage::Export, {{"checkpoint", ckpt}});
  write_timing(dir, t0);
  return dir / "cls.csv";
}

// ---------------------------------------------------------------------------

/// Process exit code for an error kind: 2 config, 3 convergence/numeric, 4 IO.
inline int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::Io: return 4;
    case ErrorKind::Convergence:
    case ErrorKind::Numeric:
    case ErrorKind::DegenerateWeights: return 3;
    default: return 2;
  }
}

}  // namespace polyfm::pipeline

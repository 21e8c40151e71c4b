#include <gtest/gtest.h>

#include <fstream>
#include <iterator>

#include "polyfm/pipeline.hpp"

using namespace polyfm;
namespace pl = polyfm::pipeline;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

fs::path scratch_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("polyfm_test_" + name);
  fs::remove_all(d);
  return d;
}

// Tiny run: 8^3 RVEs, 2^3 patches, depth-2 ODMN head.
pl::RunConfig tiny(const fs::path& dir, std::vector<std::string> extra = {}) {
  std::vector<std::string> o = {"output_dir=\"" + dir.string() + "\"",
                                "seed=11",
                                "dataset.side=8",
                                "dataset.grains=4",
                                "dataset.count=4",
                                "model.embed=24",
                                "model.encoder_blocks=1",
                                "model.encoder_heads=2",
                                "model.decoder_embed=12",
                                "model.decoder_heads=2",
                                "model.mask_ratio=0.5",
                                "model.odmn_depth=2",
                                "train.steps=4",
                                "train.epochs=2",
                                "train.batch_size=2",
                                "odmn.depth=2",
                                "odmn.epochs=3",
                                "predict.strain=0.002",
                                "predict.dt=0.5"};
  o.insert(o.end(), extra.begin(), extra.end());
  return pl::load_config("", o);
}

std::vector<std::string> files_in(const fs::path& dir) {
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().filename() != "timing.json") out.push_back(e.path().filename().string());
  std::sort(out.begin(), out.end());
  return out;
}

void expect_identical_dirs(const fs::path& a, const fs::path& b) {
  const auto fa = files_in(a), fb = files_in(b);
  ASSERT_EQ(fa, fb);
  for (const auto& f : fa) {
    if (f == "manifest.json") continue;  // records the output directory
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
}

}  // namespace

TEST(Config, DefaultsValidateAndRoundTrip) {
  const pl::RunConfig c = pl::load_config("");
  EXPECT_EQ(c.dataset.side, 16);
  EXPECT_EQ(c.model.side, 16);
  EXPECT_DOUBLE_EQ(c.train.validation_fraction, 0.2);
  const pl::RunConfig d = pl::run_config_from_json(pl::to_json(c));
  EXPECT_EQ(pl::to_json(d), pl::to_json(c));
  EXPECT_EQ(pl::config_hash(c), pl::config_hash(d));
}

TEST(Config, TomlFileAndOverrides) {
  const fs::path dir = scratch_dir("config");
  fs::create_directories(dir);
  std::ofstream(dir / "run.toml") << "seed = 3\n[dataset]\nmode = \"families\"\nper_family = 5\n[labels]\ncrystal = [100.0, 50, 25.0]\n";
  const auto c = pl::load_config((dir / "run.toml").string(), {"train.learning_rate=5e-4", "output_dir=plain/text"});
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.dataset.mode, "families");
  EXPECT_EQ(c.dataset.per_family, 5);
  EXPECT_DOUBLE_EQ(c.labels.crystal[1], 50.0);
  EXPECT_DOUBLE_EQ(c.train.learning_rate, 5e-4);
  EXPECT_EQ(c.output_dir, "plain/text");
  EXPECT_NE(pl::config_hash(c), pl::config_hash(pl::load_config("")));
}

TEST(Config, RejectsInvalidValues) {
  auto kind = [](std::vector<std::string> o) {
    try {
      pl::load_config("", o);
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::Io;
  };
  EXPECT_EQ(kind({"nonsense=1"}), ErrorKind::InvalidConfig);
  EXPECT_EQ(kind({"train.stepz=1"}), ErrorKind::InvalidConfig);
  EXPECT_EQ(kind({"train.validation_fraction=1.0"}), ErrorKind::InvalidConfig);
  EXPECT_EQ(kind({"train.validation_fraction=0"}), ErrorKind::InvalidConfig);
  EXPECT_EQ(kind({"dataset.mode=\"other\""}), ErrorKind::InvalidConfig);
  EXPECT_EQ(kind({"dataset.count=\"eight\""}), ErrorKind::InvalidConfig);
  EXPECT_EQ(kind({"predict.material=\"/no/such/card.json\""}), ErrorKind::InvalidConfig);
  EXPECT_EQ(kind({"model.patch=5"}), ErrorKind::InvalidConfig);
  EXPECT_EQ(kind({"missing-equals"}), ErrorKind::InvalidConfig);
  EXPECT_THROW(pl::load_config("/no/such/run.toml"), Error);
}

TEST(Seeds, StagesAreIndependentAndStable) {
  const auto c = pl::load_config("", {"seed=5"});
  std::set<std::uint64_t> seen;
  for (auto s : {pl::Stage::Dataset, pl::Stage::Labels, pl::Stage::Pretrain, pl::Stage::Task1, pl::Stage::Task2,
                 pl::Stage::OdmnDirect, pl::Stage::Predict, pl::Stage::Export})
    seen.insert(pl::stage_seed(c, s));
  EXPECT_EQ(seen.size(), 8u);
  EXPECT_EQ(pl::stage_seed(c, pl::Stage::Task1), pl::stage_seed(pl::load_config("", {"seed=5"}), pl::Stage::Task1));
  EXPECT_NE(pl::stage_seed(c, pl::Stage::Task1), pl::stage_seed(pl::load_config("", {"seed=6"}), pl::Stage::Task1));
}

TEST(GenDataset, HssModeIsByteReproducible) {
  const fs::path a = scratch_dir("gen_a"), b = scratch_dir("gen_b");
  const auto ea = pl::cmd_gen_dataset(tiny(a, {"dataset.count=8"}));
  pl::cmd_gen_dataset(tiny(b, {"dataset.count=8"}));
  ASSERT_EQ(ea.size(), 8u);
  expect_identical_dirs(a / "dataset", b / "dataset");
  const json m = pl::read_json(a / "dataset" / "manifest.json");
  EXPECT_EQ(m.at("command"), "gen-dataset");
  EXPECT_EQ(m.at("code_version"), pl::kVersion);
  EXPECT_EQ(m.at("config_hash"), pl::config_hash(tiny(a, {"dataset.count=8"})));
  for (const auto& e : m.at("entries")) {
    EXPECT_NEAR(e.at("source").at("odf_weight_sum").get<double>(), 1.0, 1e-12);
    const Odf odf = read_odf_csv((a / "dataset" / e.at("source").at("odf").get<std::string>()).string());
    double total = 0.0;
    for (double w : odf.weights) total += w;
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
  EXPECT_TRUE(fs::exists(a / "dataset" / "timing.json"));
}

TEST(GenDataset, FamilyModeTagsEachSample) {
  const fs::path dir = scratch_dir("gen_fam");
  const auto e = pl::cmd_gen_dataset(tiny(dir, {"dataset.mode=\"families\"", "dataset.per_family=2"}));
  ASSERT_EQ(e.size(), 8u);
  const std::vector<std::string> expected = {"S1", "S1", "S2", "S2", "W1", "W1", "W2", "W2"};
  for (std::size_t i = 0; i < e.size(); ++i) EXPECT_EQ(e[i].family, expected[i]);
  const auto c = tiny(dir, {"dataset.mode=\"families\""});
  EXPECT_EQ(pl::predict_selection(c, e), (std::vector<std::size_t>{0, 2, 4, 6}));
}

TEST(LabelStiffness, FirstTripletIsConfiguredCrystalAndLabelsAreBounded) {
  const fs::path dir = scratch_dir("labels");
  const auto c = tiny(dir, {"labels.triplets=2"});
  pl::cmd_gen_dataset(c);
  const auto labels = pl::cmd_label_stiffness(c);
  ASSERT_EQ(labels.size(), 4u * 3u);
  const auto entries = pl::load_dataset(c);
  const StiffnessVoigt copper = cubic_stiffness(107.3, 60.8, 28.3);
  for (const auto& l : labels) {
    ASSERT_TRUE(l.ok);
    if (l.triplet == 0) {
      EXPECT_EQ(l.c_crystal, copper);
    }
    const Rve rve = read_rve(entries[std::stoul(l.rve.substr(4))].rve_file);
    const auto b = stiffness_bounds(rve, l.c_crystal);
    for (int k = 0; k < 6; ++k) {
      const Vec6 e = Vec6::Unit(k);
      EXPECT_LE(e.dot(b.reuss * e), e.dot(l.c_bar * e) * (1 + 1e-9));
      EXPECT_LE(e.dot(l.c_bar * e), e.dot(b.voigt * e) * (1 + 1e-7));
    }
  }
  const auto reread = pl::load_labels(c);
  ASSERT_EQ(reread.size(), labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    EXPECT_EQ(reread[i].c_crystal, labels[i].c_crystal);
    EXPECT_EQ(reread[i].c_bar, labels[i].c_bar);
  }
}

TEST(LabelStiffness, NonConvergenceIsRecordedAndRunContinues) {
  const fs::path dir = scratch_dir("labels_fail");
  const auto c = tiny(dir, {"labels.tolerance=1e-15", "labels.max_iterations=1"});
  pl::cmd_gen_dataset(c);
  const auto labels = pl::cmd_label_stiffness(c);
  ASSERT_EQ(labels.size(), 4u);
  for (const auto& l : labels) EXPECT_FALSE(l.ok);
  const json m = pl::read_json(dir / "labels" / "manifest.json");
  for (const auto& e : m.at("labels")) EXPECT_EQ(e.at("status"), "not-converged");
  EXPECT_THROW(pl::cmd_train(c, pl::Task::Task1), Error);
}

TEST(Train, ZeroEpochsKeepsInitialization) {
  const fs::path dir = scratch_dir("train_zero");
  const auto c = tiny(dir, {"train.epochs=0", "odmn.epochs=0"});
  pl::cmd_gen_dataset(c);
  pl::cmd_label_stiffness(c);
  pl::cmd_train(c, pl::Task::Task1);
  const auto ck = mae::read_checkpoint((dir / "train" / "task1" / "checkpoint.bin").string());
  mae::MaeConfig mc = c.model;
  mc.head = mae::HeadKind::Stiffness;
  const mae::MaeModel model(mc);
  const Eigen::VectorXd init = model.initialize(pl::stage_seed(c, pl::Stage::Task1));
  Eigen::VectorXd loaded = Eigen::VectorXd::Zero(model.size());
  mae::load_matching(model, ck, loaded);
  EXPECT_EQ(loaded, init.cast<float>().cast<double>());
}

TEST(Pipeline, EndToEndArtifactsAndDeterminism) {
  const fs::path a = scratch_dir("e2e_a"), b = scratch_dir("e2e_b");
  for (const auto& dir : {a, b}) {
    const auto c = tiny(dir, {"dataset.mode=\"families\"", "dataset.per_family=1", "labels.triplets=3"});
    pl::cmd_gen_dataset(c);
    pl::cmd_label_stiffness(c);
    pl::cmd_train(c, pl::Task::Pretrain);
    auto warm = tiny(dir, {"dataset.mode=\"families\"", "dataset.per_family=1", "labels.triplets=3",
                           "train.pretrained=\"" + (dir / "train" / "pretrain" / "checkpoint.bin").string() + "\""});
    pl::cmd_train(warm, pl::Task::Task1);
    pl::cmd_train(warm, pl::Task::Task2Offline);
    pl::cmd_train(c, pl::Task::OdmnDirect);
    const auto curves = pl::cmd_predict(c);
    ASSERT_EQ(curves.size(), 4u);
    for (const auto& pc : curves) {
      EXPECT_GT(pc.peak_stress, 0.0);
      EXPECT_LE(pc.max_hill_mandel, 1e-10);
    }
    pl::cmd_export_cls(c);
    const json report = pl::cmd_metrics(c);
    EXPECT_EQ(report.at("loss_curves").size(), 4u);
    for (const auto& [k, v] : report.at("train").at("task1").at("r2").items())
      if (!v.is_null()) {
        EXPECT_LE(v.get<double>(), 1.0);
      }
  }
  for (const char* stage : {"dataset", "labels", "train/pretrain", "train/task1", "train/task2-offline",
                            "train/odmn-direct", "predict", "cls"})
    expect_identical_dirs(a / stage, b / stage);
  for (const char* stage : {"dataset", "labels", "train/pretrain", "predict", "cls", "metrics"}) {
    const json m = pl::read_json(a / stage / "manifest.json");
    for (const char* key : {"command", "config_hash", "config", "code_version", "seeds", "threads"})
      EXPECT_TRUE(m.contains(key)) << stage << " " << key;
    // The recorded config reproduces the run.
    EXPECT_EQ(pl::config_hash(pl::run_config_from_json(m.at("config"))), m.at("config_hash").get<std::string>()) << stage;
  }
}

TEST(Predict, SelfReferenceGivesZeroErrorAndElasticRampMatchesModulus) {
  const fs::path dir = scratch_dir("predict");
  const auto base = tiny(dir, {"labels.triplets=2", "predict.rves=[0]"});
  pl::cmd_gen_dataset(base);
  pl::cmd_label_stiffness(base);
  pl::cmd_train(base, pl::Task::OdmnDirect);
  pl::cmd_predict(base);
  fs::rename(dir / "predict", dir / "reference");
  const auto c = tiny(dir, {"labels.triplets=2", "predict.rves=[0]", "predict.reference_dir=\"" + (dir / "reference").string() + "\""});
  pl::cmd_predict(c);
  const auto errors = parse_metrics_report(pl::read_json(dir / "predict" / "metrics.json"));
  ASSERT_EQ(errors.size(), 1u);
  EXPECT_EQ(errors.begin()->second.mean_rel, 0.0);
  EXPECT_EQ(errors.begin()->second.max_rel, 0.0);

  // A 1e-4 ramp stays elastic: secant modulus equals the inferred uniaxial modulus.
  const auto ramp = tiny(dir, {"labels.triplets=2", "predict.rves=[0]", "predict.strain=1e-4", "predict.dt=0.02"});
  const auto curves = pl::cmd_predict(ramp);
  const OdmnParams p = odmn_params_from_json(pl::read_json(dir / "train" / "odmn-direct" / "odmn_params.json"));
  const double e_closed = 1.0 / homogenize_linear(p, cubic_stiffness(107.3, 60.8, 28.3)).inverse()(0, 0);
  const auto& last = curves[0].result.curve[curves[0].result.segment_end[0]];
  EXPECT_NEAR(last.p_bar(0, 0) / (last.f_bar(0, 0) - 1.0), e_closed, 0.01 * e_closed);
}

TEST(Cli, ExitCodes) {
  EXPECT_EQ(pl::exit_code(ErrorKind::InvalidConfig), 2);
  EXPECT_EQ(pl::exit_code(ErrorKind::InvalidInput), 2);
  EXPECT_EQ(pl::exit_code(ErrorKind::Convergence), 3);
  EXPECT_EQ(pl::exit_code(ErrorKind::Numeric), 3);
  EXPECT_EQ(pl::exit_code(ErrorKind::Io), 4);
}

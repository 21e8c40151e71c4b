// polyfm: command-line front end for the dataset, training and prediction stages.

#include <iostream>

#include <CLI11.hpp>

#include "polyfm/pipeline.hpp"

namespace pl = polyfm::pipeline;

int main(int argc, char** argv) {
  CLI::App app{"Polycrystal foundation model toolkit"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string output_dir;
  app.add_option("-c,--config", config_path, "TOML run configuration")->check(CLI::ExistingFile);
  app.add_option("--set", overrides, "Override a config value, e.g. --set train.steps=50");
  app.add_option("--seed", seed, "Master seed (overrides the config)");
  app.add_option("-o,--output-dir", output_dir, "Run directory (overrides the config)");

  auto* gen = app.add_subcommand("gen-dataset", "Generate periodic Voronoi RVEs with sampled textures");
  auto* label = app.add_subcommand("label-stiffness", "Compute homogenized stiffness labels with the FFT solver");
  auto* train = app.add_subcommand("train", "Pretrain or fine-tune a model");
  std::string task;
  train->add_option("task", task, "pretrain | task1 | task2-offline | odmn-direct")
      ->required()
      ->check(CLI::IsMember({"pretrain", "task1", "task2-offline", "odmn-direct"}));
  auto* predict = app.add_subcommand("predict", "Drive ODMN crystal-plasticity models under uniaxial tension");
  auto* metrics = app.add_subcommand("metrics", "Collect R2, loss curves and stress errors");
  auto* exportc = app.add_subcommand("export-cls", "Write CLS embeddings for every RVE");

  CLI11_PARSE(app, argc, argv);

  try {
    std::vector<std::string> all = overrides;
    if (seed) all.push_back("seed=" + std::to_string(*seed));
    if (!output_dir.empty()) all.push_back("output_dir=\"" + output_dir + "\"");
    const pl::RunConfig cfg = pl::load_config(config_path, all);

    if (*gen) {
      const auto e = pl::cmd_gen_dataset(cfg);
      std::cout << "wrote " << e.size() << " RVEs to " << (std::filesystem::path(cfg.output_dir) / "dataset").string() << '\n';
    } else if (*label) {
      const auto l = pl::cmd_label_stiffness(cfg);
      std::size_t failed = 0;
      for (const auto& x : l) failed += x.ok ? 0 : 1;
      std::cout << "labelled " << l.size() - failed << '/' << l.size() << " samples\n";
      if (failed == l.size()) return 3;
    } else if (*train) {
      const auto r = pl::cmd_train(cfg, pl::task_from_string(task));
      std::cout << task << ": loss " << r.initial_loss << " -> " << r.final_loss << ", checkpoint " << r.checkpoint.string() << '\n';
    } else if (*predict) {
      for (const auto& c : pl::cmd_predict(cfg))
        std::cout << c.rve << " (" << c.family << "): peak P11 " << c.peak_stress * 1e3 << " MPa\n";
    } else if (*metrics) {
      std::cout << pl::cmd_metrics(cfg).dump(2) << '\n';
    } else if (*exportc) {
      std::cout << "wrote " << pl::cmd_export_cls(cfg).string() << '\n';
    }
  } catch (const polyfm::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return pl::exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  }
  return 0;
}

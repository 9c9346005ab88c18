#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "st3d/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"st3d: spatio-temporal 3-D CNN engine for video recognition"};
  app.require_subcommand(1);

  std::string config_path, checkpoint_path, out_dir, frame_dir, manifest_path;
  std::uint64_t seed = 0;
  bool have_seed = false, as_json = false;

  auto* inspect = app.add_subcommand("inspect", "print the architecture table");
  inspect->add_option("--config", config_path, "run config (JSON)")->required();
  inspect->add_flag("--json", as_json, "machine-readable output");

  auto* train = app.add_subcommand("train", "train from scratch or fine-tune");
  train->add_option("--config", config_path, "run config (JSON)")->required();
  train->add_option("--checkpoint", checkpoint_path, "resume from checkpoint");
  train->add_option("--seed", seed, "override train.seed")
      ->each([&](const std::string&) { have_seed = true; });
  train->add_option("--out", out_dir, "override output_dir");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--config", config_path, "run config (JSON)")->required();
  eval->add_option("--checkpoint", checkpoint_path, "trained checkpoint")
      ->required();
  eval->add_option("--out", out_dir, "override output_dir");

  auto* predict = app.add_subcommand("predict", "classify one frame directory");
  predict->add_option("--checkpoint", checkpoint_path, "trained checkpoint")
      ->required();
  predict->add_option("frame_dir", frame_dir, "directory of frame_%06d.ppm")
      ->required();

  auto* mean = app.add_subcommand("compute-mean",
                                  "per-channel pixel mean of a dataset");
  mean->add_option("manifest", manifest_path, "dataset manifest")->required();
  mean->add_option("--out", out_dir, "output mean file (default mean.txt)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (inspect->parsed()) {
      st3d::cmd_inspect(st3d::load_run_config(config_path), as_json, std::cout);
    } else if (train->parsed()) {
      st3d::RunConfig cfg = st3d::load_run_config(config_path);
      if (have_seed) cfg.train.seed = seed;
      if (!out_dir.empty()) cfg.output_dir = out_dir;
      const auto result = st3d::cmd_train(cfg, checkpoint_path, &std::cout);
      std::cout << "done: " << result.epochs_run << " epochs, log "
                << result.csv_path << "\n";
    } else if (eval->parsed()) {
      st3d::RunConfig cfg = st3d::load_run_config(config_path);
      if (!out_dir.empty()) cfg.output_dir = out_dir;
      st3d::cmd_eval(cfg, checkpoint_path, std::cout);
    } else if (predict->parsed()) {
      st3d::cmd_predict(checkpoint_path, frame_dir, std::cout);
    } else if (mean->parsed()) {
      const std::string out = out_dir.empty() ? "mean.txt" : out_dir;
      const auto m = st3d::cmd_compute_mean(manifest_path, out);
      std::cout << m[0] << " " << m[1] << " " << m[2] << " -> " << out << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

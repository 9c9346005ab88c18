#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "st3d/checkpoint.hpp"
#include "st3d/data.hpp"
#include "st3d/train.hpp"

namespace st3d {

// Run configuration file: JSON with sections arch / data / augment / train
// plus output_dir. Unknown keys are rejected so typos fail loudly.
struct RunConfig {
  NetworkSpec spec;
  std::string train_manifest;
  std::string val_manifest;
  std::string mean_file;
  AugmentConfig augment;
  TrainConfig train;
  std::string output_dir = "out";
};

inline std::array<float, 3> read_mean_file(const std::string& path) {
  std::ifstream f(path);
  check(f.good(), "mean file: cannot open " + path);
  std::array<float, 3> mean{};
  for (int c = 0; c < 3; ++c) {
    check(static_cast<bool>(f >> mean[static_cast<size_t>(c)]),
          "mean file: expected 3 numbers in " + path);
  }
  return mean;
}

inline void write_mean_file(const std::string& path,
                            const std::array<float, 3>& mean) {
  std::ofstream f(path, std::ios::trunc);
  check(f.good(), "mean file: cannot open " + path + " for writing");
  char buf[64];
  for (int c = 0; c < 3; ++c) {
    std::snprintf(buf, sizeof(buf), "%.6f\n",
                  static_cast<double>(mean[static_cast<size_t>(c)]));
    f << buf;
  }
}

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj,
                                const std::set<std::string>& allowed,
                                const std::string& section) {
  for (const auto& [key, value] : obj.items()) {
    check(allowed.count(key) > 0,
          "config: unknown key '" + key + "' in " + section);
  }
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig cfg;
  detail::reject_unknown_keys(j, {"arch", "data", "augment", "train", "output_dir"},
                              "config root");
  check(j.contains("arch"), "config: missing 'arch' section");

  // ----- arch -----
  const auto& arch = j.at("arch");
  detail::reject_unknown_keys(
      arch,
      {"variant", "depth", "num_classes", "clip_len", "stage_widths",
       "stage_blocks", "cardinality", "growth_rate", "widening_factor",
       "shortcut_type", "conv1_width"},
      "arch");
  check(arch.contains("variant"), "config: arch.variant is required");
  check(arch.contains("num_classes"), "config: arch.num_classes is required");
  const std::string variant = arch.at("variant").get<std::string>();
  const i64 num_classes = arch.at("num_classes").get<i64>();
  check(num_classes >= 1, "config: arch.num_classes must be >= 1");
  const i64 clip_len = arch.value("clip_len", i64{16});
  check(clip_len >= 1, "config: arch.clip_len must be >= 1");

  if (arch.contains("depth")) {
    cfg.spec = named_spec(variant, arch.at("depth").get<i64>(), num_classes,
                          clip_len);
  } else {
    cfg.spec.variant = detail::variant_from_name(variant);
    cfg.spec.num_classes = num_classes;
    cfg.spec.clip_len = clip_len;
    cfg.spec.name = variant;
    check(arch.contains("stage_widths") && arch.contains("stage_blocks"),
          "config: arch without depth needs stage_widths and stage_blocks");
  }
  if (arch.contains("stage_widths"))
    cfg.spec.stage_widths = arch.at("stage_widths").get<std::array<i64, 4>>();
  if (arch.contains("stage_blocks"))
    cfg.spec.stage_blocks = arch.at("stage_blocks").get<std::array<i64, 4>>();
  if (arch.contains("cardinality"))
    cfg.spec.cardinality = arch.at("cardinality").get<i64>();
  if (arch.contains("growth_rate"))
    cfg.spec.growth_rate = arch.at("growth_rate").get<i64>();
  if (arch.contains("widening_factor"))
    cfg.spec.widening_factor = arch.at("widening_factor").get<i64>();
  if (arch.contains("conv1_width"))
    cfg.spec.conv1_width = arch.at("conv1_width").get<i64>();
  if (arch.contains("shortcut_type")) {
    const std::string sc = arch.at("shortcut_type").get<std::string>();
    check(sc == "A" || sc == "B", "config: arch.shortcut_type must be A or B");
    cfg.spec.shortcut_type = sc == "A" ? ShortcutType::A : ShortcutType::B;
  }
  cfg.spec.validate();

  // ----- data -----
  if (j.contains("data")) {
    const auto& data = j.at("data");
    detail::reject_unknown_keys(data,
                                {"train_manifest", "val_manifest", "mean_file"},
                                "data");
    cfg.train_manifest = data.value("train_manifest", std::string{});
    cfg.val_manifest = data.value("val_manifest", std::string{});
    cfg.mean_file = data.value("mean_file", std::string{});
    for (const std::string& p :
         {cfg.train_manifest, cfg.val_manifest, cfg.mean_file}) {
      check(p.empty() || std::filesystem::exists(p),
            "config: referenced path does not exist: " + p);
    }
  }

  // ----- augment -----
  cfg.augment.clip_len = cfg.spec.clip_len;
  if (j.contains("augment")) {
    const auto& aug = j.at("augment");
    detail::reject_unknown_keys(
        aug, {"scales", "out_size", "flip_prob", "channel_mean"}, "augment");
    if (aug.contains("scales"))
      cfg.augment.scales = aug.at("scales").get<std::vector<float>>();
    if (aug.contains("out_size"))
      cfg.augment.out_size = aug.at("out_size").get<i64>();
    if (aug.contains("flip_prob")) {
      cfg.augment.flip_prob = aug.at("flip_prob").get<float>();
      check(cfg.augment.flip_prob > 0.0f && cfg.augment.flip_prob < 1.0f,
            "config: augment.flip_prob must lie strictly inside (0,1)");
    }
    if (aug.contains("channel_mean"))
      cfg.augment.channel_mean =
          aug.at("channel_mean").get<std::array<float, 3>>();
  }
  if (!cfg.mean_file.empty())
    cfg.augment.channel_mean = read_mean_file(cfg.mean_file);
  cfg.augment.validate();

  // ----- train -----
  TrainConfig::Mode mode = TrainConfig::Mode::Scratch;
  if (j.contains("train") && j.at("train").contains("mode")) {
    const std::string m = j.at("train").at("mode").get<std::string>();
    check(m == "scratch" || m == "finetune",
          "config: train.mode must be 'scratch' or 'finetune'");
    if (m == "finetune") mode = TrainConfig::Mode::Finetune;
  }
  cfg.train = TrainConfig::defaults(mode);
  if (j.contains("train")) {
    const auto& tr = j.at("train");
    detail::reject_unknown_keys(
        tr,
        {"mode", "lr", "weight_decay", "momentum", "batch_size", "max_epochs",
         "seed", "patience", "min_delta", "trainable_prefixes"},
        "train");
    if (tr.contains("lr")) {
      cfg.train.lr = tr.at("lr").get<float>();
      check(cfg.train.lr > 0.0f, "config: train.lr must be > 0");
    }
    if (tr.contains("weight_decay")) {
      cfg.train.weight_decay = tr.at("weight_decay").get<float>();
      check(cfg.train.weight_decay >= 0.0f,
            "config: train.weight_decay must be >= 0");
    }
    if (tr.contains("momentum")) {
      cfg.train.momentum = tr.at("momentum").get<float>();
      check(cfg.train.momentum >= 0.0f && cfg.train.momentum < 1.0f,
            "config: train.momentum must lie in [0,1)");
    }
    if (tr.contains("batch_size")) {
      cfg.train.batch_size = tr.at("batch_size").get<i64>();
      check(cfg.train.batch_size >= 1, "config: train.batch_size must be >= 1");
    }
    if (tr.contains("max_epochs")) {
      cfg.train.max_epochs = tr.at("max_epochs").get<i64>();
      check(cfg.train.max_epochs >= 1, "config: train.max_epochs must be >= 1");
    }
    if (tr.contains("seed")) cfg.train.seed = tr.at("seed").get<std::uint64_t>();
    if (tr.contains("patience")) {
      cfg.train.patience = tr.at("patience").get<i64>();
      check(cfg.train.patience >= 1, "config: train.patience must be >= 1");
    }
    if (tr.contains("min_delta")) {
      cfg.train.min_delta = tr.at("min_delta").get<float>();
      check(cfg.train.min_delta >= 0.0f, "config: train.min_delta must be >= 0");
    }
    if (tr.contains("trainable_prefixes"))
      cfg.train.trainable_prefixes =
          tr.at("trainable_prefixes").get<std::vector<std::string>>();
  }

  cfg.output_dir = j.value("output_dir", std::string{"out"});
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  check(f.good(), "config: cannot open " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    fail("config: invalid JSON in " + path + " (" + e.what() + ")");
  }
  return parse_run_config(j);
}

}  // namespace st3d

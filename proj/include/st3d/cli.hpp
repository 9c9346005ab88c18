#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "st3d/checkpoint.hpp"
#include "st3d/config.hpp"
#include "st3d/train.hpp"

namespace st3d {

namespace detail {

inline std::string fmt6(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

inline i64 stage_groups(const NetworkSpec& spec) {
  return spec.variant == BlockVariant::ResNeXtBottleneck ? spec.cardinality : 1;
}

}  // namespace detail

// Architecture table: stage | output shape | params | groups, derived from a
// symbolic forward at batch 1. The classifier and total follow as summary
// lines since the classifier output is a score matrix rather than a 5-D map.
inline void cmd_inspect(const RunConfig& cfg, bool as_json, std::ostream& out) {
  const Network net = make_network(cfg.spec);
  const Shape5 input{1, 3, cfg.spec.clip_len, cfg.augment.out_size,
                     cfg.augment.out_size};
  const ShapeReport rep = summarize_shapes(net, input);
  const ParamCount pc = count_params(net);

  auto params_for = [&](const std::string& stage) -> i64 {
    // pool rows and the global pool carry no parameters; the final
    // pre-activation BN (no shape row of its own) counts toward conv5_x
    i64 total = 0;
    for (const auto& [key, count] : pc.per_stage) {
      if (key == stage) total += count;
      if (stage == "conv5_x" && key == "final_bn") total += count;
    }
    return total;
  };

  i64 fc_params = 0;
  for (const auto& [key, count] : pc.per_stage) {
    if (key == "fc") fc_params = count;
  }

  if (as_json) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& [stage, shape] : rep.rows) {
      nlohmann::json r;
      r["stage"] = stage;
      r["shape"] = std::array<i64, 5>{shape.n, shape.c, shape.t, shape.h,
                                      shape.w};
      r["params"] = params_for(stage);
      rows.push_back(r);
    }
    nlohmann::json fc;
    fc["stage"] = "fc";
    fc["shape"] = std::array<i64, 2>{input.n, cfg.spec.num_classes};
    fc["params"] = fc_params;
    rows.push_back(fc);
    nlohmann::json doc;
    doc["arch"] = cfg.spec.name.empty() ? variant_name(cfg.spec.variant)
                                        : cfg.spec.name;
    doc["stages"] = rows;
    doc["total_params"] = pc.total;
    out << doc.dump(2) << "\n";
    return;
  }

  out << "arch: "
      << (cfg.spec.name.empty() ? variant_name(cfg.spec.variant) : cfg.spec.name)
      << "  input: " << input.str() << "\n";
  char line[160];
  std::snprintf(line, sizeof(line), "%-12s %-22s %12s %8s\n", "stage",
                "output shape", "params", "groups");
  out << line;
  for (const auto& [stage, shape] : rep.rows) {
    const bool grouped = stage.rfind("conv", 0) == 0 && stage != "conv1";
    const i64 groups = grouped ? detail::stage_groups(cfg.spec) : 1;
    std::snprintf(line, sizeof(line), "%-12s %-22s %12lld %8lld\n",
                  stage.c_str(), shape.str().c_str(),
                  static_cast<long long>(params_for(stage)),
                  static_cast<long long>(groups));
    out << line;
  }
  out << "fc: " << fc_params << " params (output (" << input.n << ","
      << cfg.spec.num_classes << "))\n";
  out << "total params: " << pc.total << "\n";
}

struct TrainResult {
  i64 epochs_run = 0;
  float final_train_loss = 0.0f;
  Metrics final_val;
  std::string csv_path;
  std::string best_path;
  std::string last_path;
};

// Scratch or fine-tune training loop. Writes train_log.csv, saves best.ckpt
// on every monitored-loss improvement and last.ckpt every epoch; resumable
// from a checkpoint. A NaN loss aborts with the last good state on disk.
inline TrainResult cmd_train(const RunConfig& cfg,
                             const std::string& resume_path = {},
                             std::ostream* progress = nullptr) {
  check(!cfg.train_manifest.empty(), "train: data.train_manifest is required");
  const auto all = load_manifest(cfg.train_manifest, cfg.spec.num_classes);
  std::vector<VideoRecord> train_recs = split_records(all, Split::Train);
  std::vector<VideoRecord> val_recs;
  if (!cfg.val_manifest.empty()) {
    val_recs = split_records(load_manifest(cfg.val_manifest, cfg.spec.num_classes),
                             Split::Val);
  } else {
    val_recs = split_records(all, Split::Val);
  }
  check(!train_recs.empty(), "train: no records with split=train");

  std::filesystem::create_directories(cfg.output_dir);
  TrainResult result;
  result.csv_path = cfg.output_dir + "/train_log.csv";
  result.best_path = cfg.output_dir + "/best.ckpt";
  result.last_path = cfg.output_dir + "/last.ckpt";

  Network net = make_network(cfg.spec);
  OptimizerState opt;
  opt.lr = cfg.train.lr;
  opt.momentum = cfg.train.momentum;
  opt.weight_decay = cfg.train.weight_decay;
  PlateauSchedule sched;
  sched.lr = cfg.train.lr;
  sched.patience = cfg.train.patience;
  sched.min_delta = cfg.train.min_delta;

  const Rng master(cfg.train.seed);
  i64 start_epoch = 1;
  if (!resume_path.empty()) {
    const Checkpoint ckpt = load_checkpoint(resume_path);
    apply_checkpoint(ckpt, net, &opt);
    sched.lr = ckpt.lr;
    sched.best_loss = ckpt.best_loss;
    sched.epochs_since_improve = ckpt.epochs_since_improve;
    start_epoch = ckpt.epoch + 1;
  } else {
    net.init_params(master.fork("init").next_u64());
  }
  if (cfg.train.mode == TrainConfig::Mode::Finetune) {
    check(!cfg.train.trainable_prefixes.empty(),
          "train: finetune mode needs trainable_prefixes");
    freeze_stages(net, cfg.train.trainable_prefixes);
  }

  std::ofstream csv(result.csv_path,
                    resume_path.empty() ? std::ios::trunc : std::ios::app);
  check(csv.good(), "train: cannot open " + result.csv_path);
  if (resume_path.empty())
    csv << "epoch,phase,loss,clip_acc,video_top1,video_top5,lr\n";

  auto save_state = [&](const std::string& path, i64 epoch) {
    Checkpoint ckpt = make_checkpoint(net, &opt);
    ckpt.epoch = epoch;
    ckpt.lr = sched.lr;
    ckpt.best_loss = sched.best_loss;
    ckpt.epochs_since_improve = sched.epochs_since_improve;
    ckpt.rng_state = cfg.train.seed;
    ckpt.out_size = cfg.augment.out_size;
    ckpt.channel_mean = cfg.augment.channel_mean;
    save_checkpoint(path, ckpt);
  };

  auto scorer = [&](const Tensor& batch) {
    return net.forward(batch, nullptr, false);
  };

  for (i64 epoch = start_epoch; epoch <= cfg.train.max_epochs; ++epoch) {
    opt.lr = sched.lr;
    Rng epoch_rng = master.fork("epoch").fork(static_cast<std::uint64_t>(epoch));
    const float train_loss =
        train_epoch(net, train_recs, cfg.augment, cfg.train, opt, epoch_rng);
    if (std::isnan(train_loss)) {
      save_state(result.last_path, epoch - 1);
      fail("train: loss is NaN at epoch " + std::to_string(epoch) +
           ", training diverged; last good state kept at " + result.last_path);
    }
    csv << epoch << ",train," << detail::fmt6(train_loss) << ",,,,"
        << detail::fmt6(sched.lr) << "\n";

    float monitored = train_loss;
    if (!val_recs.empty()) {
      Metrics vm = evaluate_clips(scorer, val_recs, cfg.augment);
      const Metrics vv = evaluate_videos(scorer, val_recs, cfg.augment);
      vm.video_top1 = vv.video_top1;
      vm.video_top5 = vv.video_top5;
      vm.video_avg = vv.video_avg;
      csv << epoch << ",val," << detail::fmt6(vm.clip_loss) << ","
          << detail::fmt6(vm.clip_acc) << "," << detail::fmt6(vm.video_top1)
          << "," << detail::fmt6(vm.video_top5) << "," << detail::fmt6(sched.lr)
          << "\n";
      monitored = static_cast<float>(vm.clip_loss);
      result.final_val = vm;
    }
    const float prev_best = sched.best_loss;
    sched.step(monitored);
    if (monitored < prev_best - sched.min_delta) save_state(result.best_path, epoch);
    save_state(result.last_path, epoch);
    result.epochs_run = epoch;
    result.final_train_loss = train_loss;
    if (progress) {
      (*progress) << "epoch " << epoch << " train_loss "
                  << detail::fmt6(train_loss) << " lr " << detail::fmt6(sched.lr)
                  << "\n";
    }
  }
  csv.close();
  return result;
}

// Prints clip accuracy and the per-video top-1/top-5/average for a trained
// checkpoint, and appends one CSV row.
inline Metrics cmd_eval(const RunConfig& cfg, const std::string& ckpt_path,
                        std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  check(ckpt.spec.same_structure(cfg.spec),
        "eval: checkpoint '" + ckpt.spec.name + "' does not match config spec");
  Network net = make_network(cfg.spec);
  apply_checkpoint(ckpt, net);

  const std::string manifest =
      cfg.val_manifest.empty() ? cfg.train_manifest : cfg.val_manifest;
  check(!manifest.empty(), "eval: no manifest configured");
  const auto all = load_manifest(manifest, cfg.spec.num_classes);
  std::vector<VideoRecord> recs = split_records(all, Split::Val);
  if (recs.empty()) recs = split_records(all, Split::Test);
  if (recs.empty()) recs = all;
  check(!recs.empty(), "eval: empty dataset");

  auto scorer = [&](const Tensor& batch) {
    return net.forward(batch, nullptr, false);
  };
  Metrics m = evaluate_clips(scorer, recs, cfg.augment);
  const Metrics mv = evaluate_videos(scorer, recs, cfg.augment);
  m.video_top1 = mv.video_top1;
  m.video_top5 = mv.video_top5;
  m.video_avg = mv.video_avg;
  m.video_loss = mv.video_loss;

  out << "clips " << m.n_clips << "  videos " << m.n_videos << "\n";
  out << "clip_acc " << detail::fmt6(m.clip_acc) << "  clip_loss "
      << detail::fmt6(m.clip_loss) << "\n";
  out << "video_top1 " << detail::fmt6(m.video_top1) << "  video_top5 "
      << detail::fmt6(m.video_top5) << "  average " << detail::fmt6(m.video_avg)
      << "\n";

  std::filesystem::create_directories(cfg.output_dir);
  const std::string path = cfg.output_dir + "/eval.csv";
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream csv(path, std::ios::app);
  check(csv.good(), "eval: cannot open " + path);
  if (fresh) csv << "epoch,phase,loss,clip_acc,video_top1,video_top5,lr\n";
  csv << ckpt.epoch << ",eval," << detail::fmt6(m.clip_loss) << ","
      << detail::fmt6(m.clip_acc) << "," << detail::fmt6(m.video_top1) << ","
      << detail::fmt6(m.video_top5) << "," << detail::fmt6(ckpt.lr) << "\n";
  return m;
}

// Top-5 classes for one directory of frames, one `rank label score` line per
// class.
inline i64 cmd_predict(const std::string& ckpt_path,
                       const std::string& frame_dir, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  Network net = make_network(ckpt.spec);
  apply_checkpoint(ckpt, net);

  i64 n_frames = 0;
  while (std::filesystem::exists(frame_path(frame_dir, n_frames))) ++n_frames;
  check(n_frames > 0, "predict: no frame_000000.ppm.. files in " + frame_dir);

  VideoRecord rec;
  rec.id = frame_dir;
  rec.frame_dir = frame_dir;
  rec.n_frames = n_frames;

  AugmentConfig aug;
  aug.clip_len = ckpt.spec.clip_len;
  aug.out_size = ckpt.out_size;
  aug.channel_mean = ckpt.channel_mean;

  auto scorer = [&](const Tensor& batch) {
    return net.forward(batch, nullptr, false);
  };
  auto [scores, pred] = recognize_video(scorer, rec, aug);

  std::vector<i64> order(scores.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<i64>(i);
  std::stable_sort(order.begin(), order.end(), [&](i64 a, i64 b) {
    return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
  });
  const i64 k = std::min<i64>(5, static_cast<i64>(scores.size()));
  for (i64 r = 0; r < k; ++r) {
    const i64 cls = order[static_cast<size_t>(r)];
    out << (r + 1) << " " << cls << " "
        << detail::fmt6(scores[static_cast<size_t>(cls)]) << "\n";
  }
  return pred;
}

// Per-channel dataset mean written as three lines (R, G, B).
inline std::array<float, 3> cmd_compute_mean(const std::string& manifest_path,
                                             const std::string& out_path) {
  const auto records =
      load_manifest(manifest_path, std::numeric_limits<i64>::max());
  const auto mean = compute_channel_mean(records);
  write_mean_file(out_path, mean);
  return mean;
}

}  // namespace st3d

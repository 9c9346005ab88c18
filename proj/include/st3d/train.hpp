#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "st3d/data.hpp"
#include "st3d/net.hpp"
#include "st3d/optim.hpp"

namespace st3d {

struct TrainConfig {
  enum class Mode { Scratch, Finetune };
  Mode mode = Mode::Scratch;
  float lr = 0.1f;
  float weight_decay = 1e-3f;
  float momentum = 0.9f;
  i64 batch_size = 8;
  i64 max_epochs = 50;
  std::uint64_t seed = 1;
  i64 patience = 10;
  float min_delta = 1e-3f;
  std::vector<std::string> trainable_prefixes;  // finetune only

  static TrainConfig defaults(Mode mode) {
    TrainConfig c;
    c.mode = mode;
    if (mode == Mode::Finetune) {
      c.lr = 1e-3f;
      c.weight_decay = 1e-5f;
      c.trainable_prefixes = {"conv5_x", "fc"};
    }
    return c;
  }
};

struct Metrics {
  double clip_acc = 0.0;
  double clip_loss = 0.0;
  double video_top1 = 0.0;
  double video_top5 = 0.0;
  double video_avg = 0.0;
  double video_loss = 0.0;
  i64 n_clips = 0;
  i64 n_videos = 0;
};

inline Tensor stack_clips(const std::vector<Clip>& clips, size_t begin,
                          size_t end) {
  check(end > begin && end <= clips.size(), "stack_clips: bad range");
  const Shape5 one = clips[begin].tensor.shape();
  Tensor batch(Shape5{static_cast<i64>(end - begin), one.c, one.t, one.h, one.w});
  const i64 sample = one.numel();
  for (size_t i = begin; i < end; ++i) {
    check(clips[i].tensor.shape() == one, "stack_clips: ragged clip shapes");
    std::copy(clips[i].tensor.data(), clips[i].tensor.data() + sample,
              batch.data() + static_cast<i64>(i - begin) * sample);
  }
  return batch;
}

// argmax with ties broken toward the lowest class index
inline i64 argmax_lowest(const double* row, i64 n) {
  i64 best = 0;
  for (i64 j = 1; j < n; ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

// One pass over the shuffled training records: one sampled clip per record,
// cross-entropy forward/backward, SGD step, gradients zeroed. Per-record RNG
// streams are forked from (epoch rng, record id), so the result does not
// depend on loader scheduling. Returns the mean loss over records.
inline float train_epoch(Network& net, const std::vector<VideoRecord>& records,
                         const AugmentConfig& aug, const TrainConfig& cfg,
                         OptimizerState& opt, Rng& epoch_rng) {
  check(!records.empty(), "train_epoch: empty dataset");
  std::vector<size_t> order(records.size());
  std::iota(order.begin(), order.end(), size_t{0});
  for (size_t i = order.size(); i > 1; --i) {
    const size_t j = static_cast<size_t>(epoch_rng.next_below(i));
    std::swap(order[i - 1], order[j]);
  }

  double loss_sum = 0.0;
  i64 seen = 0;
  for (size_t pos = 0; pos < order.size(); pos += cfg.batch_size) {
    const size_t end = std::min(order.size(), pos + cfg.batch_size);
    std::vector<Clip> clips;
    std::vector<i64> labels;
    for (size_t k = pos; k < end; ++k) {
      const VideoRecord& rec = records[order[k]];
      Rng rec_rng = epoch_rng.fork(rec.id);
      try {
        clips.push_back(sample_training_clip(rec, aug, rec_rng));
      } catch (const Error& e) {
        fail("train_epoch: batch " + std::to_string(pos / cfg.batch_size) +
             ": " + e.what());
      }
      labels.push_back(rec.label);
    }
    Tensor batch = stack_clips(clips, 0, clips.size());
    Tape tape;
    Tensor logits = net.forward(batch, &tape, /*training=*/true);
    Tensor loss = softmax_cross_entropy(logits, labels, &tape);
    backward(tape, loss);
    sgd_step(net.params, opt);
    net.zero_grads();
    loss_sum += double(loss.data()[0]) * static_cast<double>(labels.size());
    seen += static_cast<i64>(labels.size());
  }
  return static_cast<float>(loss_sum / seen);
}

// Sliding-window accuracy: every window counts independently. The scorer maps
// a clip batch to logits; a Network works directly.
template <typename Scorer>
Metrics evaluate_clips(Scorer&& scorer, const std::vector<VideoRecord>& records,
                       const AugmentConfig& aug) {
  check(!records.empty(), "evaluate_clips: empty dataset");
  Metrics m;
  double loss_sum = 0.0;
  i64 correct = 0;
  for (const VideoRecord& rec : records) {
    const std::vector<Clip> clips = inference_clips(rec, aug);
    Tensor batch = stack_clips(clips, 0, clips.size());
    Tensor logits = scorer(batch);
    const i64 C = logits.shape().c;
    std::vector<i64> labels(clips.size(), rec.label);
    Tensor loss = softmax_cross_entropy(logits, labels);
    loss_sum += double(loss.data()[0]) * static_cast<double>(clips.size());
    for (size_t i = 0; i < clips.size(); ++i) {
      const float* row = logits.data() + static_cast<i64>(i) * C;
      i64 best = 0;
      for (i64 j = 1; j < C; ++j) {
        if (row[j] > row[best]) best = j;
      }
      if (best == rec.label) ++correct;
    }
    m.n_clips += static_cast<i64>(clips.size());
  }
  m.clip_acc = static_cast<double>(correct) / m.n_clips;
  m.clip_loss = loss_sum / m.n_clips;
  m.n_videos = static_cast<i64>(records.size());
  return m;
}

// Softmax scores of every window averaged into one distribution per video;
// prediction is the argmax with low-index tie break.
template <typename Scorer>
std::pair<std::vector<double>, i64> recognize_video(
    Scorer&& scorer, const VideoRecord& rec, const AugmentConfig& aug) {
  const std::vector<Clip> clips = inference_clips(rec, aug);
  Tensor batch = stack_clips(clips, 0, clips.size());
  Tensor probs = softmax(scorer(batch));
  const i64 C = probs.shape().c;
  std::vector<double> mean_scores(static_cast<size_t>(C), 0.0);
  for (size_t i = 0; i < clips.size(); ++i) {
    const float* row = probs.data() + static_cast<i64>(i) * C;
    for (i64 j = 0; j < C; ++j) mean_scores[static_cast<size_t>(j)] += row[j];
  }
  for (double& v : mean_scores) v /= static_cast<double>(clips.size());
  const i64 pred = argmax_lowest(mean_scores.data(), C);
  return {std::move(mean_scores), pred};
}

// Metric formulas on per-video averaged score vectors. top-5 counts the label
// among the min(5, C) largest scores, ranked by (score desc, index asc).
inline Metrics metrics_from_scores(const std::vector<std::vector<double>>& scores,
                                   const std::vector<i64>& labels) {
  check(scores.size() == labels.size() && !scores.empty(),
        "metrics_from_scores: need one label per score vector");
  Metrics m;
  m.n_videos = static_cast<i64>(scores.size());
  i64 top1 = 0, top5 = 0;
  double loss_sum = 0.0;
  for (size_t v = 0; v < scores.size(); ++v) {
    const std::vector<double>& row = scores[v];
    const i64 C = static_cast<i64>(row.size());
    const i64 label = labels[v];
    check(label >= 0 && label < C, "metrics_from_scores: label out of range");
    if (argmax_lowest(row.data(), C) == label) ++top1;
    const i64 k = std::min<i64>(5, C);
    i64 rank = 0;  // entries ranked strictly ahead of the label
    for (i64 j = 0; j < C; ++j) {
      if (row[j] > row[label] || (row[j] == row[label] && j < label)) ++rank;
    }
    if (rank < k) ++top5;
    const double p = std::max(row[static_cast<size_t>(label)], 1e-30);
    loss_sum += -std::log(p);
  }
  m.video_top1 = static_cast<double>(top1) / m.n_videos;
  m.video_top5 = static_cast<double>(top5) / m.n_videos;
  m.video_avg = (m.video_top1 + m.video_top5) / 2.0;
  m.video_loss = loss_sum / m.n_videos;
  return m;
}

template <typename Scorer>
Metrics evaluate_videos(Scorer&& scorer, const std::vector<VideoRecord>& records,
                        const AugmentConfig& aug) {
  check(!records.empty(), "evaluate_videos: empty dataset");
  std::vector<std::vector<double>> scores;
  std::vector<i64> labels;
  for (const VideoRecord& rec : records) {
    auto [s, pred] = recognize_video(scorer, rec, aug);
    scores.push_back(std::move(s));
    labels.push_back(rec.label);
  }
  return metrics_from_scores(scores, labels);
}

}  // namespace st3d

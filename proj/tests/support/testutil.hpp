#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "st3d/data.hpp"
#include "st3d/net.hpp"
#include "st3d/rng.hpp"
#include "st3d/tensor.hpp"

namespace testutil {

using st3d::i64;

// self-deleting scratch directory
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = (std::filesystem::temp_directory_path() /
             ("st3d_" + tag + "_" + std::to_string(::getpid()) + "_" +
              std::to_string(counter++)))
                .string();
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

inline st3d::Tensor rand_tensor(st3d::Shape5 shape, st3d::Rng& rng,
                                float lo = -1.0f, float hi = 1.0f,
                                bool requires_grad = false) {
  st3d::Tensor t(shape, requires_grad);
  for (i64 i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

// scalar loss = sum_i coef[i] * y[i]; taped so gradcheck can weight every
// output element
inline st3d::Tensor weighted_sum(const st3d::Tensor& y,
                                 const std::vector<float>& coef,
                                 st3d::Tape* tape) {
  const bool track = tape && y.requires_grad();
  st3d::Tensor out(st3d::Shape5{1, 1, 1, 1, 1}, track);
  double acc = 0.0;
  for (i64 i = 0; i < y.numel(); ++i) acc += double(y.data()[i]) * coef[i];
  out.data()[0] = static_cast<float>(acc);
  if (track) {
    tape->record([y, out, coef]() {
      const float g = out.grad()[0];
      for (i64 i = 0; i < y.numel(); ++i) y.grad()[i] += g * coef[i];
    });
  }
  return out;
}

// ResNet-18 skeleton at one eighth of the standard widths
inline st3d::NetworkSpec micro_resnet18(i64 classes = 2, i64 clip_len = 16) {
  st3d::NetworkSpec spec = st3d::named_spec("resnet", 18, classes, clip_len);
  spec.conv1_width = 8;
  spec.stage_widths = {8, 16, 32, 64};
  spec.name = "resnet-18-micro";
  return spec;
}

// Synthetic two-class video dataset on disk. Classes differ in dominant color
// and stripe orientation; a bright patch drifts across frames so clips carry
// motion. Frames are written as binary PPM.
struct SyntheticDataset {
  std::string manifest;
  std::vector<st3d::VideoRecord> records;
};

inline SyntheticDataset make_synthetic_dataset(
    const std::string& root, i64 n_videos, i64 n_classes, i64 frames_lo,
    i64 frames_hi, i64 width, i64 height, std::uint64_t seed,
    const std::string& split = "train") {
  st3d::Rng rng(seed);
  SyntheticDataset ds;
  ds.manifest = root + "/manifest_" + split + ".tsv";
  std::ofstream mf(ds.manifest);
  for (i64 v = 0; v < n_videos; ++v) {
    const i64 label = v % n_classes;
    const i64 n_frames =
        frames_lo +
        static_cast<i64>(rng.next_below(
            static_cast<std::uint64_t>(frames_hi - frames_lo + 1)));
    const std::string id = split + "_vid" + std::to_string(v);
    const std::string dir = root + "/" + id;
    std::filesystem::create_directories(dir);
    for (i64 f = 0; f < n_frames; ++f) {
      st3d::Image img;
      img.width = width;
      img.height = height;
      img.rgb.resize(static_cast<size_t>(width * height * 3));
      const i64 patch_x = (7 * f + 3 * v) % (width > 8 ? width - 8 : 1);
      for (i64 y = 0; y < height; ++y) {
        for (i64 x = 0; x < width; ++x) {
          int r, g, b;
          if (label % 2 == 0) {
            r = 190 + ((y / 4) % 2) * 30;
            g = 60;
            b = 50;
          } else {
            r = 50;
            g = 60 + ((x / 4) % 2) * 30;
            b = 190;
          }
          if (x >= patch_x && x < patch_x + 8 && y >= height / 4 &&
              y < height / 4 + 8) {
            r = g = b = 250;  // drifting bright patch
          }
          const int noise = static_cast<int>(rng.next_below(11)) - 5;
          auto clamp = [&](int v2) {
            return static_cast<std::uint8_t>(v2 < 0 ? 0 : (v2 > 255 ? 255 : v2));
          };
          const size_t at = static_cast<size_t>((y * width + x) * 3);
          img.rgb[at + 0] = clamp(r + noise);
          img.rgb[at + 1] = clamp(g + noise);
          img.rgb[at + 2] = clamp(b + noise);
        }
      }
      st3d::write_ppm(st3d::frame_path(dir, f), img);
    }
    mf << id << "\t" << dir << "\t" << n_frames << "\t" << label << "\t"
       << split << "\n";
    st3d::VideoRecord rec;
    rec.id = id;
    rec.frame_dir = dir;
    rec.n_frames = n_frames;
    rec.label = label;
    rec.split = split == "train"  ? st3d::Split::Train
                : split == "val" ? st3d::Split::Val
                                 : st3d::Split::Test;
    ds.records.push_back(rec);
  }
  mf.close();
  return ds;
}

}  // namespace testutil

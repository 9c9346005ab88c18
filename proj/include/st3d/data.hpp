#pragma once

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "st3d/rng.hpp"
#include "st3d/tensor.hpp"

namespace st3d {

// 8-bit RGB frame, pixels packed row-major
struct Image {
  i64 width = 0, height = 0;
  std::vector<std::uint8_t> rgb;

  std::uint8_t at(i64 y, i64 x, int ch) const {
    return rgb[static_cast<size_t>((y * width + x) * 3 + ch)];
  }
};

// binary PPM (P6), 8-bit, the only frame format ingested
inline Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), "read_ppm: cannot open " + path);
  std::string magic;
  f >> magic;
  check(magic == "P6", "read_ppm: " + path + " is not a binary PPM (P6)");
  auto next_int = [&]() -> i64 {
    // skips whitespace and '#' comment lines
    for (;;) {
      int ch = f.peek();
      if (ch == '#') {
        std::string line;
        std::getline(f, line);
      } else if (std::isspace(ch)) {
        f.get();
      } else {
        break;
      }
    }
    i64 v = -1;
    f >> v;
    check(f.good() && v >= 0, "read_ppm: malformed header in " + path);
    return v;
  };
  const i64 w = next_int();
  const i64 h = next_int();
  const i64 maxval = next_int();
  check(maxval == 255, "read_ppm: " + path + " must be 8-bit (maxval 255)");
  f.get();  // single whitespace after header
  Image img;
  img.width = w;
  img.height = h;
  img.rgb.resize(static_cast<size_t>(w * h * 3));
  f.read(reinterpret_cast<char*>(img.rgb.data()),
         static_cast<std::streamsize>(img.rgb.size()));
  check(f.gcount() == static_cast<std::streamsize>(img.rgb.size()),
        "read_ppm: truncated pixel data in " + path);
  return img;
}

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  check(f.good(), "write_ppm: cannot open " + path);
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.rgb.data()),
          static_cast<std::streamsize>(img.rgb.size()));
  check(f.good(), "write_ppm: short write to " + path);
}

inline std::string frame_path(const std::string& frame_dir, i64 index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%06lld.ppm",
                static_cast<long long>(index));
  return frame_dir + "/" + buf;
}

enum class Split { Train, Val, Test };

struct VideoRecord {
  std::string id;
  std::string frame_dir;
  i64 n_frames = 0;
  i64 label = 0;
  Split split = Split::Train;
};

// Manifest: one record per line, `id<TAB>frame_dir<TAB>n_frames<TAB>label<TAB>split`.
inline std::vector<VideoRecord> load_manifest(const std::string& path,
                                              i64 num_classes) {
  std::ifstream f(path);
  check(f.good(), "load_manifest: cannot open " + path);
  std::vector<VideoRecord> records;
  std::string line;
  i64 line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    size_t start = 0;
    for (;;) {
      const size_t tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    const std::string where = path + ":" + std::to_string(line_no);
    check(fields.size() == 5, "load_manifest: expected 5 tab-separated fields "
                              "at " + where);
    VideoRecord rec;
    rec.id = fields[0];
    rec.frame_dir = fields[1];
    try {
      rec.n_frames = std::stoll(fields[2]);
      rec.label = std::stoll(fields[3]);
    } catch (const std::exception&) {
      fail("load_manifest: non-numeric n_frames/label at " + where);
    }
    check(rec.n_frames >= 1, "load_manifest: n_frames must be >= 1 at " + where);
    check(rec.label >= 0 && rec.label < num_classes,
          "load_manifest: label " + std::to_string(rec.label) +
              " outside [0," + std::to_string(num_classes) + ") at " + where);
    if (fields[4] == "train") rec.split = Split::Train;
    else if (fields[4] == "val") rec.split = Split::Val;
    else if (fields[4] == "test") rec.split = Split::Test;
    else fail("load_manifest: unknown split '" + fields[4] + "' at " + where);
    check(std::filesystem::is_directory(rec.frame_dir),
          "load_manifest: missing frame_dir '" + rec.frame_dir + "' at " +
              where);
    records.push_back(std::move(rec));
  }
  if (records.empty()) {
    std::cerr << "load_manifest: warning: " << path << " has no records\n";
  }
  return records;
}

inline std::vector<VideoRecord> split_records(
    const std::vector<VideoRecord>& records, Split split) {
  std::vector<VideoRecord> out;
  for (const auto& r : records) {
    if (r.split == split) out.push_back(r);
  }
  return out;
}

// L frame indices starting at t_start, looping cyclically when the video is
// shorter than the clip.
inline std::vector<i64> clip_indices(i64 n_frames, i64 clip_len, i64 t_start) {
  check(n_frames >= 1, "clip_indices: n_frames must be >= 1");
  check(t_start >= 0 && t_start < n_frames,
        "clip_indices: t_start " + std::to_string(t_start) +
            " outside [0," + std::to_string(n_frames) + ")");
  std::vector<i64> idx(static_cast<size_t>(clip_len));
  for (i64 j = 0; j < clip_len; ++j) idx[static_cast<size_t>(j)] = (t_start + j) % n_frames;
  return idx;
}

enum class CropPos { TopLeft = 0, TopRight, BottomLeft, BottomRight, Center };

inline const char* crop_pos_name(CropPos p) {
  switch (p) {
    case CropPos::TopLeft: return "tl";
    case CropPos::TopRight: return "tr";
    case CropPos::BottomLeft: return "bl";
    case CropPos::BottomRight: return "br";
    case CropPos::Center: return "c";
  }
  return "?";
}

struct AugmentConfig {
  // crop side as a fraction of the frame's short side
  std::vector<float> scales{1.0f, 0.84089641525f, 0.70710678118f,
                            0.59460355750f, 0.5f};
  i64 clip_len = 16;
  i64 out_size = 112;
  float flip_prob = 0.5f;
  std::array<float, 3> channel_mean{0.0f, 0.0f, 0.0f};

  void validate() const {
    check(clip_len >= 1, "augment: clip_len must be >= 1");
    check(out_size >= 1, "augment: out_size must be >= 1");
    check(flip_prob >= 0.0f && flip_prob <= 1.0f,
          "augment: flip_prob outside [0,1]");
    check(!scales.empty(), "augment: empty scale set");
    for (float s : scales)
      check(s > 0.0f && s <= 1.0f, "augment: scale outside (0,1]");
  }
};

// Everything needed to rebuild a clip from its source frames.
struct AugmentParams {
  i64 t_start = 0;
  CropPos position = CropPos::Center;
  float scale = 1.0f;
  bool flipped = false;
};

struct Clip {
  Tensor tensor;  // (1, 3, L, out_size, out_size)
  std::string source_id;
  AugmentParams provenance;
};

// Stochastic choices of one training sample, drawn in a fixed order:
// temporal position, spatial position, scale, flip.
inline AugmentParams draw_augment_params(i64 n_frames, const AugmentConfig& cfg,
                                         Rng& rng) {
  AugmentParams p;
  p.t_start = static_cast<i64>(rng.next_below(static_cast<std::uint64_t>(n_frames)));
  p.position = static_cast<CropPos>(rng.next_below(5));
  p.scale = cfg.scales[static_cast<size_t>(
      rng.next_below(static_cast<std::uint64_t>(cfg.scales.size())))];
  p.flipped = rng.bernoulli(cfg.flip_prob);
  return p;
}

namespace detail {

// Bilinear resize of one cropped channel plane to out x out. Sample centers
// follow src = (dst + 0.5) * (in / out) - 0.5 with edge clamping, so an
// identity-size resize is exact.
inline void resize_plane(const float* src, i64 in_size, float* dst,
                         i64 out_size) {
  const double ratio = static_cast<double>(in_size) / out_size;
  for (i64 y = 0; y < out_size; ++y) {
    double sy = (y + 0.5) * ratio - 0.5;
    if (sy < 0) sy = 0;
    i64 y0 = static_cast<i64>(sy);
    if (y0 > in_size - 1) y0 = in_size - 1;
    i64 y1 = y0 + 1 < in_size ? y0 + 1 : in_size - 1;
    const float fy = static_cast<float>(sy - y0);
    for (i64 x = 0; x < out_size; ++x) {
      double sx = (x + 0.5) * ratio - 0.5;
      if (sx < 0) sx = 0;
      i64 x0 = static_cast<i64>(sx);
      if (x0 > in_size - 1) x0 = in_size - 1;
      i64 x1 = x0 + 1 < in_size ? x0 + 1 : in_size - 1;
      const float fx = static_cast<float>(sx - x0);
      const float v00 = src[y0 * in_size + x0];
      const float v01 = src[y0 * in_size + x1];
      const float v10 = src[y1 * in_size + x0];
      const float v11 = src[y1 * in_size + x1];
      const float top = v00 + (v01 - v00) * fx;
      const float bot = v10 + (v11 - v10) * fx;
      dst[y * out_size + x] = top + (bot - top) * fy;
    }
  }
}

inline void crop_origin(CropPos pos, i64 frame_w, i64 frame_h, i64 side,
                        i64* x0, i64* y0) {
  switch (pos) {
    case CropPos::TopLeft: *x0 = 0; *y0 = 0; break;
    case CropPos::TopRight: *x0 = frame_w - side; *y0 = 0; break;
    case CropPos::BottomLeft: *x0 = 0; *y0 = frame_h - side; break;
    case CropPos::BottomRight: *x0 = frame_w - side; *y0 = frame_h - side; break;
    case CropPos::Center:
      *x0 = (frame_w - side) / 2;
      *y0 = (frame_h - side) / 2;
      break;
  }
}

}  // namespace detail

inline Tensor hflip(const Tensor& clip) {
  const Shape5 s = clip.shape();
  Tensor out(s);
  for (i64 n = 0; n < s.n; ++n)
    for (i64 c = 0; c < s.c; ++c)
      for (i64 t = 0; t < s.t; ++t)
        for (i64 h = 0; h < s.h; ++h) {
          const float* src = clip.data() + clip.index(n, c, t, h, 0);
          float* dst = out.data() + out.index(n, c, t, h, 0);
          for (i64 w = 0; w < s.w; ++w) dst[w] = src[s.w - 1 - w];
        }
  return out;
}

inline Tensor mean_subtract(const Tensor& clip,
                            const std::array<float, 3>& mean) {
  const Shape5 s = clip.shape();
  check(s.c == 3, "mean_subtract: expected 3 channels, got " + s.str());
  Tensor out(s);
  const i64 plane = s.t * s.h * s.w;
  for (i64 n = 0; n < s.n; ++n) {
    for (i64 c = 0; c < 3; ++c) {
      const float* src = clip.data() + (n * 3 + c) * plane;
      float* dst = out.data() + (n * 3 + c) * plane;
      const float m = mean[static_cast<size_t>(c)];
      for (i64 i = 0; i < plane; ++i) dst[i] = src[i] - m;
    }
  }
  return out;
}

// Deterministically rebuilds the clip described by the provenance: cyclic
// frame gather, square crop of round(scale * short_side) at the anchor,
// bilinear resize to out_size, optional horizontal flip, mean subtraction.
// Pixels enter as [0,255] floats.
inline Clip apply_augment(const VideoRecord& rec, const AugmentConfig& cfg,
                          const AugmentParams& prm) {
  const std::vector<i64> indices =
      clip_indices(rec.n_frames, cfg.clip_len, prm.t_start);
  std::map<i64, Image> cache;
  auto frame = [&](i64 idx) -> const Image& {
    auto it = cache.find(idx);
    if (it == cache.end()) {
      Image img;
      const std::string path = frame_path(rec.frame_dir, idx);
      try {
        img = read_ppm(path);
      } catch (const Error& e) {
        fail("clip " + rec.id + ": unreadable frame " + path + " (" +
             e.what() + ")");
      }
      it = cache.emplace(idx, std::move(img)).first;
    }
    return it->second;
  };

  const Image& first = frame(indices[0]);
  const i64 fw = first.width, fh = first.height;
  const i64 short_side = fw < fh ? fw : fh;
  i64 side = static_cast<i64>(std::lround(double(prm.scale) * short_side));
  if (side < 1) side = 1;
  if (side > short_side) side = short_side;
  i64 x0 = 0, y0 = 0;
  detail::crop_origin(prm.position, fw, fh, side, &x0, &y0);

  const i64 S = cfg.out_size;
  Tensor clip(Shape5{1, 3, cfg.clip_len, S, S});
  std::vector<float> crop(static_cast<size_t>(side * side));
  for (i64 j = 0; j < cfg.clip_len; ++j) {
    const Image& img = frame(indices[static_cast<size_t>(j)]);
    check(img.width == fw && img.height == fh,
          "clip " + rec.id + ": frame size changes mid-video");
    for (int ch = 0; ch < 3; ++ch) {
      for (i64 y = 0; y < side; ++y)
        for (i64 x = 0; x < side; ++x)
          crop[static_cast<size_t>(y * side + x)] =
              static_cast<float>(img.at(y0 + y, x0 + x, ch));
      detail::resize_plane(crop.data(), side,
                           clip.data() + clip.index(0, ch, j, 0, 0), S);
    }
  }

  Clip out;
  out.tensor = prm.flipped ? hflip(clip) : clip;
  out.tensor = mean_subtract(out.tensor, cfg.channel_mean);
  out.source_id = rec.id;
  out.provenance = prm;
  return out;
}

inline Clip sample_training_clip(const VideoRecord& rec,
                                 const AugmentConfig& cfg, Rng& rng) {
  const AugmentParams prm = draw_augment_params(rec.n_frames, cfg, rng);
  return apply_augment(rec, cfg, prm);
}

// Non-overlapping windows at 0, L, 2L, ...; a final partial window loops
// cyclically from its start. Center crop at scale 1, never flipped.
inline std::vector<Clip> inference_clips(const VideoRecord& rec,
                                         const AugmentConfig& cfg) {
  check(rec.n_frames >= 1, "inference_clips: video " + rec.id + " has no frames");
  std::vector<Clip> clips;
  for (i64 start = 0; start < rec.n_frames; start += cfg.clip_len) {
    AugmentParams prm;
    prm.t_start = start;
    prm.position = CropPos::Center;
    prm.scale = 1.0f;
    prm.flipped = false;
    clips.push_back(apply_augment(rec, cfg, prm));
  }
  return clips;
}

// Per-channel pixel mean over a deterministic subsample of the frames. A
// budget of pixel reads bounds the scan; frames are visited with a uniform
// stride over the global frame enumeration.
inline std::array<float, 3> compute_channel_mean(
    const std::vector<VideoRecord>& records, i64 pixel_budget = 1000000) {
  i64 total_frames = 0;
  for (const auto& r : records) total_frames += r.n_frames;
  check(total_frames > 0, "compute_channel_mean: no frames in dataset");

  // first readable frame sets the per-frame pixel count estimate
  Image probe;
  bool have_probe = false;
  for (const auto& r : records) {
    try {
      probe = read_ppm(frame_path(r.frame_dir, 0));
      have_probe = true;
      break;
    } catch (const Error&) {
      continue;
    }
  }
  check(have_probe, "compute_channel_mean: no readable frames");
  const i64 px_per_frame = probe.width * probe.height;
  i64 frames_allowed = pixel_budget / (px_per_frame > 0 ? px_per_frame : 1);
  if (frames_allowed < 1) frames_allowed = 1;
  i64 stride = (total_frames + frames_allowed - 1) / frames_allowed;
  if (stride < 1) stride = 1;

  double sum[3] = {0.0, 0.0, 0.0};
  i64 count = 0;
  i64 global = 0;
  for (const auto& r : records) {
    for (i64 f = 0; f < r.n_frames; ++f, ++global) {
      if (global % stride != 0) continue;
      const Image img = read_ppm(frame_path(r.frame_dir, f));
      const i64 px = img.width * img.height;
      for (i64 i = 0; i < px; ++i) {
        sum[0] += img.rgb[static_cast<size_t>(i * 3 + 0)];
        sum[1] += img.rgb[static_cast<size_t>(i * 3 + 1)];
        sum[2] += img.rgb[static_cast<size_t>(i * 3 + 2)];
      }
      count += px;
    }
  }
  check(count > 0, "compute_channel_mean: scanned zero pixels");
  return {static_cast<float>(sum[0] / count), static_cast<float>(sum[1] / count),
          static_cast<float>(sum[2] / count)};
}

}  // namespace st3d

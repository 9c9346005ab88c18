#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "st3d/net.hpp"
#include "st3d/optim.hpp"

namespace st3d {

// Checkpoint file layout (little-endian):
//   "ST3D" | u32 version=1 | u64 header_len | JSON header | raw f32 payload
// The JSON header carries the network spec, training metadata and a tensor
// directory (name, shape, byte offset into the payload); tensor bytes follow
// in directory order, so save -> load -> save is byte-identical.
struct Checkpoint {
  NetworkSpec spec;
  i64 epoch = 0;
  float lr = 0.1f;
  float best_loss = std::numeric_limits<float>::infinity();
  i64 epochs_since_improve = 0;
  std::uint64_t rng_state = 0;
  i64 out_size = 112;
  std::array<float, 3> channel_mean{0.0f, 0.0f, 0.0f};
  bool has_optimizer = false;
  std::vector<std::pair<std::string, Tensor>> tensors;   // params + buffers
  std::vector<std::pair<std::string, std::vector<float>>> velocities;
};

namespace detail {

inline nlohmann::json spec_to_json(const NetworkSpec& s) {
  nlohmann::json j;
  j["variant"] = variant_name(s.variant);
  j["stage_widths"] = s.stage_widths;
  j["stage_blocks"] = s.stage_blocks;
  j["cardinality"] = s.cardinality;
  j["growth_rate"] = s.growth_rate;
  j["widening_factor"] = s.widening_factor;
  j["num_classes"] = s.num_classes;
  j["clip_len"] = s.clip_len;
  j["shortcut_type"] = s.shortcut_type == ShortcutType::A ? "A" : "B";
  j["conv1_width"] = s.conv1_width;
  j["name"] = s.name;
  return j;
}

inline BlockVariant variant_from_name(const std::string& v) {
  if (v == "basic") return BlockVariant::Basic;
  if (v == "bottleneck") return BlockVariant::Bottleneck;
  if (v == "preact") return BlockVariant::PreActBottleneck;
  if (v == "wide") return BlockVariant::WideBottleneck;
  if (v == "resnext") return BlockVariant::ResNeXtBottleneck;
  if (v == "densenet") return BlockVariant::DenseBlockUnit;
  fail("unknown block variant '" + v + "'");
}

inline NetworkSpec spec_from_json(const nlohmann::json& j) {
  NetworkSpec s;
  s.variant = variant_from_name(j.at("variant").get<std::string>());
  s.stage_widths = j.at("stage_widths").get<std::array<i64, 4>>();
  s.stage_blocks = j.at("stage_blocks").get<std::array<i64, 4>>();
  s.cardinality = j.at("cardinality").get<i64>();
  s.growth_rate = j.at("growth_rate").get<i64>();
  s.widening_factor = j.at("widening_factor").get<i64>();
  s.num_classes = j.at("num_classes").get<i64>();
  s.clip_len = j.at("clip_len").get<i64>();
  s.shortcut_type = j.at("shortcut_type").get<std::string>() == "A"
                        ? ShortcutType::A
                        : ShortcutType::B;
  s.conv1_width = j.at("conv1_width").get<i64>();
  s.name = j.at("name").get<std::string>();
  return s;
}

template <typename T>
void write_raw(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  nlohmann::json header;
  header["spec"] = detail::spec_to_json(ckpt.spec);
  nlohmann::json meta;
  meta["epoch"] = ckpt.epoch;
  meta["lr"] = ckpt.lr;
  if (std::isfinite(ckpt.best_loss)) {
    meta["best_loss"] = ckpt.best_loss;
  } else {
    meta["best_loss"] = nullptr;
  }
  meta["epochs_since_improve"] = ckpt.epochs_since_improve;
  meta["rng_state"] = ckpt.rng_state;
  meta["out_size"] = ckpt.out_size;
  meta["channel_mean"] = ckpt.channel_mean;
  meta["has_optimizer"] = ckpt.has_optimizer;
  header["meta"] = meta;

  i64 offset = 0;
  nlohmann::json dir = nlohmann::json::array();
  for (const auto& [name, t] : ckpt.tensors) {
    const Shape5 s = t.shape();
    nlohmann::json e;
    e["name"] = name;
    e["shape"] = std::array<i64, 5>{s.n, s.c, s.t, s.h, s.w};
    e["offset"] = offset;
    offset += t.numel() * static_cast<i64>(sizeof(float));
    dir.push_back(e);
  }
  header["tensors"] = dir;
  nlohmann::json vdir = nlohmann::json::array();
  for (const auto& [name, v] : ckpt.velocities) {
    nlohmann::json e;
    e["name"] = name;
    e["numel"] = static_cast<i64>(v.size());
    e["offset"] = offset;
    offset += static_cast<i64>(v.size() * sizeof(float));
    vdir.push_back(e);
  }
  header["velocities"] = vdir;

  const std::string header_str = header.dump();
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    check(f.good(), "save_checkpoint: cannot open " + tmp);
    f.write("ST3D", 4);
    detail::write_raw<std::uint32_t>(f, 1u);
    detail::write_raw<std::uint64_t>(f, header_str.size());
    f.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& [name, t] : ckpt.tensors) {
      f.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.numel() * sizeof(float)));
    }
    for (const auto& [name, v] : ckpt.velocities) {
      f.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(float)));
    }
    check(f.good(), "save_checkpoint: short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), "load_checkpoint: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  check(f.gcount() == 4 && std::memcmp(magic, "ST3D", 4) == 0,
        "load_checkpoint: " + path + " is not a checkpoint (bad magic)");
  const auto version = detail::read_raw<std::uint32_t>(f);
  check(version == 1, "load_checkpoint: unsupported version " +
                          std::to_string(version));
  const auto header_len = detail::read_raw<std::uint64_t>(f);
  check(f.good(), "load_checkpoint: truncated header length");
  std::string header_str(header_len, '\0');
  f.read(header_str.data(), static_cast<std::streamsize>(header_len));
  check(f.gcount() == static_cast<std::streamsize>(header_len),
        "load_checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_str);
  } catch (const nlohmann::json::exception& e) {
    fail("load_checkpoint: corrupt header JSON (" + std::string(e.what()) + ")");
  }

  Checkpoint ckpt;
  try {
    ckpt.spec = detail::spec_from_json(header.at("spec"));
    const auto& meta = header.at("meta");
    ckpt.epoch = meta.at("epoch").get<i64>();
    ckpt.lr = meta.at("lr").get<float>();
    if (meta.at("best_loss").is_null()) {
      ckpt.best_loss = std::numeric_limits<float>::infinity();
    } else {
      ckpt.best_loss = meta.at("best_loss").get<float>();
    }
    ckpt.epochs_since_improve = meta.at("epochs_since_improve").get<i64>();
    ckpt.rng_state = meta.at("rng_state").get<std::uint64_t>();
    ckpt.out_size = meta.at("out_size").get<i64>();
    ckpt.channel_mean = meta.at("channel_mean").get<std::array<float, 3>>();
    ckpt.has_optimizer = meta.at("has_optimizer").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    fail("load_checkpoint: missing header field (" + std::string(e.what()) +
         ")");
  }

  for (const auto& e : header.at("tensors")) {
    const std::string name = e.at("name").get<std::string>();
    const auto sh = e.at("shape").get<std::array<i64, 5>>();
    const Shape5 shape{sh[0], sh[1], sh[2], sh[3], sh[4]};
    Tensor t(shape);
    f.read(reinterpret_cast<char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(float)));
    check(f.gcount() == static_cast<std::streamsize>(t.numel() * sizeof(float)),
          "load_checkpoint: truncated tensor '" + name + "'");
    ckpt.tensors.emplace_back(name, std::move(t));
  }
  for (const auto& e : header.at("velocities")) {
    const std::string name = e.at("name").get<std::string>();
    const i64 numel = e.at("numel").get<i64>();
    std::vector<float> v(static_cast<size_t>(numel));
    f.read(reinterpret_cast<char*>(v.data()),
           static_cast<std::streamsize>(numel * sizeof(float)));
    check(f.gcount() == static_cast<std::streamsize>(numel * sizeof(float)),
          "load_checkpoint: truncated velocity '" + name + "'");
    ckpt.velocities.emplace_back(name, std::move(v));
  }
  return ckpt;
}

// Snapshot of a network (+ optional optimizer) into a checkpoint; tensors are
// deep-copied in registry order: parameters first, then running-stat buffers.
inline Checkpoint make_checkpoint(const Network& net,
                                  const OptimizerState* opt = nullptr) {
  Checkpoint ckpt;
  ckpt.spec = net.spec;
  for (const auto& [name, t] : net.params) ckpt.tensors.emplace_back(name, t.clone());
  for (const auto& [name, t] : net.buffers) ckpt.tensors.emplace_back(name, t.clone());
  if (opt) {
    ckpt.has_optimizer = true;
    ckpt.lr = opt->lr;
    for (const auto& [name, v] : opt->velocity) ckpt.velocities.emplace_back(name, v);
  }
  return ckpt;
}

// Copies checkpoint tensors into a freshly built network. The stored spec
// must match the target structurally; the name sets and shapes must agree
// exactly.
inline void apply_checkpoint(const Checkpoint& ckpt, Network& net,
                             OptimizerState* opt = nullptr) {
  check(ckpt.spec.same_structure(net.spec),
        "checkpoint: stored spec '" + ckpt.spec.name +
            "' does not match target network spec '" + net.spec.name + "'");
  std::vector<std::pair<std::string, Tensor>> targets = net.params;
  targets.insert(targets.end(), net.buffers.begin(), net.buffers.end());
  check(targets.size() == ckpt.tensors.size(),
        "checkpoint: tensor count " + std::to_string(ckpt.tensors.size()) +
            " != network tensor count " + std::to_string(targets.size()));
  for (size_t i = 0; i < targets.size(); ++i) {
    const auto& [want_name, dst] = targets[i];
    const auto& [got_name, src] = ckpt.tensors[i];
    check(want_name == got_name, "checkpoint: tensor name mismatch: '" +
                                     got_name + "' vs expected '" + want_name +
                                     "'");
    check(src.shape() == dst.shape(),
          "checkpoint: shape mismatch for '" + want_name + "': " +
              src.shape().str() + " vs " + dst.shape().str());
    std::copy(src.data(), src.data() + src.numel(), dst.data());
    if (i < net.params.size()) {  // buffers never track gradients
      dst.set_requires_grad(true);
      dst.zero_grad();
    }
  }
  if (opt && ckpt.has_optimizer) {
    opt->lr = ckpt.lr;
    opt->velocity.clear();
    for (const auto& [name, v] : ckpt.velocities) opt->velocity[name] = v;
  }
}

}  // namespace st3d

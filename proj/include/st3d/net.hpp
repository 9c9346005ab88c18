#pragma once

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "st3d/ops.hpp"
#include "st3d/rng.hpp"

namespace st3d {

enum class BlockVariant {
  Basic,
  Bottleneck,
  PreActBottleneck,
  WideBottleneck,
  ResNeXtBottleneck,
  DenseBlockUnit,
};

enum class ShortcutType { A, B };

inline const char* variant_name(BlockVariant v) {
  switch (v) {
    case BlockVariant::Basic: return "basic";
    case BlockVariant::Bottleneck: return "bottleneck";
    case BlockVariant::PreActBottleneck: return "preact";
    case BlockVariant::WideBottleneck: return "wide";
    case BlockVariant::ResNeXtBottleneck: return "resnext";
    case BlockVariant::DenseBlockUnit: return "densenet";
  }
  return "?";
}

// Output width of a block relative to its base width F.
inline i64 block_expansion(BlockVariant v) {
  switch (v) {
    case BlockVariant::Basic: return 1;
    case BlockVariant::Bottleneck: return 4;
    case BlockVariant::PreActBottleneck: return 4;
    case BlockVariant::WideBottleneck: return 2;
    case BlockVariant::ResNeXtBottleneck: return 2;
    case BlockVariant::DenseBlockUnit: return 1;  // not meaningful
  }
  return 1;
}

// Declarative description of one architecture: block family, per-stage base
// widths F and block counts N, plus the classifier width. For the dense
// family, stage_widths holds the input width of each stage's first block.
struct NetworkSpec {
  BlockVariant variant = BlockVariant::Basic;
  std::array<i64, 4> stage_widths{64, 128, 256, 512};
  std::array<i64, 4> stage_blocks{2, 2, 2, 2};
  i64 cardinality = 32;       // grouped-conv families
  i64 growth_rate = 32;       // dense family
  i64 widening_factor = 2;    // informational; widths arrive pre-widened
  i64 num_classes = 400;
  i64 clip_len = 16;
  ShortcutType shortcut_type = ShortcutType::B;
  i64 conv1_width = 64;
  std::string name;  // label such as "resnet-18"; not structural

  bool same_structure(const NetworkSpec& o) const {
    return variant == o.variant && stage_widths == o.stage_widths &&
           stage_blocks == o.stage_blocks && cardinality == o.cardinality &&
           growth_rate == o.growth_rate && num_classes == o.num_classes &&
           clip_len == o.clip_len && shortcut_type == o.shortcut_type &&
           conv1_width == o.conv1_width;
  }

  void validate() const {
    check(num_classes >= 1, "spec: num_classes must be >= 1");
    check(clip_len >= 1, "spec: clip_len must be >= 1");
    check(conv1_width >= 1, "spec: conv1_width must be >= 1");
    for (int s = 0; s < 4; ++s) {
      check(stage_widths[s] >= 1, "spec: stage_widths must be positive");
      check(stage_blocks[s] >= 1, "spec: stage_blocks must be positive");
    }
    if (variant == BlockVariant::ResNeXtBottleneck) {
      check(cardinality >= 1, "spec: cardinality must be >= 1");
      for (int s = 0; s < 4; ++s) {
        check(stage_widths[s] % cardinality == 0,
              "spec: cardinality " + std::to_string(cardinality) +
                  " does not divide stage width " +
                  std::to_string(stage_widths[s]));
      }
    }
    if (variant == BlockVariant::DenseBlockUnit) {
      check(growth_rate >= 1, "spec: growth_rate must be >= 1");
      // channel bookkeeping: width of each stage input follows from conv1,
      // the growth rate and halving transitions
      i64 ch = conv1_width;
      for (int s = 0; s < 4; ++s) {
        check(stage_widths[s] == ch,
              "spec: dense stage width " + std::to_string(stage_widths[s]) +
                  " at stage " + std::to_string(s + 2) +
                  " inconsistent, expected " + std::to_string(ch));
        ch += stage_blocks[s] * growth_rate;
        if (s < 3) {
          check(ch % 2 == 0, "spec: transition input width must be even");
          ch /= 2;
        }
      }
    }
  }
};

// Named rows: resnet-{18,34,50,101,152,200}, preact-200, wrn-50, resnext-101,
// densenet-{121,201}.
inline NetworkSpec named_spec(const std::string& variant, i64 depth,
                              i64 num_classes, i64 clip_len = 16) {
  NetworkSpec s;
  s.num_classes = num_classes;
  s.clip_len = clip_len;
  s.name = variant + "-" + std::to_string(depth);
  auto bad = [&]() {
    fail("unknown architecture: " + variant + "-" + std::to_string(depth));
  };
  if (variant == "resnet") {
    s.stage_widths = {64, 128, 256, 512};
    if (depth == 18 || depth == 34) {
      s.variant = BlockVariant::Basic;
      s.shortcut_type = ShortcutType::A;
      s.stage_blocks = depth == 18 ? std::array<i64, 4>{2, 2, 2, 2}
                                   : std::array<i64, 4>{3, 4, 6, 3};
    } else {
      s.variant = BlockVariant::Bottleneck;
      s.shortcut_type = ShortcutType::B;
      switch (depth) {
        case 50: s.stage_blocks = {3, 4, 6, 3}; break;
        case 101: s.stage_blocks = {3, 4, 23, 3}; break;
        case 152: s.stage_blocks = {3, 8, 36, 3}; break;
        case 200: s.stage_blocks = {3, 24, 36, 3}; break;
        default: bad();
      }
    }
  } else if (variant == "preact") {
    if (depth != 200) bad();
    s.variant = BlockVariant::PreActBottleneck;
    s.stage_widths = {64, 128, 256, 512};
    s.stage_blocks = {3, 24, 36, 3};
  } else if (variant == "wrn") {
    if (depth != 50) bad();
    s.variant = BlockVariant::WideBottleneck;
    s.stage_widths = {128, 256, 512, 1024};
    s.stage_blocks = {3, 4, 6, 3};
    s.widening_factor = 2;
  } else if (variant == "resnext") {
    if (depth != 101) bad();
    s.variant = BlockVariant::ResNeXtBottleneck;
    s.stage_widths = {128, 256, 512, 1024};
    s.stage_blocks = {3, 4, 23, 3};
    s.cardinality = 32;
  } else if (variant == "densenet") {
    s.variant = BlockVariant::DenseBlockUnit;
    s.growth_rate = 32;
    if (depth == 121) {
      s.stage_widths = {64, 128, 256, 512};
      s.stage_blocks = {6, 12, 24, 16};
    } else if (depth == 201) {
      s.stage_widths = {64, 128, 256, 896};
      s.stage_blocks = {6, 12, 48, 32};
    } else {
      bad();
    }
  } else {
    bad();
  }
  s.validate();
  return s;
}

// One block of a stage. Which layers are active depends on the variant; the
// shortcut joins by summation (concatenation for the dense unit, which has no
// shortcut transform).
struct Block {
  BlockVariant variant = BlockVariant::Basic;
  i64 in_ch = 0, mid_ch = 0, out_ch = 0;
  Dims3 stride{1, 1, 1};
  ShortcutType shortcut_type = ShortcutType::B;
  bool has_projection = false;
  bool has_shortcut_transform = false;
  i64 groups = 1;

  ConvParams conv1, conv2, conv3;
  BatchNormParams bn1, bn2, bn3;
  ConvParams proj;
  BatchNormParams projbn;

  Tensor shortcut(const Tensor& x, Tape* tape, bool training) const {
    if (!has_shortcut_transform) return x;
    if (shortcut_type == ShortcutType::A)
      return subsample_pad_channels(x, out_ch, stride, tape);
    return batch_norm(conv3d(x, proj, tape), projbn, training, tape);
  }

  Tensor forward(const Tensor& x, Tape* tape, bool training) const {
    switch (variant) {
      case BlockVariant::Basic: {
        Tensor y = relu(batch_norm(conv3d(x, conv1, tape), bn1, training, tape),
                        tape);
        y = batch_norm(conv3d(y, conv2, tape), bn2, training, tape);
        return relu(add(y, shortcut(x, tape, training), tape), tape);
      }
      case BlockVariant::Bottleneck:
      case BlockVariant::WideBottleneck:
      case BlockVariant::ResNeXtBottleneck: {
        Tensor y = relu(batch_norm(conv3d(x, conv1, tape), bn1, training, tape),
                        tape);
        y = relu(batch_norm(conv3d(y, conv2, tape), bn2, training, tape), tape);
        y = batch_norm(conv3d(y, conv3, tape), bn3, training, tape);
        return relu(add(y, shortcut(x, tape, training), tape), tape);
      }
      case BlockVariant::PreActBottleneck: {
        Tensor y = conv3d(relu(batch_norm(x, bn1, training, tape), tape), conv1,
                          tape);
        y = conv3d(relu(batch_norm(y, bn2, training, tape), tape), conv2, tape);
        y = conv3d(relu(batch_norm(y, bn3, training, tape), tape), conv3, tape);
        return add(y, shortcut(x, tape, training), tape);
      }
      case BlockVariant::DenseBlockUnit: {
        Tensor y = conv3d(relu(batch_norm(x, bn1, training, tape), tape), conv1,
                          tape);
        y = conv3d(relu(batch_norm(y, bn2, training, tape), tape), conv2, tape);
        return concat_channels(x, y, tape);
      }
    }
    fail("block: unreachable variant");
  }

  Shape5 out_shape(const Shape5& in) const {
    Shape5 s = conv3d_output_shape(in, conv1);
    s = conv3d_output_shape(s, conv2);
    if (variant == BlockVariant::Bottleneck ||
        variant == BlockVariant::WideBottleneck ||
        variant == BlockVariant::ResNeXtBottleneck ||
        variant == BlockVariant::PreActBottleneck) {
      s = conv3d_output_shape(s, conv3);
    }
    if (variant == BlockVariant::DenseBlockUnit) {
      s.c = in.c + conv2.out_channels;
    }
    return s;
  }
};

inline Block make_block(BlockVariant variant, i64 in_ch, i64 width, i64 stride,
                        ShortcutType shortcut_type, i64 cardinality = 32) {
  check(in_ch >= 1, "block: in_ch must be positive");
  check(width >= 1, "block: width must be positive");
  check(stride == 1 || stride == 2, "block: stride must be 1 or 2");
  Block b;
  b.variant = variant;
  b.in_ch = in_ch;
  b.mid_ch = width;
  b.stride = Dims3{stride, stride, stride};
  b.shortcut_type = shortcut_type;
  const Dims3 s1{1, 1, 1};
  const Dims3 k1{1, 1, 1}, k3{3, 3, 3};
  const Dims3 p0{0, 0, 0}, p1{1, 1, 1};

  switch (variant) {
    case BlockVariant::Basic:
      b.out_ch = width;
      b.conv1 = ConvParams::make(in_ch, width, k3, b.stride, p1);
      b.bn1 = BatchNormParams::make(width);
      b.conv2 = ConvParams::make(width, width, k3, s1, p1);
      b.bn2 = BatchNormParams::make(width);
      break;
    case BlockVariant::Bottleneck:
    case BlockVariant::WideBottleneck:
      b.out_ch = width * block_expansion(variant);
      b.conv1 = ConvParams::make(in_ch, width, k1, s1, p0);
      b.bn1 = BatchNormParams::make(width);
      b.conv2 = ConvParams::make(width, width, k3, b.stride, p1);
      b.bn2 = BatchNormParams::make(width);
      b.conv3 = ConvParams::make(width, b.out_ch, k1, s1, p0);
      b.bn3 = BatchNormParams::make(b.out_ch);
      break;
    case BlockVariant::ResNeXtBottleneck:
      check(width % cardinality == 0,
            "block: cardinality " + std::to_string(cardinality) +
                " does not divide width " + std::to_string(width));
      b.groups = cardinality;
      b.out_ch = width * 2;
      b.conv1 = ConvParams::make(in_ch, width, k1, s1, p0);
      b.bn1 = BatchNormParams::make(width);
      b.conv2 = ConvParams::make(width, width, k3, b.stride, p1, cardinality);
      b.bn2 = BatchNormParams::make(width);
      b.conv3 = ConvParams::make(width, b.out_ch, k1, s1, p0);
      b.bn3 = BatchNormParams::make(b.out_ch);
      break;
    case BlockVariant::PreActBottleneck:
      b.out_ch = width * 4;
      b.bn1 = BatchNormParams::make(in_ch);
      b.conv1 = ConvParams::make(in_ch, width, k1, s1, p0);
      b.bn2 = BatchNormParams::make(width);
      b.conv2 = ConvParams::make(width, width, k3, b.stride, p1);
      b.bn3 = BatchNormParams::make(width);
      b.conv3 = ConvParams::make(width, b.out_ch, k1, s1, p0);
      break;
    case BlockVariant::DenseBlockUnit: {
      check(stride == 1, "block: dense unit does not stride");
      const i64 k = width;  // growth rate
      b.out_ch = in_ch + k;
      b.bn1 = BatchNormParams::make(in_ch);
      b.conv1 = ConvParams::make(in_ch, 4 * k, k1, s1, p0);
      b.bn2 = BatchNormParams::make(4 * k);
      b.conv2 = ConvParams::make(4 * k, k, k3, s1, p1);
      return b;  // no shortcut transform for concatenation
    }
  }

  b.has_shortcut_transform = (stride != 1 || in_ch != b.out_ch);
  if (b.has_shortcut_transform) {
    if (shortcut_type == ShortcutType::A) {
      check(variant == BlockVariant::Basic,
            "block: shortcut A (zero padding) only applies to basic blocks; "
            "this variant needs a projection");
      check(b.out_ch >= in_ch, "block: shortcut A cannot reduce channels");
    } else {
      b.has_projection = true;
      b.proj = ConvParams::make(in_ch, b.out_ch, k1, b.stride, p0);
      b.projbn = BatchNormParams::make(b.out_ch);
    }
  }
  return b;
}

// Between dense stages: BN-ReLU, 3x3x3 conv halving channels, then 2x2x2
// average pooling with stride 2.
struct Transition {
  BatchNormParams bn;
  ConvParams conv;
};

struct Stage {
  std::string name;
  std::vector<Block> blocks;
  std::optional<Transition> transition;
  i64 out_channels = 0;
};

struct LinearLayer {
  Tensor weight;  // (classes, features, 1,1,1)
  Tensor bias;    // (classes, 1,1,1,1)
};

struct ShapeReport {
  std::vector<std::pair<std::string, Shape5>> rows;
};

struct ParamCount {
  i64 total = 0;
  std::vector<std::pair<std::string, i64>> per_stage;
};

// A built network: conv1 stem, max-pool, four stages (with transitions for
// the dense family), optional final BN-ReLU, global average pool and a
// classifier producing logits. Parameters are reachable both through the
// layer structs and the named registry; the handles share storage.
struct Network {
  NetworkSpec spec;
  ConvParams conv1;
  BatchNormParams bn1;
  std::array<Stage, 4> stages;
  bool has_final_bn = false;
  BatchNormParams final_bn;
  LinearLayer fc;
  i64 feature_width = 0;

  std::vector<std::pair<std::string, Tensor>> params;   // trainable
  std::vector<std::pair<std::string, Tensor>> buffers;  // running stats

  Tensor forward(const Tensor& x, Tape* tape, bool training) const {
    Tensor y = relu(batch_norm(conv3d(x, conv1, tape), bn1, training, tape),
                    tape);
    y = pool3d(y, PoolMode::Max, {3, 3, 3}, {2, 2, 2}, {1, 1, 1}, tape);
    for (const Stage& st : stages) {
      for (const Block& b : st.blocks) y = b.forward(y, tape, training);
      if (st.transition) {
        y = relu(batch_norm(y, st.transition->bn, training, tape), tape);
        y = conv3d(y, st.transition->conv, tape);
        y = pool3d(y, PoolMode::Avg, {2, 2, 2}, {2, 2, 2}, {0, 0, 0}, tape);
      }
    }
    if (has_final_bn)
      y = relu(batch_norm(y, final_bn, training, tape), tape);
    y = global_avg_pool(y, tape);
    return linear(y, fc.weight, fc.bias, tape);
  }

  // inference logits
  Tensor operator()(const Tensor& x) const {
    return forward(x, nullptr, false);
  }

  void zero_grads() const {
    for (const auto& [name, t] : params) t.zero_grad();
  }

  const Tensor* find_param(const std::string& name) const {
    for (const auto& [n, t] : params) {
      if (n == name) return &t;
    }
    return nullptr;
  }

  // He fan-in normal initialization for conv/linear weights; BN affine reset
  // to identity, running stats to (0, 1), biases to zero. Marks every
  // parameter trainable. Draw order is the registry order.
  void init_params(std::uint64_t seed) {
    Rng rng(seed);
    for (auto& [name, t] : params) {
      if (ends_with(name, ".weight")) {
        const Shape5 ws = t.shape();
        const i64 fan_in = ws.c * ws.t * ws.h * ws.w;
        const float scale = std::sqrt(2.0f / static_cast<float>(fan_in));
        float* d = t.data();
        for (i64 i = 0; i < t.numel(); ++i) d[i] = rng.normal() * scale;
      } else if (ends_with(name, ".gamma")) {
        std::fill(t.data(), t.data() + t.numel(), 1.0f);
      } else {  // .beta, .bias
        std::fill(t.data(), t.data() + t.numel(), 0.0f);
      }
      t.set_requires_grad(true);
      t.zero_grad();
    }
    for (auto& [name, t] : buffers) {
      const float v = ends_with(name, ".running_var") ? 1.0f : 0.0f;
      std::fill(t.data(), t.data() + t.numel(), v);
    }
  }

  void rebuild_registry() {
    params.clear();
    buffers.clear();
    reg_conv("conv1", conv1);
    reg_bn("conv1.bn", bn1);
    for (size_t s = 0; s < stages.size(); ++s) {
      const Stage& st = stages[s];
      for (size_t i = 0; i < st.blocks.size(); ++i) {
        reg_block(st.name + ".block" + std::to_string(i + 1), st.blocks[i]);
      }
      if (st.transition) {
        const std::string tn = "trans" + std::to_string(s + 2);
        reg_bn(tn + ".bn", st.transition->bn);
        reg_conv(tn + ".conv", st.transition->conv);
      }
    }
    if (has_final_bn) reg_bn("final_bn", final_bn);
    params.emplace_back("fc.weight", fc.weight);
    params.emplace_back("fc.bias", fc.bias);
  }

  static bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() &&
           s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  }

 private:
  void reg_conv(const std::string& prefix, const ConvParams& c) {
    params.emplace_back(prefix + ".weight", c.weight);
  }
  void reg_bn(const std::string& prefix, const BatchNormParams& b) {
    params.emplace_back(prefix + ".gamma", b.gamma);
    params.emplace_back(prefix + ".beta", b.beta);
    buffers.emplace_back(prefix + ".running_mean", b.running_mean);
    buffers.emplace_back(prefix + ".running_var", b.running_var);
  }
  void reg_block(const std::string& prefix, const Block& b) {
    switch (b.variant) {
      case BlockVariant::Basic:
        reg_conv(prefix + ".conv1", b.conv1);
        reg_bn(prefix + ".bn1", b.bn1);
        reg_conv(prefix + ".conv2", b.conv2);
        reg_bn(prefix + ".bn2", b.bn2);
        break;
      case BlockVariant::Bottleneck:
      case BlockVariant::WideBottleneck:
      case BlockVariant::ResNeXtBottleneck:
        reg_conv(prefix + ".conv1", b.conv1);
        reg_bn(prefix + ".bn1", b.bn1);
        reg_conv(prefix + ".conv2", b.conv2);
        reg_bn(prefix + ".bn2", b.bn2);
        reg_conv(prefix + ".conv3", b.conv3);
        reg_bn(prefix + ".bn3", b.bn3);
        break;
      case BlockVariant::PreActBottleneck:
        reg_bn(prefix + ".bn1", b.bn1);
        reg_conv(prefix + ".conv1", b.conv1);
        reg_bn(prefix + ".bn2", b.bn2);
        reg_conv(prefix + ".conv2", b.conv2);
        reg_bn(prefix + ".bn3", b.bn3);
        reg_conv(prefix + ".conv3", b.conv3);
        break;
      case BlockVariant::DenseBlockUnit:
        reg_bn(prefix + ".bn1", b.bn1);
        reg_conv(prefix + ".conv1", b.conv1);
        reg_bn(prefix + ".bn2", b.bn2);
        reg_conv(prefix + ".conv2", b.conv2);
        break;
    }
    if (b.has_projection) {
      reg_conv(prefix + ".proj", b.proj);
      reg_bn(prefix + ".projbn", b.projbn);
    }
  }
};

inline Network make_network(const NetworkSpec& spec) {
  spec.validate();
  Network net;
  net.spec = spec;
  net.conv1 = ConvParams::make(3, spec.conv1_width, {7, 7, 7}, {1, 2, 2},
                               {3, 3, 3});
  net.bn1 = BatchNormParams::make(spec.conv1_width);
  const char* stage_names[4] = {"conv2_x", "conv3_x", "conv4_x", "conv5_x"};
  i64 ch = spec.conv1_width;

  if (spec.variant == BlockVariant::DenseBlockUnit) {
    for (int s = 0; s < 4; ++s) {
      Stage st;
      st.name = stage_names[s];
      for (i64 i = 0; i < spec.stage_blocks[static_cast<size_t>(s)]; ++i) {
        st.blocks.push_back(make_block(spec.variant, ch, spec.growth_rate, 1,
                                       spec.shortcut_type));
        ch += spec.growth_rate;
      }
      if (s < 3) {
        Transition tr;
        tr.bn = BatchNormParams::make(ch);
        tr.conv = ConvParams::make(ch, ch / 2, {3, 3, 3}, {1, 1, 1}, {1, 1, 1});
        st.transition = std::move(tr);
        ch /= 2;
      }
      st.out_channels = ch;
      net.stages[static_cast<size_t>(s)] = std::move(st);
    }
    net.has_final_bn = true;
    net.final_bn = BatchNormParams::make(ch);
  } else {
    for (int s = 0; s < 4; ++s) {
      Stage st;
      st.name = stage_names[s];
      const i64 width = spec.stage_widths[static_cast<size_t>(s)];
      for (i64 i = 0; i < spec.stage_blocks[static_cast<size_t>(s)]; ++i) {
        const i64 stride = (s > 0 && i == 0) ? 2 : 1;
        st.blocks.push_back(make_block(spec.variant, ch, width, stride,
                                       spec.shortcut_type, spec.cardinality));
        ch = st.blocks.back().out_ch;
      }
      st.out_channels = ch;
      net.stages[static_cast<size_t>(s)] = std::move(st);
    }
    if (spec.variant == BlockVariant::PreActBottleneck) {
      net.has_final_bn = true;
      net.final_bn = BatchNormParams::make(ch);
    }
  }

  net.feature_width = ch;
  net.fc.weight = Tensor(Shape5{spec.num_classes, ch, 1, 1, 1});
  net.fc.bias = Tensor(Shape5{spec.num_classes, 1, 1, 1, 1});
  net.rebuild_registry();
  return net;
}

inline ParamCount count_params(const Network& net) {
  ParamCount pc;
  auto stage_key = [](const std::string& name) {
    const auto dot = name.find('.');
    return dot == std::string::npos ? name : name.substr(0, dot);
  };
  for (const auto& [name, t] : net.params) {
    pc.total += t.numel();
    const std::string key = stage_key(name);
    if (!pc.per_stage.empty() && pc.per_stage.back().first == key) {
      pc.per_stage.back().second += t.numel();
    } else {
      pc.per_stage.emplace_back(key, t.numel());
    }
  }
  return pc;
}

// Per-stage output shapes from a symbolic forward pass; no tensor math runs.
inline ShapeReport summarize_shapes(const Network& net, const Shape5& input) {
  check(input.c == net.conv1.in_channels,
        "summarize_shapes: input must have " +
            std::to_string(net.conv1.in_channels) + " channels, got " +
            input.str());
  ShapeReport rep;
  Shape5 s = conv3d_output_shape(input, net.conv1);
  rep.rows.emplace_back("conv1", s);
  ConvParams pool_proxy;
  pool_proxy.in_channels = pool_proxy.out_channels = s.c;
  pool_proxy.kernel = {3, 3, 3};
  pool_proxy.stride = {2, 2, 2};
  pool_proxy.padding = {1, 1, 1};
  s = conv3d_output_shape(s, pool_proxy);
  rep.rows.emplace_back("pool1", s);
  for (size_t i = 0; i < net.stages.size(); ++i) {
    const Stage& st = net.stages[i];
    for (const Block& b : st.blocks) s = b.out_shape(s);
    rep.rows.emplace_back(st.name, s);
    if (st.transition) {
      s = conv3d_output_shape(s, st.transition->conv);
      ConvParams avg_proxy;
      avg_proxy.in_channels = avg_proxy.out_channels = s.c;
      avg_proxy.kernel = {2, 2, 2};
      avg_proxy.stride = {2, 2, 2};
      avg_proxy.padding = {0, 0, 0};
      s = conv3d_output_shape(s, avg_proxy);
      rep.rows.emplace_back("trans" + std::to_string(i + 2), s);
    }
  }
  rep.rows.emplace_back("global_pool", Shape5{input.n, s.c, 1, 1, 1});
  return rep;
}

// Swaps in a freshly initialized classifier head; every other parameter is
// left untouched.
inline void replace_classifier(Network& net, i64 new_classes,
                               std::uint64_t seed) {
  check(new_classes >= 1, "replace_classifier: class count must be >= 1");
  net.fc.weight = Tensor(Shape5{new_classes, net.feature_width, 1, 1, 1});
  net.fc.bias = Tensor(Shape5{new_classes, 1, 1, 1, 1});
  Rng rng(seed);
  const float scale =
      std::sqrt(2.0f / static_cast<float>(net.feature_width));
  float* d = net.fc.weight.data();
  for (i64 i = 0; i < net.fc.weight.numel(); ++i) d[i] = rng.normal() * scale;
  net.fc.weight.set_requires_grad(true);
  net.fc.bias.set_requires_grad(true);
  net.spec.num_classes = new_classes;
  net.rebuild_registry();
}

// Marks exactly the parameters under the given name prefixes trainable.
inline void freeze_stages(Network& net,
                          const std::vector<std::string>& trainable_prefixes) {
  check(!trainable_prefixes.empty(),
        "freeze_stages: empty prefix set leaves nothing trainable");
  auto matches = [](const std::string& name, const std::string& prefix) {
    return name == prefix ||
           (name.size() > prefix.size() && name.compare(0, prefix.size(), prefix) == 0 &&
            name[prefix.size()] == '.');
  };
  for (const std::string& prefix : trainable_prefixes) {
    i64 hits = 0;
    for (const auto& [name, t] : net.params) {
      if (matches(name, prefix)) ++hits;
    }
    check(hits > 0, "freeze_stages: prefix '" + prefix +
                        "' matches no parameter");
  }
  for (const auto& [name, t] : net.params) {
    bool trainable = false;
    for (const std::string& prefix : trainable_prefixes) {
      if (matches(name, prefix)) {
        trainable = true;
        break;
      }
    }
    t.set_requires_grad(trainable);
  }
}

}  // namespace st3d

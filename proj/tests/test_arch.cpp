#include <gtest/gtest.h>

#include <cstring>
#include <map>

#include "st3d/net.hpp"
#include "support/oracles.hpp"
#include "support/testutil.hpp"

using namespace st3d;

namespace {

struct NamedRow {
  const char* variant;
  i64 depth;
  BlockVariant block;
  std::array<i64, 4> F;
  std::array<i64, 4> N;
  ShortcutType sc;
};

// the eleven named configurations
const NamedRow kRows[] = {
    {"resnet", 18, BlockVariant::Basic, {64, 128, 256, 512}, {2, 2, 2, 2},
     ShortcutType::A},
    {"resnet", 34, BlockVariant::Basic, {64, 128, 256, 512}, {3, 4, 6, 3},
     ShortcutType::A},
    {"resnet", 50, BlockVariant::Bottleneck, {64, 128, 256, 512}, {3, 4, 6, 3},
     ShortcutType::B},
    {"resnet", 101, BlockVariant::Bottleneck, {64, 128, 256, 512}, {3, 4, 23, 3},
     ShortcutType::B},
    {"resnet", 152, BlockVariant::Bottleneck, {64, 128, 256, 512}, {3, 8, 36, 3},
     ShortcutType::B},
    {"resnet", 200, BlockVariant::Bottleneck, {64, 128, 256, 512},
     {3, 24, 36, 3}, ShortcutType::B},
    {"preact", 200, BlockVariant::PreActBottleneck, {64, 128, 256, 512},
     {3, 24, 36, 3}, ShortcutType::B},
    {"wrn", 50, BlockVariant::WideBottleneck, {128, 256, 512, 1024},
     {3, 4, 6, 3}, ShortcutType::B},
    {"resnext", 101, BlockVariant::ResNeXtBottleneck, {128, 256, 512, 1024},
     {3, 4, 23, 3}, ShortcutType::B},
    {"densenet", 121, BlockVariant::DenseBlockUnit, {64, 128, 256, 512},
     {6, 12, 24, 16}, ShortcutType::B},
    {"densenet", 201, BlockVariant::DenseBlockUnit, {64, 128, 256, 896},
     {6, 12, 48, 32}, ShortcutType::B},
};

TEST(NamedConfigs, TableConformance) {
  for (const NamedRow& row : kRows) {
    const NetworkSpec spec = named_spec(row.variant, row.depth, 400);
    EXPECT_EQ(spec.variant, row.block) << spec.name;
    EXPECT_EQ(spec.stage_widths, row.F) << spec.name;
    EXPECT_EQ(spec.stage_blocks, row.N) << spec.name;
    if (row.block == BlockVariant::Basic)
      EXPECT_EQ(spec.shortcut_type, ShortcutType::A) << spec.name;

    // the generated network must realize the row, not just echo the spec
    const Network net = make_network(spec);
    for (int s = 0; s < 4; ++s) {
      const Stage& st = net.stages[static_cast<size_t>(s)];
      ASSERT_EQ(static_cast<i64>(st.blocks.size()), row.N[static_cast<size_t>(s)])
          << spec.name << " " << st.name;
      if (spec.variant == BlockVariant::DenseBlockUnit) {
        EXPECT_EQ(st.blocks.front().in_ch, row.F[static_cast<size_t>(s)])
            << spec.name << " " << st.name;
      } else {
        for (const Block& b : st.blocks)
          EXPECT_EQ(b.mid_ch, row.F[static_cast<size_t>(s)])
              << spec.name << " " << st.name;
      }
    }
  }
}

TEST(NamedConfigs, UnknownDepthRejected) {
  EXPECT_THROW(named_spec("resnet", 77, 400), Error);
  EXPECT_THROW(named_spec("wrn", 101, 400), Error);
  EXPECT_THROW(named_spec("vgg", 16, 400), Error);
}

TEST(MakeNetwork, ResNet18Row) {
  const Network net = make_network(named_spec("resnet", 18, 400));
  EXPECT_EQ(net.spec.stage_blocks, (std::array<i64, 4>{2, 2, 2, 2}));
  EXPECT_EQ(net.spec.variant, BlockVariant::Basic);
  EXPECT_EQ(net.spec.shortcut_type, ShortcutType::A);
  EXPECT_EQ(net.feature_width, 512);
  EXPECT_EQ(net.conv1.kernel, (Dims3{7, 7, 7}));
  EXPECT_EQ(net.conv1.stride, (Dims3{1, 2, 2}));
  EXPECT_EQ(net.conv1.padding, (Dims3{3, 3, 3}));
  EXPECT_EQ(net.conv1.out_channels, 64);
}

TEST(MakeNetwork, ResNeXt101Row) {
  const Network net = make_network(named_spec("resnext", 101, 400));
  EXPECT_EQ(net.spec.stage_blocks, (std::array<i64, 4>{3, 4, 23, 3}));
  EXPECT_EQ(net.spec.stage_widths, (std::array<i64, 4>{128, 256, 512, 1024}));
  EXPECT_EQ(net.feature_width, 2048);
  for (const Stage& st : net.stages)
    for (const Block& b : st.blocks) EXPECT_EQ(b.conv2.groups, 32);
}

TEST(MakeNetwork, DenseNet121Row) {
  const Network net = make_network(named_spec("densenet", 121, 400));
  EXPECT_EQ(net.stages[3].blocks.front().in_ch, 512);
  EXPECT_EQ(net.feature_width, 512 + 16 * 32);
  EXPECT_TRUE(net.has_final_bn);
}

TEST(MakeNetwork, DownsamplingPlacement) {
  for (const char* variant : {"resnet", "preact", "wrn", "resnext"}) {
    const i64 depth = std::string(variant) == "resnet"   ? 18
                      : std::string(variant) == "preact" ? 200
                      : std::string(variant) == "wrn"    ? 50
                                                         : 101;
    const Network net = make_network(named_spec(variant, depth, 10));
    i64 strided = 0;
    for (size_t s = 0; s < 4; ++s) {
      const Stage& st = net.stages[s];
      for (size_t i = 0; i < st.blocks.size(); ++i) {
        if (st.blocks[i].stride.t == 2) {
          ++strided;
          EXPECT_GE(s, size_t{1}) << variant;
          EXPECT_EQ(i, size_t{0}) << variant;
        }
      }
      EXPECT_FALSE(st.transition.has_value());
    }
    EXPECT_EQ(strided, 3) << variant;
  }
  const Network dn = make_network(named_spec("densenet", 121, 10));
  i64 transitions = 0;
  for (size_t s = 0; s < 4; ++s) {
    if (dn.stages[s].transition) ++transitions;
    for (const Block& b : dn.stages[s].blocks)
      EXPECT_EQ(b.stride, (Dims3{1, 1, 1}));
  }
  EXPECT_EQ(transitions, 3);
  EXPECT_FALSE(dn.stages[3].transition.has_value());
}

TEST(MakeBlock, BasicIdentityShortcut) {
  const Block b = make_block(BlockVariant::Basic, 64, 64, 1, ShortcutType::A);
  EXPECT_FALSE(b.has_shortcut_transform);
  EXPECT_FALSE(b.has_projection);
  EXPECT_EQ(b.out_ch, 64);
}

TEST(MakeBlock, BottleneckProjection) {
  const Block b =
      make_block(BlockVariant::Bottleneck, 256, 128, 2, ShortcutType::B);
  EXPECT_TRUE(b.has_projection);
  EXPECT_EQ(b.out_ch, 512);
  EXPECT_EQ(b.proj.kernel, (Dims3{1, 1, 1}));
  EXPECT_EQ(b.proj.stride, (Dims3{2, 2, 2}));
  EXPECT_EQ(b.proj.out_channels, 512);
  EXPECT_EQ(b.projbn.channels(), 512);
  // projection cost: conv + bn affine
  EXPECT_EQ(b.proj.param_count() + b.projbn.param_count(), 256 * 512 + 2 * 512);
}

TEST(MakeBlock, DenseUnitGrowsChannels) {
  const Block b =
      make_block(BlockVariant::DenseBlockUnit, 64, 32, 1, ShortcutType::B);
  EXPECT_EQ(b.out_ch, 96);
  EXPECT_EQ(b.conv1.out_channels, 128);  // 4k bottleneck
  EXPECT_EQ(b.conv2.out_channels, 32);
}

TEST(MakeBlock, ShortcutAOnlyForBasic) {
  EXPECT_THROW(make_block(BlockVariant::Bottleneck, 64, 32, 2, ShortcutType::A),
               Error);
  EXPECT_NO_THROW(make_block(BlockVariant::Basic, 64, 128, 2, ShortcutType::A));
}

TEST(CountParams, PointwiseConvExample) {
  ConvParams p = ConvParams::make(2, 3, {1, 1, 1});
  EXPECT_EQ(p.param_count(), 6);
}

TEST(CountParams, ResNet18MatchesHandEnumeration) {
  const Network net = make_network(named_spec("resnet", 18, 400));
  const ParamCount pc = count_params(net);
  // layer-by-layer sum: stem 65,984; stages 442,880 + 1,549,312 + 6,195,200 +
  // 24,776,704; classifier 205,200
  EXPECT_EQ(pc.total, 33235280LL);
  EXPECT_EQ(pc.total, oracle::expected_params(net.spec));
  std::map<std::string, i64> by_stage(pc.per_stage.begin(), pc.per_stage.end());
  EXPECT_EQ(by_stage["conv1"], 65984);
  EXPECT_EQ(by_stage["conv2_x"], 442880);
  EXPECT_EQ(by_stage["conv5_x"], 24776704);
  EXPECT_EQ(by_stage["fc"], 205200);
}

TEST(CountParams, OracleAgreesForAllNamedConfigs) {
  for (const NamedRow& row : kRows) {
    const NetworkSpec spec = named_spec(row.variant, row.depth, 400);
    const Network net = make_network(spec);
    EXPECT_EQ(count_params(net).total, oracle::expected_params(spec))
        << spec.name;
  }
}

TEST(CountParams, KnownOrderings) {
  auto total = [](const char* v, i64 d) {
    return count_params(make_network(named_spec(v, d, 400))).total;
  };
  const i64 r18 = total("resnet", 18), r34 = total("resnet", 34);
  const i64 r50 = total("resnet", 50), r101 = total("resnet", 101);
  const i64 r152 = total("resnet", 152), r200 = total("resnet", 200);
  EXPECT_LT(r18, r34);
  EXPECT_LT(r50, r101);
  EXPECT_LT(r101, r152);
  EXPECT_LT(r152, r200);
  EXPECT_GT(total("wrn", 50), r152);
}

TEST(Shapes, ResNet18ReferenceChain) {
  const Network net = make_network(named_spec("resnet", 18, 400));
  const ShapeReport rep = summarize_shapes(net, {1, 3, 16, 112, 112});
  const std::vector<std::pair<std::string, Shape5>> want = {
      {"conv1", {1, 64, 16, 56, 56}},  {"pool1", {1, 64, 8, 28, 28}},
      {"conv2_x", {1, 64, 8, 28, 28}}, {"conv3_x", {1, 128, 4, 14, 14}},
      {"conv4_x", {1, 256, 2, 7, 7}},  {"conv5_x", {1, 512, 1, 4, 4}},
      {"global_pool", {1, 512, 1, 1, 1}},
  };
  ASSERT_EQ(rep.rows.size(), want.size());
  for (size_t i = 0; i < want.size(); ++i) {
    EXPECT_EQ(rep.rows[i].first, want[i].first);
    EXPECT_EQ(rep.rows[i].second, want[i].second) << want[i].first;
  }
}

TEST(Shapes, ResNeXt101LongClip) {
  const Network net = make_network(named_spec("resnext", 101, 400, 64));
  const ShapeReport rep = summarize_shapes(net, {1, 3, 64, 112, 112});
  bool found = false;
  for (const auto& [name, shape] : rep.rows) {
    if (name == "conv5_x") {
      EXPECT_EQ(shape, (Shape5{1, 2048, 4, 4, 4}));
      found = true;
    }
  }
  EXPECT_TRUE(found);
  EXPECT_EQ(rep.rows.back().first, "global_pool");
  EXPECT_EQ(rep.rows.back().second, (Shape5{1, 2048, 1, 1, 1}));
}

TEST(Shapes, OracleAgreesForAllNamedConfigs) {
  for (const NamedRow& row : kRows) {
    for (i64 L : {16, 64}) {
      const NetworkSpec spec = named_spec(row.variant, row.depth, 400, L);
      const Network net = make_network(spec);
      const ShapeReport rep = summarize_shapes(net, {1, 3, L, 112, 112});
      const auto want = oracle::expected_shapes(spec, L, 112);
      ASSERT_EQ(rep.rows.size(), want.size()) << spec.name;
      for (size_t i = 0; i < want.size(); ++i) {
        EXPECT_EQ(rep.rows[i].first, want[i].name) << spec.name;
        const Shape5& got = rep.rows[i].second;
        EXPECT_EQ(got.c, want[i].channels) << spec.name << " " << want[i].name;
        EXPECT_EQ(got.t, want[i].dims.t) << spec.name << " " << want[i].name;
        EXPECT_EQ(got.h, want[i].dims.h) << spec.name << " " << want[i].name;
        EXPECT_EQ(got.w, want[i].dims.w) << spec.name << " " << want[i].name;
      }
    }
  }
}

TEST(Shapes, SymbolicMatchesRealForwardOnMicroNets) {
  std::vector<NetworkSpec> specs;
  specs.push_back(testutil::micro_resnet18(5));
  {
    NetworkSpec s = named_spec("resnext", 101, 5);
    s.stage_blocks = {1, 1, 1, 1};
    s.stage_widths = {8, 16, 32, 64};
    s.conv1_width = 8;
    s.cardinality = 4;
    s.name = "resnext-micro";
    specs.push_back(s);
  }
  {
    NetworkSpec s;
    s.variant = BlockVariant::DenseBlockUnit;
    s.conv1_width = 8;
    s.growth_rate = 4;
    s.stage_blocks = {2, 2, 2, 2};
    s.stage_widths = {8, 8, 8, 8};
    s.num_classes = 5;
    s.name = "dense-micro";
    specs.push_back(s);
  }
  {
    NetworkSpec s = named_spec("preact", 200, 5);
    s.stage_blocks = {1, 1, 1, 1};
    s.stage_widths = {4, 8, 16, 32};
    s.conv1_width = 8;
    s.name = "preact-micro";
    specs.push_back(s);
  }
  for (NetworkSpec& spec : specs) {
    Network net = make_network(spec);
    net.init_params(7);
    // three halving transitions need more spatial room than three strides
    const Shape5 input = spec.variant == BlockVariant::DenseBlockUnit
                             ? Shape5{2, 3, 16, 56, 56}
                             : Shape5{2, 3, 8, 28, 28};
    const ShapeReport rep = summarize_shapes(net, input);
    Tensor logits = net.forward(Tensor(input), nullptr, false);
    EXPECT_EQ(logits.shape(), (Shape5{2, spec.num_classes, 1, 1, 1}))
        << spec.name;
    EXPECT_EQ(rep.rows.back().second.c, net.feature_width) << spec.name;
  }
}

TEST(Shapes, InputMustHaveThreeChannels) {
  const Network net = make_network(testutil::micro_resnet18());
  EXPECT_THROW(summarize_shapes(net, {1, 4, 16, 56, 56}), Error);
}

TEST(ReplaceClassifier, SwapsOnlyTheHead) {
  Network net = make_network(testutil::micro_resnet18(400));
  net.init_params(3);
  std::vector<float> conv1_before(net.conv1.weight.data(),
                                  net.conv1.weight.data() +
                                      net.conv1.weight.numel());
  const i64 before = count_params(net).total;
  replace_classifier(net, 101, 9);
  EXPECT_EQ(net.fc.weight.shape(), (Shape5{101, 64, 1, 1, 1}));
  EXPECT_EQ(net.fc.bias.numel(), 101);
  EXPECT_EQ(net.spec.num_classes, 101);
  // everything but the head is untouched, bit for bit
  EXPECT_EQ(std::memcmp(conv1_before.data(), net.conv1.weight.data(),
                        conv1_before.size() * sizeof(float)),
            0);
  const i64 after = count_params(net).total;
  EXPECT_EQ(before - after, (64 + 1) * 400 - (64 + 1) * 101);
  EXPECT_THROW(replace_classifier(net, 0, 1), Error);
}

TEST(FreezeStages, PrefixesControlTrainability) {
  Network net = make_network(testutil::micro_resnet18(10));
  net.init_params(3);
  freeze_stages(net, {"conv5_x", "fc"});
  i64 trainable = 0, frozen = 0;
  for (const auto& [name, t] : net.params) {
    const bool expect_trainable =
        name.rfind("conv5_x.", 0) == 0 || name.rfind("fc.", 0) == 0;
    EXPECT_EQ(t.requires_grad(), expect_trainable) << name;
    (expect_trainable ? trainable : frozen) += 1;
  }
  EXPECT_GT(trainable, 0);
  EXPECT_GT(frozen, 0);
  EXPECT_THROW(freeze_stages(net, {}), Error);
  EXPECT_THROW(freeze_stages(net, {"conv9_x"}), Error);
}

TEST(Forward, DeterministicLogitsInInference) {
  Network net = make_network(testutil::micro_resnet18(4));
  net.init_params(21);
  Rng rng(4);
  Tensor x = testutil::rand_tensor({1, 3, 8, 28, 28}, rng, -1.0f, 1.0f);
  Tensor a = net.forward(x, nullptr, false);
  Tensor b = net.forward(x, nullptr, false);
  ASSERT_EQ(a.numel(), b.numel());
  for (i64 i = 0; i < a.numel(); ++i) ASSERT_EQ(a.data()[i], b.data()[i]);
}

TEST(DenseBookkeeping, InvalidWidthsRejected) {
  NetworkSpec s;
  s.variant = BlockVariant::DenseBlockUnit;
  s.conv1_width = 8;
  s.growth_rate = 4;
  s.stage_blocks = {2, 2, 2, 2};
  s.stage_widths = {8, 8, 9, 8};  // stage 3 width inconsistent
  s.num_classes = 5;
  EXPECT_THROW(s.validate(), Error);
}

}  // namespace

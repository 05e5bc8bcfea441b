#include <gtest/gtest.h>

#include <numeric>
#include <set>

#include "chandiv/backbone.hpp"
#include "support/oracles.hpp"

using namespace chandiv;

namespace {

BackboneSpec small_spec(AttentionKind attention) {
    BackboneSpec spec;
    spec.stage_channels = {8, 16};
    spec.attention = attention;
    spec.input_shape = {3, 8, 8};
    spec.num_classes = 5;
    return spec;
}

Tensor<float> random_batch(std::size_t n, const Shape& image, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Shape shape{n};
    shape.insert(shape.end(), image.begin(), image.end());
    return Tensor<float>(oracle::random_array(shape, rng, -1.0, 1.0).template cast<float>());
}

std::size_t find_param(const Network& net, const std::string& name) {
    const auto& params = net.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].name == name) return i;
    }
    return params.size();
}

}  // namespace

TEST(Backbone, ChandivAddsBlockAndPostConvParameters) {
    auto base = build(small_spec(AttentionKind::none), 3);
    auto with = build(small_spec(AttentionKind::chandiv), 3);
    std::size_t c = 16;
    std::size_t post_conv = 9 * c * c;
    std::size_t post_bn = 2 * c;
    EXPECT_EQ(with.trainable_count() - base.trainable_count(), (c + 2) + post_conv + post_bn);
}

TEST(Backbone, SameSeedGivesIdenticalParameters) {
    for (auto kind : {AttentionKind::none, AttentionKind::chandiv, AttentionKind::se}) {
        auto a = build(small_spec(kind), 42);
        auto b = build(small_spec(kind), 42);
        ASSERT_EQ(a.parameters().size(), b.parameters().size());
        for (std::size_t i = 0; i < a.parameters().size(); ++i) {
            EXPECT_EQ(a.parameters()[i].name, b.parameters()[i].name);
            EXPECT_EQ(a.parameters()[i].tensor.value(), b.parameters()[i].tensor.value());
        }
    }
}

TEST(Backbone, DifferentSeedsDiffer) {
    auto a = build(small_spec(AttentionKind::none), 1);
    auto b = build(small_spec(AttentionKind::none), 2);
    EXPECT_NE(a.parameters()[0].tensor.value(), b.parameters()[0].tensor.value());
}

TEST(Backbone, SingleStageResidualChandivOutputShape) {
    BackboneSpec spec;
    spec.stage_channels = {8};
    spec.blocks_per_stage = 1;
    spec.block_kind = BlockKind::residual;
    spec.attention = AttentionKind::chandiv;
    spec.input_shape = {3, 32, 32};
    auto net = build(spec, 0);
    auto logits = net.forward(random_batch(1, spec.input_shape, 9));
    EXPECT_EQ(logits.shape(), (Shape{1, spec.num_classes}));
}

TEST(Backbone, ForwardRejectsWrongBatchShape) {
    auto net = build(small_spec(AttentionKind::none), 0);
    EXPECT_THROW(net.forward(random_batch(2, {3, 9, 8}, 1)), DimensionError);
    EXPECT_THROW(net.forward(Tensor<float>(Array<float>({3, 8, 8}))), DimensionError);
}

TEST(Backbone, ReportTotalsEqualRowSums) {
    for (auto kind : {AttentionKind::none, AttentionKind::chandiv, AttentionKind::se, AttentionKind::gap_only,
                      AttentionKind::attn_only, AttentionKind::positive_corr}) {
        auto net = build(small_spec(kind), 5);
        auto report = param_count(net);
        std::size_t params = 0;
        std::uint64_t macs = 0;
        for (const auto& row : report.rows) {
            params += row.params;
            macs += row.macs;
        }
        EXPECT_EQ(report.total_params, params) << to_string(kind);
        EXPECT_EQ(report.total_macs, macs) << to_string(kind);
        EXPECT_EQ(report.total_params, net.trainable_count()) << to_string(kind);
    }
}

TEST(Backbone, BlockRowAtSixtyFourChannelsHasSixtySixParameters) {
    BackboneSpec spec;
    spec.stage_channels = {64};
    spec.attention = AttentionKind::chandiv;
    spec.input_shape = {3, 8, 8};
    auto report = param_count(build(spec, 0));
    bool found_block = false, found_fc = false;
    for (const auto& row : report.rows) {
        if (row.name == "attention") {
            EXPECT_EQ(row.params, 66u);
            found_block = true;
        }
        if (row.name == "classifier") {
            EXPECT_EQ(row.params, 650u);
            found_fc = true;
        }
    }
    EXPECT_TRUE(found_block);
    EXPECT_TRUE(found_fc);
}

TEST(Backbone, RegistryNamesAreUniqueAndCoverEveryTensorOnce) {
    auto spec = small_spec(AttentionKind::chandiv);
    spec.blocks_per_stage = 2;
    spec.attention_placement = AttentionPlacement::per_residual_block;
    auto net = build(spec, 0);
    std::set<std::string> names;
    std::set<const void*> nodes;
    for (const auto& p : net.parameters()) {
        EXPECT_TRUE(names.insert(p.name).second) << p.name;
        EXPECT_TRUE(nodes.insert(p.tensor.node().get()).second) << p.name;
    }
    std::size_t blocks = 0;
    for (const auto& name : net.layer_names()) blocks += name.ends_with(".attention");
    EXPECT_EQ(blocks, 4u);
}

TEST(Backbone, TailPlacementHasOneBlockThenPostConv) {
    auto net = build(small_spec(AttentionKind::chandiv), 0);
    auto names = net.layer_names();
    ASSERT_GE(names.size(), 3u);
    EXPECT_EQ(names[names.size() - 3], "attention");
    EXPECT_EQ(names[names.size() - 2], "post");
    EXPECT_EQ(names.back(), "classifier");
    EXPECT_EQ(std::count(names.begin(), names.end(), "attention"), 1);
}

TEST(Backbone, ZeroBlockParametersReproduceBaselineFeatures) {
    auto base = build(small_spec(AttentionKind::none), 17);
    auto with = build(small_spec(AttentionKind::chandiv), 17);
    for (const auto& name : {"attention.transform_kernel", "attention.transform_bias"}) {
        auto idx = find_param(with, name);
        ASSERT_LT(idx, with.parameters().size());
        Tensor<float> t = with.parameters()[idx].tensor;
        t.value().fill(0.0f);
    }
    for (std::uint64_t trial = 0; trial < 5; ++trial) {
        auto batch = random_batch(2, {3, 8, 8}, trial);
        auto expected = base.features(batch);
        auto block_out = with.forward_to("attention", batch);
        EXPECT_EQ(block_out.value(), expected.value());
    }
}

TEST(Backbone, ForwardIsDeterministic) {
    auto net = build(small_spec(AttentionKind::chandiv), 4);
    auto batch = random_batch(3, {3, 8, 8}, 8);
    EXPECT_EQ(net.forward(batch).value(), net.forward(batch).value());
}

TEST(Backbone, GradientsReachEveryParameter) {
    for (auto kind : {AttentionKind::chandiv, AttentionKind::se}) {
        auto net = build(small_spec(kind), 6);
        auto logits = net.forward(random_batch(4, {3, 8, 8}, 2), true);
        std::vector<int> labels{0, 1, 2, 3};
        auto loss = cross_entropy(logits, labels);
        backward(loss);
        for (const auto& p : net.parameters()) {
            EXPECT_TRUE(p.tensor.has_grad()) << p.name;
        }
    }
}

TEST(Backbone, PlainConvBuildsAndRuns) {
    auto spec = small_spec(AttentionKind::se);
    spec.block_kind = BlockKind::plain_conv;
    auto net = build(spec, 0);
    EXPECT_EQ(net.forward(random_batch(2, spec.input_shape, 0)).shape(), (Shape{2, spec.num_classes}));
}

TEST(Backbone, InvalidSpecsAreConfigErrors) {
    BackboneSpec spec;
    spec.stage_channels.clear();
    EXPECT_THROW(build(spec, 0), ConfigError);
    spec = BackboneSpec{};
    spec.blocks_per_stage = 0;
    EXPECT_THROW(build(spec, 0), ConfigError);
    spec = BackboneSpec{};
    spec.attention = AttentionKind::se;
    spec.se_reduction = 5;
    EXPECT_THROW(build(spec, 0), ConfigError);
    EXPECT_THROW(parse_attention_kind("squeeze"), ConfigError);
    EXPECT_THROW(parse_block_kind("dense"), ConfigError);
}

TEST(Backbone, BuffersAreNamedBatchNormStatistics) {
    auto net = build(small_spec(AttentionKind::none), 0);
    auto buffers = net.buffers();
    ASSERT_FALSE(buffers.empty());
    EXPECT_EQ(buffers[0].name, "stem.bn.running_mean");
    EXPECT_EQ(buffers[1].name, "stem.bn.running_var");
}

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "chandiv/cam.hpp"
#include "support/oracles.hpp"

using namespace chandiv;

namespace {

BackboneSpec cam_spec(std::vector<std::size_t> stages, AttentionKind attention = AttentionKind::none) {
    BackboneSpec spec;
    spec.stage_channels = std::move(stages);
    spec.attention = attention;
    spec.input_shape = {3, 12, 12};
    spec.num_classes = 4;
    return spec;
}

Array<float> random_image(std::uint64_t seed, std::size_t h = 12, std::size_t w = 12) {
    std::mt19937_64 rng(seed);
    return oracle::random_array({3, h, w}, rng, 0.0, 1.0).cast<float>();
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Cam, RawMapMatchesPerPositionDotProduct) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto net = build(cam_spec({8, 16}, AttentionKind::chandiv), seed);
        auto image = random_image(100 + seed);
        auto cam = compute_cam(net, image);

        auto feats = net.features(Tensor<float>(image.reshaped({1, 3, 12, 12})), false).value();
        const auto& w = net.classifier_weight().value();
        std::size_t channels = feats.dim(1), h = feats.dim(2), wd = feats.dim(3);
        ASSERT_EQ(cam.raw.shape(), (Shape{h, wd}));
        double worst = 0;
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < wd; ++x) {
                double dot = 0;
                for (std::size_t c = 0; c < channels; ++c) {
                    dot += static_cast<double>(w.at(cam.target_class, c)) * static_cast<double>(feats.at(0, c, y, x));
                }
                worst = std::max(worst, std::abs(dot - cam.raw.at(y, x)));
            }
        }
        EXPECT_LT(worst, 1e-10) << seed;
    }
}

TEST(Cam, PredictedClassMatchesNetworkArgmax) {
    auto net = build(cam_spec({8}), 3);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto image = random_image(seed);
        auto logits = net.forward(Tensor<float>(image.reshaped({1, 3, 12, 12}))).value();
        std::size_t best = 0;
        for (std::size_t k = 1; k < 4; ++k) {
            if (logits.at(0, k) > logits.at(0, best)) best = k;
        }
        EXPECT_EQ(compute_cam(net, image).predicted_class, best);
    }
}

TEST(Cam, ValuesAreNormalizedAtInputResolution) {
    auto net = build(cam_spec({8, 16}), 1);
    auto cam = compute_cam(net, random_image(2), 2);
    EXPECT_EQ(cam.target_class, 2u);
    ASSERT_EQ(cam.values.shape(), (Shape{12, 12}));
    auto [lo, hi] = std::minmax_element(cam.values.values().begin(), cam.values.values().end());
    EXPECT_DOUBLE_EQ(*lo, 0.0);
    EXPECT_DOUBLE_EQ(*hi, 1.0);
}

TEST(Cam, ConstantRawMapNormalizesToHalf) {
    Array<double> feats({3, 4, 4}, 2.0);
    Array<double> w({2, 3}, 0.7);
    auto norm = minmax_normalize(bilinear_resize(cam_raw(feats, w, 1), 8, 8));
    for (double v : norm.values()) EXPECT_EQ(v, 0.5);
}

TEST(Cam, SingleChannelUnitWeightIsNormalizedFeatureMap) {
    auto net = build(cam_spec({1}), 0);
    Tensor<float> fc = net.classifier_weight();
    fc.value().fill(1.0f);
    auto image = random_image(7);
    auto cam = compute_cam(net, image, 0);
    auto feats = net.features(Tensor<float>(image.reshaped({1, 3, 12, 12})), false).value();
    Array<double> expected = minmax_normalize(feats.reshaped({12, 12}).cast<double>());
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(cam.values[i], expected[i], 1e-12);
}

TEST(Cam, RawMapInvariantToInverseRescaling) {
    std::mt19937_64 rng(4);
    auto feats = oracle::random_array({5, 3, 3}, rng, 0.0, 2.0);
    auto w = oracle::random_array({3, 5}, rng);
    auto base = cam_raw(feats, w, 1);
    for (double s : {0.001, 0.3, 7.0, 1e4}) {
        Array<double> f2 = feats, w2 = w;
        for (auto& v : f2.values()) v *= s;
        for (auto& v : w2.values()) v /= s;
        auto scaled = cam_raw(f2, w2, 1);
        for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(scaled[i], base[i], 1e-12 * (1 + std::abs(base[i])));
    }
}

TEST(Cam, BilinearIdentityAndInterpolation) {
    Array<double> map({2, 2}, std::vector<double>{0.0, 1.0, 2.0, 3.0});
    EXPECT_EQ(bilinear_resize(map, 2, 2), map);
    auto up = bilinear_resize(map, 4, 4);
    // Half-pixel centres: corners clamp, interior blends 1/4 - 3/4.
    EXPECT_DOUBLE_EQ(up.at(0, 0), 0.0);
    EXPECT_DOUBLE_EQ(up.at(3, 3), 3.0);
    EXPECT_DOUBLE_EQ(up.at(0, 1), 0.25);
    EXPECT_DOUBLE_EQ(up.at(1, 0), 0.5);
}

TEST(Cam, IncompatibleHeadIsContractError) {
    Array<double> feats({3, 2, 2}, 1.0);
    EXPECT_THROW(cam_raw(feats, Array<double>({2, 4}), 0), ContractError);
    EXPECT_THROW(cam_raw(feats, Array<double>({2, 3}), 2), ContractError);
}

TEST(Heatmap, ValidP6AtInputResolution) {
    auto net = build(cam_spec({8, 16}), 2);
    auto image = random_image(5);
    auto cam = compute_cam(net, image);
    auto path = std::filesystem::temp_directory_path() / "chandiv_cam.ppm";
    emit_heatmap(cam, image, path);
    auto bytes = read_bytes(path);
    auto ppm = parse_ppm(bytes);
    EXPECT_EQ(ppm.width, 12u);
    EXPECT_EQ(ppm.height, 12u);
    EXPECT_EQ(ppm.max_value, 255u);
    EXPECT_EQ(ppm.pixels.size(), 3u * 12 * 12);
    std::filesystem::remove(path);
}

TEST(Heatmap, ByteDeterministic) {
    auto net_a = build(cam_spec({8}), 9);
    auto net_b = build(cam_spec({8}), 9);
    auto image = random_image(1);
    auto dir = std::filesystem::temp_directory_path();
    emit_heatmap(compute_cam(net_a, image), image, dir / "chandiv_a.ppm");
    emit_heatmap(compute_cam(net_b, image), image, dir / "chandiv_b.ppm");
    EXPECT_EQ(read_bytes(dir / "chandiv_a.ppm"), read_bytes(dir / "chandiv_b.ppm"));
    std::filesystem::remove(dir / "chandiv_a.ppm");
    std::filesystem::remove(dir / "chandiv_b.ppm");
}

TEST(Heatmap, OverlayColours) {
    CamMap cam;
    cam.values = Array<double>({1, 2}, std::vector<double>{0.0, 1.0});
    Array<float> white({3, 1, 2}, 1.0f);
    auto bytes = render_heatmap(cam, white);
    auto ppm = parse_ppm(bytes);
    // v=0: blue end, v=1: red end, half-strength grey underneath.
    EXPECT_EQ(std::vector<std::uint8_t>(ppm.pixels.begin(), ppm.pixels.begin() + 3),
              (std::vector<std::uint8_t>{128, 128, 255}));
    EXPECT_EQ(std::vector<std::uint8_t>(ppm.pixels.begin() + 3, ppm.pixels.end()),
              (std::vector<std::uint8_t>{255, 128, 128}));
}

TEST(Heatmap, ResolutionMismatchAndBadPathFail) {
    CamMap cam;
    cam.values = Array<double>({4, 4}, 0.5);
    EXPECT_THROW(render_heatmap(cam, Array<float>({3, 5, 4})), DimensionError);
    EXPECT_THROW(emit_heatmap(cam, Array<float>({3, 4, 4}), "/nonexistent/dir/x.ppm"), IoError);
}

TEST(Heatmap, ParserRejectsMalformedFiles) {
    std::string ok = "P6\n2 1\n255\n" + std::string(6, '\0');
    EXPECT_NO_THROW(parse_ppm({ok.begin(), ok.end()}));
    std::string p3 = "P3\n2 1\n255\n" + std::string(6, '\0');
    EXPECT_THROW(parse_ppm({p3.begin(), p3.end()}), FormatError);
    std::string short_body = "P6\n2 1\n255\n" + std::string(5, '\0');
    EXPECT_THROW(parse_ppm({short_body.begin(), short_body.end()}), FormatError);
}

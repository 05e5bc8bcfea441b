#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "chandiv/backbone.hpp"

namespace chandiv {

struct CamMap {
    Array<double> values;  // [H,W] in [0,1]
    Array<double> raw;     // [h,w] class-weighted feature sum before upsampling
    std::size_t predicted_class = 0;
    std::size_t target_class = 0;
};

// raw[p] = sum_c weights[cls,c] * features[c,p] for features [C,h,w], weights [K,C].
Array<double> cam_raw(const Array<double>& features, const Array<double>& weights, std::size_t cls);

// Half-pixel-centre bilinear resize of a [h,w] map.
Array<double> bilinear_resize(const Array<double>& map, std::size_t out_h, std::size_t out_w);

// Min-max scaling to [0,1]; a constant map becomes 0.5 everywhere.
Array<double> minmax_normalize(const Array<double>& map);

// image is the network input [C,H,W] (already normalized). Targets the argmax
// class unless cls is given.
CamMap compute_cam(Network& net, const Array<float>& image, std::optional<std::size_t> cls = std::nullopt);

// Binary P6 bytes: 0.5*gray(original) + 0.5*(v, 0, 1-v). original is [3,H,W]
// or [1,H,W] with values in [0,1].
std::vector<std::uint8_t> render_heatmap(const CamMap& cam, const Array<float>& original);
void emit_heatmap(const CamMap& cam, const Array<float>& original, const std::filesystem::path& path);

struct PpmImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t max_value = 0;
    std::vector<std::uint8_t> pixels;  // RGB, row-major
};

// Parses a binary P6 file; throws FormatError on malformed input.
PpmImage parse_ppm(const std::vector<std::uint8_t>& bytes);

}  // namespace chandiv

#include "chandiv/cam.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

namespace chandiv {

Array<double> cam_raw(const Array<double>& features, const Array<double>& weights, std::size_t cls) {
    if (features.rank() != 3) throw ContractError("cam: features must be [C,h,w], got " + shape_str(features.shape()));
    if (weights.rank() != 2 || weights.dim(1) != features.dim(0)) {
        throw ContractError("cam: classifier " + shape_str(weights.shape()) + " does not match features " +
                            shape_str(features.shape()));
    }
    if (cls >= weights.dim(0)) throw ContractError("cam: class " + std::to_string(cls) + " out of range");
    std::size_t channels = features.dim(0), plane = features.dim(1) * features.dim(2);
    Array<double> raw({features.dim(1), features.dim(2)});
    for (std::size_t c = 0; c < channels; ++c) {
        double w = weights[cls * channels + c];
        const double* f = features.data() + c * plane;
        for (std::size_t p = 0; p < plane; ++p) raw[p] += w * f[p];
    }
    return raw;
}

Array<double> bilinear_resize(const Array<double>& map, std::size_t out_h, std::size_t out_w) {
    if (map.rank() != 2) throw DimensionError("bilinear_resize expects [h,w], got " + shape_str(map.shape()));
    std::size_t in_h = map.dim(0), in_w = map.dim(1);
    auto source = [](std::size_t dst, std::size_t in, std::size_t out, std::size_t& lo, std::size_t& hi, double& t) {
        double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(in - 1));
        lo = static_cast<std::size_t>(std::floor(s));
        hi = std::min(lo + 1, in - 1);
        t = s - static_cast<double>(lo);
    };
    Array<double> out({out_h, out_w});
    for (std::size_t y = 0; y < out_h; ++y) {
        std::size_t y0, y1;
        double ty;
        source(y, in_h, out_h, y0, y1, ty);
        for (std::size_t x = 0; x < out_w; ++x) {
            std::size_t x0, x1;
            double tx;
            source(x, in_w, out_w, x0, x1, tx);
            double top = (1 - tx) * map[y0 * in_w + x0] + tx * map[y0 * in_w + x1];
            double bottom = (1 - tx) * map[y1 * in_w + x0] + tx * map[y1 * in_w + x1];
            out[y * out_w + x] = (1 - ty) * top + ty * bottom;
        }
    }
    return out;
}

Array<double> minmax_normalize(const Array<double>& map) {
    auto [lo, hi] = std::minmax_element(map.values().begin(), map.values().end());
    double min = *lo, max = *hi;
    Array<double> out(map.shape(), 0.5);
    if (max > min) {
        for (std::size_t i = 0; i < map.size(); ++i) out[i] = (map[i] - min) / (max - min);
    }
    return out;
}

CamMap compute_cam(Network& net, const Array<float>& image, std::optional<std::size_t> cls) {
    if (image.rank() != 3) throw DimensionError("cam: image must be [C,H,W], got " + shape_str(image.shape()));
    Shape batch_shape{1, image.dim(0), image.dim(1), image.dim(2)};
    Tensor<float> batch(image.reshaped(batch_shape));
    auto features = net.features(batch, false);
    const auto& fc_w = net.classifier_weight().value();
    const auto& fc_b = net.classifier_bias().value();
    if (features.rank() != 4 || features.dim(1) != fc_w.dim(1)) {
        throw ContractError("cam: network head is not global-average-pool + affine over the final features");
    }

    Array<double> feat = features.value().reshaped({features.dim(1), features.dim(2), features.dim(3)}).cast<double>();
    Array<double> weights = fc_w.cast<double>();
    std::size_t channels = feat.dim(0), plane = feat.dim(1) * feat.dim(2), classes = weights.dim(0);

    std::vector<double> logits(classes);
    for (std::size_t k = 0; k < classes; ++k) {
        double acc = 0;
        for (std::size_t c = 0; c < channels; ++c) {
            double mean = 0;
            for (std::size_t p = 0; p < plane; ++p) mean += feat[c * plane + p];
            acc += weights[k * channels + c] * mean / static_cast<double>(plane);
        }
        logits[k] = acc + fc_b[k];
    }
    CamMap cam;
    cam.predicted_class = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    cam.target_class = cls.value_or(cam.predicted_class);
    cam.raw = cam_raw(feat, weights, cam.target_class);
    cam.values = minmax_normalize(bilinear_resize(cam.raw, image.dim(1), image.dim(2)));
    return cam;
}

std::vector<std::uint8_t> render_heatmap(const CamMap& cam, const Array<float>& original) {
    if (original.rank() != 3 || (original.dim(0) != 3 && original.dim(0) != 1)) {
        throw DimensionError("heatmap: original must be [3,H,W] or [1,H,W], got " + shape_str(original.shape()));
    }
    std::size_t height = original.dim(1), width = original.dim(2), plane = height * width;
    if (cam.values.shape() != Shape{height, width}) {
        throw DimensionError("heatmap: cam " + shape_str(cam.values.shape()) + " does not match image " +
                             shape_str(original.shape()));
    }
    std::string header = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.reserve(header.size() + 3 * plane);
    auto to_byte = [](double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); };
    for (std::size_t p = 0; p < plane; ++p) {
        double gray = original.dim(0) == 3
                          ? (299.0 * original[p] + 587.0 * original[plane + p] + 114.0 * original[2 * plane + p]) / 1000.0
                          : static_cast<double>(original[p]);
        gray = std::clamp(gray, 0.0, 1.0);
        double v = cam.values[p];
        out.push_back(to_byte(0.5 * gray + 0.5 * v));
        out.push_back(to_byte(0.5 * gray));
        out.push_back(to_byte(0.5 * gray + 0.5 * (1.0 - v)));
    }
    return out;
}

void emit_heatmap(const CamMap& cam, const Array<float>& original, const std::filesystem::path& path) {
    auto bytes = render_heatmap(cam, original);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write heatmap " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing heatmap " + path.string());
}

PpmImage parse_ppm(const std::vector<std::uint8_t>& bytes) {
    std::size_t pos = 0;
    auto skip_space = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(bytes[pos])) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto number = [&] {
        skip_space();
        std::size_t start = pos, value = 0;
        while (pos < bytes.size() && std::isdigit(bytes[pos])) value = value * 10 + (bytes[pos++] - '0');
        if (pos == start) throw FormatError("ppm: expected a number at byte " + std::to_string(start));
        return value;
    };
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw FormatError("ppm: missing P6 magic");
    pos = 2;
    PpmImage img;
    img.width = number();
    img.height = number();
    img.max_value = number();
    if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError("ppm: header not terminated");
    ++pos;
    if (img.max_value == 0 || img.max_value > 255) throw FormatError("ppm: unsupported max value");
    std::size_t expected = 3 * img.width * img.height;
    if (bytes.size() - pos != expected) {
        throw FormatError("ppm: expected " + std::to_string(expected) + " pixel bytes, found " +
                          std::to_string(bytes.size() - pos));
    }
    img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
    return img;
}

}  // namespace chandiv

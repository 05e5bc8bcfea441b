#include "chandiv/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

namespace chandiv {

Array<float> Dataset::image(std::size_t i) const {
    Shape shape = image_shape();
    std::size_t len = shape_numel(shape);
    if (i >= size()) throw DimensionError("image index " + std::to_string(i) + " out of range");
    return Array<float>(shape, std::vector<float>(images.data() + i * len, images.data() + (i + 1) * len));
}

void Dataset::validate() const {
    if (images.rank() != 4) throw FormatError("dataset images must be [N,C,H,W], got " + shape_str(images.shape()));
    if (images.dim(0) != labels.size()) {
        throw FormatError("dataset has " + std::to_string(images.dim(0)) + " images but " +
                          std::to_string(labels.size()) + " labels");
    }
    for (int label : labels) {
        if (label < 0 || static_cast<std::size_t>(label) >= class_count) {
            throw FormatError("label " + std::to_string(label) + " outside [0," + std::to_string(class_count) + ")");
        }
    }
}

Dataset Dataset::head(std::size_t count) const {
    if (count == 0 || count >= size()) return *this;
    return slice(0, count);
}

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
    if (begin >= end || end > size()) {
        throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                             std::to_string(size()) + " samples");
    }
    Dataset out;
    out.class_count = class_count;
    out.mean = mean;
    out.std = std;
    Shape shape = images.shape();
    std::size_t len = shape_numel(image_shape());
    shape[0] = end - begin;
    out.images = Array<float>(shape, std::vector<float>(images.data() + begin * len, images.data() + end * len));
    out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                      labels.begin() + static_cast<std::ptrdiff_t>(end));
    return out;
}

Dataset load_cifar10_bytes(std::span<const std::uint8_t> bytes) {
    if (bytes.empty() || bytes.size() % kCifarRecordBytes != 0) {
        throw FormatError("CIFAR-10 batch of " + std::to_string(bytes.size()) + " bytes is not a multiple of " +
                          std::to_string(kCifarRecordBytes));
    }
    std::size_t records = bytes.size() / kCifarRecordBytes;
    constexpr std::size_t pixels = kCifarRecordBytes - 1;
    Dataset ds;
    ds.class_count = 10;
    ds.images = Array<float>({records, 3, kCifarSide, kCifarSide});
    ds.labels.resize(records);
    for (std::size_t r = 0; r < records; ++r) {
        const std::uint8_t* rec = bytes.data() + r * kCifarRecordBytes;
        if (rec[0] > 9) {
            throw FormatError("record " + std::to_string(r) + " has label byte " + std::to_string(rec[0]));
        }
        ds.labels[r] = rec[0];
        float* dst = ds.images.data() + r * pixels;
        for (std::size_t p = 0; p < pixels; ++p) dst[p] = static_cast<float>(rec[1 + p]) / 255.0f;
    }
    return ds;
}

Dataset load_cifar10_file(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot open CIFAR-10 batch " + file.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return load_cifar10_bytes(bytes);
    } catch (const FormatError& e) {
        throw FormatError(file.string() + ": " + e.what());
    }
}

Dataset load_cifar10(const std::filesystem::path& dir, CifarSplit split) {
    std::vector<std::filesystem::path> files;
    if (split == CifarSplit::train) {
        for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    } else {
        files.push_back(dir / "test_batch.bin");
    }
    std::vector<float> pixels;
    std::vector<int> labels;
    for (const auto& f : files) {
        if (!std::filesystem::exists(f)) {
            if (split == CifarSplit::train && !labels.empty()) continue;
            throw IoError("missing CIFAR-10 batch " + f.string());
        }
        Dataset part = load_cifar10_file(f);
        pixels.insert(pixels.end(), part.images.storage().begin(), part.images.storage().end());
        labels.insert(labels.end(), part.labels.begin(), part.labels.end());
    }
    Dataset ds;
    ds.class_count = 10;
    ds.images = Array<float>({labels.size(), 3, kCifarSide, kCifarSide}, std::move(pixels));
    ds.labels = std::move(labels);
    return ds;
}

std::vector<std::uint8_t> serialize_cifar10_record(const Dataset& ds, std::size_t i) {
    if (ds.image_shape() != Shape{3, kCifarSide, kCifarSide}) {
        throw FormatError("dataset images are " + shape_str(ds.image_shape()) + ", not CIFAR-10 3x32x32");
    }
    if (i >= ds.size()) throw DimensionError("record index out of range");
    std::vector<std::uint8_t> out(kCifarRecordBytes);
    out[0] = static_cast<std::uint8_t>(ds.labels[i]);
    const float* src = ds.images.data() + i * (kCifarRecordBytes - 1);
    for (std::size_t p = 0; p + 1 < kCifarRecordBytes; ++p) {
        float v = std::clamp(src[p], 0.0f, 1.0f);
        out[1 + p] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
    return out;
}

Dataset synth_dataset(std::uint64_t seed, std::size_t n, std::size_t classes, const Shape& image_shape) {
    if (classes < 2) throw ConfigError("synthetic dataset needs at least two classes");
    if (n < classes) throw ConfigError("synthetic dataset needs n >= classes");
    if (image_shape.size() != 3 || shape_numel(image_shape) == 0) {
        throw ConfigError("synthetic image shape must be C,H,W, got " + shape_str(image_shape));
    }
    std::size_t channels = image_shape[0], height = image_shape[1], width = image_shape[2];
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 0.08);

    struct Blob {
        double cy, cx;
        double sigma;
        std::vector<double> color;
    };
    std::vector<Blob> blobs(classes);
    double radius = 0.28 * static_cast<double>(std::min(height, width));
    for (std::size_t k = 0; k < classes; ++k) {
        double angle = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(classes) + 0.3 * unit(rng);
        blobs[k].cy = 0.5 * static_cast<double>(height - 1) + radius * std::sin(angle);
        blobs[k].cx = 0.5 * static_cast<double>(width - 1) + radius * std::cos(angle);
        double spread = static_cast<double>(k) / static_cast<double>(classes - 1);
        blobs[k].sigma = static_cast<double>(std::min(height, width)) * (0.08 + 0.17 * spread);
        for (std::size_t c = 0; c < channels; ++c) blobs[k].color.push_back(0.1 + 0.9 * unit(rng));
    }

    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % classes);
    std::shuffle(labels.begin(), labels.end(), rng);

    Dataset ds;
    ds.class_count = classes;
    ds.images = Array<float>({n, channels, height, width});
    for (std::size_t i = 0; i < n; ++i) {
        const Blob& blob = blobs[labels[i]];
        double cy = blob.cy + (unit(rng) - 0.5) * 2.0;
        double cx = blob.cx + (unit(rng) - 0.5) * 2.0;
        double amplitude = 0.8 + 0.2 * unit(rng);
        double sigma = blob.sigma;
        float* img = ds.images.data() + i * channels * height * width;
        for (std::size_t c = 0; c < channels; ++c) {
            for (std::size_t y = 0; y < height; ++y) {
                for (std::size_t x = 0; x < width; ++x) {
                    double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
                    double v = 0.15 + amplitude * blob.color[c] * std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma)) +
                               noise(rng);
                    img[(c * height + y) * width + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
                }
            }
        }
    }
    ds.labels = std::move(labels);
    return ds;
}

Array<float> pad_and_crop(const Array<float>& image, std::size_t pad, std::size_t top, std::size_t left) {
    if (image.rank() != 3) throw DimensionError("augment expects [C,H,W], got " + shape_str(image.shape()));
    if (top > 2 * pad || left > 2 * pad) throw DimensionError("crop offset outside padded image");
    std::size_t channels = image.dim(0), height = image.dim(1), width = image.dim(2);
    Array<float> out(image.shape());
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t y = 0; y < height; ++y) {
            auto sy = static_cast<std::ptrdiff_t>(y + top) - static_cast<std::ptrdiff_t>(pad);
            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(height)) continue;
            for (std::size_t x = 0; x < width; ++x) {
                auto sx = static_cast<std::ptrdiff_t>(x + left) - static_cast<std::ptrdiff_t>(pad);
                if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(width)) continue;
                out[(c * height + y) * width + x] = image[(c * height + sy) * width + sx];
            }
        }
    }
    return out;
}

Array<float> hflip(const Array<float>& image) {
    if (image.rank() != 3) throw DimensionError("hflip expects [C,H,W], got " + shape_str(image.shape()));
    std::size_t rows = image.dim(0) * image.dim(1), width = image.dim(2);
    Array<float> out(image.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t x = 0; x < width; ++x) out[r * width + x] = image[r * width + (width - 1 - x)];
    }
    return out;
}

Array<float> augment(const Array<float>& image, const AugmentConfig& cfg, std::mt19937_64& rng) {
    if (!cfg.enabled) return image;
    std::uniform_int_distribution<std::size_t> offset(0, 2 * cfg.pad);
    std::size_t top = offset(rng);
    std::size_t left = offset(rng);
    Array<float> out = pad_and_crop(image, cfg.pad, top, left);
    std::bernoulli_distribution flip(cfg.hflip_prob);
    if (flip(rng)) out = hflip(out);
    return out;
}

void compute_normalization(Dataset& ds) {
    std::size_t channels = ds.images.dim(1), plane = ds.images.dim(2) * ds.images.dim(3);
    ds.mean.assign(channels, 0.0f);
    ds.std.assign(channels, 1.0f);
    for (std::size_t c = 0; c < channels; ++c) {
        double acc = 0.0, sq = 0.0;
        for (std::size_t n = 0; n < ds.size(); ++n) {
            const float* p = ds.images.data() + (n * channels + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) acc += p[i];
        }
        double count = static_cast<double>(ds.size() * plane);
        double m = acc / count;
        for (std::size_t n = 0; n < ds.size(); ++n) {
            const float* p = ds.images.data() + (n * channels + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - m) * (p[i] - m);
        }
        ds.mean[c] = static_cast<float>(m);
        ds.std[c] = static_cast<float>(std::sqrt(sq / count));
    }
}

void normalize_image(Array<float>& image, std::span<const float> mean, std::span<const float> std) {
    std::size_t channels = image.dim(0), plane = image.size() / channels;
    if (mean.size() != channels || std.size() != channels) {
        throw ConfigError("normalization constants do not match " + std::to_string(channels) + " channels");
    }
    for (std::size_t c = 0; c < channels; ++c) {
        if (!(std[c] > 0.0f)) throw ConfigError("normalization std for channel " + std::to_string(c) + " is not positive");
        for (std::size_t i = 0; i < plane; ++i) image[c * plane + i] = (image[c * plane + i] - mean[c]) / std[c];
    }
}

Dataset normalize(const Dataset& ds, std::span<const float> mean, std::span<const float> std) {
    std::size_t channels = ds.images.dim(1), plane = ds.images.dim(2) * ds.images.dim(3);
    if (mean.size() != channels || std.size() != channels) {
        throw ConfigError("normalization constants do not match " + std::to_string(channels) + " channels");
    }
    for (std::size_t c = 0; c < channels; ++c) {
        if (!(std[c] > 0.0f)) throw ConfigError("normalization std for channel " + std::to_string(c) + " is not positive");
    }
    Dataset out = ds;
    for (std::size_t n = 0; n < ds.size(); ++n) {
        for (std::size_t c = 0; c < channels; ++c) {
            float* p = out.images.data() + (n * channels + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) p[i] = (p[i] - mean[c]) / std[c];
        }
    }
    out.mean.assign(mean.begin(), mean.end());
    out.std.assign(std.begin(), std.end());
    return out;
}

}  // namespace chandiv

#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

#include "chandiv/tensor.hpp"

namespace chandiv {

struct Dataset {
    Array<float> images;  // [N,C,H,W], raw values in [0,1]
    std::vector<int> labels;
    std::size_t class_count = 0;
    std::vector<float> mean;  // per channel
    std::vector<float> std;   // per channel

    std::size_t size() const { return labels.size(); }
    Shape image_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }
    // Copy of image i as [C,H,W].
    Array<float> image(std::size_t i) const;
    // Checks label range and extents; throws FormatError.
    void validate() const;
    // First `count` samples (all when count is 0 or exceeds size).
    Dataset head(std::size_t count) const;
    // Samples [begin, end).
    Dataset slice(std::size_t begin, std::size_t end) const;
};

struct AugmentConfig {
    std::size_t pad = 4;
    double hflip_prob = 0.5;
    bool enabled = true;
};

inline constexpr std::size_t kCifarRecordBytes = 3073;
inline constexpr std::size_t kCifarSide = 32;

// One CIFAR-10 binary batch file: records of 1 label byte + 3072 pixel bytes
// (R, G, B planes, each 32x32 row-major).
Dataset load_cifar10_file(const std::filesystem::path& file);
Dataset load_cifar10_bytes(std::span<const std::uint8_t> bytes);

enum class CifarSplit { train, test };
// data_batch_1..5.bin for train, test_batch.bin for test.
Dataset load_cifar10(const std::filesystem::path& dir, CifarSplit split = CifarSplit::train);

// Inverse of loading for record i: label byte followed by the quantized planes.
std::vector<std::uint8_t> serialize_cifar10_record(const Dataset& ds, std::size_t i);

// Class-conditional Gaussian blobs (per-class position, size and color) with
// pixel noise, values in [0,1].
Dataset synth_dataset(std::uint64_t seed, std::size_t n, std::size_t classes, const Shape& image_shape);

// Pad with zeros, crop a uniformly placed window of the original size, then
// mirror horizontally with probability hflip_prob.
Array<float> augment(const Array<float>& image, const AugmentConfig& cfg, std::mt19937_64& rng);
// Deterministic pieces of augment, exposed for testing.
Array<float> pad_and_crop(const Array<float>& image, std::size_t pad, std::size_t top, std::size_t left);
Array<float> hflip(const Array<float>& image);

// Per-channel mean / population std over all images.
void compute_normalization(Dataset& ds);
// Returns a copy with per-channel (x - mean) / std applied.
Dataset normalize(const Dataset& ds, std::span<const float> mean, std::span<const float> std);
void normalize_image(Array<float>& image, std::span<const float> mean, std::span<const float> std);

}  // namespace chandiv

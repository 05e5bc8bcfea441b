#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "chandiv/backbone.hpp"
#include "chandiv/train.hpp"

namespace chandiv {

enum class DataSource { synthetic, cifar10 };

struct DataConfig {
    DataSource source = DataSource::synthetic;
    std::filesystem::path dir;       // CIFAR-10 batch directory
    std::size_t train_limit = 0;     // first N training records, 0 = all
    std::size_t eval_limit = 0;      // first N test records, 0 = all
    std::size_t synth_train = 400;
    std::size_t synth_eval = 200;
    std::size_t synth_classes = 4;
    std::uint64_t synth_seed = 1234;
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    std::filesystem::path output_dir = "runs/default";
    BackboneSpec backbone;
    TrainConfig train;
    DataConfig data;
    std::vector<std::string> ablate_variants{"none", "gap_only", "attn_only", "positive_corr", "full", "se"};
    std::vector<std::uint64_t> ablate_seeds{0, 1, 2};

    // Applies one dotted key; throws ConfigError naming unknown keys or bad values.
    void set(std::string_view key, std::string_view value);
    // Checks cross-field constraints (backbone, train, data).
    void validate() const;
    // Every key with its resolved value, one "key = value" line each.
    std::string to_text() const;
};

// Flat "key = value" lines; '#' starts a comment.
RunConfig parse_config(std::string_view text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path);
void write_config(const RunConfig& cfg, const std::filesystem::path& path);

std::vector<std::string> config_keys();

struct DataSplits {
    Dataset train;
    Dataset eval;
};

// Raw [0,1] datasets for the configured source.
DataSplits load_data(const DataConfig& cfg, const Shape& input_shape, std::size_t num_classes);

}  // namespace chandiv

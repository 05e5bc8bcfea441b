#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "chandiv/config.hpp"

namespace chandiv {

struct CommandOptions {
    std::optional<std::filesystem::path> config;
    std::optional<std::filesystem::path> checkpoint;
    std::optional<std::filesystem::path> out;
    std::optional<std::filesystem::path> image;  // P6 file for cam
    std::optional<std::size_t> index;            // eval-split sample for cam
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> threads;
    std::vector<std::pair<std::string, std::string>> overrides;  // applied after the config file
};

// Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or usage.
int cmd_train(const CommandOptions& opts, std::ostream& out, std::ostream& err);
int cmd_eval(const CommandOptions& opts, std::ostream& out, std::ostream& err);
int cmd_ablate(const CommandOptions& opts, std::ostream& out, std::ostream& err);
int cmd_cam(const CommandOptions& opts, std::ostream& out, std::ostream& err);
int cmd_inspect(const CommandOptions& opts, std::ostream& out, std::ostream& err);

struct AblationRow {
    std::string variant;
    std::size_t params = 0;
    std::vector<double> top1;  // final-epoch eval top-1, one per seed
    double mean = 0;
};

// Trains every configured variant for every seed, sequentially.
std::vector<AblationRow> run_ablation(const RunConfig& cfg, const DataSplits& data, const std::filesystem::path& out_dir,
                                      std::ostream* log);
std::string ablation_table(const std::vector<AblationRow>& rows, const std::vector<std::uint64_t>& seeds);
std::string ablation_csv(const std::vector<AblationRow>& rows, const std::vector<std::uint64_t>& seeds);

// Eigen worker threads; values above 1 give up bitwise reproducibility.
void set_thread_count(std::size_t threads);

}  // namespace chandiv

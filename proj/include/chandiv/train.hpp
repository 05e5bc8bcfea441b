#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "chandiv/backbone.hpp"
#include "chandiv/data.hpp"

namespace chandiv {

struct TrainConfig {
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::size_t epochs = 15;
    std::size_t batch_size = 128;
    std::uint64_t seed = 0;
    double decay_factor = 0.1;
    std::vector<double> decay_at{0.5, 0.75};  // fractions of total epochs
    AugmentConfig augment;
    std::size_t eval_batch_size = 256;
    std::filesystem::path checkpoint;  // written at best eval top-1 when non-empty
    bool verbose = false;

    void validate() const;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double lr = 0;
    double train_loss = 0;
    double train_top1 = 0;
    double eval_top1 = 0;

    bool operator==(const EpochRecord&) const = default;
};

struct History {
    std::vector<EpochRecord> epochs;

    std::string to_csv() const;
    void write_csv(const std::filesystem::path& path) const;
    double best_eval_top1() const;
    bool operator==(const History&) const = default;
};

// v = momentum*v + (grad + weight_decay*param); param -= lr*v.
template <typename T>
void sgd_step(Array<T>& param, const Array<T>& grad, Array<T>& velocity, T lr, T momentum, T weight_decay);

extern template void sgd_step<float>(Array<float>&, const Array<float>&, Array<float>&, float, float, float);
extern template void sgd_step<double>(Array<double>&, const Array<double>&, Array<double>&, double, double, double);

// Momentum SGD over a network's registry; weight decay only on flagged tensors.
class Sgd {
   public:
    Sgd(const std::vector<NamedParam>& params, double momentum, double weight_decay);
    void step(double lr);

   private:
    std::vector<NamedParam> params_;
    std::vector<Array<float>> velocity_;
    double momentum_;
    double weight_decay_;
};

// Learning rate for a 0-based epoch under the step-decay schedule.
double lr_at_epoch(const TrainConfig& cfg, std::size_t epoch);

// Stacks samples into [N,C,H,W], augmenting when rng is given and then
// normalizing with ds.mean/ds.std when those are set.
Array<float> make_batch(const Dataset& ds, std::span<const std::size_t> indices, const AugmentConfig* augment,
                        std::mt19937_64* rng);

// Argmax with ties going to the lowest class index.
std::size_t argmax_row(std::span<const float> row);
double top1_from_logits(const Array<float>& logits, std::span<const int> labels);

// Top-1 accuracy of net on ds (inference mode, ds normalization applied).
double evaluate(Network& net, const Dataset& ds, std::size_t batch_size = 256);

using EpochCallback = std::function<void(const EpochRecord&)>;

// Trains in place. train_ds normalization constants are computed when absent
// and copied to eval_ds. Sub-seeds: shuffle = seed+1, augment = seed+2.
History train(Network& net, const Dataset& train_ds, const Dataset& eval_ds, const TrainConfig& cfg,
              const EpochCallback& on_epoch = {});

struct CheckpointEntry {
    std::string name;
    Array<float> value;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path);

// Parameters, normalization buffers, and optionally "data.mean"/"data.std".
void save_checkpoint(Network& net, const std::filesystem::path& path, std::span<const float> mean = {},
                     std::span<const float> std = {});

struct LoadedModel {
    Network net;
    std::vector<float> mean;
    std::vector<float> std;
};

// Rebuilds the architecture from spec and restores every registry entry.
LoadedModel load_checkpoint(const std::filesystem::path& path, const BackboneSpec& spec);
void load_into(Network& net, const std::filesystem::path& path);

}  // namespace chandiv

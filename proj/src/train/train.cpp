#include "chandiv/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

namespace chandiv {

void TrainConfig::validate() const {
    if (!(lr > 0)) throw ConfigError("train.lr must be positive");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("train.momentum must lie in [0,1)");
    if (!(weight_decay >= 0)) throw ConfigError("train.weight_decay must be non-negative");
    if (batch_size == 0) throw ConfigError("train.batch_size must be at least 1");
    if (eval_batch_size == 0) throw ConfigError("train.eval_batch_size must be at least 1");
    if (epochs == 0) throw ConfigError("train.epochs must be at least 1");
    if (!(decay_factor > 0)) throw ConfigError("train.decay_factor must be positive");
    for (double f : decay_at) {
        if (!(f > 0 && f < 1)) throw ConfigError("train.decay_at fractions must lie in (0,1)");
    }
    if (!(augment.hflip_prob >= 0 && augment.hflip_prob <= 1)) throw ConfigError("augment.hflip_prob must lie in [0,1]");
}

std::string History::to_csv() const {
    std::ostringstream out;
    out << "epoch,lr,train_loss,train_top1,eval_top1\n";
    out.precision(9);
    for (const auto& r : epochs) {
        out << r.epoch << ',' << r.lr << ',' << r.train_loss << ',' << r.train_top1 << ',' << r.eval_top1 << '\n';
    }
    return out.str();
}

void History::write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write history " + path.string());
    out << to_csv();
    if (!out) throw IoError("failed writing history " + path.string());
}

double History::best_eval_top1() const {
    double best = 0;
    for (const auto& r : epochs) best = std::max(best, r.eval_top1);
    return best;
}

template <typename T>
void sgd_step(Array<T>& param, const Array<T>& grad, Array<T>& velocity, T lr, T momentum, T weight_decay) {
    if (param.shape() != grad.shape() || param.shape() != velocity.shape()) {
        throw DimensionError("sgd_step: param " + shape_str(param.shape()) + ", grad " + shape_str(grad.shape()) +
                             ", velocity " + shape_str(velocity.shape()) + " disagree");
    }
    for (std::size_t i = 0; i < param.size(); ++i) {
        velocity[i] = momentum * velocity[i] + (grad[i] + weight_decay * param[i]);
        param[i] -= lr * velocity[i];
    }
}

template void sgd_step<float>(Array<float>&, const Array<float>&, Array<float>&, float, float, float);
template void sgd_step<double>(Array<double>&, const Array<double>&, Array<double>&, double, double, double);

Sgd::Sgd(const std::vector<NamedParam>& params, double momentum, double weight_decay)
    : params_(params), momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& p : params_) velocity_.emplace_back(p.tensor.shape());
}

void Sgd::step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& tensor = params_[i].tensor;
        float wd = params_[i].weight_decay ? static_cast<float>(weight_decay_) : 0.0f;
        if (!tensor.has_grad()) tensor.grad();
        sgd_step(tensor.value(), std::as_const(tensor).grad(), velocity_[i], static_cast<float>(lr),
                 static_cast<float>(momentum_), wd);
    }
}

double lr_at_epoch(const TrainConfig& cfg, std::size_t epoch) {
    double lr = cfg.lr;
    for (double f : cfg.decay_at) {
        if (static_cast<double>(epoch) >= f * static_cast<double>(cfg.epochs)) lr *= cfg.decay_factor;
    }
    return lr;
}

Array<float> make_batch(const Dataset& ds, std::span<const std::size_t> indices, const AugmentConfig* augment_cfg,
                        std::mt19937_64* rng) {
    Shape image_shape = ds.image_shape();
    std::size_t len = shape_numel(image_shape);
    Array<float> batch({indices.size(), image_shape[0], image_shape[1], image_shape[2]});
    bool normalized = !ds.mean.empty();
    for (std::size_t b = 0; b < indices.size(); ++b) {
        Array<float> img = ds.image(indices[b]);
        if (augment_cfg && rng) img = augment(img, *augment_cfg, *rng);
        if (normalized) normalize_image(img, ds.mean, ds.std);
        std::copy(img.data(), img.data() + len, batch.data() + b * len);
    }
    return batch;
}

std::size_t argmax_row(std::span<const float> row) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < row.size(); ++k) {
        if (row[k] > row[best]) best = k;
    }
    return best;
}

double top1_from_logits(const Array<float>& logits, std::span<const int> labels) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
        throw DimensionError("top1: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) +
                             " labels");
    }
    std::size_t classes = logits.dim(1), correct = 0;
    for (std::size_t n = 0; n < labels.size(); ++n) {
        std::span<const float> row(logits.data() + n * classes, classes);
        correct += static_cast<int>(argmax_row(row)) == labels[n];
    }
    return labels.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(labels.size());
}

namespace {

std::size_t count_correct(const Array<float>& logits, std::span<const int> labels) {
    std::size_t classes = logits.dim(1), correct = 0;
    for (std::size_t n = 0; n < labels.size(); ++n) {
        correct += static_cast<int>(argmax_row({logits.data() + n * classes, classes})) == labels[n];
    }
    return correct;
}

}  // namespace

double evaluate(Network& net, const Dataset& ds, std::size_t batch_size) {
    if (ds.size() == 0) return 0.0;
    std::size_t correct = 0;
    std::vector<std::size_t> indices;
    std::vector<int> labels;
    for (std::size_t start = 0; start < ds.size(); start += batch_size) {
        std::size_t end = std::min(ds.size(), start + batch_size);
        indices.resize(end - start);
        std::iota(indices.begin(), indices.end(), start);
        labels.assign(ds.labels.begin() + static_cast<std::ptrdiff_t>(start),
                      ds.labels.begin() + static_cast<std::ptrdiff_t>(end));
        auto logits = net.forward(Tensor<float>(make_batch(ds, indices, nullptr, nullptr)), false);
        correct += count_correct(logits.value(), labels);
    }
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

History train(Network& net, const Dataset& train_input, const Dataset& eval_input, const TrainConfig& cfg,
              const EpochCallback& on_epoch) {
    cfg.validate();
    train_input.validate();
    eval_input.validate();
    if (train_input.size() == 0) throw ConfigError("training set is empty");

    Dataset train_ds = train_input;
    if (train_ds.mean.empty()) compute_normalization(train_ds);
    Dataset eval_ds = eval_input;
    eval_ds.mean = train_ds.mean;
    eval_ds.std = train_ds.std;

    std::mt19937_64 shuffle_rng(cfg.seed + 1);
    std::mt19937_64 augment_rng(cfg.seed + 2);
    Sgd optimizer(net.parameters(), cfg.momentum, cfg.weight_decay);

    History history;
    double best = -1.0;
    std::vector<std::size_t> order(train_ds.size());
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double lr = lr_at_epoch(cfg, epoch);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        double loss_sum = 0.0;
        std::size_t correct = 0;
        std::size_t batch_index = 0;
        std::vector<int> labels;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
            std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::span<const std::size_t> idx(order.data() + start, end - start);
            labels.clear();
            for (auto i : idx) labels.push_back(train_ds.labels[i]);
            try {
                auto batch = make_batch(train_ds, idx, &cfg.augment, &augment_rng);
                net.zero_grad();
                auto logits = net.forward(Tensor<float>(std::move(batch)), true);
                auto loss = cross_entropy(logits, labels);
                backward(loss);
                optimizer.step(lr);
                loss_sum += static_cast<double>(loss.value()[0]) * static_cast<double>(idx.size());
                correct += count_correct(logits.value(), labels);
            } catch (const NumericError& e) {
                std::ostringstream msg;
                msg << "training diverged at epoch " << epoch + 1 << ", batch " << batch_index << ", lr " << lr << ": "
                    << e.what();
                throw NumericError(msg.str());
            }
        }

        EpochRecord record;
        record.epoch = epoch + 1;
        record.lr = lr;
        record.train_loss = loss_sum / static_cast<double>(train_ds.size());
        record.train_top1 = static_cast<double>(correct) / static_cast<double>(train_ds.size());
        record.eval_top1 = evaluate(net, eval_ds, cfg.eval_batch_size);
        history.epochs.push_back(record);
        if (cfg.verbose) {
            std::cerr << "epoch " << record.epoch << " lr " << record.lr << " loss " << record.train_loss << " train "
                      << record.train_top1 << " eval " << record.eval_top1 << '\n';
        }
        if (on_epoch) on_epoch(record);
        if (record.eval_top1 > best) {
            best = record.eval_top1;
            if (!cfg.checkpoint.empty()) save_checkpoint(net, cfg.checkpoint, train_ds.mean, train_ds.std);
        }
    }
    net.zero_grad();
    return history;
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
   public:
    Reader(std::string bytes, std::string source) : bytes_(std::move(bytes)), source_(std::move(source)) {}

    std::uint64_t uint(int width) {
        need(static_cast<std::size_t>(width));
        std::uint64_t v = 0;
        for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += static_cast<std::size_t>(width);
        return v;
    }

    std::string text(std::size_t len) {
        need(len);
        std::string s = bytes_.substr(pos_, len);
        pos_ += len;
        return s;
    }

    bool done() const { return pos_ == bytes_.size(); }

    [[noreturn]] void fail(const std::string& why) const { throw FormatError(source_ + ": " + why); }

   private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) fail("truncated checkpoint at byte " + std::to_string(pos_));
    }

    std::string bytes_;
    std::string source_;
    std::size_t pos_ = 0;
};

constexpr char kMagic[4] = {'C', 'D', 'I', 'V'};
constexpr std::size_t kMaxRank = 8;

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries) {
    std::string out(kMagic, 4);
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
        put_u32(out, static_cast<std::uint32_t>(e.name.size()));
        out += e.name;
        put_u32(out, static_cast<std::uint32_t>(e.value.rank()));
        for (auto d : e.value.shape()) put_u64(out, d);
        for (float v : e.value.values()) put_u32(out, std::bit_cast<std::uint32_t>(v));
    }
    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) throw IoError("cannot write checkpoint " + path.string());
    file.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!file) throw IoError("failed writing checkpoint " + path.string());
}

std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) throw IoError("cannot open checkpoint " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
    Reader in(std::move(bytes), path.string());
    if (in.text(4) != std::string(kMagic, 4)) in.fail("bad magic, not a checkpoint");
    auto version = in.uint(4);
    if (version != kCheckpointVersion) in.fail("unsupported checkpoint version " + std::to_string(version));
    auto count = in.uint(4);
    std::vector<CheckpointEntry> entries;
    for (std::uint64_t e = 0; e < count; ++e) {
        CheckpointEntry entry;
        entry.name = in.text(in.uint(4));
        auto rank = in.uint(4);
        if (rank == 0 || rank > kMaxRank) in.fail("entry '" + entry.name + "' has rank " + std::to_string(rank));
        Shape shape;
        for (std::uint64_t r = 0; r < rank; ++r) {
            auto d = in.uint(8);
            if (d == 0) in.fail("entry '" + entry.name + "' has a zero extent");
            shape.push_back(d);
        }
        std::vector<float> values(shape_numel(shape));
        for (auto& v : values) v = std::bit_cast<float>(static_cast<std::uint32_t>(in.uint(4)));
        entry.value = Array<float>(std::move(shape), std::move(values));
        entries.push_back(std::move(entry));
    }
    if (!in.done()) in.fail("trailing bytes after last entry");
    return entries;
}

void save_checkpoint(Network& net, const std::filesystem::path& path, std::span<const float> mean,
                     std::span<const float> std) {
    std::vector<CheckpointEntry> entries;
    for (const auto& p : net.parameters()) entries.push_back({p.name, p.tensor.value()});
    for (const auto& b : net.buffers()) entries.push_back({b.name, *b.array});
    if (!mean.empty()) {
        entries.push_back({"data.mean", Array<float>({mean.size()}, std::vector<float>(mean.begin(), mean.end()))});
        entries.push_back({"data.std", Array<float>({std.size()}, std::vector<float>(std.begin(), std.end()))});
    }
    write_checkpoint(path, entries);
}

void load_into(Network& net, const std::filesystem::path& path) {
    auto entries = read_checkpoint(path);
    std::map<std::string, Array<float>*> targets;
    std::vector<NamedParam> params = net.parameters();
    for (auto& p : params) targets[p.name] = &p.tensor.value();
    for (auto& b : net.buffers()) targets[b.name] = b.array;

    std::size_t matched = 0;
    for (auto& e : entries) {
        if (e.name.starts_with("data.")) continue;
        auto it = targets.find(e.name);
        if (it == targets.end()) throw FormatError(path.string() + ": unexpected entry '" + e.name + "'");
        if (it->second->shape() != e.value.shape()) {
            throw FormatError(path.string() + ": entry '" + e.name + "' is " + shape_str(e.value.shape()) +
                              ", network expects " + shape_str(it->second->shape()));
        }
        *it->second = std::move(e.value);
        ++matched;
    }
    if (matched != targets.size()) {
        throw FormatError(path.string() + ": checkpoint covers " + std::to_string(matched) + " of " +
                          std::to_string(targets.size()) + " registry entries");
    }
}

LoadedModel load_checkpoint(const std::filesystem::path& path, const BackboneSpec& spec) {
    LoadedModel model{build(spec, 0), {}, {}};
    load_into(model.net, path);
    for (auto& e : read_checkpoint(path)) {
        if (e.name == "data.mean") model.mean = e.value.storage();
        if (e.name == "data.std") model.std = e.value.storage();
    }
    return model;
}

}  // namespace chandiv

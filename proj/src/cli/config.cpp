#include "chandiv/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace chandiv {

namespace {

std::string trim(std::string_view s) {
    auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string_view::npos) return {};
    auto end = s.find_last_not_of(" \t\r");
    return std::string(s.substr(begin, end - begin + 1));
}

std::vector<std::string> split_list(std::string_view value) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= value.size()) {
        auto comma = value.find(',', start);
        if (comma == std::string_view::npos) comma = value.size();
        auto item = trim(value.substr(start, comma - start));
        if (!item.empty()) out.push_back(item);
        start = comma + 1;
    }
    return out;
}

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
    std::string s = trim(text);
    T value{};
    const char* end = s.data() + s.size();
    std::from_chars_result res;
    if constexpr (std::is_floating_point_v<T>) {
        res = std::from_chars(s.data(), end, value, std::chars_format::general);
    } else {
        res = std::from_chars(s.data(), end, value);
    }
    if (s.empty() || res.ec != std::errc{} || res.ptr != end) {
        throw ConfigError("config key '" + std::string(key) + "': cannot parse '" + s + "'");
    }
    return value;
}

bool parse_bool(std::string_view key, std::string_view text) {
    std::string s = trim(text);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError("config key '" + std::string(key) + "': expected true/false, got '" + s + "'");
}

template <typename T>
std::vector<T> parse_number_list(std::string_view key, std::string_view text) {
    std::vector<T> out;
    for (const auto& item : split_list(text)) out.push_back(parse_number<T>(key, item));
    if (out.empty()) throw ConfigError("config key '" + std::string(key) + "' needs at least one value");
    return out;
}

template <typename T>
std::string join_list(const std::vector<T>& items) {
    std::ostringstream out;
    for (std::size_t i = 0; i < items.size(); ++i) out << (i ? "," : "") << items[i];
    return out.str();
}

std::string fmt(double v) {
    std::ostringstream out;
    out.precision(17);
    out << v;
    return out.str();
}

using Setter = std::function<void(RunConfig&, std::string_view key, std::string_view value)>;
using Getter = std::function<std::string(const RunConfig&)>;

struct KeyDef {
    Setter set;
    Getter get;
};

const std::map<std::string, KeyDef, std::less<>>& registry() {
    static const std::map<std::string, KeyDef, std::less<>> keys = {
        {"seed", {[](RunConfig& c, auto k, auto v) { c.seed = parse_number<std::uint64_t>(k, v); },
                  [](const RunConfig& c) { return std::to_string(c.seed); }}},
        {"threads", {[](RunConfig& c, auto k, auto v) { c.threads = parse_number<std::size_t>(k, v); },
                     [](const RunConfig& c) { return std::to_string(c.threads); }}},
        {"output.dir", {[](RunConfig& c, auto, auto v) { c.output_dir = trim(v); },
                        [](const RunConfig& c) { return c.output_dir.string(); }}},

        {"backbone.stage_channels",
         {[](RunConfig& c, auto k, auto v) { c.backbone.stage_channels = parse_number_list<std::size_t>(k, v); },
          [](const RunConfig& c) { return join_list(c.backbone.stage_channels); }}},
        {"backbone.blocks_per_stage",
         {[](RunConfig& c, auto k, auto v) { c.backbone.blocks_per_stage = parse_number<std::size_t>(k, v); },
          [](const RunConfig& c) { return std::to_string(c.backbone.blocks_per_stage); }}},
        {"backbone.block_kind", {[](RunConfig& c, auto, auto v) { c.backbone.block_kind = parse_block_kind(trim(v)); },
                                 [](const RunConfig& c) { return to_string(c.backbone.block_kind); }}},
        {"backbone.attention",
         {[](RunConfig& c, auto, auto v) { c.backbone.attention = parse_attention_kind(trim(v)); },
          [](const RunConfig& c) { return to_string(c.backbone.attention); }}},
        {"backbone.attention_placement",
         {[](RunConfig& c, auto, auto v) { c.backbone.attention_placement = parse_attention_placement(trim(v)); },
          [](const RunConfig& c) { return to_string(c.backbone.attention_placement); }}},
        {"backbone.fusion_mode",
         {[](RunConfig& c, auto, auto v) { c.backbone.fusion_mode = parse_fusion_mode(trim(v)); },
          [](const RunConfig& c) { return to_string(c.backbone.fusion_mode); }}},
        {"backbone.se_reduction",
         {[](RunConfig& c, auto k, auto v) { c.backbone.se_reduction = parse_number<std::size_t>(k, v); },
          [](const RunConfig& c) { return std::to_string(c.backbone.se_reduction); }}},
        {"backbone.num_classes",
         {[](RunConfig& c, auto k, auto v) { c.backbone.num_classes = parse_number<std::size_t>(k, v); },
          [](const RunConfig& c) { return std::to_string(c.backbone.num_classes); }}},
        {"backbone.input_shape",
         {[](RunConfig& c, auto k, auto v) {
              auto dims = parse_number_list<std::size_t>(k, v);
              if (dims.size() != 3) throw ConfigError("config key 'backbone.input_shape' needs C,H,W");
              c.backbone.input_shape = Shape(dims.begin(), dims.end());
          },
          [](const RunConfig& c) { return join_list(c.backbone.input_shape); }}},

        {"train.lr", {[](RunConfig& c, auto k, auto v) { c.train.lr = parse_number<double>(k, v); },
                      [](const RunConfig& c) { return fmt(c.train.lr); }}},
        {"train.momentum", {[](RunConfig& c, auto k, auto v) { c.train.momentum = parse_number<double>(k, v); },
                            [](const RunConfig& c) { return fmt(c.train.momentum); }}},
        {"train.weight_decay",
         {[](RunConfig& c, auto k, auto v) { c.train.weight_decay = parse_number<double>(k, v); },
          [](const RunConfig& c) { return fmt(c.train.weight_decay); }}},
        {"train.epochs", {[](RunConfig& c, auto k, auto v) { c.train.epochs = parse_number<std::size_t>(k, v); },
                          [](const RunConfig& c) { return std::to_string(c.train.epochs); }}},
        {"train.batch_size",
         {[](RunConfig& c, auto k, auto v) { c.train.batch_size = parse_number<std::size_t>(k, v); },
          [](const RunConfig& c) { return std::to_string(c.train.batch_size); }}},
        {"train.eval_batch_size",
         {[](RunConfig& c, auto k, auto v) { c.train.eval_batch_size = parse_number<std::size_t>(k, v); },
          [](const RunConfig& c) { return std::to_string(c.train.eval_batch_size); }}},
        {"train.decay_factor",
         {[](RunConfig& c, auto k, auto v) { c.train.decay_factor = parse_number<double>(k, v); },
          [](const RunConfig& c) { return fmt(c.train.decay_factor); }}},
        {"train.decay_at",
         {[](RunConfig& c, auto k, auto v) {
              c.train.decay_at.clear();
              for (const auto& item : split_list(v)) c.train.decay_at.push_back(parse_number<double>(k, item));
          },
          [](const RunConfig& c) {
              std::string out;
              for (std::size_t i = 0; i < c.train.decay_at.size(); ++i) out += (i ? "," : "") + fmt(c.train.decay_at[i]);
              return out;
          }}},
        {"train.verbose", {[](RunConfig& c, auto k, auto v) { c.train.verbose = parse_bool(k, v); },
                           [](const RunConfig& c) { return std::string(c.train.verbose ? "true" : "false"); }}},

        {"augment.enabled", {[](RunConfig& c, auto k, auto v) { c.train.augment.enabled = parse_bool(k, v); },
                             [](const RunConfig& c) { return std::string(c.train.augment.enabled ? "true" : "false"); }}},
        {"augment.pad", {[](RunConfig& c, auto k, auto v) { c.train.augment.pad = parse_number<std::size_t>(k, v); },
                         [](const RunConfig& c) { return std::to_string(c.train.augment.pad); }}},
        {"augment.hflip_prob",
         {[](RunConfig& c, auto k, auto v) { c.train.augment.hflip_prob = parse_number<double>(k, v); },
          [](const RunConfig& c) { return fmt(c.train.augment.hflip_prob); }}},

        {"data.source",
         {[](RunConfig& c, auto k, auto v) {
              std::string s = trim(v);
              if (s == "synthetic") {
                  c.data.source = DataSource::synthetic;
              } else if (s == "cifar10") {
                  c.data.source = DataSource::cifar10;
              } else {
                  throw ConfigError("config key '" + std::string(k) + "': unknown source '" + s + "'");
              }
          },
          [](const RunConfig& c) {
              return std::string(c.data.source == DataSource::synthetic ? "synthetic" : "cifar10");
          }}},
        {"data.dir", {[](RunConfig& c, auto, auto v) { c.data.dir = trim(v); },
                      [](const RunConfig& c) { return c.data.dir.string(); }}},
        {"data.train_limit",
         {[](RunConfig& c, auto k, auto v) { c.data.train_limit = parse_number<std::size_t>(k, v); },
          [](const RunConfig& c) { return std::to_string(c.data.train_limit); }}},
        {"data.eval_limit", {[](RunConfig& c, auto k, auto v) { c.data.eval_limit = parse_number<std::size_t>(k, v); },
                             [](const RunConfig& c) { return std::to_string(c.data.eval_limit); }}},
        {"data.synth_train",
         {[](RunConfig& c, auto k, auto v) { c.data.synth_train = parse_number<std::size_t>(k, v); },
          [](const RunConfig& c) { return std::to_string(c.data.synth_train); }}},
        {"data.synth_eval", {[](RunConfig& c, auto k, auto v) { c.data.synth_eval = parse_number<std::size_t>(k, v); },
                             [](const RunConfig& c) { return std::to_string(c.data.synth_eval); }}},
        {"data.synth_classes",
         {[](RunConfig& c, auto k, auto v) { c.data.synth_classes = parse_number<std::size_t>(k, v); },
          [](const RunConfig& c) { return std::to_string(c.data.synth_classes); }}},
        {"data.synth_seed",
         {[](RunConfig& c, auto k, auto v) { c.data.synth_seed = parse_number<std::uint64_t>(k, v); },
          [](const RunConfig& c) { return std::to_string(c.data.synth_seed); }}},

        {"ablate.variants",
         {[](RunConfig& c, auto k, auto v) {
              auto items = split_list(v);
              if (items.empty()) throw ConfigError("config key '" + std::string(k) + "' needs at least one value");
              for (const auto& item : items) parse_attention_kind(item);
              c.ablate_variants = items;
          },
          [](const RunConfig& c) { return join_list(c.ablate_variants); }}},
        {"ablate.seeds",
         {[](RunConfig& c, auto k, auto v) { c.ablate_seeds = parse_number_list<std::uint64_t>(k, v); },
          [](const RunConfig& c) { return join_list(c.ablate_seeds); }}},
    };
    return keys;
}

}  // namespace

void RunConfig::set(std::string_view key, std::string_view value) {
    auto it = registry().find(key);
    if (it == registry().end()) throw ConfigError("unknown config key '" + std::string(key) + "'");
    it->second.set(*this, key, value);
}

void RunConfig::validate() const {
    backbone.validate();
    train.validate();
    if (threads == 0) throw ConfigError("threads must be at least 1");
    if (data.source == DataSource::cifar10) {
        if (data.dir.empty()) throw ConfigError("data.dir is required for data.source = cifar10");
        if (backbone.input_shape != Shape{3, kCifarSide, kCifarSide}) {
            throw ConfigError("CIFAR-10 needs backbone.input_shape = 3,32,32");
        }
        if (backbone.num_classes != 10) throw ConfigError("CIFAR-10 needs backbone.num_classes = 10");
    } else {
        if (data.synth_classes != backbone.num_classes) {
            throw ConfigError("data.synth_classes must equal backbone.num_classes");
        }
        if (data.synth_train < data.synth_classes || data.synth_eval < data.synth_classes) {
            throw ConfigError("synthetic splits need at least one sample per class");
        }
    }
    if (ablate_seeds.empty()) throw ConfigError("ablate.seeds needs at least one seed");
}

std::string RunConfig::to_text() const {
    std::ostringstream out;
    for (const auto& [key, def] : registry()) out << key << " = " << def.get(*this) << '\n';
    return out.str();
}

std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto& entry : registry()) keys.push_back(entry.first);
    return keys;
}

RunConfig parse_config(std::string_view text, RunConfig base) {
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        std::string body = trim(line);
        if (body.empty()) continue;
        auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
        }
        base.set(trim(std::string_view(body).substr(0, eq)), std::string_view(body).substr(eq + 1));
    }
    return base;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_config(buffer.str());
}

void write_config(const RunConfig& cfg, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write config " + path.string());
    out << cfg.to_text();
}

DataSplits load_data(const DataConfig& cfg, const Shape& input_shape, std::size_t num_classes) {
    DataSplits splits;
    if (cfg.source == DataSource::cifar10) {
        splits.train = load_cifar10(cfg.dir, CifarSplit::train).head(cfg.train_limit);
        splits.eval = load_cifar10(cfg.dir, CifarSplit::test).head(cfg.eval_limit);
        return splits;
    }
    auto all = synth_dataset(cfg.synth_seed, cfg.synth_train + cfg.synth_eval, num_classes, input_shape);
    splits.train = all.slice(0, cfg.synth_train);
    splits.eval = all.slice(cfg.synth_train, all.size());
    return splits;
}

}  // namespace chandiv

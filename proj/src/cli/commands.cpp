#include "chandiv/commands.hpp"

#include <Eigen/Core>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "chandiv/cam.hpp"

namespace chandiv {

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

template <typename F>
int guarded(std::ostream& err, F&& body) {
    try {
        return body();
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return 2;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
}

void apply_overrides(RunConfig& cfg, const CommandOptions& opts) {
    for (const auto& [key, value] : opts.overrides) cfg.set(key, value);
    if (opts.seed) cfg.seed = *opts.seed;
    if (opts.threads) cfg.threads = *opts.threads;
}

RunConfig resolve_run_config(const CommandOptions& opts, bool uses_out_dir) {
    if (!opts.config) throw UsageError("--config is required");
    RunConfig cfg = load_config(*opts.config);
    apply_overrides(cfg, opts);
    if (uses_out_dir && opts.out) cfg.output_dir = *opts.out;
    cfg.validate();
    set_thread_count(cfg.threads);
    return cfg;
}

// Architecture for a checkpoint: --config, else the resolved config beside it.
RunConfig resolve_checkpoint_config(const CommandOptions& opts) {
    if (!opts.checkpoint) throw UsageError("--checkpoint is required");
    std::filesystem::path path = opts.config ? *opts.config : opts.checkpoint->parent_path() / "resolved.cfg";
    if (!std::filesystem::exists(path)) {
        throw UsageError("no --config given and no resolved.cfg next to " + opts.checkpoint->string());
    }
    RunConfig cfg = load_config(path);
    apply_overrides(cfg, opts);
    cfg.validate();
    set_thread_count(cfg.threads);
    return cfg;
}

void restore_normalization(LoadedModel& model, const RunConfig& cfg, Dataset& target) {
    if (model.mean.empty()) {
        Dataset train = load_data(cfg.data, cfg.backbone.input_shape, cfg.backbone.num_classes).train;
        compute_normalization(train);
        model.mean = train.mean;
        model.std = train.std;
    }
    target.mean = model.mean;
    target.std = model.std;
}

std::string fixed(double v, int digits) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(digits) << v;
    return out.str();
}

Array<float> read_ppm_image(const std::filesystem::path& path, const Shape& input_shape) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open image " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    auto ppm = parse_ppm(bytes);
    if (input_shape[0] != 3 || ppm.height != input_shape[1] || ppm.width != input_shape[2]) {
        throw DimensionError("image " + path.string() + " is " + std::to_string(ppm.width) + "x" +
                             std::to_string(ppm.height) + ", network expects " + shape_str(input_shape));
    }
    std::size_t plane = ppm.width * ppm.height;
    Array<float> image(input_shape);
    for (std::size_t p = 0; p < plane; ++p) {
        for (std::size_t c = 0; c < 3; ++c) {
            image[c * plane + p] = static_cast<float>(ppm.pixels[3 * p + c]) / static_cast<float>(ppm.max_value);
        }
    }
    return image;
}

}  // namespace

void set_thread_count(std::size_t threads) { Eigen::setNbThreads(static_cast<int>(threads)); }

int cmd_train(const CommandOptions& opts, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        RunConfig cfg = resolve_run_config(opts, true);
        std::filesystem::create_directories(cfg.output_dir);
        write_config(cfg, cfg.output_dir / "resolved.cfg");

        auto data = load_data(cfg.data, cfg.backbone.input_shape, cfg.backbone.num_classes);
        auto net = build(cfg.backbone, cfg.seed);
        TrainConfig tc = cfg.train;
        tc.seed = cfg.seed;
        tc.checkpoint = cfg.output_dir / "checkpoint.ckpt";
        auto history = train(net, data.train, data.eval, tc);
        history.write_csv(cfg.output_dir / "history.csv");

        out << "best_eval_top1=" << fixed(history.best_eval_top1(), 4) << '\n';
        out << "final_eval_top1=" << fixed(history.epochs.back().eval_top1, 4) << '\n';
        out << "outputs=" << cfg.output_dir.string() << '\n';
        return 0;
    });
}

int cmd_eval(const CommandOptions& opts, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        RunConfig cfg = resolve_checkpoint_config(opts);
        auto model = load_checkpoint(*opts.checkpoint, cfg.backbone);
        Dataset eval = load_data(cfg.data, cfg.backbone.input_shape, cfg.backbone.num_classes).eval;
        restore_normalization(model, cfg, eval);
        out << "top1=" << fixed(evaluate(model.net, eval, cfg.train.eval_batch_size), 6) << '\n';
        return 0;
    });
}

std::vector<AblationRow> run_ablation(const RunConfig& cfg, const DataSplits& data, const std::filesystem::path& out_dir,
                                      std::ostream* log) {
    std::vector<AblationRow> rows;
    for (const auto& variant : cfg.ablate_variants) {
        BackboneSpec spec = cfg.backbone;
        spec.attention = parse_attention_kind(variant);
        AblationRow row;
        row.variant = variant;
        for (auto seed : cfg.ablate_seeds) {
            auto net = build(spec, seed);
            row.params = net.trainable_count();
            TrainConfig tc = cfg.train;
            tc.seed = seed;
            tc.checkpoint.clear();
            auto history = train(net, data.train, data.eval, tc);
            if (!out_dir.empty()) {
                history.write_csv(out_dir / (variant + "_seed" + std::to_string(seed) + ".csv"));
            }
            row.top1.push_back(history.epochs.back().eval_top1);
            if (log) *log << variant << " seed " << seed << " top1 " << fixed(row.top1.back(), 4) << '\n';
        }
        double sum = 0;
        for (double v : row.top1) sum += v;
        row.mean = sum / static_cast<double>(row.top1.size());
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string ablation_table(const std::vector<AblationRow>& rows, const std::vector<std::uint64_t>& seeds) {
    std::ostringstream out;
    out << "| variant | params |";
    for (auto s : seeds) out << " top1 seed " << s << " |";
    out << " mean |\n|---|---|";
    for (std::size_t i = 0; i < seeds.size(); ++i) out << "---|";
    out << "---|\n";
    for (const auto& row : rows) {
        out << "| " << row.variant << " | " << row.params << " |";
        for (double v : row.top1) out << ' ' << fixed(v, 4) << " |";
        out << ' ' << fixed(row.mean, 4) << " |\n";
    }
    return out.str();
}

std::string ablation_csv(const std::vector<AblationRow>& rows, const std::vector<std::uint64_t>& seeds) {
    std::ostringstream out;
    out << "variant,params";
    for (auto s : seeds) out << ",top1_seed" << s;
    out << ",mean\n";
    for (const auto& row : rows) {
        out << row.variant << ',' << row.params;
        for (double v : row.top1) out << ',' << fixed(v, 6);
        out << ',' << fixed(row.mean, 6) << '\n';
    }
    return out.str();
}

int cmd_ablate(const CommandOptions& opts, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        RunConfig cfg = resolve_run_config(opts, true);
        if (opts.seed) cfg.ablate_seeds = {*opts.seed};
        std::filesystem::create_directories(cfg.output_dir);
        write_config(cfg, cfg.output_dir / "resolved.cfg");

        auto data = load_data(cfg.data, cfg.backbone.input_shape, cfg.backbone.num_classes);
        auto rows = run_ablation(cfg, data, cfg.output_dir, cfg.train.verbose ? &err : nullptr);
        std::string table = ablation_table(rows, cfg.ablate_seeds);
        std::ofstream(cfg.output_dir / "ablation.md", std::ios::binary) << table;
        std::ofstream(cfg.output_dir / "ablation.csv", std::ios::binary) << ablation_csv(rows, cfg.ablate_seeds);
        out << table;
        return 0;
    });
}

int cmd_cam(const CommandOptions& opts, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        if (opts.image && opts.index) throw UsageError("--image and --index are mutually exclusive");
        RunConfig cfg = resolve_checkpoint_config(opts);
        auto model = load_checkpoint(*opts.checkpoint, cfg.backbone);

        Array<float> original;
        Dataset holder;
        if (opts.image) {
            original = read_ppm_image(*opts.image, cfg.backbone.input_shape);
        } else {
            holder = load_data(cfg.data, cfg.backbone.input_shape, cfg.backbone.num_classes).eval;
            std::size_t index = opts.index.value_or(0);
            if (index >= holder.size()) {
                throw UsageError("--index " + std::to_string(index) + " outside eval split of " +
                                 std::to_string(holder.size()));
            }
            original = holder.image(index);
        }
        restore_normalization(model, cfg, holder);
        Array<float> input = original;
        normalize_image(input, holder.mean, holder.std);

        auto cam = compute_cam(model.net, input);
        std::filesystem::path path = opts.out ? *opts.out : opts.checkpoint->parent_path() / "cam.ppm";
        emit_heatmap(cam, original, path);
        out << "predicted_class=" << cam.predicted_class << '\n';
        out << "heatmap=" << path.string() << '\n';
        return 0;
    });
}

int cmd_inspect(const CommandOptions& opts, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        RunConfig cfg = resolve_run_config(opts, false);
        auto net = build(cfg.backbone, cfg.seed);
        auto report = param_count(net);
        out << std::left << std::setw(36) << "layer" << std::setw(18) << "kind" << std::right << std::setw(12)
            << "params" << std::setw(16) << "macs" << '\n';
        for (const auto& row : report.rows) {
            out << std::left << std::setw(36) << row.name << std::setw(18) << row.kind << std::right << std::setw(12)
                << row.params << std::setw(16) << row.macs << '\n';
        }
        out << "total_params=" << report.total_params << '\n';
        out << "total_macs=" << report.total_macs << '\n';
        return 0;
    });
}

}  // namespace chandiv

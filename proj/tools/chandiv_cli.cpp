#include <CLI11.hpp>
#include <iostream>

#include "chandiv/commands.hpp"

namespace {

using Command = int (*)(const chandiv::CommandOptions&, std::ostream&, std::ostream&);

void add_common(CLI::App* sub, chandiv::CommandOptions& opts, std::vector<std::string>& sets) {
    sub->add_option("--seed", opts.seed, "Override the config seed");
    sub->add_option("--threads", opts.threads, "Worker threads (above 1 relaxes bitwise determinism)");
    sub->add_option("--set", sets, "Extra key=value config override (repeatable)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Channel diversification attention: train, evaluate, ablate and visualise"};
    app.require_subcommand(1);

    chandiv::CommandOptions opts;
    std::vector<std::string> sets;
    std::string config, checkpoint, out, image;

    auto* train = app.add_subcommand("train", "Train one configuration; writes history, checkpoint, resolved config");
    train->add_option("--config", config, "Run config file")->required();
    train->add_option("--out", out, "Output directory (overrides output.dir)");
    add_common(train, opts, sets);

    auto* eval = app.add_subcommand("eval", "Print top-1 of a checkpoint on the eval split");
    eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    eval->add_option("--config", config, "Run config (default: resolved.cfg next to the checkpoint)");
    add_common(eval, opts, sets);

    auto* ablate = app.add_subcommand("ablate", "Train every attention variant under a shared seed set");
    ablate->add_option("--config", config, "Run config file")->required();
    ablate->add_option("--out", out, "Output directory (overrides output.dir)");
    add_common(ablate, opts, sets);

    auto* cam = app.add_subcommand("cam", "Write a CAM heatmap (P6) and print the predicted class");
    cam->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    cam->add_option("--config", config, "Run config (default: resolved.cfg next to the checkpoint)");
    cam->add_option("--out", out, "Output PPM path");
    auto* index = cam->add_option("--index", opts.index, "Eval-split sample index");
    cam->add_option("--image", image, "Input P6 image at network resolution")->excludes(index);
    add_common(cam, opts, sets);

    auto* inspect = app.add_subcommand("inspect", "Print the per-layer parameter and MAC table");
    inspect->add_option("--config", config, "Run config file")->required();
    add_common(inspect, opts, sets);

    CLI11_PARSE(app, argc, argv);

    if (!config.empty()) opts.config = config;
    if (!checkpoint.empty()) opts.checkpoint = checkpoint;
    if (!out.empty()) opts.out = out;
    if (!image.empty()) opts.image = image;
    for (const auto& s : sets) {
        auto eq = s.find('=');
        if (eq == std::string::npos) {
            std::cerr << "usage error: --set expects key=value, got '" << s << "'\n";
            return 2;
        }
        opts.overrides.emplace_back(s.substr(0, eq), s.substr(eq + 1));
    }

    Command command = nullptr;
    if (*train) command = chandiv::cmd_train;
    if (*eval) command = chandiv::cmd_eval;
    if (*ablate) command = chandiv::cmd_ablate;
    if (*cam) command = chandiv::cmd_cam;
    if (*inspect) command = chandiv::cmd_inspect;
    return command(opts, std::cout, std::cerr);
}

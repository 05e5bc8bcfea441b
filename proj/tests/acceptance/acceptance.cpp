// Acceptance suite: one PASS / FAIL / SKIP line per criterion.
//   acceptance            run all criteria
//   acceptance --only 6   run a subset (exit 77 when every selected one skipped)
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "chandiv/attention.hpp"
#include "chandiv/cam.hpp"
#include "chandiv/commands.hpp"
#include "chandiv/grad_check.hpp"
#include "support/oracles.hpp"

using namespace chandiv;
namespace fs = std::filesystem;

namespace {

enum class Status { pass, fail, skip };

struct Outcome {
    Status status;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string num(double v, int digits = 3) {
    std::ostringstream out;
    out << std::setprecision(digits) << v;
    return out.str();
}

const fs::path kSource = CHANDIV_SOURCE_DIR;
const fs::path kScratch = CHANDIV_SCRATCH_DIR;

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome oracle_equivalence() {
    auto start = Clock::now();
    std::mt19937_64 rng(1001);
    double worst = 0;
    for (int trial = 0; trial < 20; ++trial) {
        auto x = oracle::random_array({4, 3, 3}, rng);
        auto p = ChanDivParams<double>::random(4, rng);
        p.transform_bias.value()[0] = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
        auto out = chandiv_forward(Tensor<double>(x), p);
        auto ref = oracle::chandiv(x.storage(), 4, 3, 3, p.transform_kernel.value().storage(),
                                   p.transform_bias.value()[0]);
        worst = std::max(worst, oracle::max_abs_diff(out.value().storage(), ref.output));
    }
    double elapsed = seconds_since(start);
    bool ok = worst < 1e-10 && elapsed < 5.0;
    return {ok ? Status::pass : Status::fail,
            "20 inputs C=4 H=W=3, max |diff| = " + num(worst) + " (< 1e-10), " + num(elapsed) + " s (< 5 s)"};
}

Outcome gradient_correctness() {
    auto start = Clock::now();
    std::mt19937_64 rng(1002);
    std::map<std::string, double> worst;
    for (int trial = 0; trial < 20; ++trial) {
        auto x = Tensor<double>(oracle::random_array({4, 3, 3}, rng));
        auto p = ChanDivParams<double>::random(4, rng);
        p.transform_bias.value()[0] = 0.2;
        worst["chandiv"] = std::max(worst["chandiv"], grad_check([&] { return mean(chandiv_forward(x, p)); },
                                                                {x, p.transform_kernel, p.transform_bias}, 1e-5));
        auto se = SEParams<double>::random(4, 2, rng);
        worst["se"] = std::max(worst["se"], grad_check([&] { return mean(se_forward(x, se)); }, {x, se.w1, se.w2}, 1e-5));
        for (auto v : {AblationVariant::gap_only, AblationVariant::attn_only, AblationVariant::positive_corr,
                       AblationVariant::full}) {
            auto ap = make_ablation_params<double>(v, 4, rng);
            ap.transform_bias.value()[0] = 0.1;
            double err = grad_check([&] { return mean(ablation_forward(x, v, ap)); },
                                    {x, ap.transform_kernel, ap.transform_bias}, 1e-5);
            worst[to_string(v)] = std::max(worst[to_string(v)], err);
        }
    }
    double elapsed = seconds_since(start);
    bool ok = elapsed < 120.0;
    std::string detail;
    for (const auto& [name, err] : worst) {
        ok = ok && err < 1e-4;
        detail += name + "=" + num(err) + " ";
    }
    return {ok ? Status::pass : Status::fail,
            "max rel err over 20 configs each: " + detail + "(< 1e-4), " + num(elapsed) + " s (< 120 s)"};
}

Outcome normalization_invariants() {
    std::mt19937_64 rng(1003);
    std::uniform_int_distribution<std::size_t> channels(2, 8), extent(1, 5);
    double worst_a = 0, worst_j = 0;
    bool open_interval = true;
    for (int trial = 0; trial < 1000; ++trial) {
        std::size_t c = channels(rng);
        auto x = Tensor<double>(oracle::random_array({c, extent(rng), extent(rng)}, rng, -1, 1));
        auto a = channel_significance(x).value();
        worst_a = std::max(worst_a, std::abs(std::accumulate(a.storage().begin(), a.storage().end(), 0.0) - 1.0));
        auto j = channel_relation(x).value();
        for (std::size_t r = 0; r < c; ++r) {
            double s = 0;
            for (std::size_t k = 0; k < c; ++k) {
                double v = j.at(r, k);
                open_interval = open_interval && v > 0.0 && v < 1.0;
                s += v;
            }
            worst_j = std::max(worst_j, std::abs(s - 1.0));
        }
    }
    // Entries of magnitude 100 on a 1x1 map put Gram values at 1e4.
    bool finite = true;
    double max_gram = 0;
    for (int trial = 0; trial < 100; ++trial) {
        std::size_t c = channels(rng);
        auto x = oracle::random_array({c, 1, 1}, rng, -100, 100);
        for (double v : x.values()) max_gram = std::max(max_gram, v * v);
        auto p = ChanDivParams<double>::random(c, rng);
        for (auto sign : {CorrelationSign::negative, CorrelationSign::positive}) {
            p.correlation_sign = sign;
            try {
                for (double v : chandiv_forward(Tensor<double>(x), p).value().values()) finite = finite && std::isfinite(v);
            } catch (const NumericError&) {
                finite = false;
            }
        }
    }
    bool ok = worst_a <= 1e-6 && worst_j <= 1e-6 && open_interval && finite;
    return {ok ? Status::pass : Status::fail,
            "1000 tensors: |sum A - 1| <= " + num(worst_a) + ", |row sum J - 1| <= " + num(worst_j) +
                ", entries in (0,1): " + (open_interval ? "yes" : "no") + "; Gram up to " + num(max_gram) +
                " finite: " + (finite ? "yes" : "no")};
}

Outcome residual_identity() {
    std::mt19937_64 rng(1004);
    std::uniform_int_distribution<std::size_t> extent(1, 6);
    int identical = 0;
    for (int trial = 0; trial < 100; ++trial) {
        std::size_t c = extent(rng);
        auto x = Tensor<double>(oracle::random_array({c, extent(rng), extent(rng)}, rng, -10, 10));
        if (chandiv_forward(x, ChanDivParams<double>::zeros(c)).value() == x.value()) ++identical;
    }
    return {identical == 100 ? Status::pass : Status::fail,
            std::to_string(identical) + "/100 zero-parameter outputs bitwise equal to input"};
}

Outcome parameter_accounting() {
    std::string detail = "C+2:";
    bool ok = true;
    std::mt19937_64 rng(1005);
    for (std::size_t c : {4u, 16u, 64u, 256u}) {
        std::size_t direct = ChanDivParams<float>::random(c, rng).trainable_count();
        BackboneSpec spec;
        spec.stage_channels = {c};
        spec.attention = AttentionKind::chandiv;
        spec.input_shape = {3, 8, 8};
        std::size_t row_params = 0;
        for (const auto& row : param_count(build(spec, 0)).rows) {
            if (row.name == "attention") row_params = row.params;
        }
        ok = ok && direct == c + 2 && row_params == c + 2;
        detail += " C=" + std::to_string(c) + "->" + std::to_string(direct) + "/" + std::to_string(row_params);
    }

    CommandOptions opts;
    opts.config = kSource / "configs" / "cifar10_mini.cfg";
    std::ostringstream out, err;
    int code = cmd_inspect(opts, out, err);
    std::istringstream lines(out.str());
    std::string line;
    std::getline(lines, line);  // header
    std::uint64_t sum_params = 0, sum_macs = 0, total_params = 0, total_macs = 0;
    std::size_t rows = 0;
    while (std::getline(lines, line)) {
        if (line.starts_with("total_params=")) {
            total_params = std::stoull(line.substr(13));
        } else if (line.starts_with("total_macs=")) {
            total_macs = std::stoull(line.substr(11));
        } else {
            std::istringstream fields(line);
            std::string name, kind;
            std::uint64_t params = 0, macs = 0;
            fields >> name >> kind >> params >> macs;
            sum_params += params;
            sum_macs += macs;
            ++rows;
        }
    }
    ok = ok && code == 0 && rows > 0 && sum_params == total_params && sum_macs == total_macs;
    detail += "; inspect: " + std::to_string(rows) + " rows, params " + std::to_string(sum_params) + " vs total " +
              std::to_string(total_params) + ", MACs " + std::to_string(sum_macs) + " vs total " +
              std::to_string(total_macs);
    return {ok ? Status::pass : Status::fail, detail};
}

fs::path cifar_dir() {
    if (const char* env = std::getenv("CHANDIV_CIFAR10_DIR"); env && *env) return env;
    return kSource / "data" / "cifar-10-batches-bin";
}

Outcome desk_training() {
    fs::path dir = cifar_dir();
    if (!fs::exists(dir / "data_batch_1.bin") || !fs::exists(dir / "test_batch.bin")) {
        return {Status::skip, "CIFAR-10 binary batches not found at " + dir.string() +
                                  " (set CHANDIV_CIFAR10_DIR); no baseline/chandiv means computed"};
    }
    auto start = Clock::now();
    RunConfig cfg = load_config(kSource / "configs" / "cifar10_desk.cfg");
    cfg.data.dir = dir;
    cfg.ablate_variants = {"none", "full"};
    cfg.ablate_seeds = {0, 1, 2};
    cfg.validate();
    fs::path out_dir = kScratch / "criterion6";
    fs::create_directories(out_dir);
    auto data = load_data(cfg.data, cfg.backbone.input_shape, cfg.backbone.num_classes);
    auto rows = run_ablation(cfg, data, out_dir, &std::cerr);
    double elapsed = seconds_since(start);
    double baseline = rows[0].mean * 100.0, chandiv = rows[1].mean * 100.0;
    std::ofstream report(out_dir / "report.md");
    report << ablation_table(rows, cfg.ablate_seeds) << "\nbaseline mean top-1: " << baseline
           << "%\nchandiv mean top-1: " << chandiv << "%\nruntime: " << elapsed << " s\n";
    bool ok = chandiv >= baseline - 0.3 && elapsed <= 1200.0;
    return {ok ? Status::pass : Status::fail,
            "baseline mean " + num(baseline, 4) + "%, chandiv mean " + num(chandiv, 4) + "% (need >= baseline - 0.3), " +
                num(elapsed, 4) + " s (<= 1200 s); report " + (out_dir / "report.md").string()};
}

Outcome ablation_harness() {
    fs::path out_dir = kScratch / "criterion7";
    fs::remove_all(out_dir);
    CommandOptions opts;
    opts.config = kSource / "configs" / "ablate_synthetic.cfg";
    opts.out = out_dir;
    std::ostringstream out, err;
    int code = cmd_ablate(opts, out, err);
    if (code != 0) return {Status::fail, "cmd_ablate exited " + std::to_string(code) + ": " + err.str()};

    std::ifstream csv(out_dir / "ablation.csv");
    std::string line;
    std::getline(csv, line);
    std::set<std::string> variants;
    bool ok = true;
    std::string detail;
    while (std::getline(csv, line)) {
        std::vector<std::string> fields;
        std::stringstream ss(line);
        for (std::string f; std::getline(ss, f, ',');) fields.push_back(f);
        variants.insert(fields[0]);
        for (std::size_t i = 2; i + 1 < fields.size(); ++i) ok = ok && std::stod(fields[i]) > 0.5;
        detail += fields[0] + "=" + fields.back() + " ";
    }
    std::set<std::string> expected{"none", "gap_only", "attn_only", "positive_corr", "full", "se"};
    ok = ok && variants == expected && fs::exists(out_dir / "ablation.md") && out.str().find("| variant |") == 0;
    return {ok ? Status::pass : Status::fail,
            "4-class synthetic, every seed > 0.5 (2x chance); means: " + detail + "; table emitted"};
}

Outcome loader_fidelity() {
    std::vector<std::uint8_t> bytes(kCifarRecordBytes);
    bytes[0] = 3;
    for (std::size_t i = 1; i < bytes.size(); ++i) bytes[i] = static_cast<std::uint8_t>((i * 37 + 11) % 256);
    fs::create_directories(kScratch);
    fs::path path = kScratch / "fixture.bin";
    std::ofstream(path, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()), 3073);
    auto ds = load_cifar10_file(path);
    bool round_trip = ds.size() == 1 && ds.labels[0] == 3 && serialize_cifar10_record(ds, 0) == bytes;

    std::vector<std::uint8_t> white(kCifarRecordBytes, 255);
    white[0] = 3;
    auto w = load_cifar10_bytes(white);
    bool all_ones = std::all_of(w.images.values().begin(), w.images.values().end(), [](float v) { return v == 1.0f; });

    int rejected = 0;
    for (std::size_t size : {0u, 3072u, 3074u, 6145u}) {
        try {
            load_cifar10_bytes(std::vector<std::uint8_t>(size));
        } catch (const FormatError&) {
            ++rejected;
        }
    }
    bool ok = round_trip && all_ones && rejected == 4;
    return {ok ? Status::pass : Status::fail,
            std::string("3073-byte fixture round-trip byte-exact: ") + (round_trip ? "yes" : "no") +
                ", all-255 record -> 1.0: " + (all_ones ? "yes" : "no") + ", malformed sizes rejected " +
                std::to_string(rejected) + "/4"};
}

Outcome cam_pipeline() {
    BackboneSpec spec;
    spec.stage_channels = {8, 16};
    spec.attention = AttentionKind::chandiv;
    spec.input_shape = {3, 16, 16};
    spec.num_classes = 4;
    double worst = 0;
    std::mt19937_64 rng(1009);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto net = build(spec, seed);
        auto image = oracle::random_array({3, 16, 16}, rng, 0, 1).cast<float>();
        auto cam = compute_cam(net, image);
        auto f = net.features(Tensor<float>(image.reshaped({1, 3, 16, 16}))).value();
        const auto& w = net.classifier_weight().value();
        for (std::size_t y = 0; y < f.dim(2); ++y) {
            for (std::size_t x = 0; x < f.dim(3); ++x) {
                double dot = 0;
                for (std::size_t c = 0; c < f.dim(1); ++c) {
                    dot += static_cast<double>(w.at(cam.target_class, c)) * static_cast<double>(f.at(0, c, y, x));
                }
                worst = std::max(worst, std::abs(dot - cam.raw.at(y, x)));
            }
        }
    }

    fs::create_directories(kScratch);
    auto image = oracle::random_array({3, 16, 16}, rng, 0, 1).cast<float>();
    auto net_a = build(spec, 42);
    auto net_b = build(spec, 42);
    emit_heatmap(compute_cam(net_a, image), image, kScratch / "cam_a.ppm");
    emit_heatmap(compute_cam(net_b, image), image, kScratch / "cam_b.ppm");
    auto a = read_bytes(kScratch / "cam_a.ppm");
    bool same = a == read_bytes(kScratch / "cam_b.ppm");
    bool valid = false;
    try {
        auto ppm = parse_ppm(a);
        valid = ppm.width == 16 && ppm.height == 16 && ppm.max_value == 255;
    } catch (const FormatError&) {
    }
    bool ok = worst < 1e-10 && same && valid;
    return {ok ? Status::pass : Status::fail,
            "raw map vs dot-product oracle max |diff| = " + num(worst) + " (< 1e-10); P6 16x16 max 255 valid: " +
                (valid ? "yes" : "no") + ", byte-deterministic: " + (same ? "yes" : "no")};
}

Outcome determinism() {
    fs::path runs[2] = {kScratch / "criterion10_a", kScratch / "criterion10_b"};
    for (const auto& dir : runs) {
        fs::remove_all(dir);
        CommandOptions opts;
        opts.config = kSource / "configs" / "synthetic_smoke.cfg";
        opts.out = dir;
        opts.seed = 7;
        opts.threads = 1;
        std::ostringstream out, err;
        int code = cmd_train(opts, out, err);
        if (code != 0) return {Status::fail, "cmd_train exited " + std::to_string(code) + ": " + err.str()};
    }
    bool history = read_bytes(runs[0] / "history.csv") == read_bytes(runs[1] / "history.csv");
    bool ckpt = read_bytes(runs[0] / "checkpoint.ckpt") == read_bytes(runs[1] / "checkpoint.ckpt");
    bool nonempty = !read_bytes(runs[0] / "checkpoint.ckpt").empty();
    bool ok = history && ckpt && nonempty;
    return {ok ? Status::pass : Status::fail, std::string("two seeded single-thread runs: history.csv identical: ") +
                                                  (history ? "yes" : "no") + ", checkpoint identical: " +
                                                  (ckpt ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"oracle equivalence", oracle_equivalence},
        {"gradient correctness", gradient_correctness},
        {"normalization invariants", normalization_invariants},
        {"residual identity", residual_identity},
        {"parameter accounting", parameter_accounting},
        {"desk-scale training effect", desk_training},
        {"ablation harness", ablation_harness},
        {"loader fidelity", loader_fidelity},
        {"CAM pipeline", cam_pipeline},
        {"determinism", determinism},
    };

    std::set<std::size_t> selected;
    for (int i = 1; i < argc; ++i) {
        std::string arg = argv[i];
        if (arg == "--only" && i + 1 < argc) {
            std::stringstream ss(argv[++i]);
            for (std::string item; std::getline(ss, item, ',');) selected.insert(std::stoul(item));
        } else {
            std::cerr << "usage: acceptance [--only N[,M...]]\n";
            return 2;
        }
    }

    int failed = 0, skipped = 0, ran = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        if (!selected.empty() && !selected.count(i + 1)) continue;
        ++ran;
        Outcome outcome;
        try {
            outcome = criteria[i].second();
        } catch (const std::exception& e) {
            outcome = {Status::fail, std::string("exception: ") + e.what()};
        }
        const char* tag = outcome.status == Status::pass ? "PASS" : outcome.status == Status::fail ? "FAIL" : "SKIP";
        failed += outcome.status == Status::fail;
        skipped += outcome.status == Status::skip;
        std::cout << "[" << tag << "] criterion " << i + 1 << " (" << criteria[i].first << "): " << outcome.detail
                  << std::endl;
    }
    std::cout << "summary: " << ran - failed - skipped << " passed, " << failed << " failed, " << skipped
              << " skipped" << std::endl;
    if (failed) return 1;
    if (ran > 0 && skipped == ran) return 77;
    return 0;
}

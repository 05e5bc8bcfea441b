#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "chandiv/attention.hpp"
#include "chandiv/cam.hpp"
#include "chandiv/commands.hpp"

namespace py = pybind11;
using namespace chandiv;

namespace {

template <typename T>
using NdArray = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <typename T>
Array<T> to_array(const NdArray<T>& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Array<T>(shape, std::vector<T>(a.data(), a.data() + a.size()));
}

template <typename T>
py::array_t<T> to_numpy(const Array<T>& a) {
    py::array_t<T> out(a.shape());
    std::copy(a.values().begin(), a.values().end(), out.mutable_data());
    return out;
}

CorrelationSign parse_sign(const std::string& s) {
    if (s == "negative") return CorrelationSign::negative;
    if (s == "positive") return CorrelationSign::positive;
    throw ConfigError("unknown correlation sign '" + s + "'");
}

ChanDivParams<double> chandiv_params(const NdArray<double>& kernel, double bias, const std::string& sign,
                                     const std::string& fusion) {
    ChanDivParams<double> p;
    p.transform_kernel = Tensor<double>(Array<double>({1, 1, 1, static_cast<std::size_t>(kernel.size())},
                                                      std::vector<double>(kernel.data(), kernel.data() + kernel.size())));
    p.transform_bias = Tensor<double>(Array<double>({1}, bias));
    p.correlation_sign = parse_sign(sign);
    p.fusion_mode = parse_fusion_mode(fusion);
    return p;
}

CommandOptions options(std::optional<std::filesystem::path> config, std::optional<std::filesystem::path> checkpoint,
                       std::optional<std::filesystem::path> out, std::optional<std::uint64_t> seed,
                       const std::map<std::string, std::string>& overrides) {
    CommandOptions o;
    o.config = std::move(config);
    o.checkpoint = std::move(checkpoint);
    o.out = std::move(out);
    o.seed = seed;
    o.overrides.assign(overrides.begin(), overrides.end());
    return o;
}

py::tuple run(int (*fn)(const CommandOptions&, std::ostream&, std::ostream&), const CommandOptions& opts) {
    std::ostringstream out, err;
    int code;
    {
        py::gil_scoped_release release;
        code = fn(opts, out, err);
    }
    return py::make_tuple(code, out.str(), err.str());
}

py::tuple dataset_tuple(const Dataset& ds) {
    return py::make_tuple(to_numpy(ds.images), py::array_t<int>(ds.labels.size(), ds.labels.data()));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Channel-diversity attention, CNN backbones and training";

    py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
    py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
    py::register_exception<IoError>(m, "IoError", PyExc_OSError);

    m.def(
        "channel_significance",
        [](const NdArray<double>& x) { return to_numpy(channel_significance(Tensor<double>(to_array(x))).value()); },
        py::arg("x"));
    m.def(
        "channel_relation",
        [](const NdArray<double>& x, const std::string& sign) {
            return to_numpy(channel_relation(Tensor<double>(to_array(x)), parse_sign(sign)).value());
        },
        py::arg("x"), py::arg("sign") = "negative");
    m.def(
        "chandiv_forward",
        [](const NdArray<double>& x, const NdArray<double>& kernel, double bias, const std::string& sign,
           const std::string& fusion) {
            auto p = chandiv_params(kernel, bias, sign, fusion);
            return to_numpy(chandiv_forward(Tensor<double>(to_array(x)), p).value());
        },
        py::arg("x"), py::arg("kernel"), py::arg("bias") = 0.0, py::arg("sign") = "negative",
        py::arg("fusion") = "concat");
    m.def(
        "se_forward",
        [](const NdArray<double>& x, const NdArray<double>& w1, const NdArray<double>& w2) {
            SEParams<double> p;
            p.w1 = Tensor<double>(to_array(w1));
            p.w2 = Tensor<double>(to_array(w2));
            return to_numpy(se_forward(Tensor<double>(to_array(x)), p).value());
        },
        py::arg("x"), py::arg("w1"), py::arg("w2"));

    py::class_<RunConfig>(m, "Config")
        .def(py::init<>())
        .def_static("from_text", [](const std::string& text) { return parse_config(text); })
        .def_static("from_file", &load_config)
        .def("set", &RunConfig::set, py::arg("key"), py::arg("value"))
        .def("validate", &RunConfig::validate)
        .def("to_text", &RunConfig::to_text)
        .def_readwrite("seed", &RunConfig::seed)
        .def_static("keys", &config_keys);

    py::class_<Network>(m, "Network")
        .def(
            "forward",
            [](Network& net, const NdArray<float>& batch) {
                return to_numpy(net.forward(Tensor<float>(to_array(batch))).value());
            },
            py::arg("batch"))
        .def("layer_names", &Network::layer_names)
        .def("trainable_count", &Network::trainable_count)
        .def("report", [](const Network& net) {
            py::list rows;
            for (const auto& r : param_count(net).rows) {
                rows.append(py::dict(py::arg("name") = r.name, py::arg("kind") = r.kind, py::arg("params") = r.params,
                                     py::arg("macs") = r.macs));
            }
            return rows;
        });

    m.def(
        "build_network", [](const RunConfig& cfg, std::uint64_t seed) { return build(cfg.backbone, seed); },
        py::arg("config"), py::arg("seed") = 0);
    m.def(
        "load_checkpoint",
        [](const std::filesystem::path& path, const RunConfig& cfg) {
            auto model = load_checkpoint(path, cfg.backbone);
            return py::make_tuple(std::move(model.net), model.mean, model.std);
        },
        py::arg("path"), py::arg("config"));

    m.def(
        "compute_cam",
        [](Network& net, const NdArray<float>& image, std::optional<std::size_t> cls) {
            auto cam = compute_cam(net, to_array(image), cls);
            return py::dict(py::arg("values") = to_numpy(cam.values), py::arg("raw") = to_numpy(cam.raw),
                            py::arg("predicted_class") = cam.predicted_class,
                            py::arg("target_class") = cam.target_class);
        },
        py::arg("network"), py::arg("image"), py::arg("cls") = py::none());

    m.def(
        "load_cifar10_bytes",
        [](const py::bytes& data) {
            std::string_view view = data;
            return dataset_tuple(load_cifar10_bytes(
                std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(view.data()), view.size())));
        },
        py::arg("data"));
    m.def(
        "synth_dataset",
        [](std::uint64_t seed, std::size_t n, std::size_t classes, const Shape& shape) {
            return dataset_tuple(synth_dataset(seed, n, classes, shape));
        },
        py::arg("seed"), py::arg("n"), py::arg("classes"), py::arg("shape"));

    using Path = std::optional<std::filesystem::path>;
    using Overrides = std::map<std::string, std::string>;
    m.def(
        "train",
        [](const std::filesystem::path& config, Path out, std::optional<std::uint64_t> seed, const Overrides& set) {
            return run(cmd_train, options(config, std::nullopt, std::move(out), seed, set));
        },
        py::arg("config"), py::arg("out") = py::none(), py::arg("seed") = py::none(), py::arg("set") = Overrides{});
    m.def(
        "evaluate",
        [](const std::filesystem::path& checkpoint, Path config, const Overrides& set) {
            return run(cmd_eval, options(std::move(config), checkpoint, std::nullopt, std::nullopt, set));
        },
        py::arg("checkpoint"), py::arg("config") = py::none(), py::arg("set") = Overrides{});
    m.def(
        "ablate",
        [](const std::filesystem::path& config, Path out, const Overrides& set) {
            return run(cmd_ablate, options(config, std::nullopt, std::move(out), std::nullopt, set));
        },
        py::arg("config"), py::arg("out") = py::none(), py::arg("set") = Overrides{});
    m.def(
        "inspect",
        [](const std::filesystem::path& config, const Overrides& set) {
            return run(cmd_inspect, options(config, std::nullopt, std::nullopt, std::nullopt, set));
        },
        py::arg("config"), py::arg("set") = Overrides{});
}

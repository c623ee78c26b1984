#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>
#include <memory>

#include "cloudseg/architecture.hpp"
#include "cloudseg/errors.hpp"
#include "cloudseg/metrics.hpp"
#include "cloudseg/network.hpp"
#include "cloudseg/raster_io.hpp"
#include "cloudseg/segmenter.hpp"
#include "cloudseg/synth.hpp"
#include "cloudseg/weights_io.hpp"

namespace py = pybind11;
using namespace cloudseg;

namespace {

using Net = Network<float>;

// Raster samples as a (bands, height, width) array that owns a copy.
py::array raster_to_array(const RasterScene& scene)
{
    const std::vector<py::ssize_t> shape{scene.bands, scene.height, scene.width};
    return std::visit(
        [&](const auto& vec) -> py::array {
            using S = typename std::decay_t<decltype(vec)>::value_type;
            py::array_t<S> out(shape);
            std::memcpy(out.mutable_data(), vec.data(), vec.size() * sizeof(S));
            return out;
        },
        scene.samples);
}

template <typename S>
RasterScene fill_raster(const py::array& array, DType dtype, const std::string& tag)
{
    const auto a = py::array_t<S, py::array::c_style | py::array::forcecast>::ensure(array);
    if (!a) {
        throw ShapeError("raster array could not be converted");
    }
    std::vector<py::ssize_t> dims(a.shape(), a.shape() + a.ndim());
    if (dims.size() == 2) {
        dims.insert(dims.begin(), 1);
    }
    if (dims.size() != 3) {
        throw ShapeError("raster array must be (height, width) or (bands, height, width)");
    }
    auto scene = RasterScene::zeros(static_cast<std::uint32_t>(dims[2]), static_cast<std::uint32_t>(dims[1]),
                                    static_cast<std::uint16_t>(dims[0]), dtype, tag);
    auto dst = scene.template as<S>();
    std::memcpy(dst.data(), a.data(), dst.size() * sizeof(S));
    scene.validate();
    return scene;
}

RasterScene array_to_raster(const py::array& array, const std::string& tag)
{
    const auto dtype = array.dtype();
    if (dtype.is(py::dtype::of<std::uint8_t>())) {
        return fill_raster<std::uint8_t>(array, DType::U8, tag);
    }
    if (dtype.is(py::dtype::of<std::uint16_t>())) {
        return fill_raster<std::uint16_t>(array, DType::U16, tag);
    }
    if (dtype.is(py::dtype::of<float>())) {
        return fill_raster<float>(array, DType::F32, tag);
    }
    throw ConfigError("raster dtype must be uint8, uint16 or float32");
}

Tensor array_to_tensor(const py::array_t<float, py::array::c_style | py::array::forcecast>& a)
{
    if (a.ndim() != 4) {
        throw ShapeError("batch must be a 4-d (N, C, H, W) array");
    }
    const Shape shape{a.shape(0), a.shape(1), a.shape(2), a.shape(3)};
    return Tensor(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

py::array_t<float> tensor_to_array(const Tensor& t)
{
    const auto& s = t.shape();
    py::array_t<float> out(std::vector<py::ssize_t>{s.n, s.c, s.h, s.w});
    const auto v = t.values();
    std::memcpy(out.mutable_data(), v.data(), v.size() * sizeof(float));
    return out;
}

py::dict metrics_dict(const MetricsRow& row)
{
    py::dict d;
    d["method"] = row.method;
    d["acc"] = row.acc;
    d["prec"] = row.prec;
    d["sn"] = row.sn;
    d["sp"] = row.sp;
    return d;
}

} // namespace

PYBIND11_MODULE(_cloudseg, m)
{
    m.doc() = "Cloud segmentation of multispectral rasters";

    auto base = py::register_exception<Error>(m, "CloudsegError", PyExc_RuntimeError);
    py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
    py::register_exception<IoError>(m, "IoError", base.ptr());
    py::register_exception<FormatError>(m, "FormatError", base.ptr());
    py::register_exception<NumericError>(m, "NumericError", base.ptr());
    py::register_exception<GenerationError>(m, "GenerationError", base.ptr());

    m.def(
        "read_msr",
        [](const std::filesystem::path& path) {
            const auto scene = read_msr(path);
            return py::make_tuple(raster_to_array(scene), scene.tag);
        },
        py::arg("path"), "Reads an MSR1 file; returns (array of shape (bands, h, w), tag).");
    m.def(
        "write_msr",
        [](const py::array& array, const std::filesystem::path& path, const std::string& tag) {
            write_msr(array_to_raster(array, tag), path);
        },
        py::arg("array"), py::arg("path"), py::arg("tag") = "");

    m.def(
        "generate_scene",
        [](std::uint64_t seed, std::uint64_t index, std::uint32_t width, std::uint32_t height) {
            SynthConfig cfg;
            cfg.seed = seed;
            cfg.width = width;
            cfg.height = height;
            const double scale = std::min(width, height) / 64.0;
            cfg.min_radius = std::max(2.0, cfg.min_radius * scale);
            cfg.max_radius = std::max(cfg.min_radius + 1.0, cfg.max_radius * scale);
            const auto s = generate_scene(cfg, index);
            return py::make_tuple(raster_to_array(s.scene), raster_to_array(s.mask), s.cloud_fraction);
        },
        py::arg("seed"), py::arg("index"), py::arg("width") = 64, py::arg("height") = 64,
        "Returns (scene uint16 (4, h, w), mask uint8 (1, h, w), cloud fraction).");

    m.def(
        "plan_windows",
        [](std::uint32_t width, std::uint32_t height, std::uint32_t window, std::uint32_t overlap) {
            const auto plan = plan_windows(width, height, window, overlap);
            return py::make_tuple(plan.x_offsets, plan.y_offsets);
        },
        py::arg("width"), py::arg("height"), py::arg("window") = 512, py::arg("overlap") = 50);

    m.def(
        "compute_metrics",
        [](std::uint64_t tp, std::uint64_t fp, std::uint64_t fn, std::uint64_t tn, const std::string& method) {
            return metrics_dict(compute_metrics(ConfusionMatrix{tp, fp, fn, tn}, method));
        },
        py::arg("tp"), py::arg("fp"), py::arg("fn"), py::arg("tn"), py::arg("method") = "proposed");
    m.def(
        "format_report",
        [](const std::string& method, double acc, double prec, double sn, double sp) {
            return format_report({MetricsRow{method, acc, prec, sn, sp}});
        },
        py::arg("method"), py::arg("acc"), py::arg("prec"), py::arg("sn"), py::arg("sp"));

    py::class_<Net, std::unique_ptr<Net>>(m, "Network")
        .def(py::init([](const std::string& arch, std::uint64_t seed) {
                 return std::make_unique<Net>(Net::build(load_architecture(arch), seed));
             }),
             py::arg("arch") = "builtin:default", py::arg("seed") = 0)
        .def_static(
            "load",
            [](const std::filesystem::path& weights, const std::string& arch) {
                auto net = std::make_unique<Net>(Net::build(load_architecture(arch), 0));
                net->import_weights(read_cpw(weights));
                return net;
            },
            py::arg("weights"), py::arg("arch") = "builtin:default")
        .def("save", [](const Net& net, const std::filesystem::path& path) { write_cpw(net.export_weights(), path); })
        .def("count_params", &Net::count_params)
        .def_property_readonly("required_multiple", &Net::required_multiple)
        .def(
            "infer",
            [](const Net& net, const py::array_t<float, py::array::c_style | py::array::forcecast>& batch) {
                const Tensor input = array_to_tensor(batch);
                Tensor out;
                {
                    py::gil_scoped_release release;
                    out = net.infer(input);
                }
                return tensor_to_array(out);
            },
            py::arg("batch"), "Inference-mode probabilities for an (N, 4, H, W) float batch.")
        .def(
            "segment",
            [](const Net& net, const py::array& scene, std::uint32_t window, std::uint32_t overlap, double threshold,
               unsigned threads) {
                const RasterScene raster = array_to_raster(scene, "");
                SegmentOptions opt;
                opt.window = window;
                opt.overlap = overlap;
                opt.threshold = threshold;
                opt.threads = threads;
                SegmentResult result;
                {
                    py::gil_scoped_release release;
                    result = segment_scene(raster, net, opt);
                }
                return py::make_tuple(raster_to_array(result.mask), raster_to_array(canvas_to_raster(result.canvas)));
            },
            py::arg("scene"), py::arg("window") = 512, py::arg("overlap") = 50, py::arg("threshold") = 0.5,
            py::arg("threads") = 1, "Sliding-window segmentation; returns (mask uint8, probability float32).");
}

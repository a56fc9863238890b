#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "eqreg/checkpoint.hpp"
#include "eqreg/cli.hpp"
#include "eqreg/data.hpp"
#include "eqreg/equivariance.hpp"
#include "eqreg/metrics.hpp"
#include "eqreg/training.hpp"

namespace py = pybind11;
using namespace eqreg;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using MaskArray = py::array_t<bool, py::array::c_style | py::array::forcecast>;

DenseMap map_from_numpy(const Array& a, Semantics s, std::optional<MaskArray> mask) {
  if (a.ndim() != 2 && a.ndim() != 3) throw py::value_error("expected an (H, W) or (H, W, C) array");
  const int h = static_cast<int>(a.shape(0));
  const int w = static_cast<int>(a.shape(1));
  const int c = a.ndim() == 3 ? static_cast<int>(a.shape(2)) : 1;
  DenseMap m(h, w, c, s);
  std::copy(a.data(), a.data() + a.size(), m.data());
  if (mask) {
    if (mask->ndim() != 2 || mask->shape(0) != h || mask->shape(1) != w) {
      throw py::value_error("mask must be (H, W)");
    }
    std::vector<std::uint8_t> v(mask->data(), mask->data() + mask->size());
    m.set_mask(std::move(v));
  }
  return m;
}

Array values_of(const DenseMap& m) {
  Array a({m.height(), m.width(), m.channels()});
  std::copy(m.data(), m.data() + m.size(), a.mutable_data());
  return a;
}

MaskArray mask_of(const DenseMap& m) {
  MaskArray a({m.height(), m.width()});
  bool* d = a.mutable_data();
  for (int p = 0; p < m.pixels(); ++p) d[p] = m.valid(p);
  return a;
}

PredictorFn net_fn(const PredictorNet& net, Task task) {
  return [&net, task](const DenseMap& x) { return predict_task(net, task, x); };
}

py::dict eqerr_dict(const EqErrStats& s) {
  py::dict d;
  d["n_pairs"] = s.n_pairs;
  d["skipped"] = s.skipped;
  d["mean"] = s.mean;
  d["median"] = s.median;
  d["q1"] = s.q1;
  d["q3"] = s.q3;
  d["min"] = s.min;
  d["max"] = s.max;
  d["reference_absrel"] = s.reference_absrel;
  d["samples"] = s.samples;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Crop-equivariant averaging, equivariant loss, metrics and the small predictor network";

  py::register_exception<Error>(m, "EqregError", PyExc_RuntimeError);

  py::enum_<Semantics>(m, "Semantics")
      .value("RGB", Semantics::Rgb)
      .value("DEPTH", Semantics::Depth)
      .value("DISPARITY", Semantics::Disparity)
      .value("NORMAL", Semantics::Normal)
      .value("EDGE", Semantics::Edge)
      .value("FEATURE", Semantics::Feature)
      .value("WEIGHT", Semantics::Weight);

  py::class_<DenseMap>(m, "DenseMap")
      .def(py::init(&map_from_numpy), py::arg("values"), py::arg("semantics") = Semantics::Feature,
           py::arg("mask") = py::none())
      .def_property_readonly("height", &DenseMap::height)
      .def_property_readonly("width", &DenseMap::width)
      .def_property_readonly("channels", &DenseMap::channels)
      .def_property("semantics", &DenseMap::semantics, &DenseMap::set_semantics)
      .def_property_readonly("values", &values_of, "Copy of the values as (H, W, C)")
      .def_property_readonly("mask", &mask_of, "Copy of the validity mask as (H, W) bool")
      .def("valid_count", &DenseMap::valid_count)
      .def("__eq__", [](const DenseMap& a, const DenseMap& b) { return a == b; })
      .def("__repr__", [](const DenseMap& d) {
        std::ostringstream os;
        os << "DenseMap(" << d.height() << "x" << d.width() << "x" << d.channels() << ", "
           << to_string(d.semantics()) << ")";
        return os.str();
      });

  py::enum_<Boundary>(m, "Boundary").value("ZERO", Boundary::Zero).value("WRAP", Boundary::Wrap);

  py::class_<CropTransform>(m, "CropTransform")
      .def(py::init([](double y0, double x0, double win_h, double win_w, int out_h, int out_w) {
             CropTransform t;
             t.y0 = y0;
             t.x0 = x0;
             t.win_h = win_h;
             t.win_w = win_w;
             t.out_h = out_h;
             t.out_w = out_w;
             t.check();
             return t;
           }),
           py::arg("y0"), py::arg("x0"), py::arg("win_h"), py::arg("win_w"), py::arg("out_h"),
           py::arg("out_w"))
      .def_static("identity", &CropTransform::identity)
      .def_static("translation", &CropTransform::translation, py::arg("h"), py::arg("w"),
                  py::arg("dy"), py::arg("dx"), py::arg("boundary") = Boundary::Zero)
      .def_readwrite("y0", &CropTransform::y0)
      .def_readwrite("x0", &CropTransform::x0)
      .def_readwrite("win_h", &CropTransform::win_h)
      .def_readwrite("win_w", &CropTransform::win_w)
      .def_readwrite("out_h", &CropTransform::out_h)
      .def_readwrite("out_w", &CropTransform::out_w)
      .def_readwrite("boundary", &CropTransform::boundary)
      .def("downscaled", &CropTransform::downscaled)
      .def("is_integer_translation", &CropTransform::is_integer_translation);

  py::class_<CropSampler>(m, "CropSampler")
      .def(py::init([](double scale_lo, double scale_hi, double aspect_lo, double aspect_hi,
                       double pad_frac, int out_h, int out_w, bool jitter) {
             CropSampler s;
             s.scale_lo = scale_lo;
             s.scale_hi = scale_hi;
             s.aspect_lo = aspect_lo;
             s.aspect_hi = aspect_hi;
             s.pad_frac = pad_frac;
             s.out_h = out_h;
             s.out_w = out_w;
             if (!jitter) s.jitter = JitterRanges{0, 0, 0, 0};
             s.check();
             return s;
           }),
           py::arg("scale_lo") = 0.4, py::arg("scale_hi") = 1.0, py::arg("aspect_lo") = 0.75,
           py::arg("aspect_hi") = 4.0 / 3.0, py::arg("pad_frac") = 0.2, py::arg("out_h") = 64,
           py::arg("out_w") = 64, py::arg("jitter") = true)
      .def_readwrite("scale_lo", &CropSampler::scale_lo)
      .def_readwrite("scale_hi", &CropSampler::scale_hi)
      .def_readwrite("aspect_lo", &CropSampler::aspect_lo)
      .def_readwrite("aspect_hi", &CropSampler::aspect_hi)
      .def_readwrite("pad_frac", &CropSampler::pad_frac)
      .def_readwrite("out_h", &CropSampler::out_h)
      .def_readwrite("out_w", &CropSampler::out_w);

  py::class_<RandomState>(m, "RandomState")
      .def(py::init<std::uint64_t>(), py::arg("seed") = 0)
      .def("uniform", py::overload_cast<>(&RandomState::uniform));

  m.def("sample_transform", &sample_transform, py::arg("sampler"), py::arg("src_h"),
        py::arg("src_w"), py::arg("rng"));
  m.def("apply", &apply, py::arg("t"), py::arg("src"));
  m.def(
      "inverse_splat",
      [](const CropTransform& t, const DenseMap& crop, const DenseMap& window, int h, int w) {
        SplatResult r = inverse_splat(t, crop, window, h, w);
        return py::make_tuple(r.accum, r.weights);
      },
      py::arg("t"), py::arg("crop"), py::arg("window"), py::arg("src_h"), py::arg("src_w"));
  m.def("compose", &compose, py::arg("outer"), py::arg("inner"));
  m.def("cosine_window", &cosine_window, py::arg("out_h"), py::arg("out_w"),
        py::arg("margin_frac") = 0.125);

  py::class_<EquivariantAverage>(m, "EquivariantAverage")
      .def_readonly("mean", &EquivariantAverage::mean)
      .def_readonly("weight_total", &EquivariantAverage::weight_total)
      .def_readonly("transforms", &EquivariantAverage::transforms)
      .def_readonly("crops", &EquivariantAverage::crops);

  py::class_<LinearPredictorHead>(m, "LinearPredictorHead")
      .def(py::init<int>(), py::arg("channels"))
      .def_property_readonly("channels", &LinearPredictorHead::channels)
      .def_property(
          "weights",
          [](const LinearPredictorHead& h) {
            auto w = h.weights();
            return std::vector<double>(w.begin(), w.end());
          },
          [](LinearPredictorHead& h, const std::vector<double>& v) {
            if (v.size() != h.weights().size()) throw py::value_error("wrong number of weights");
            std::copy(v.begin(), v.end(), h.weights().begin());
          });

  m.def(
      "equivariant_average",
      [](const std::vector<DenseMap>& outputs, const std::vector<CropTransform>& ts,
         const DenseMap& window, int h, int w) { return equivariant_average(outputs, ts, window, h, w); },
      py::arg("crop_outputs"), py::arg("transforms"), py::arg("window"), py::arg("src_h"),
      py::arg("src_w"));
  m.def(
      "equivariant_loss",
      [](const std::vector<DenseMap>& outputs, const std::vector<CropTransform>& ts,
         const EquivariantAverage& avg, const LinearPredictorHead& head) {
        const EqLossResult r = equivariant_loss(outputs, ts, avg, head);
        py::dict d;
        d["value"] = r.value;
        d["per_crop"] = r.per_crop;
        d["normalizer"] = r.normalizer;
        d["normalizer_clamped"] = r.normalizer_clamped;
        d["grad_wrt_crop_outputs"] = r.grad_wrt_crop_outputs;
        d["grad_head"] = r.grad_head;
        return d;
      },
      py::arg("crop_outputs"), py::arg("transforms"), py::arg("average"), py::arg("head"));
  m.def(
      "exact_average_discrete",
      [](const PredictorFn& f, const DenseMap& x, const std::vector<CropTransform>& g) {
        return exact_average_discrete(f, x, g);
      },
      py::arg("f"), py::arg("x"), py::arg("group"));

  m.def(
      "lsq_align",
      [](const DenseMap& pred, const DenseMap& ref) {
        const AlignmentCoeffs a = lsq_align(pred, ref);
        return py::make_tuple(a.scale, a.offset);
      },
      py::arg("pred"), py::arg("ref"));
  m.def("disparity_to_depth", &disparity_to_depth);
  m.def("absrel", [](const DenseMap& p, const DenseMap& g) { return absrel(p, g); },
        py::arg("pred_depth"), py::arg("gt_depth"));
  m.def(
      "delta_gt", [](const DenseMap& p, const DenseMap& g, double t) { return delta_gt(p, g, t); },
      py::arg("pred_depth"), py::arg("gt_depth"), py::arg("threshold") = 1.25);
  m.def(
      "angular_error",
      [](const DenseMap& p, const DenseMap& g) {
        const AngularStats s = angular_error(p, g);
        py::dict d;
        d["mean_deg"] = s.mean_deg;
        d["median_deg"] = s.median_deg;
        d["pct_below"] = s.pct_below;
        d["pixels"] = s.pixels;
        return d;
      },
      py::arg("pred_normal"), py::arg("gt_normal"));
  m.def("l1_error", [](const DenseMap& p, const DenseMap& g) { return l1_error(p, g); });
  m.def("eqerr_depth", &eqerr_depth, py::arg("f"), py::arg("x"), py::arg("t1"), py::arg("t2"));
  m.def(
      "eqerr_distribution",
      [](const PredictorFn& f, const DenseMap& x, const CropSampler& s, int n, std::uint64_t seed,
         std::optional<DenseMap> gt_depth) {
        return eqerr_dict(eqerr_distribution(f, x, s, n, seed, gt_depth ? &*gt_depth : nullptr));
      },
      py::arg("f"), py::arg("x"), py::arg("sampler"), py::arg("n_pairs"), py::arg("seed") = 0,
      py::arg("gt_depth") = py::none());

  m.def(
      "gen_scene",
      [](std::uint64_t seed, int h, int w, int complexity) {
        const SceneSample s = gen_scene(seed, h, w, complexity);
        py::dict d;
        d["rgb"] = s.rgb;
        d["depth"] = s.depth;
        d["disparity"] = s.disparity;
        d["normal"] = s.normal;
        d["edge"] = s.edge;
        return d;
      },
      py::arg("seed"), py::arg("height") = 64, py::arg("width") = 64, py::arg("complexity") = 6);
  m.def("read_map", &read_map, py::arg("path"));
  m.def("write_map", &write_map, py::arg("map"), py::arg("path"));

  py::class_<PredictorNet>(m, "PredictorNet")
      .def(py::init([](int depth_blocks, int base_channels, int out_channels, int pos_bands,
                       std::uint64_t seed) {
             Architecture a;
             a.depth_blocks = depth_blocks;
             a.base_channels = base_channels;
             a.out_channels = out_channels;
             a.pos_bands = pos_bands;
             a.check();
             return PredictorNet(a, seed);
           }),
           py::arg("depth_blocks") = 3, py::arg("base_channels") = 16, py::arg("out_channels") = 1,
           py::arg("pos_bands") = 0, py::arg("seed") = 0)
      .def_property_readonly("architecture",
                             [](const PredictorNet& n) { return n.architecture().describe(); })
      .def_property_readonly("out_channels",
                             [](const PredictorNet& n) { return n.architecture().out_channels; })
      .def_property_readonly("parameter_count", &PredictorNet::parameter_count)
      .def("predict", &PredictorNet::predict, py::arg("x"))
      .def(
          "predict_task",
          [](const PredictorNet& n, const std::string& task, const DenseMap& x) {
            return predict_task(n, parse_task(task), x);
          },
          py::arg("task"), py::arg("x"));

  m.def("load_checkpoint", [](const std::filesystem::path& p) { return load_checkpoint(p).net; },
        py::arg("path"));
  m.def(
      "predict_tta",
      [](const PredictorFn& f, const DenseMap& x, const CropSampler& s, int crops, std::uint64_t seed) {
        RandomState rng(seed);
        return predict_tta(f, x, s, crops, rng);
      },
      py::arg("f"), py::arg("x"), py::arg("sampler"), py::arg("crops") = 3, py::arg("seed") = 0);
  m.def(
      "predict_tta",
      [](const PredictorNet& net, const DenseMap& x, const CropSampler& s, int crops,
         std::uint64_t seed, const std::string& task) {
        RandomState rng(seed);
        return predict_tta(net_fn(net, parse_task(task)), x, s, crops, rng);
      },
      py::arg("net"), py::arg("x"), py::arg("sampler"), py::arg("crops") = 3, py::arg("seed") = 0,
      py::arg("task") = "depth");

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = run_cli(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs a subcommand; returns (exit_code, stdout, stderr)");
}

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "diffsal/commands.hpp"
#include "diffsal/training.hpp"

namespace py = pybind11;
using namespace diffsal;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape s(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(s), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> s(t.shape().begin(), t.shape().end());
  Array out(s);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

metrics::FixationSet to_fixations(const std::vector<std::pair<int64_t, int64_t>>& pts) {
  metrics::FixationSet f;
  for (const auto& [r, c] : pts) f.push_back({r, c});
  return f;
}

std::vector<std::pair<int64_t, int64_t>> from_fixations(const metrics::FixationSet& f) {
  std::vector<std::pair<int64_t, int64_t>> out;
  for (const auto& x : f) out.emplace_back(x.row, x.col);
  return out;
}

audio::Waveform to_waveform(const Array& samples, int sample_rate) {
  if (samples.ndim() != 1) throw std::invalid_argument("waveform must be one-dimensional");
  audio::Waveform w;
  w.sample_rate = sample_rate;
  w.samples.assign(samples.data(), samples.data() + samples.size());
  return w;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);

  py::class_<RunConfig>(m, "Config")
      .def(py::init<>())
      .def(py::init([](const std::map<std::string, std::string>& kv) {
             RunConfig c;
             for (const auto& [k, v] : kv) c.set(k, v);
             return c;
           }),
           py::arg("values"))
      .def("set", &RunConfig::set, py::arg("key"), py::arg("value"))
      .def("get", &RunConfig::get, py::arg("key"))
      .def("__getitem__", &RunConfig::get)
      .def("__setitem__", &RunConfig::set)
      .def("load_file", &RunConfig::load_file, py::arg("path"))
      .def("load_text", &RunConfig::load_text, py::arg("text"), py::arg("origin") = "<text>")
      .def("dump", &RunConfig::dump)
      .def("validate", &RunConfig::validate)
      .def_static("keys", &RunConfig::keys);

  m.def("cc", [](const Array& p, const Array& q) { return metrics::cc(to_tensor(p), to_tensor(q)); });
  m.def("sim", [](const Array& p, const Array& q) { return metrics::sim(to_tensor(p), to_tensor(q)); });
  m.def("kl_div", [](const Array& p, const Array& q) { return metrics::kl_div(to_tensor(p), to_tensor(q)); },
        "KL(q || p) of the normalized maps; p is the prediction.");
  m.def("nss", [](const Array& p, const std::vector<std::pair<int64_t, int64_t>>& fix) {
    return metrics::nss(to_tensor(p), to_fixations(fix));
  });
  m.def("auc_judd", [](const Array& p, const std::vector<std::pair<int64_t, int64_t>>& fix) {
    return metrics::auc_judd(to_tensor(p), to_fixations(fix));
  });

  m.def("cosine_alpha_bar", [](int64_t T) {
    const auto s = diffusion::cosine_schedule(T);
    return Array(static_cast<py::ssize_t>(s.alpha_bar.size()), s.alpha_bar.data());
  }, py::arg("T"));
  m.def("q_sample", [](const Array& x0, int64_t t, const Array& eps, int64_t T) {
    return to_array(diffusion::q_sample(to_tensor(x0), t, to_tensor(eps), diffusion::cosine_schedule(T)));
  }, py::arg("x0"), py::arg("t"), py::arg("eps"), py::arg("T") = 1000);

  m.def("log_mel_slices", [](const Array& samples, const RunConfig& cfg) {
    audio::AudioConfig ac = cfg.audio;
    return to_array(audio::frontend(to_waveform(samples, ac.sample_rate), ac).slices);
  }, py::arg("samples"), py::arg("config") = RunConfig{});

  m.def("generate", [](const RunConfig& cfg) {
    synth::SceneConfig sc = cfg.scene;
    sc.seed = cfg.seed;
    const synth::SceneSample s = synth::generate(sc);
    py::dict d;
    d["clip"] = to_array(s.clip);
    d["waveform"] = Array(static_cast<py::ssize_t>(s.waveform.samples.size()), s.waveform.samples.data());
    d["sample_rate"] = s.waveform.sample_rate;
    d["gt"] = to_array(s.gt);
    d["fixations"] = from_fixations(s.fixations);
    d["sounding"] = s.sounding;
    return d;
  }, py::arg("config"), "One synthetic scene, seeded by config.seed.");

  m.def("synth", [](const RunConfig& cfg) {
    py::gil_scoped_release nogil;
    return cli::cmd_synth(cfg).size();
  }, py::arg("config"), "Writes config.dataset_size clips under config.out; returns the count.");
  m.def("train", [](const RunConfig& cfg, const std::string& data) {
    std::vector<double> losses;
    {
      py::gil_scoped_release nogil;
      for (const auto& r : cli::cmd_train(cfg, data).log) losses.push_back(r.loss);
    }
    return losses;
  }, py::arg("config"), py::arg("data"), "Trains into config.out; returns per-step losses.");
  m.def("sample", [](const RunConfig& cfg, const std::string& checkpoint, const std::string& data) {
    py::gil_scoped_release nogil;
    return cli::cmd_sample(cfg, checkpoint, data);
  }, py::arg("config"), py::arg("checkpoint"), py::arg("data"));
  m.def("evaluate", [](const RunConfig& cfg, const std::string& pred_dir, const std::string& data) {
    metrics::MetricTable t;
    {
      py::gil_scoped_release nogil;
      t = cli::cmd_eval(cfg, pred_dir, data);
    }
    py::list rows;
    std::vector<metrics::MetricRow> all = t.rows;
    all.push_back(t.mean);
    for (const auto& r : all) {
      py::dict d;
      d["sample"] = r.sample;
      d["cc"] = r.cc;
      d["nss"] = r.nss;
      d["aucj"] = r.aucj;
      d["sim"] = r.sim;
      d["kl"] = r.kl;
      rows.append(d);
    }
    return rows;
  }, py::arg("config"), py::arg("pred_dir"), py::arg("data"), "Per-sample metric rows, the last one named mean.");

  m.def("read_pgm", [](const std::string& path) { return to_array(metrics::read_pgm(path)); });
}

#include "bq2/codebooks.hpp"
#include "bq2/errors.hpp"
#include "bq2/eval.hpp"
#include "bq2/numeric.hpp"
#include "bq2/quantizers.hpp"
#include "cli.hpp"

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

namespace py = pybind11;
using namespace bq2;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

std::vector<float> to_vector(const FloatArray& a) {
  if (a.ndim() != 1) throw ShapeError("expected a 1-d array");
  return {a.data(), a.data() + a.size()};
}

py::array_t<float> to_array(const std::vector<float>& v) { return py::array_t<float>(static_cast<py::ssize_t>(v.size()), v.data()); }

std::vector<int> tokens_of(const py::object& obj) {
  if (py::isinstance<py::str>(obj)) return encode_text(obj.cast<std::string>());
  if (py::isinstance<py::bytes>(obj)) return encode_text(obj.cast<std::string>());
  return obj.cast<std::vector<int>>();
}

template <class E>
void bind_error(py::module_& m, const char* name, py::handle base) {
  py::register_exception<E>(m, name, base);
}

}  // namespace

PYBIND11_MODULE(_bq2, m) {
  m.doc() = "Extreme 2-bit quantization toolkit for a toy decoder-only transformer";

  static py::exception<Error> error(m, "Error", PyExc_RuntimeError);
  bind_error<ConfigError>(m, "ConfigError", error);
  bind_error<InputError>(m, "InputError", error);
  bind_error<ShapeError>(m, "ShapeError", error);
  bind_error<NotPsdError>(m, "NotPsdError", error);
  bind_error<StepSizeError>(m, "StepSizeError", error);
  bind_error<FormatError>(m, "FormatError", error);
  bind_error<CalibrationError>(m, "CalibrationError", error);
  bind_error<RotationError>(m, "RotationError", error);
  bind_error<DivergenceError>(m, "DivergenceError", error);
  bind_error<QuantizationError>(m, "QuantizationError", error);
  bind_error<ManifestError>(m, "ManifestError", error);
  bind_error<TaskFormatError>(m, "TaskFormatError", error);
  bind_error<ReportError>(m, "ReportError", error);
  bind_error<TrainingError>(m, "TrainingError", error);

  m.def(
      "ldl_decompose",
      [](const MatrixD& h) {
        LdlFactors f = ldl_decompose(h);
        return py::make_tuple(f.L, f.D);
      },
      py::arg("h"), "Returns (L, D) with H = L diag(D) L^T and L unit lower-triangular.");
  m.def(
      "hadamard_transform", [](const FloatArray& x, std::optional<std::uint64_t> seed) { return to_array(hadamard_transform(to_vector(x), seed)); },
      py::arg("x"), py::arg("seed") = py::none());
  m.def(
      "inverse_hadamard_transform",
      [](const FloatArray& y, std::optional<std::uint64_t> seed) { return to_array(inverse_hadamard_transform(to_vector(y), seed)); },
      py::arg("y"), py::arg("seed") = py::none());
  m.def("hadamard_matrix", &hadamard_matrix, py::arg("n"), py::arg("seed") = py::none());
  m.def("e8_nearest_point", &e8_nearest_point, py::arg("x"));
  m.def("is_e8_point", &is_e8_point, py::arg("y"));

  m.def("normalize_score", &normalize_score, py::arg("score"), py::arg("baseline"));
  m.def("ppl_rel_degradation", &ppl_rel_degradation, py::arg("q"), py::arg("base"));
  m.def(
      "account_size",
      [](double code_bytes, double codebook_bytes, double scale_bytes, double fp_bytes, double weight_count, double reference_bytes) {
        const SizeReport r = account_size(SizeInputs{code_bytes, codebook_bytes, scale_bytes, fp_bytes, weight_count, reference_bytes});
        py::dict d;
        d["payload_bytes"] = r.payload_bytes;
        d["total_bytes"] = r.total_bytes;
        d["bpw"] = r.bpw;
        d["compression_ratio"] = r.compression_ratio;
        return d;
      },
      py::kw_only(), py::arg("code_bytes"), py::arg("codebook_bytes") = 0.0, py::arg("scale_bytes") = 0.0, py::arg("fp_bytes") = 0.0,
      py::arg("weight_count"), py::arg("reference_bytes"));

  m.def("encode_text", [](const std::string& s) { return encode_text(s); }, py::arg("text"));
  m.def("decode_tokens", [](const std::vector<int>& t) { return py::bytes(decode_tokens(t)); }, py::arg("tokens"));

  py::class_<Model>(m, "Model")
      .def_static("load", &load_checkpoint, py::arg("path"))
      .def("save", [](const Model& self, const std::filesystem::path& dir) { save_checkpoint(self, dir); }, py::arg("path"))
      .def("weight_hash", &Model::weight_hash)
      .def("forward_logits", [](const Model& self, const py::object& tokens) { return forward_logits(self, tokens_of(tokens)); }, py::arg("tokens"))
      .def(
          "generate",
          [](const Model& self, const py::object& prompt, int n_tokens) {
            return py::bytes(decode_tokens(greedy_generate(*make_inference(self), tokens_of(prompt), n_tokens)));
          },
          py::arg("prompt"), py::arg("n_tokens"))
      .def_property_readonly("d_model", [](const Model& self) { return self.config.d_model; })
      .def_property_readonly("n_layers", [](const Model& self) { return self.config.n_layers; });

  py::class_<QuantizedModel>(m, "QuantizedModel")
      .def_static("load", &load_quantized, py::arg("path"))
      .def("code_hash", &code_hash)
      .def("decompress", &decompress_model)
      .def("method_json", [](const QuantizedModel& self) { return method_to_json(self.method).dump(); })
      .def("proxy_errors", [](const QuantizedModel& self) {
        std::vector<double> out;
        for (const auto& l : self.layers) out.push_back(l.proxy_error);
        return out;
      })
      .def(
          "forward_logits",
          [](const QuantizedModel& self, const py::object& tokens) { return forward_logits(*code_level_model(self), tokens_of(tokens)); },
          py::arg("tokens"));

  m.def("report_json", [](const std::filesystem::path& dir) { return report_to_json(read_report(dir)).dump(); }, py::arg("dir"));

  m.def(
      "run",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = cli::dispatch(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs one command line; returns (exit_code, stdout, stderr).");
}

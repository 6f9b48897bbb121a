#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

#include "evc/bitstream.hpp"
#include "evc/checkpoint.hpp"
#include "evc/codec.hpp"
#include "evc/image_io.hpp"
#include "evc/mask_decay.hpp"
#include "evc/metrics.hpp"

namespace py = pybind11;
using namespace evc;

namespace {

using Model = CodecModel<float>;
using U8Array = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Image to_image(const U8Array& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw py::value_error("expected an HxWx3 uint8 array");
  Image img;
  img.height = static_cast<int>(a.shape(0));
  img.width = static_cast<int>(a.shape(1));
  img.rgb.assign(a.data(), a.data() + a.size());
  return img;
}

U8Array to_array(const Image& img) {
  U8Array out({img.height, img.width, 3});
  std::memcpy(out.mutable_data(), img.rgb.data(), img.rgb.size());
  return out;
}

py::bytes as_bytes(const std::vector<std::uint8_t>& v) {
  return py::bytes(reinterpret_cast<const char*>(v.data()), v.size());
}

std::vector<std::uint8_t> from_bytes(const py::bytes& b) {
  const std::string s = b;
  return {s.begin(), s.end()};
}

RDCurve to_curve(const std::vector<std::pair<double, double>>& pts) {
  RDCurve c;
  for (auto [b, p] : pts) c.push_back({b, p});
  return c;
}

}  // namespace

PYBIND11_MODULE(_evc, m) {
  m.doc() = "Learned image codec with mask-decay pruning";

  py::register_exception<DecodeError>(m, "DecodeError", PyExc_ValueError);
  py::register_exception<MetricError>(m, "MetricError", PyExc_ValueError);

  py::class_<Model>(m, "Model")
      .def_static(
          "build",
          [](const std::string& encoder, const std::string& decoder, int divisor, std::uint64_t seed) {
            return build_model<float>(
                ModelConfig::desk(ChannelScheme::named(encoder), ChannelScheme::named(decoder), divisor), seed);
          },
          py::arg("encoder") = "large", py::arg("decoder") = "large", py::arg("divisor") = 16, py::arg("seed") = 1)
      .def_static("load", [](const std::string& path) { return load_checkpoint<float>(path); })
      .def("save", [](const Model& self, const std::string& path) { save_checkpoint(self, path); })
      .def_property_readonly("rate_count", [](const Model& self) { return self.config.rate_count; })
      .def_property_readonly("encoder_widths", [](const Model& self) { return self.config.encoder.widths; })
      .def_property_readonly("decoder_widths", [](const Model& self) { return self.config.decoder.widths; })
      .def("quant_step", [](const Model& self, int rate) { return self.quant.global(rate); })
      .def("param_counts", [](const Model& self) {
        const auto c = count_params(self);
        return py::dict(py::arg("encoder") = c.encoder, py::arg("decoder") = c.decoder,
                        py::arg("others") = c.others);
      })
      .def("digest", [](const Model& self) { return params_digest(self.params()); })
      .def(
          "compress",
          [](const Model& self, const U8Array& image, int rate) {
            return as_bytes(serialize(compress(self, to_tensor(to_image(image)), rate)));
          },
          py::arg("image"), py::arg("rate") = 0)
      .def("decompress", [](const Model& self, const py::bytes& data) {
        return to_array(from_tensor(decompress(self, parse_bitstream(from_bytes(data)))));
      });

  m.def("psnr", [](const U8Array& a, const U8Array& b) {
    return psnr(to_image(a).rgb, to_image(b).rgb);
  });
  m.def("bpp", &bpp, py::arg("bytes"), py::arg("width"), py::arg("height"));
  m.def("padded_size", [](int w, int h) { return padded_size(w, h); }, py::arg("width"), py::arg("height"));
  m.def(
      "bd_rate",
      [](const std::vector<std::pair<double, double>>& test, const std::vector<std::pair<double, double>>& anchor) {
        return bd_rate(to_curve(test), to_curve(anchor));
      },
      "Curves are lists of (bpp, psnr) pairs.");
  m.def("relative_improvement", &relative_improvement, py::arg("baseline"), py::arg("ours"), py::arg("teacher"));
  m.def(
      "sparsity_loss", [](double x, const std::string& kind) { return sparsity_loss(x, parse_sparsity_kind(kind)); },
      py::arg("x"), py::arg("kind") = "ours");
  m.def(
      "sparsity_grad", [](double x, const std::string& kind) { return sparsity_grad(x, parse_sparsity_kind(kind)); },
      py::arg("x"), py::arg("kind") = "ours");
}

#include <pybind11/pybind11.h>

namespace py = pybind11;

PYBIND11_MODULE(_flowtalk, m) {
    m.doc() = "joint speech/face generation core";
    m.attr("__version__") = "0.1.0";
}

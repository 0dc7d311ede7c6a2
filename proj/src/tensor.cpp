#include "polyssm/tensor.hpp"

namespace polyssm {

std::string to_string(DType dtype) { return dtype == DType::f32 ? "float32" : "float64"; }

DType parse_dtype(const std::string& name) {
    if (name == "float32" || name == "f32" || name == "float") return DType::f32;
    if (name == "float64" || name == "f64" || name == "double") return DType::f64;
    throw std::invalid_argument("unknown dtype '" + name + "' (expected float32 or float64)");
}

std::string to_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

std::size_t normalize_axis(long axis, std::size_t rank) {
    const long r = static_cast<long>(rank);
    const long a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " +
                             std::to_string(rank));
    }
    return static_cast<std::size_t>(a);
}

}  // namespace polyssm

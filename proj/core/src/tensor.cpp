#include "retain/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace retain {

int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d <= 0) throw std::invalid_argument("tensor shape has non-positive extent " + shape_to_string(shape));
        n *= d;
    }
    return n;
}

std::string shape_to_string(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor::Tensor(std::vector<int64_t> shape_in, float fill)
    : shape(std::move(shape_in)), data(static_cast<size_t>(shape_numel(shape)), fill) {}

Tensor Tensor::scalar(float v) {
    Tensor t(std::vector<int64_t>{1});
    t.data[0] = v;
    return t;
}

Tensor Tensor::from(std::vector<int64_t> shape_in, std::vector<float> values) {
    if (shape_numel(shape_in) != static_cast<int64_t>(values.size()))
        throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                    " does not match shape " + shape_to_string(shape_in));
    Tensor t;
    t.shape = std::move(shape_in);
    t.data = std::move(values);
    return t;
}

bool Tensor::all_finite() const {
    for (float v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

std::string Tensor::shape_str() const { return shape_to_string(shape); }

void ensure_finite(const Tensor& t, const char* what) {
    if (!t.all_finite())
        throw std::runtime_error(std::string("non-finite value produced by ") + what);
}

}  // namespace retain

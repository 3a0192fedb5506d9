#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace retain {

// Dense row-major float32 array. Plain value storage; gradients live on
// autograd nodes (ag::Node), not here.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> shape_in, float fill = 0.0f);
    static Tensor scalar(float v);
    static Tensor from(std::vector<int64_t> shape_in, std::vector<float> values);

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    size_t rank() const { return shape.size(); }
    int64_t dim(size_t i) const { return shape.at(i); }

    float& operator[](size_t i) { return data[i]; }
    float operator[](size_t i) const { return data[i]; }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    bool all_finite() const;
    std::string shape_str() const;
};

int64_t shape_numel(const std::vector<int64_t>& shape);
std::string shape_to_string(const std::vector<int64_t>& shape);

// Throws std::runtime_error naming `what` if any element is NaN/Inf.
void ensure_finite(const Tensor& t, const char* what);

}  // namespace retain

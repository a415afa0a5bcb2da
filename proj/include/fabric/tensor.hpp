#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fabric {

using Shape = std::vector<int>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

std::string shape_str(const Shape& shape);
std::size_t numel(const Shape& shape);

/// Dense row-major float32 tensor with value semantics.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> data);

    static Tensor scalar(float v) { return Tensor({1}, std::vector<float>{v}); }

    const Shape& shape() const noexcept { return shape_; }
    int rank() const noexcept { return static_cast<int>(shape_.size()); }
    int dim(int i) const;
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    float* ptr() noexcept { return data_.data(); }
    const float* ptr() const noexcept { return data_.data(); }
    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }
    const std::vector<float>& vec() const noexcept { return data_; }

    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }

    /// Same data, new shape; element counts must agree.
    Tensor reshaped(Shape shape) const;
    void fill(float v);
    bool all_finite() const;

    friend bool operator==(const Tensor& a, const Tensor& b) = default;

private:
    Shape shape_;
    std::vector<float> data_;
};

void require_shape(const Tensor& t, const Shape& expected, const char* what);

/// Stacks equally shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> items);
/// Slice i of the leading axis.
Tensor item(const Tensor& batch, int i);

}  // namespace fabric

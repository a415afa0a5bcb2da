#include "fabric/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace fabric {

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel(shape_) != data_.size()) {
        throw ShapeError("shape " + shape_str(shape_) + " does not match data length " +
                         std::to_string(data_.size()));
    }
}

int Tensor::dim(int i) const {
    if (i < 0) i += rank();
    if (i < 0 || i >= rank()) throw ShapeError("dimension index out of range for " + shape_str(shape_));
    return shape_[static_cast<std::size_t>(i)];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (numel(shape) != data_.size()) {
        throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

void require_shape(const Tensor& t, const Shape& expected, const char* what) {
    if (t.shape() != expected) {
        throw ShapeError(std::string(what) + ": expected shape " + shape_str(expected) + ", got " +
                         shape_str(t.shape()));
    }
}

}  // namespace fabric

namespace fabric {

Tensor stack(std::span<const Tensor> items) {
    if (items.empty()) throw ShapeError("stack: no tensors");
    const Shape& inner = items[0].shape();
    Shape shape{static_cast<int>(items.size())};
    shape.insert(shape.end(), inner.begin(), inner.end());
    Tensor out(shape);
    const std::size_t n = items[0].size();
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (items[i].shape() != inner) {
            throw ShapeError("stack: shape " + shape_str(items[i].shape()) + " differs from " + shape_str(inner));
        }
        std::copy(items[i].data().begin(), items[i].data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * n));
    }
    return out;
}

Tensor item(const Tensor& batch, int i) {
    if (batch.rank() < 1 || i < 0 || i >= batch.dim(0)) {
        throw ShapeError("item: index " + std::to_string(i) + " out of range for " + shape_str(batch.shape()));
    }
    Shape inner(batch.shape().begin() + 1, batch.shape().end());
    if (inner.empty()) inner = {1};
    const std::size_t n = batch.size() / static_cast<std::size_t>(batch.dim(0));
    const auto begin = batch.data().begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(i) * n);
    return Tensor(inner, std::vector<float>(begin, begin + static_cast<std::ptrdiff_t>(n)));
}

}  // namespace fabric

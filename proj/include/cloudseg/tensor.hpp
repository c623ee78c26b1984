#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cloudseg/errors.hpp"

namespace cloudseg {

/// NCHW extent of a dense tensor.
struct Shape {
    std::int64_t n = 0;
    std::int64_t c = 0;
    std::int64_t h = 0;
    std::int64_t w = 0;

    std::int64_t count() const { return n * c * h * w; }
    std::int64_t plane() const { return h * w; }
    bool operator==(const Shape&) const = default;
    std::string str() const
    {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + ","
               + std::to_string(w) + ")";
    }
};

/// Dense 4-D array, row-major with w fastest. A default-constructed tensor is
/// empty; every other tensor has all dims >= 1.
template <typename T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() = default;

    explicit BasicTensor(Shape shape, T fill = T(0)) : shape_(check(shape)), data_(shape.count(), fill) {}

    BasicTensor(Shape shape, std::vector<T> values) : shape_(check(shape)), data_(std::move(values))
    {
        if (static_cast<std::int64_t>(data_.size()) != shape_.count()) {
            throw ShapeError("tensor " + shape_.str() + " needs " + std::to_string(shape_.count())
                             + " values, got " + std::to_string(data_.size()));
        }
    }

    static BasicTensor zeros_like(const BasicTensor& other) { return BasicTensor(other.shape()); }

    const Shape& shape() const { return shape_; }
    std::int64_t n() const { return shape_.n; }
    std::int64_t c() const { return shape_.c; }
    std::int64_t h() const { return shape_.h; }
    std::int64_t w() const { return shape_.w; }
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    std::int64_t index(std::int64_t n, std::int64_t c, std::int64_t y, std::int64_t x) const
    {
        return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
    }
    T& at(std::int64_t n, std::int64_t c, std::int64_t y, std::int64_t x) { return data_[index(n, c, y, x)]; }
    const T& at(std::int64_t n, std::int64_t c, std::int64_t y, std::int64_t x) const
    {
        return data_[index(n, c, y, x)];
    }

    /// Contiguous h*w plane of sample n, channel c.
    std::span<T> plane(std::int64_t n, std::int64_t c)
    {
        return std::span<T>(data_).subspan(static_cast<std::size_t>(index(n, c, 0, 0)),
                                           static_cast<std::size_t>(shape_.plane()));
    }
    std::span<const T> plane(std::int64_t n, std::int64_t c) const
    {
        return std::span<const T>(data_).subspan(static_cast<std::size_t>(index(n, c, 0, 0)),
                                                 static_cast<std::size_t>(shape_.plane()));
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    BasicTensor reshaped(Shape shape) const
    {
        if (shape.count() != shape_.count()) {
            throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
        }
        return BasicTensor(shape, data_);
    }

    template <typename U>
    BasicTensor<U> cast() const
    {
        std::vector<U> out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        return BasicTensor<U>(shape_, std::move(out));
    }

    bool all_finite() const
    {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    bool operator==(const BasicTensor&) const = default;

private:
    static Shape check(Shape s)
    {
        if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) {
            throw ShapeError("tensor dims must be >= 1, got " + s.str());
        }
        return s;
    }

    Shape shape_;
    std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

} // namespace cloudseg

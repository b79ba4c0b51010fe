#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "vinpaint/error.hpp"

namespace vinpaint {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

std::string shape_str(const Shape& shape);

/// Row-major strides for `shape`.
Shape shape_strides(const Shape& shape);

/// Dense, contiguous, row-major tensor. Rank is at least 1; a scalar is shape {1}.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() : shape_{1}, data_(1, T{0}) {}

    explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
        validate_shape(shape_);
        data_.assign(shape_numel(shape_), fill);
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        validate_shape(shape_);
        if (data_.size() != shape_numel(shape_)) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
        }
    }

    static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }

    /// Dimension `axis`; negative values count from the end.
    std::size_t dim(long axis) const { return shape_[normalize_axis(axis)]; }

    std::size_t normalize_axis(long axis) const {
        const long r = static_cast<long>(shape_.size());
        const long a = axis < 0 ? axis + r : axis;
        if (a < 0 || a >= r) {
            throw std::invalid_argument("axis " + std::to_string(axis) + " out of range for rank " +
                                        std::to_string(r));
        }
        return static_cast<std::size_t>(a);
    }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    const std::vector<T>& values() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    T& at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }
    const T& at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        return Tensor<U>(shape_, std::move(out));
    }

    bool operator==(const Tensor& other) const = default;

private:
    static void validate_shape(const Shape& shape) {
        if (shape.empty()) throw ShapeError("tensor rank must be at least 1");
        for (std::size_t d : shape) {
            if (d == 0) throw ShapeError("zero-sized dimension in shape " + shape_str(shape));
        }
    }

    std::size_t offset(std::initializer_list<std::size_t> index) const {
        if (index.size() != shape_.size()) throw std::invalid_argument("index rank mismatch");
        std::size_t off = 0;
        std::size_t axis = 0;
        for (std::size_t i : index) {
            if (i >= shape_[axis]) throw std::out_of_range("tensor index out of range");
            off = off * shape_[axis] + i;
            ++axis;
        }
        return off;
    }

    Shape shape_;
    std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

enum class ResizeMode { bilinear, nearest };

// Functional tensor operations. All are pure; defined for float and double.

template <typename T>
Tensor<T> reshape_view(const Tensor<T>& x, const Shape& new_shape);

/// Element at old multi-index `i` lands at `i` permuted by `axis_order`
/// (output axis k is input axis axis_order[k]).
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axis_order);

/// Resamples the trailing two axes (w, h) of `x` to (out_w, out_h).
/// Bilinear uses half-pixel centers (align-corners = false) with edge clamping.
template <typename T>
Tensor<T> spatial_resize(const Tensor<T>& x, std::size_t out_w, std::size_t out_h,
                         ResizeMode mode = ResizeMode::bilinear);

/// Batched matmul over the trailing two axes; leading batch axes broadcast.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Numerically stable softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, long axis = -1);

/// Multi-head softmax(q kᵀ / sqrt(d/heads)) v; leading axes of q, k, v must agree.
template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               std::size_t heads);

template <typename T>
Tensor<T> concat(const std::vector<const Tensor<T>*>& parts, long axis);

/// Elements [begin, end) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, long axis, std::size_t begin, std::size_t end);

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> operator*(T s, const Tensor<T>& a);

template <typename T>
T max_abs(const Tensor<T>& a);

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

/// Returns the axis order that undoes `order`.
std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& order);

}  // namespace vinpaint

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>

#include "vinpaint/tensor.hpp"

namespace vinpaint {

/// Central-difference gradient of a scalar function:
/// (fn(x + h·e_i) − fn(x − h·e_i)) / 2h for every coordinate i.
template <typename T, typename Fn>
Tensor<T> finite_diff_grad(Fn&& fn, const Tensor<T>& x, T h) {
    if (!(h > T{0})) throw std::invalid_argument("finite difference step must be positive");
    Tensor<T> probe = x;
    Tensor<T> grad(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T orig = probe[i];
        probe[i] = orig + h;
        const T up = static_cast<T>(fn(probe));
        probe[i] = orig - h;
        const T down = static_cast<T>(fn(probe));
        probe[i] = orig;
        grad[i] = (up - down) / (T{2} * h);
    }
    return grad;
}

/// Tensor-wise relative error ‖a − ref‖∞ / ‖ref‖∞. Zero when both are zero.
template <typename T>
T relative_error(const Tensor<T>& a, const Tensor<T>& ref) {
    const T scale = max_abs(ref);
    const T diff = max_abs_diff(a, ref);
    if (scale == T{0}) return diff;
    return diff / scale;
}

}  // namespace vinpaint

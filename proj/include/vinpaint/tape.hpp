#pragma once

// Reverse-mode differentiation over Tensor<T>.
//
// A Tape records every primitive applied to its variables in execution
// order. Each node keeps the closure that produced it, so the whole graph can
// be re-evaluated after leaf values change (`replay`), and the closure that
// maps an output gradient to input gradients (`backward`).

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "vinpaint/tensor.hpp"

namespace vinpaint {

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    const Tensor<T>& value() const { return tape->value(id); }
    const Shape& shape() const { return value().shape(); }
};

template <typename T>
class Tape {
public:
    using Inputs = std::vector<const Tensor<T>*>;
    using ForwardFn = std::function<Tensor<T>(const Inputs&)>;
    /// Returns one gradient per input given the output value and its gradient.
    using BackwardFn = std::function<std::vector<Tensor<T>>(const Inputs&, const Tensor<T>& out,
                                                            const Tensor<T>& grad_out)>;

    struct Node {
        std::string op;
        std::vector<std::size_t> inputs;
        Tensor<T> value;
        ForwardFn forward;
        BackwardFn backward;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    Var<T> leaf(Tensor<T> value, std::string name = "leaf");

    Var<T> record(std::string op, std::vector<Var<T>> inputs, ForwardFn forward, BackwardFn backward);

    const Tensor<T>& value(std::size_t id) const { return node(id).value; }
    const Node& node(std::size_t id) const;
    std::size_t size() const noexcept { return nodes_.size(); }
    bool is_leaf(std::size_t id) const { return !node(id).forward; }

    /// Overwrites a leaf value; dependent nodes are stale until `replay`.
    void set_leaf(std::size_t id, Tensor<T> value);

    /// Recomputes every non-leaf node in recording order. Returns true when
    /// every recomputed output is bit-identical to the stored one.
    bool replay();

private:
    std::deque<Node> nodes_;  // stable addresses: Var::value() references survive later records
};

/// Gradient per leaf id. Leaves that do not influence the output get zeros.
template <typename T>
using GradientMap = std::map<std::size_t, Tensor<T>>;

template <typename T>
GradientMap<T> backward(const Tape<T>& tape, std::size_t output_id, const Tensor<T>& seed_grad);

/// Backward from a scalar (single-element) output with seed 1.
template <typename T>
GradientMap<T> backward(const Var<T>& output);

namespace ag {

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T s);
template <typename T> Var<T> square(Var<T> a);

/// x + bias along the last axis (bias has shape [x.dim(-1)]).
template <typename T> Var<T> add_last(Var<T> x, Var<T> bias);
/// x ⊙ gain along the last axis.
template <typename T> Var<T> mul_last(Var<T> x, Var<T> gain);

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
template <typename T> Var<T> softmax(Var<T> x);
template <typename T> Var<T> reshape(Var<T> x, Shape shape);
template <typename T> Var<T> permute(Var<T> x, std::vector<std::size_t> order);
template <typename T> Var<T> transpose_last(Var<T> x);
template <typename T>
Var<T> spatial_resize(Var<T> x, std::size_t out_w, std::size_t out_h,
                      ResizeMode mode = ResizeMode::bilinear);
/// Zero-mean, unit-variance normalization over the last axis (no affine part).
template <typename T> Var<T> layer_norm(Var<T> x, T eps = T(1e-5));
template <typename T> Var<T> concat(std::vector<Var<T>> parts, long axis);
template <typename T> Var<T> slice(Var<T> x, long axis, std::size_t begin, std::size_t end);
template <typename T> Var<T> sum(Var<T> x);
template <typename T> Var<T> mean(Var<T> x);
template <typename T> Var<T> mse(Var<T> a, Var<T> b);

/// Multi-head scaled dot-product attention composed from the primitives above.
/// q [.., Lq, d], k [.., Lk, d], v [.., Lk, dv]; leading axes must agree.
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads);

}  // namespace ag

/// Sums `grad` over broadcast leading axes so it matches `target`.
template <typename T>
Tensor<T> sum_to_shape(const Tensor<T>& grad, const Shape& target);

}  // namespace vinpaint

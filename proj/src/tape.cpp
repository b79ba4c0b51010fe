#include "vinpaint/tape.hpp"

#include <cmath>
#include <algorithm>
#include <numeric>
#include <optional>

#include "vinpaint/kernels.hpp"

namespace vinpaint {

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value, std::string name) {
    nodes_.push_back(Node{std::move(name), {}, std::move(value), {}, {}});
    return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::record(std::string op, std::vector<Var<T>> inputs, ForwardFn forward,
                       BackwardFn backward) {
    Node n;
    n.op = std::move(op);
    Inputs in;
    for (const auto& v : inputs) {
        if (v.tape != this) throw std::invalid_argument(n.op + ": input from a different tape");
        n.inputs.push_back(v.id);
        in.push_back(&nodes_[v.id].value);
    }
    n.value = forward(in);
    n.forward = std::move(forward);
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
const typename Tape<T>::Node& Tape<T>::node(std::size_t id) const {
    if (id >= nodes_.size()) throw std::invalid_argument("unknown tape id " + std::to_string(id));
    return nodes_[id];
}

template <typename T>
void Tape<T>::set_leaf(std::size_t id, Tensor<T> value) {
    if (!is_leaf(id)) throw std::invalid_argument("tape id " + std::to_string(id) + " is not a leaf");
    if (value.shape() != nodes_[id].value.shape()) {
        throw ShapeError("set_leaf shape " + shape_str(value.shape()) + " differs from " +
                         shape_str(nodes_[id].value.shape()));
    }
    nodes_[id].value = std::move(value);
}

template <typename T>
bool Tape<T>::replay() {
    bool identical = true;
    for (auto& n : nodes_) {
        if (!n.forward) continue;
        Inputs in;
        for (std::size_t id : n.inputs) in.push_back(&nodes_[id].value);
        Tensor<T> fresh = n.forward(in);
        if (!(fresh == n.value)) identical = false;
        n.value = std::move(fresh);
    }
    return identical;
}

template <typename T>
GradientMap<T> backward(const Tape<T>& tape, std::size_t output_id, const Tensor<T>& seed_grad) {
    const auto& out = tape.node(output_id);
    if (seed_grad.shape() != out.value.shape()) {
        throw ShapeError("seed gradient shape " + shape_str(seed_grad.shape()) +
                         " differs from output " + shape_str(out.value.shape()));
    }
    std::vector<std::optional<Tensor<T>>> grads(output_id + 1);
    grads[output_id] = seed_grad;
    for (std::size_t id = output_id + 1; id-- > 0;) {
        const auto& n = tape.node(id);
        if (!grads[id] || !n.forward) continue;
        typename Tape<T>::Inputs in;
        for (std::size_t i : n.inputs) in.push_back(&tape.value(i));
        auto input_grads = n.backward(in, n.value, *grads[id]);
        for (std::size_t j = 0; j < n.inputs.size(); ++j) {
            auto& slot = grads[n.inputs[j]];
            if (!slot) {
                slot = std::move(input_grads[j]);
            } else {
                auto dst = slot->data();
                auto src = input_grads[j].data();
                for (std::size_t e = 0; e < dst.size(); ++e) dst[e] += src[e];
            }
        }
    }
    GradientMap<T> result;
    for (std::size_t id = 0; id < tape.size(); ++id) {
        if (!tape.is_leaf(id)) continue;
        if (id <= output_id && grads[id]) {
            result.emplace(id, std::move(*grads[id]));
        } else {
            result.emplace(id, Tensor<T>(tape.value(id).shape()));
        }
    }
    return result;
}

template <typename T>
GradientMap<T> backward(const Var<T>& output) {
    if (output.value().size() != 1) throw ShapeError("implicit seed needs a scalar output");
    return backward(*output.tape, output.id, Tensor<T>(output.shape(), T{1}));
}

template <typename T>
Tensor<T> sum_to_shape(const Tensor<T>& grad, const Shape& target) {
    if (grad.shape() == target) return grad;
    const Shape& gs = grad.shape();
    if (target.size() > gs.size()) throw ShapeError("sum_to_shape: target rank too large");
    const std::size_t off = gs.size() - target.size();
    Tensor<T> out(target);
    const Shape tstrides = shape_strides(target);
    std::vector<std::size_t> idx(gs.size(), 0);
    for (std::size_t e = 0; e < grad.size(); ++e) {
        std::size_t t = 0;
        for (std::size_t i = off; i < gs.size(); ++i) {
            const std::size_t d = target[i - off];
            if (d != 1) t += idx[i] * tstrides[i - off];
        }
        out[t] += grad[e];
        for (std::size_t i = gs.size(); i-- > 0;) {
            if (++idx[i] < gs[i]) break;
            idx[i] = 0;
        }
    }
    return out;
}

namespace ag {

namespace {

template <typename T>
std::vector<std::size_t> swap_last_two(std::size_t rank) {
    std::vector<std::size_t> order(rank);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::swap(order[rank - 1], order[rank - 2]);
    return order;
}

template <typename T>
void require_same(const Var<T>& a, const Var<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

template <typename T>
void require_last(const Var<T>& x, const Var<T>& v, const char* op) {
    if (v.value().rank() != 1 || v.shape()[0] != x.shape().back()) {
        throw ShapeError(std::string(op) + ": vector " + shape_str(v.shape()) +
                         " does not match last axis of " + shape_str(x.shape()));
    }
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    require_same(a, b, "add");
    return a.tape->record(
        "add", {a, b}, [](const auto& in) { return *in[0] + *in[1]; },
        [](const auto&, const Tensor<T>&, const Tensor<T>& g) { return std::vector<Tensor<T>>{g, g}; });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    require_same(a, b, "sub");
    return a.tape->record(
        "sub", {a, b}, [](const auto& in) { return *in[0] - *in[1]; },
        [](const auto&, const Tensor<T>&, const Tensor<T>& g) {
            return std::vector<Tensor<T>>{g, T{-1} * g};
        });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    require_same(a, b, "mul");
    return a.tape->record(
        "mul", {a, b},
        [](const auto& in) {
            Tensor<T> out(in[0]->shape());
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*in[0])[i] * (*in[1])[i];
            return out;
        },
        [](const auto& in, const Tensor<T>&, const Tensor<T>& g) {
            Tensor<T> ga(g.shape()), gb(g.shape());
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] = g[i] * (*in[1])[i];
                gb[i] = g[i] * (*in[0])[i];
            }
            return std::vector<Tensor<T>>{std::move(ga), std::move(gb)};
        });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
    return a.tape->record(
        "scale", {a}, [s](const auto& in) { return s * *in[0]; },
        [s](const auto&, const Tensor<T>&, const Tensor<T>& g) { return std::vector<Tensor<T>>{s * g}; });
}

template <typename T>
Var<T> square(Var<T> a) {
    return a.tape->record(
        "square", {a},
        [](const auto& in) {
            Tensor<T> out(in[0]->shape());
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*in[0])[i] * (*in[0])[i];
            return out;
        },
        [](const auto& in, const Tensor<T>&, const Tensor<T>& g) {
            Tensor<T> ga(g.shape());
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] = T{2} * (*in[0])[i] * g[i];
            return std::vector<Tensor<T>>{std::move(ga)};
        });
}

template <typename T>
Var<T> add_last(Var<T> x, Var<T> bias) {
    require_last(x, bias, "add_last");
    return x.tape->record(
        "add_last", {x, bias},
        [](const auto& in) {
            Tensor<T> out = *in[0];
            const std::size_t n = in[1]->size();
            for (std::size_t i = 0; i < out.size(); ++i) out[i] += (*in[1])[i % n];
            return out;
        },
        [](const auto& in, const Tensor<T>&, const Tensor<T>& g) {
            const std::size_t n = in[1]->size();
            Tensor<T> gb(in[1]->shape());
            for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
            return std::vector<Tensor<T>>{g, std::move(gb)};
        });
}

template <typename T>
Var<T> mul_last(Var<T> x, Var<T> gain) {
    require_last(x, gain, "mul_last");
    return x.tape->record(
        "mul_last", {x, gain},
        [](const auto& in) {
            Tensor<T> out = *in[0];
            const std::size_t n = in[1]->size();
            for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*in[1])[i % n];
            return out;
        },
        [](const auto& in, const Tensor<T>&, const Tensor<T>& g) {
            const std::size_t n = in[1]->size();
            Tensor<T> gx(g.shape());
            Tensor<T> gg(in[1]->shape());
            for (std::size_t i = 0; i < g.size(); ++i) {
                gx[i] = g[i] * (*in[1])[i % n];
                gg[i % n] += g[i] * (*in[0])[i];
            }
            return std::vector<Tensor<T>>{std::move(gx), std::move(gg)};
        });
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    return a.tape->record(
        "matmul", {a, b}, [](const auto& in) { return vinpaint::matmul(*in[0], *in[1]); },
        [](const auto& in, const Tensor<T>&, const Tensor<T>& g) {
            const auto& A = *in[0];
            const auto& B = *in[1];
            auto ga = vinpaint::matmul(g, vinpaint::permute(B, swap_last_two<T>(B.rank())));
            auto gb = vinpaint::matmul(vinpaint::permute(A, swap_last_two<T>(A.rank())), g);
            return std::vector<Tensor<T>>{sum_to_shape(ga, A.shape()), sum_to_shape(gb, B.shape())};
        });
}

template <typename T>
Var<T> softmax(Var<T> x) {
    return x.tape->record(
        "softmax", {x}, [](const auto& in) { return vinpaint::softmax(*in[0], -1); },
        [](const auto&, const Tensor<T>& y, const Tensor<T>& g) {
            const std::size_t cols = y.dim(-1);
            Tensor<T> gx(y.shape());
            for (std::size_t r = 0; r < y.size() / cols; ++r) {
                T dot = 0;
                for (std::size_t j = 0; j < cols; ++j) dot += g[r * cols + j] * y[r * cols + j];
                for (std::size_t j = 0; j < cols; ++j) {
                    gx[r * cols + j] = y[r * cols + j] * (g[r * cols + j] - dot);
                }
            }
            return std::vector<Tensor<T>>{std::move(gx)};
        });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
    const Shape original = x.shape();
    return x.tape->record(
        "reshape", {x}, [shape](const auto& in) { return reshape_view(*in[0], shape); },
        [original](const auto&, const Tensor<T>&, const Tensor<T>& g) {
            return std::vector<Tensor<T>>{reshape_view(g, original)};
        });
}

template <typename T>
Var<T> permute(Var<T> x, std::vector<std::size_t> order) {
    const auto inverse = inverse_permutation(order);
    return x.tape->record(
        "permute", {x}, [order](const auto& in) { return vinpaint::permute(*in[0], order); },
        [inverse](const auto&, const Tensor<T>&, const Tensor<T>& g) {
            return std::vector<Tensor<T>>{vinpaint::permute(g, inverse)};
        });
}

template <typename T>
Var<T> transpose_last(Var<T> x) {
    return permute(x, swap_last_two<T>(x.value().rank()));
}

template <typename T>
Var<T> spatial_resize(Var<T> x, std::size_t out_w, std::size_t out_h, ResizeMode mode) {
    return x.tape->record(
        "spatial_resize", {x},
        [=](const auto& in) { return vinpaint::spatial_resize(*in[0], out_w, out_h, mode); },
        [=](const auto& in, const Tensor<T>&, const Tensor<T>& g) {
            const auto& X = *in[0];
            const std::size_t in_w = X.dim(-2), in_h = X.dim(-1);
            if (in_w == out_w && in_h == out_h) return std::vector<Tensor<T>>{g};
            Tensor<T> gx(X.shape());
            const auto aw = kernels::make_resize_axis(in_w, out_w, mode);
            const auto ah = kernels::make_resize_axis(in_h, out_h, mode);
            kernels::parallel::resize_planes_adjoint(g.data().data(), gx.data().data(),
                                                     X.size() / (in_w * in_h), in_w, in_h, aw, ah);
            return std::vector<Tensor<T>>{std::move(gx)};
        });
}

template <typename T>
Var<T> layer_norm(Var<T> x, T eps) {
    return x.tape->record(
        "layer_norm", {x},
        [eps](const auto& in) {
            const auto& X = *in[0];
            const std::size_t n = X.dim(-1);
            Tensor<T> out(X.shape());
            for (std::size_t r = 0; r < X.size() / n; ++r) {
                T mu = 0;
                for (std::size_t j = 0; j < n; ++j) mu += X[r * n + j];
                mu /= static_cast<T>(n);
                T var = 0;
                for (std::size_t j = 0; j < n; ++j) var += (X[r * n + j] - mu) * (X[r * n + j] - mu);
                var /= static_cast<T>(n);
                const T inv = T{1} / std::sqrt(var + eps);
                for (std::size_t j = 0; j < n; ++j) out[r * n + j] = (X[r * n + j] - mu) * inv;
            }
            return out;
        },
        [eps](const auto& in, const Tensor<T>& y, const Tensor<T>& g) {
            const auto& X = *in[0];
            const std::size_t n = X.dim(-1);
            Tensor<T> gx(X.shape());
            for (std::size_t r = 0; r < X.size() / n; ++r) {
                T mu = 0;
                for (std::size_t j = 0; j < n; ++j) mu += X[r * n + j];
                mu /= static_cast<T>(n);
                T var = 0;
                for (std::size_t j = 0; j < n; ++j) var += (X[r * n + j] - mu) * (X[r * n + j] - mu);
                var /= static_cast<T>(n);
                const T inv = T{1} / std::sqrt(var + eps);
                T mg = 0, mgy = 0;
                for (std::size_t j = 0; j < n; ++j) {
                    mg += g[r * n + j];
                    mgy += g[r * n + j] * y[r * n + j];
                }
                mg /= static_cast<T>(n);
                mgy /= static_cast<T>(n);
                for (std::size_t j = 0; j < n; ++j) {
                    gx[r * n + j] = inv * (g[r * n + j] - mg - y[r * n + j] * mgy);
                }
            }
            return std::vector<Tensor<T>>{std::move(gx)};
        });
}

template <typename T>
Var<T> concat(std::vector<Var<T>> parts, long axis) {
    if (parts.empty()) throw std::invalid_argument("concat of zero vars");
    std::vector<std::size_t> sizes;
    const std::size_t ax = parts.front().value().normalize_axis(axis);
    for (const auto& p : parts) sizes.push_back(p.shape().at(ax));
    return parts.front().tape->record(
        "concat", parts, [axis](const auto& in) { return vinpaint::concat(in, axis); },
        [axis, sizes](const auto&, const Tensor<T>&, const Tensor<T>& g) {
            std::vector<Tensor<T>> out;
            std::size_t begin = 0;
            for (std::size_t s : sizes) {
                out.push_back(vinpaint::slice(g, axis, begin, begin + s));
                begin += s;
            }
            return out;
        });
}

template <typename T>
Var<T> slice(Var<T> x, long axis, std::size_t begin, std::size_t end) {
    return x.tape->record(
        "slice", {x}, [=](const auto& in) { return vinpaint::slice(*in[0], axis, begin, end); },
        [=](const auto& in, const Tensor<T>&, const Tensor<T>& g) {
            const auto& X = *in[0];
            const std::size_t ax = X.normalize_axis(axis);
            const std::size_t outer = shape_numel(Shape(X.shape().begin(), X.shape().begin() + ax));
            const std::size_t inner = shape_numel(Shape(X.shape().begin() + ax + 1, X.shape().end()));
            Tensor<T> gx(X.shape());
            const std::size_t in_chunk = X.shape()[ax] * inner;
            const std::size_t out_chunk = (end - begin) * inner;
            for (std::size_t o = 0; o < outer; ++o) {
                std::copy_n(g.data().begin() + o * out_chunk, out_chunk,
                            gx.data().begin() + o * in_chunk + begin * inner);
            }
            return std::vector<Tensor<T>>{std::move(gx)};
        });
}

template <typename T>
Var<T> sum(Var<T> x) {
    return x.tape->record(
        "sum", {x},
        [](const auto& in) {
            T s = 0;
            for (T v : in[0]->data()) s += v;
            return Tensor<T>::scalar(s);
        },
        [](const auto& in, const Tensor<T>&, const Tensor<T>& g) {
            return std::vector<Tensor<T>>{Tensor<T>(in[0]->shape(), g[0])};
        });
}

template <typename T>
Var<T> mean(Var<T> x) {
    return scale(sum(x), T{1} / static_cast<T>(x.value().size()));
}

template <typename T>
Var<T> mse(Var<T> a, Var<T> b) {
    return mean(square(sub(a, b)));
}

template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads) {
    const Shape& qs = q.shape();
    const Shape& ks = k.shape();
    const Shape& vs = v.shape();
    if (qs.size() < 2 || qs.size() != ks.size() || qs.size() != vs.size()) {
        throw ShapeError("attention operands need equal rank >= 2");
    }
    const Shape lead(qs.begin(), qs.end() - 2);
    if (!std::equal(lead.begin(), lead.end(), ks.begin()) ||
        !std::equal(lead.begin(), lead.end(), vs.begin())) {
        throw ShapeError("attention batch dims differ");
    }
    const std::size_t lq = qs[qs.size() - 2], d = qs.back();
    const std::size_t lk = ks[ks.size() - 2], dv = vs.back();
    if (ks.back() != d) throw ShapeError("query/key feature dims differ");
    if (vs[vs.size() - 2] != lk) throw ShapeError("key/value lengths differ");
    if (heads == 0 || d % heads != 0 || dv % heads != 0) {
        throw std::invalid_argument("feature dims not divisible by head count " +
                                    std::to_string(heads));
    }
    const std::size_t nb = shape_numel(lead);
    const std::size_t dh = d / heads, dvh = dv / heads;

    auto qh = permute(reshape(q, {nb, lq, heads, dh}), {0, 2, 1, 3});
    auto kt = permute(reshape(k, {nb, lk, heads, dh}), {0, 2, 3, 1});
    auto vh = permute(reshape(v, {nb, lk, heads, dvh}), {0, 2, 1, 3});
    auto scores = scale(matmul(qh, kt), T{1} / std::sqrt(static_cast<T>(dh)));
    auto out = matmul(softmax(scores), vh);
    Shape out_shape = lead;
    out_shape.push_back(lq);
    out_shape.push_back(dv);
    return reshape(permute(out, {0, 2, 1, 3}), out_shape);
}

}  // namespace ag

#define VINPAINT_INSTANTIATE_TAPE(T)                                                        \
    template class Tape<T>;                                                                 \
    template GradientMap<T> backward(const Tape<T>&, std::size_t, const Tensor<T>&);        \
    template GradientMap<T> backward(const Var<T>&);                                        \
    template Tensor<T> sum_to_shape(const Tensor<T>&, const Shape&);                        \
    template Var<T> ag::add(Var<T>, Var<T>);                                                \
    template Var<T> ag::sub(Var<T>, Var<T>);                                                \
    template Var<T> ag::mul(Var<T>, Var<T>);                                                \
    template Var<T> ag::scale(Var<T>, T);                                                   \
    template Var<T> ag::square(Var<T>);                                                     \
    template Var<T> ag::add_last(Var<T>, Var<T>);                                           \
    template Var<T> ag::mul_last(Var<T>, Var<T>);                                           \
    template Var<T> ag::matmul(Var<T>, Var<T>);                                             \
    template Var<T> ag::softmax(Var<T>);                                                    \
    template Var<T> ag::reshape(Var<T>, Shape);                                             \
    template Var<T> ag::permute(Var<T>, std::vector<std::size_t>);                          \
    template Var<T> ag::transpose_last(Var<T>);                                             \
    template Var<T> ag::spatial_resize(Var<T>, std::size_t, std::size_t, ResizeMode);       \
    template Var<T> ag::layer_norm(Var<T>, T);                                              \
    template Var<T> ag::concat(std::vector<Var<T>>, long);                                  \
    template Var<T> ag::slice(Var<T>, long, std::size_t, std::size_t);                      \
    template Var<T> ag::sum(Var<T>);                                                        \
    template Var<T> ag::mean(Var<T>);                                                       \
    template Var<T> ag::mse(Var<T>, Var<T>);                                                \
    template Var<T> ag::attention(Var<T>, Var<T>, Var<T>, std::size_t);

VINPAINT_INSTANTIATE_TAPE(float)
VINPAINT_INSTANTIATE_TAPE(double)

#undef VINPAINT_INSTANTIATE_TAPE

}  // namespace vinpaint

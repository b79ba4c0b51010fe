#include "vinpaint/motion.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include "vinpaint/error.hpp"

namespace vinpaint::motion {

namespace {

constexpr const char* kNormNames[4] = {"norm1", "norm2", "norm3", "norm4"};
constexpr const char* kMatrixNames[4] = {"wq", "wk", "wv", "wo"};

template <typename T>
void require_video(const Var<T>& x, std::size_t d_model, const char* op) {
    const Shape& s = x.shape();
    if (s.size() != 5) {
        throw ShapeError(std::string(op) + ": expected [b,f,c,w,h], got " + shape_str(s));
    }
    if (s[2] != d_model) {
        throw ShapeError(std::string(op) + ": channel count " + std::to_string(s[2]) +
                         " differs from d_model " + std::to_string(d_model));
    }
}

template <typename T>
std::size_t bound_d_model(const BoundAttention<T>& p) {
    return p.wo.shape().back();
}

void require_target(GridSize target, std::size_t w, std::size_t h) {
    if (target.w == 0 || target.h == 0 || target.w > w || target.h > h) {
        throw std::invalid_argument("attention target " + std::to_string(target.w) + "x" +
                                    std::to_string(target.h) + " must lie within 1x1.." +
                                    std::to_string(w) + "x" + std::to_string(h));
    }
}

// Self-attention over tokens [n, L, c].
template <typename T>
Var<T> self_attention(Var<T> tokens, const BoundAttention<T>& p) {
    auto q = ag::matmul(tokens, p.wq);
    auto k = ag::matmul(tokens, p.wk);
    auto v = ag::matmul(tokens, p.wv);
    return ag::matmul(ag::attention(q, k, v, p.heads), p.wo);
}

// [b, f, c, w, h] -> [b, f·w·h, c]
template <typename T>
Var<T> flatten_tokens(Var<T> x) {
    const Shape s = x.shape();
    return ag::reshape(ag::permute(x, {0, 1, 3, 4, 2}), {s[0], s[1] * s[3] * s[4], s[2]});
}

template <typename T>
Var<T> unflatten_tokens(Var<T> tokens, const Shape& video_shape) {
    const Shape& s = video_shape;
    return ag::permute(ag::reshape(tokens, {s[0], s[1], s[3], s[4], s[2]}), {0, 1, 4, 2, 3});
}

template <typename T>
Var<T> channel_norm(Var<T> x, const BoundNorm<T>& n) {
    auto last = ag::permute(x, {0, 1, 3, 4, 2});
    auto normed = ag::add_last(ag::mul_last(ag::layer_norm(last), n.scale), n.shift);
    return ag::permute(normed, {0, 1, 4, 2, 3});
}

template <typename T>
void load_or_init(Tensor<T>& slot, const std::string& name, const Shape& shape, std::size_t fan_in,
                  bool zero, Rng& rng, const ckpt::Checkpoint* pretrained, bool loadable) {
    if (loadable && pretrained) {
        if (auto it = pretrained->find(name); it != pretrained->end()) {
            if (it->second.shape() != shape) {
                throw LoadError(name, "shape " + shape_str(it->second.shape()) + " but expected " +
                                          shape_str(shape));
            }
            slot = it->second.template cast<T>();
            return;
        }
    }
    // The draw happens either way so later parameters do not depend on `zero`.
    auto sample = kaiming_normal<T>(shape, fan_in, rng);
    slot = zero ? Tensor<T>(shape) : std::move(sample);
}

template <typename T>
AttentionParams<T> init_attention(const std::string& name, std::size_t d_model, std::size_t d_kv,
                                  std::size_t heads, bool zero_out, Rng& rng,
                                  const ckpt::Checkpoint* pretrained, bool loadable) {
    AttentionParams<T> p;
    p.heads = heads;
    const std::string prefix = "motion." + name + ".";
    load_or_init(p.wq, prefix + "wq", {d_model, d_model}, d_model, false, rng, pretrained, loadable);
    load_or_init(p.wk, prefix + "wk", {d_kv, d_model}, d_kv, false, rng, pretrained, loadable);
    load_or_init(p.wv, prefix + "wv", {d_kv, d_model}, d_kv, false, rng, pretrained, loadable);
    load_or_init(p.wo, prefix + "wo", {d_model, d_model}, d_model, zero_out, rng, pretrained, loadable);
    return p;
}

}  // namespace

template <typename T>
void AttentionParams<T>::validate(const std::string& name) const {
    const std::size_t d = d_model();
    auto check = [&](const Tensor<T>& w, std::size_t rows, const char* m) {
        if (w.rank() != 2 || w.dim(0) != rows || w.dim(1) != d) {
            throw ShapeError(name + "." + m + ": shape " + shape_str(w.shape()) + ", expected [" +
                             std::to_string(rows) + "," + std::to_string(d) + "]");
        }
    };
    check(wq, d, "wq");
    check(wk, d_kv(), "wk");
    check(wv, d_kv(), "wv");
    check(wo, d, "wo");
    if (heads == 0 || d % heads != 0) {
        throw std::invalid_argument(name + ": d_model " + std::to_string(d) +
                                    " not divisible by heads " + std::to_string(heads));
    }
}

template <typename T>
void MotionBlockParams<T>::validate() const {
    temporal1.validate("temporal1");
    temporal2.validate("temporal2");
    dga.validate("dga");
    cross.validate("cross");
    const std::size_t d = d_model();
    for (const auto* a : {&temporal2, &dga, &cross}) {
        if (a->d_model() != d) throw ShapeError("attention layers disagree on d_model");
    }
    for (const auto* a : {&temporal1, &temporal2, &dga}) {
        if (a->d_kv() != d) throw ShapeError("self-attention key/value dims must equal d_model");
    }
    for (const auto& n : norms) {
        if (n.scale.shape() != Shape{d} || n.shift.shape() != Shape{d}) {
            throw ShapeError("norm parameters must have shape [d_model]");
        }
    }
    if (target.w == 0 || target.h == 0) throw std::invalid_argument("attention target must be >= 1");
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> MotionBlockParams<T>::entries() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    auto add_attn = [&](const char* layer, AttentionParams<T>& a) {
        Tensor<T>* slots[4] = {&a.wq, &a.wk, &a.wv, &a.wo};
        for (int i = 0; i < 4; ++i) {
            out.emplace_back(std::string("motion.") + layer + "." + kMatrixNames[i], slots[i]);
        }
    };
    add_attn("temporal1", temporal1);
    add_attn("temporal2", temporal2);
    add_attn("dga", dga);
    add_attn("cross", cross);
    for (int i = 0; i < 4; ++i) {
        out.emplace_back(std::string("motion.") + kNormNames[i] + ".scale", &norms[i].scale);
        out.emplace_back(std::string("motion.") + kNormNames[i] + ".shift", &norms[i].shift);
    }
    return out;
}

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> MotionBlockParams<T>::entries() const {
    auto mutable_entries = const_cast<MotionBlockParams*>(this)->entries();
    return {mutable_entries.begin(), mutable_entries.end()};
}

template <typename T>
template <typename U>
MotionBlockParams<U> MotionBlockParams<T>::cast() const {
    auto cast_attn = [](const AttentionParams<T>& a) {
        return AttentionParams<U>{a.wq.template cast<U>(), a.wk.template cast<U>(),
                                  a.wv.template cast<U>(), a.wo.template cast<U>(), a.heads};
    };
    MotionBlockParams<U> out;
    out.temporal1 = cast_attn(temporal1);
    out.temporal2 = cast_attn(temporal2);
    out.dga = cast_attn(dga);
    out.cross = cast_attn(cross);
    out.target = target;
    for (int i = 0; i < 4; ++i) {
        out.norms[i] = NormParams<U>{norms[i].scale.template cast<U>(), norms[i].shift.template cast<U>()};
    }
    return out;
}

template <typename T>
Tensor<T> kaiming_normal(const Shape& shape, std::size_t fan_in, Rng& rng) {
    if (fan_in == 0) throw std::invalid_argument("fan_in must be positive");
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    Tensor<T> out(shape);
    for (auto& v : out.data()) v = static_cast<T>(stddev * rng.normal());
    return out;
}

template <typename T>
MotionBlockParams<T> init_motion_block(std::uint64_t seed, std::size_t d_model, std::size_t d_text,
                                       const InitOptions& options, const ckpt::Checkpoint* pretrained) {
    if (d_model == 0 || d_text == 0) throw std::invalid_argument("model dims must be positive");
    if (options.heads == 0 || d_model % options.heads != 0) {
        throw std::invalid_argument("d_model " + std::to_string(d_model) + " not divisible by heads " +
                                    std::to_string(options.heads));
    }
    Rng rng(seed);
    const bool zero = options.zero_new_output_projections;
    MotionBlockParams<T> p;
    p.temporal1 = init_attention<T>("temporal1", d_model, d_model, options.heads, zero, rng, pretrained, true);
    p.temporal2 = init_attention<T>("temporal2", d_model, d_model, options.heads, zero, rng, pretrained, true);
    p.dga = init_attention<T>("dga", d_model, d_model, options.heads, zero, rng, pretrained, false);
    p.cross = init_attention<T>("cross", d_model, d_text, options.heads, zero, rng, pretrained, false);
    p.target = options.target;
    for (auto& n : p.norms) {
        n.scale = Tensor<T>({d_model}, T{1});
        n.shift = Tensor<T>({d_model}, T{0});
    }
    return p;
}

template <typename T>
BoundAttention<T> bind(Tape<T>& tape, const AttentionParams<T>& params, const std::string& name) {
    return BoundAttention<T>{tape.leaf(params.wq, name + ".wq"), tape.leaf(params.wk, name + ".wk"),
                             tape.leaf(params.wv, name + ".wv"), tape.leaf(params.wo, name + ".wo"),
                             params.heads};
}

template <typename T>
BoundMotionBlock<T> bind(Tape<T>& tape, const MotionBlockParams<T>& params) {
    params.validate();
    BoundMotionBlock<T> b;
    b.temporal1 = bind(tape, params.temporal1, "motion.temporal1");
    b.temporal2 = bind(tape, params.temporal2, "motion.temporal2");
    b.dga = bind(tape, params.dga, "motion.dga");
    b.cross = bind(tape, params.cross, "motion.cross");
    b.target = params.target;
    for (int i = 0; i < 4; ++i) {
        const std::string prefix = std::string("motion.") + kNormNames[i];
        b.norms[i] = BoundNorm<T>{tape.leaf(params.norms[i].scale, prefix + ".scale"),
                                  tape.leaf(params.norms[i].shift, prefix + ".shift")};
    }
    for (const auto* a : {&b.temporal1, &b.temporal2, &b.dga, &b.cross}) {
        for (const auto* v : {&a->wq, &a->wk, &a->wv, &a->wo}) {
            b.leaf_ids.emplace_back(tape.node(v->id).op, v->id);
        }
    }
    for (const auto& n : b.norms) {
        b.leaf_ids.emplace_back(tape.node(n.scale.id).op, n.scale.id);
        b.leaf_ids.emplace_back(tape.node(n.shift.id).op, n.shift.id);
    }
    return b;
}

template <typename T>
Var<T> temporal_attention(Var<T> x, const BoundAttention<T>& p) {
    require_video(x, bound_d_model(p), "temporal_attention");
    const Shape s = x.shape();
    const std::size_t b = s[0], f = s[1], c = s[2], w = s[3], h = s[4];
    auto tokens = ag::reshape(ag::permute(x, {0, 3, 4, 1, 2}), {b * w * h, f, c});
    auto out = self_attention(tokens, p);
    return ag::permute(ag::reshape(out, {b, w, h, f, c}), {0, 3, 4, 1, 2});
}

template <typename T>
Var<T> damped_global_attention(Var<T> x, const BoundAttention<T>& p, GridSize target) {
    require_video(x, bound_d_model(p), "damped_global_attention");
    const Shape s = x.shape();
    require_target(target, s[3], s[4]);
    auto small = ag::spatial_resize(x, target.w, target.h);
    const Shape small_shape = small.shape();
    auto out = self_attention(flatten_tokens(small), p);
    return ag::spatial_resize(unflatten_tokens(out, small_shape), s[3], s[4]);
}

template <typename T>
Var<T> textual_cross_attention(Var<T> x, Var<T> text_tokens, const BoundAttention<T>& p,
                               GridSize target) {
    require_video(x, bound_d_model(p), "textual_cross_attention");
    const Shape& ts = text_tokens.shape();
    const std::size_t d_kv = p.wk.shape()[0];
    if (ts.size() != 2 || ts[1] != d_kv) {
        throw ShapeError("text embedding " + shape_str(ts) + " does not match key/value input dim " +
                         std::to_string(d_kv));
    }
    const Shape s = x.shape();
    require_target(target, s[3], s[4]);
    auto small = ag::spatial_resize(x, target.w, target.h);
    const Shape small_shape = small.shape();
    auto q = ag::matmul(flatten_tokens(small), p.wq);
    auto k = ag::matmul(text_tokens, p.wk);
    auto v = ag::matmul(text_tokens, p.wv);
    std::vector<Var<T>> ks(s[0], ag::reshape(k, {1, ts[0], k.shape()[1]}));
    std::vector<Var<T>> vs(s[0], ag::reshape(v, {1, ts[0], v.shape()[1]}));
    auto kb = s[0] == 1 ? ks.front() : ag::concat(ks, 0);
    auto vb = s[0] == 1 ? vs.front() : ag::concat(vs, 0);
    auto out = ag::matmul(ag::attention(q, kb, vb, p.heads), p.wo);
    return ag::spatial_resize(unflatten_tokens(out, small_shape), s[3], s[4]);
}

template <typename T>
Var<T> motion_block_forward(Var<T> x, Var<T> text_tokens, const BoundMotionBlock<T>& p) {
    x = ag::add(x, temporal_attention(channel_norm(x, p.norms[0]), p.temporal1));
    x = ag::add(x, temporal_attention(channel_norm(x, p.norms[1]), p.temporal2));
    x = ag::add(x, damped_global_attention(channel_norm(x, p.norms[2]), p.dga, p.target));
    x = ag::add(x, textual_cross_attention(channel_norm(x, p.norms[3]), text_tokens, p.cross, p.target));
    return x;
}

template <typename T>
Tensor<T> temporal_attention(const Tensor<T>& x, const AttentionParams<T>& p) {
    p.validate("temporal");
    Tape<T> tape;
    return temporal_attention(tape.leaf(x, "x"), bind(tape, p, "temporal")).value();
}

template <typename T>
Tensor<T> damped_global_attention(const Tensor<T>& x, const AttentionParams<T>& p, GridSize target) {
    p.validate("dga");
    Tape<T> tape;
    return damped_global_attention(tape.leaf(x, "x"), bind(tape, p, "dga"), target).value();
}

template <typename T>
Tensor<T> textual_cross_attention(const Tensor<T>& x, const TextEmbedding<T>& text,
                                  const AttentionParams<T>& p, GridSize target) {
    p.validate("cross");
    Tape<T> tape;
    auto xv = tape.leaf(x, "x");
    auto tv = tape.leaf(text.tokens, "text");
    return textual_cross_attention(xv, tv, bind(tape, p, "cross"), target).value();
}

template <typename T>
Tensor<T> motion_block_forward(const Tensor<T>& x, const TextEmbedding<T>& text,
                               const MotionBlockParams<T>& params) {
    Tape<T> tape;
    auto bound = bind(tape, params);
    auto xv = tape.leaf(x, "x");
    auto tv = tape.leaf(text.tokens, "text");
    return motion_block_forward(xv, tv, bound).value();
}

double CostReport::dga_reduction() const {
    return static_cast<double>(naive_global.elements) / static_cast<double>(damped_global.elements);
}

double CostReport::quoted_cross_reduction() const {
    return static_cast<double>(quoted_cross_naive) / static_cast<double>(quoted_cross_reduced);
}

std::string CostReport::to_table() const {
    std::ostringstream os;
    os << "dims: b=" << b << " f=" << f << " c=" << c << " w1=" << w1 << " h1=" << h1
       << " target=" << target.w << "x" << target.h << " l_text=" << l_text << "\n";
    os << std::left << std::setw(24) << "attention" << std::setw(12) << "seq_len" << std::setw(12)
       << "key_len" << std::setw(12) << "maps" << "map_elements\n";
    for (const auto* row : {&temporal, &naive_global, &damped_global, &cross}) {
        os << std::setw(24) << row->name << std::setw(12) << row->sequence_length << std::setw(12)
           << row->key_length << std::setw(12) << row->maps << row->elements << "\n";
    }
    os << "dga reduction vs naive global: " << dga_reduction() << "x\n";
    os << "quoted cross map (f*w1*h1*l_text)^2: " << quoted_cross_naive << "\n";
    os << "quoted cross map (f*l_text)^2: " << quoted_cross_reduced << " (reduction "
       << quoted_cross_reduction() << "x)\n";
    os << "note: standard cross-attention map is Lq*Lk = " << cross.sequence_length << "*"
       << cross.key_length << " per batch element, which differs from both quoted formulas\n";
    return os.str();
}

CostReport attention_cost_report(std::uint64_t b, std::uint64_t f, std::uint64_t c, std::uint64_t w1,
                                 std::uint64_t h1, GridSize target, std::uint64_t l_text) {
    if (b == 0 || f == 0 || c == 0 || w1 == 0 || h1 == 0 || l_text == 0) {
        throw std::invalid_argument("cost report dims must be positive");
    }
    require_target(target, w1, h1);
    CostReport r;
    r.b = b;
    r.f = f;
    r.c = c;
    r.w1 = w1;
    r.h1 = h1;
    r.l_text = l_text;
    r.target = target;
    const std::uint64_t tw = target.w, th = target.h;
    r.temporal = {"temporal", f, f, b * w1 * h1, b * w1 * h1 * f * f};
    const std::uint64_t full = f * w1 * h1;
    r.naive_global = {"naive_global", full, full, b, b * full * full};
    const std::uint64_t damped = f * tw * th;
    r.damped_global = {"damped_global", damped, damped, b, b * damped * damped};
    r.cross = {"textual_cross", damped, l_text, b, b * damped * l_text};
    const std::uint64_t naive_cross = f * w1 * h1 * l_text;
    r.quoted_cross_naive = naive_cross * naive_cross;
    r.quoted_cross_reduced = (f * l_text) * (f * l_text);
    return r;
}

#define VINPAINT_INSTANTIATE_MOTION(T)                                                              \
    template struct AttentionParams<T>;                                                             \
    template struct MotionBlockParams<T>;                                                           \
    template Tensor<T> kaiming_normal<T>(const Shape&, std::size_t, Rng&);                          \
    template MotionBlockParams<T> init_motion_block<T>(std::uint64_t, std::size_t, std::size_t,     \
                                                       const InitOptions&, const ckpt::Checkpoint*); \
    template BoundMotionBlock<T> bind(Tape<T>&, const MotionBlockParams<T>&);                       \
    template BoundAttention<T> bind(Tape<T>&, const AttentionParams<T>&, const std::string&);       \
    template Var<T> temporal_attention(Var<T>, const BoundAttention<T>&);                           \
    template Var<T> damped_global_attention(Var<T>, const BoundAttention<T>&, GridSize);            \
    template Var<T> textual_cross_attention(Var<T>, Var<T>, const BoundAttention<T>&, GridSize);    \
    template Var<T> motion_block_forward(Var<T>, Var<T>, const BoundMotionBlock<T>&);               \
    template Tensor<T> temporal_attention(const Tensor<T>&, const AttentionParams<T>&);             \
    template Tensor<T> damped_global_attention(const Tensor<T>&, const AttentionParams<T>&,         \
                                               GridSize);                                           \
    template Tensor<T> textual_cross_attention(const Tensor<T>&, const TextEmbedding<T>&,           \
                                               const AttentionParams<T>&, GridSize);                \
    template Tensor<T> motion_block_forward(const Tensor<T>&, const TextEmbedding<T>&,              \
                                            const MotionBlockParams<T>&);

VINPAINT_INSTANTIATE_MOTION(float)
VINPAINT_INSTANTIATE_MOTION(double)

template MotionBlockParams<double> MotionBlockParams<float>::cast<double>() const;
template MotionBlockParams<float> MotionBlockParams<double>::cast<float>() const;
template MotionBlockParams<float> MotionBlockParams<float>::cast<float>() const;
template MotionBlockParams<double> MotionBlockParams<double>::cast<double>() const;

#undef VINPAINT_INSTANTIATE_MOTION

}  // namespace vinpaint::motion

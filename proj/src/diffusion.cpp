#include "vinpaint/diffusion.hpp"

#include <cmath>
#include <memory>
#include <sstream>

#include "vinpaint/error.hpp"

namespace vinpaint::diffusion {

NoiseSchedule build_schedule(std::size_t T, double beta_start, double beta_end) {
    if (T == 0) throw std::invalid_argument("schedule needs at least one step");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
        throw std::invalid_argument("beta range must satisfy 0 < start <= end < 1");
    }
    NoiseSchedule s;
    s.betas.resize(T);
    s.alphas.resize(T);
    s.alpha_bars.resize(T);
    double running = 1.0;
    for (std::size_t t = 0; t < T; ++t) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(T - 1);
        s.betas[t] = beta_start + (beta_end - beta_start) * frac;
        s.alphas[t] = 1.0 - s.betas[t];
        running *= s.alphas[t];
        s.alpha_bars[t] = running;
    }
    return s;
}

template <typename T>
LatentClip<T>::LatentClip(Tensor<T> latents) : z(std::move(latents)) {
    if (z.rank() != 4 || z.dim(1) != kLatentChannels) {
        throw ShapeError("latent clip must be [f,4,w1,h1], got " + shape_str(z.shape()));
    }
}

MaskSequence::MaskSequence(TensorF mask) : m(std::move(mask)) {
    if (m.rank() != 4 || m.dim(1) != 1) {
        throw ShapeError("mask must be [f,1,w,h], got " + shape_str(m.shape()));
    }
    for (float v : m.data()) {
        if (v != 0.0f && v != 1.0f) throw std::invalid_argument("mask values must be 0 or 1");
    }
}

template <typename T>
Tensor<T> MaskSequence::resized(std::size_t w1, std::size_t h1) const {
    return spatial_resize(m.cast<T>(), w1, h1, ResizeMode::bilinear);
}

double MaskSequence::area_fraction(std::size_t frame) const {
    const std::size_t plane = width() * height();
    double set = 0;
    for (std::size_t i = 0; i < plane; ++i) set += m[frame * plane + i];
    return set / static_cast<double>(plane);
}

bool MaskSequence::empty() const {
    return std::all_of(m.data().begin(), m.data().end(), [](float v) { return v == 0.0f; });
}

template <typename T>
LatentClip<T> forward_noise(const LatentClip<T>& z0, const Tensor<T>& eps, double alpha_bar) {
    if (eps.shape() != z0.z.shape()) {
        throw ShapeError("noise shape " + shape_str(eps.shape()) + " differs from latents " +
                         shape_str(z0.z.shape()));
    }
    const double a = std::sqrt(alpha_bar);
    const double b = std::sqrt(1.0 - alpha_bar);
    Tensor<T> out(eps.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<T>(a * static_cast<double>(z0.z[i]) + b * static_cast<double>(eps[i]));
    }
    return LatentClip<T>(std::move(out));
}

template <typename T>
LatentClip<T> forward_noise(const LatentClip<T>& z0, std::size_t t, const Tensor<T>& eps,
                            const NoiseSchedule& sched) {
    if (t >= sched.steps()) throw std::invalid_argument("timestep beyond schedule length");
    return forward_noise(z0, eps, sched.alpha_bars[t]);
}

template <typename T>
DenoiserInput<T> assemble_inpaint_input(const LatentClip<T>& z_t, const MaskSequence& mask,
                                        const LatentClip<T>& z_masked, std::size_t t,
                                        const TextEmbedding<T>& text) {
    if (z_t.z.shape() != z_masked.z.shape()) {
        throw ShapeError("noised and masked latents differ: " + shape_str(z_t.z.shape()) + " vs " +
                         shape_str(z_masked.z.shape()));
    }
    if (mask.frames() != z_t.frames()) throw ShapeError("mask frame count differs from latents");
    const Tensor<T> m = mask.resized<T>(z_t.width(), z_t.height());
    DenoiserInput<T> in;
    in.channels = concat<T>({&z_t.z, &m, &z_masked.z}, 1);
    in.t = t;
    in.text = text;
    return in;
}

template <typename T>
double training_loss(const Denoiser<T>& denoiser, const TrainingExample<T>& batch, std::size_t t,
                     const Tensor<T>& eps, const NoiseSchedule& sched) {
    const auto z_t = forward_noise(batch.z0, t, eps, sched);
    const auto pred = denoiser(assemble_inpaint_input(z_t, batch.mask, batch.z_masked, t, batch.text));
    if (pred.shape() != eps.shape()) throw ShapeError("denoiser output shape differs from noise");
    double acc = 0;
    for (std::size_t i = 0; i < eps.size(); ++i) {
        const double d = static_cast<double>(eps[i]) - static_cast<double>(pred[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(eps.size());
}

template <typename T>
Tensor<T> cfg_epsilon(const Tensor<T>& eps_cond, const Tensor<T>& eps_uncond, double scale) {
    if (eps_cond.shape() != eps_uncond.shape()) {
        throw ShapeError("guidance inputs differ in shape");
    }
    Tensor<T> out(eps_cond.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double u = eps_uncond[i];
        out[i] = static_cast<T>(u + scale * (static_cast<double>(eps_cond[i]) - u));
    }
    return out;
}

template <typename T>
Tensor<T> predict_x0(const Tensor<T>& z_t, const Tensor<T>& eps, double alpha_bar) {
    const double a = std::sqrt(alpha_bar);
    const double b = std::sqrt(1.0 - alpha_bar);
    Tensor<T> out(z_t.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<T>((static_cast<double>(z_t[i]) - b * static_cast<double>(eps[i])) / a);
    }
    return out;
}

std::vector<std::size_t> ddim_timesteps(std::size_t T, std::size_t steps) {
    if (steps == 0) throw std::invalid_argument("sampling needs at least one step");
    if (steps > T) {
        throw std::invalid_argument("sampling steps " + std::to_string(steps) +
                                    " exceed schedule length " + std::to_string(T));
    }
    std::vector<std::size_t> ts;
    if (steps == 1) return {T - 1};
    for (std::size_t i = steps; i-- > 0;) {
        ts.push_back((i * (T - 1) + (steps - 1) / 2) / (steps - 1));
    }
    return ts;
}

template <typename T>
Tensor<T> composite_background(const Tensor<T>& generated, const Tensor<T>& known,
                               const Tensor<T>& resized_mask) {
    if (generated.shape() != known.shape()) throw ShapeError("composite inputs differ in shape");
    const Shape& s = generated.shape();
    if (resized_mask.rank() != 4 || resized_mask.dim(0) != s[0] || resized_mask.dim(2) != s[2] ||
        resized_mask.dim(3) != s[3]) {
        throw ShapeError("resized mask " + shape_str(resized_mask.shape()) + " does not match " +
                         shape_str(s));
    }
    Tensor<T> out(s);
    const std::size_t plane = s[2] * s[3];
    for (std::size_t f = 0; f < s[0]; ++f) {
        for (std::size_t c = 0; c < s[1]; ++c) {
            for (std::size_t p = 0; p < plane; ++p) {
                const std::size_t i = (f * s[1] + c) * plane + p;
                const T m = resized_mask[f * plane + p];
                if (m == T{0}) {
                    out[i] = known[i];
                } else if (m == T{1}) {
                    out[i] = generated[i];
                } else {
                    out[i] = m * generated[i] + (T{1} - m) * known[i];
                }
            }
        }
    }
    return out;
}

template <typename T>
SampleResult<T> ddim_sample(const Denoiser<T>& denoiser, const InpaintRequest<T>& request,
                            const NoiseSchedule& sched, const SamplerOptions& options) {
    const Shape& shape = request.known.z.shape();
    if (request.z_masked.z.shape() != shape) throw ShapeError("conditioning and known latents differ");
    SampleResult<T> result;
    result.timesteps = ddim_timesteps(sched.steps(), options.steps);

    Rng rng(options.seed);
    Tensor<T> z(shape);
    for (auto& v : z.data()) v = static_cast<T>(rng.normal());

    const bool guided = options.guidance_scale != 1.0;
    for (std::size_t i = 0; i < result.timesteps.size(); ++i) {
        const std::size_t t = result.timesteps[i];
        const LatentClip<T> zt(z);
        Tensor<T> eps = denoiser(assemble_inpaint_input(zt, request.mask, request.z_masked, t, request.text));
        if (guided) {
            const Tensor<T> eps_u =
                denoiser(assemble_inpaint_input(zt, request.mask, request.z_masked, t, request.null_text));
            eps = cfg_epsilon(eps, eps_u, options.guidance_scale);
        }
        const double a_t = sched.alpha_bars[t];
        const double a_prev = i + 1 < result.timesteps.size() ? sched.alpha_bars[result.timesteps[i + 1]] : 1.0;
        Tensor<T> x0 = predict_x0(z, eps, a_t);
        const double ca = std::sqrt(a_prev), cb = std::sqrt(1.0 - a_prev);
        for (std::size_t e = 0; e < z.size(); ++e) {
            z[e] = static_cast<T>(ca * static_cast<double>(x0[e]) + cb * static_cast<double>(eps[e]));
        }
        if (options.keep_trace) result.x0_trace.push_back(std::move(x0));
    }
    const Tensor<T> m = request.mask.template resized<T>(shape[2], shape[3]);
    result.latents = LatentClip<T>(composite_background(z, request.known.z, m));
    return result;
}

namespace {

// Orthonormalizes the columns (rows when transpose_rows) of a [r, c] matrix.
void gram_schmidt(TensorD& p, bool rows) {
    const std::size_t r = p.dim(0), c = p.dim(1);
    const std::size_t count = rows ? r : c;
    const std::size_t len = rows ? c : r;
    auto at = [&](std::size_t v, std::size_t e) -> double& { return rows ? p[v * c + e] : p[e * c + v]; };
    for (std::size_t v = 0; v < count; ++v) {
        for (std::size_t u = 0; u < v; ++u) {
            double dot = 0;
            for (std::size_t e = 0; e < len; ++e) dot += at(v, e) * at(u, e);
            for (std::size_t e = 0; e < len; ++e) at(v, e) -= dot * at(u, e);
        }
        double norm = 0;
        for (std::size_t e = 0; e < len; ++e) norm += at(v, e) * at(v, e);
        norm = std::sqrt(norm);
        for (std::size_t e = 0; e < len; ++e) at(v, e) /= norm;
    }
}

std::uint64_t fnv1a(const std::string& s, std::uint64_t seed) {
    std::uint64_t h = 1469598103934665603ULL ^ seed;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace

ToyCodec::ToyCodec(std::size_t spatial_factor, std::size_t pixel_channels, std::uint64_t seed)
    : factor_(spatial_factor), pixel_channels_(pixel_channels), projection_({kLatentChannels, pixel_channels}) {
    if (spatial_factor == 0 || pixel_channels == 0) throw std::invalid_argument("codec dims must be positive");
    Rng rng(seed);
    for (auto& v : projection_.data()) v = rng.normal();
    gram_schmidt(projection_, pixel_channels > kLatentChannels);
}

template <typename T>
LatentClip<T> ToyCodec::encode(const Tensor<T>& pixels) const {
    if (pixels.rank() != 4 || pixels.dim(1) != pixel_channels_) {
        throw ShapeError("codec expects [f," + std::to_string(pixel_channels_) + ",w,h], got " +
                         shape_str(pixels.shape()));
    }
    const std::size_t f = pixels.dim(0), c = pixels.dim(1), w = pixels.dim(2), h = pixels.dim(3);
    if (w % factor_ != 0 || h % factor_ != 0) {
        throw ShapeError("frame size " + std::to_string(w) + "x" + std::to_string(h) +
                         " not divisible by codec factor " + std::to_string(factor_));
    }
    const std::size_t w1 = w / factor_, h1 = h / factor_;
    const double inv_area = 1.0 / static_cast<double>(factor_ * factor_);
    std::vector<double> pooled(c);
    Tensor<T> z({f, kLatentChannels, w1, h1});
    for (std::size_t fr = 0; fr < f; ++fr) {
        for (std::size_t x = 0; x < w1; ++x) {
            for (std::size_t y = 0; y < h1; ++y) {
                for (std::size_t ch = 0; ch < c; ++ch) {
                    double acc = 0;
                    for (std::size_t dx = 0; dx < factor_; ++dx)
                        for (std::size_t dy = 0; dy < factor_; ++dy)
                            acc += pixels[((fr * c + ch) * w + x * factor_ + dx) * h + y * factor_ + dy];
                    pooled[ch] = acc * inv_area;
                }
                for (std::size_t l = 0; l < kLatentChannels; ++l) {
                    double acc = 0;
                    for (std::size_t ch = 0; ch < c; ++ch) acc += projection_[l * c + ch] * pooled[ch];
                    z[((fr * kLatentChannels + l) * w1 + x) * h1 + y] = static_cast<T>(acc);
                }
            }
        }
    }
    return LatentClip<T>(std::move(z));
}

template <typename T>
Tensor<T> ToyCodec::decode(const LatentClip<T>& latents) const {
    const std::size_t f = latents.frames(), w1 = latents.width(), h1 = latents.height();
    const std::size_t c = pixel_channels_, w = w1 * factor_, h = h1 * factor_;
    Tensor<T> out({f, c, w, h});
    for (std::size_t fr = 0; fr < f; ++fr) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            for (std::size_t x = 0; x < w; ++x) {
                for (std::size_t y = 0; y < h; ++y) {
                    double acc = 0;
                    for (std::size_t l = 0; l < kLatentChannels; ++l) {
                        acc += projection_[l * c + ch] *
                               latents.z[((fr * kLatentChannels + l) * w1 + x / factor_) * h1 + y / factor_];
                    }
                    out[((fr * c + ch) * w + x) * h + y] = static_cast<T>(acc);
                }
            }
        }
    }
    return out;
}

template <typename T>
TextEmbedding<T> null_text_embedding(std::size_t d_text) {
    return TextEmbedding<T>{Tensor<T>({1, d_text})};
}

template <typename T>
TextEmbedding<T> ToyTextEncoder::encode(const std::string& prompt) const {
    std::istringstream is(prompt);
    std::vector<std::string> tokens;
    for (std::string tok; is >> tok;) tokens.push_back(tok);
    if (tokens.empty()) return null_text_embedding<T>(d_text_);
    Tensor<T> out({tokens.size(), d_text_});
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        Rng rng(fnv1a(tokens[i], seed_));
        for (std::size_t j = 0; j < d_text_; ++j) out[i * d_text_ + j] = static_cast<T>(rng.normal());
    }
    return TextEmbedding<T>{std::move(out)};
}

template <typename T>
Tensor<T> timestep_embedding(std::size_t t, std::size_t dim) {
    Tensor<T> out({dim});
    const std::size_t half = dim / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        out[i] = static_cast<T>(std::sin(static_cast<double>(t) * freq));
        out[half + i] = static_cast<T>(std::cos(static_cast<double>(t) * freq));
    }
    return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> ToyDenoiserParams<T>::entries() {
    std::vector<std::pair<std::string, Tensor<T>*>> out{{"denoiser.in_proj", &in_proj},
                                                        {"denoiser.in_bias", &in_bias},
                                                        {"denoiser.time_proj", &time_proj},
                                                        {"denoiser.out_proj", &out_proj},
                                                        {"denoiser.out_bias", &out_bias}};
    for (auto& e : block.entries()) out.push_back(e);
    return out;
}

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> ToyDenoiserParams<T>::entries() const {
    auto mutable_entries = const_cast<ToyDenoiserParams*>(this)->entries();
    return {mutable_entries.begin(), mutable_entries.end()};
}

template <typename T>
template <typename U>
ToyDenoiserParams<U> ToyDenoiserParams<T>::cast() const {
    return ToyDenoiserParams<U>{in_proj.template cast<U>(), in_bias.template cast<U>(),
                                time_proj.template cast<U>(), out_proj.template cast<U>(),
                                out_bias.template cast<U>(), block.template cast<U>()};
}

template <typename T>
ToyDenoiserParams<T> init_toy_denoiser(std::uint64_t seed, const DenoiserConfig& config) {
    const std::size_t d = config.d_model;
    Rng rng(seed);
    ToyDenoiserParams<T> p;
    p.in_proj = motion::kaiming_normal<T>({kInpaintChannels, d}, kInpaintChannels, rng);
    p.in_bias = Tensor<T>({d});
    p.time_proj = motion::kaiming_normal<T>({d, d}, d, rng);
    p.out_proj = motion::kaiming_normal<T>({d, kLatentChannels}, d, rng);
    p.out_bias = Tensor<T>({kLatentChannels});
    motion::InitOptions opts;
    opts.heads = config.heads;
    opts.target = config.target;
    p.block = motion::init_motion_block<T>(rng.engine()(), d, config.d_text, opts);
    return p;
}

template <typename T>
BoundToyDenoiser<T> bind(Tape<T>& tape, const ToyDenoiserParams<T>& params) {
    BoundToyDenoiser<T> b;
    b.in_proj = tape.leaf(params.in_proj, "denoiser.in_proj");
    b.in_bias = tape.leaf(params.in_bias, "denoiser.in_bias");
    b.time_proj = tape.leaf(params.time_proj, "denoiser.time_proj");
    b.out_proj = tape.leaf(params.out_proj, "denoiser.out_proj");
    b.out_bias = tape.leaf(params.out_bias, "denoiser.out_bias");
    for (const auto* v : {&b.in_proj, &b.in_bias, &b.time_proj, &b.out_proj, &b.out_bias}) {
        b.leaf_ids.emplace_back(tape.node(v->id).op, v->id);
    }
    b.block = motion::bind(tape, params.block);
    for (const auto& e : b.block.leaf_ids) b.leaf_ids.push_back(e);
    return b;
}

template <typename T>
Var<T> toy_denoiser_forward(Var<T> channels, std::size_t t, Var<T> text, const BoundToyDenoiser<T>& p) {
    const Shape s = channels.shape();
    if (s.size() != 4 || s[1] != kInpaintChannels) {
        throw ShapeError("denoiser input must be [f,9,w1,h1], got " + shape_str(s));
    }
    const std::size_t f = s[0], w = s[2], h = s[3];
    const std::size_t d = p.in_proj.shape()[1];
    auto temb = channels.tape->leaf(reshape_view(timestep_embedding<T>(t, d), {1, d}), "temb");
    auto bias = ag::add(p.in_bias, ag::reshape(ag::matmul(temb, p.time_proj), {d}));
    auto hidden = ag::add_last(ag::matmul(ag::permute(channels, {0, 2, 3, 1}), p.in_proj), bias);
    auto video = ag::reshape(ag::permute(hidden, {0, 3, 1, 2}), {1, f, d, w, h});
    auto mixed = motion::motion_block_forward(video, text, p.block);
    auto last = ag::permute(ag::reshape(mixed, {f, d, w, h}), {0, 2, 3, 1});
    auto out = ag::add_last(ag::matmul(last, p.out_proj), p.out_bias);
    return ag::permute(out, {0, 3, 1, 2});
}

template <typename T>
Denoiser<T> make_toy_denoiser(ToyDenoiserParams<T> params) {
    auto shared = std::make_shared<const ToyDenoiserParams<T>>(std::move(params));
    return [shared](const DenoiserInput<T>& in) {
        Tape<T> tape;
        auto bound = bind(tape, *shared);
        auto ch = tape.leaf(in.channels, "channels");
        auto text = tape.leaf(in.text.tokens, "text");
        return toy_denoiser_forward(ch, in.t, text, bound).value();
    };
}

ckpt::Checkpoint to_checkpoint(const ToyDenoiserParams<float>& params, const DenoiserConfig& config) {
    ckpt::Checkpoint out;
    for (const auto& [name, tensor] : params.entries()) out.emplace(name, *tensor);
    auto meta = [&](const char* key, std::size_t v) {
        out.emplace(std::string("meta.") + key, TensorF::scalar(static_cast<float>(v)));
    };
    meta("d_model", config.d_model);
    meta("d_text", config.d_text);
    meta("heads", config.heads);
    meta("target_w", config.target.w);
    meta("target_h", config.target.h);
    meta("timesteps", config.timesteps);
    return out;
}

ToyDenoiserParams<float> from_checkpoint(const ckpt::Checkpoint& ckpt, DenoiserConfig* config_out) {
    auto meta = [&](const char* key) -> std::size_t {
        const std::string name = std::string("meta.") + key;
        auto it = ckpt.find(name);
        if (it == ckpt.end() || it->second.size() != 1 || !(it->second[0] >= 1.0f)) {
            throw LoadError(name, "missing or invalid architecture entry");
        }
        return static_cast<std::size_t>(it->second[0]);
    };
    DenoiserConfig config;
    config.d_model = meta("d_model");
    config.d_text = meta("d_text");
    config.heads = meta("heads");
    config.target = {meta("target_w"), meta("target_h")};
    config.timesteps = meta("timesteps");
    auto params = init_toy_denoiser<float>(0, config);
    for (auto& [name, slot] : params.entries()) {
        auto it = ckpt.find(name);
        if (it == ckpt.end()) throw LoadError(name, "missing from checkpoint");
        if (it->second.shape() != slot->shape()) {
            throw LoadError(name, "shape " + shape_str(it->second.shape()) + " but expected " +
                                      shape_str(slot->shape()));
        }
        *slot = it->second;
    }
    if (config_out) *config_out = config;
    return params;
}

template <typename T>
void AdamW<T>::step(const std::vector<Tensor<T>*>& params, const std::vector<const Tensor<T>*>& grads) {
    if (params.size() != grads.size()) throw std::invalid_argument("parameter/gradient count mismatch");
    if (m_.empty()) {
        for (const auto* p : params) {
            m_.emplace_back(p->size(), 0.0);
            v_.emplace_back(p->size(), 0.0);
        }
    }
    if (m_.size() != params.size()) throw std::invalid_argument("parameter list changed between steps");
    ++step_;
    const auto& o = options_;
    const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i]->data();
        auto g = grads[i]->data();
        if (p.size() != g.size()) throw ShapeError("gradient size differs from parameter");
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t e = 0; e < p.size(); ++e) {
            const double ge = g[e];
            m[e] = o.beta1 * m[e] + (1.0 - o.beta1) * ge;
            v[e] = o.beta2 * v[e] + (1.0 - o.beta2) * ge * ge;
            const double update = (m[e] / bc1) / (std::sqrt(v[e] / bc2) + o.eps);
            const double decayed = static_cast<double>(p[e]) - o.lr * o.weight_decay * static_cast<double>(p[e]);
            p[e] = static_cast<T>(decayed - o.lr * update);
        }
    }
}

TrainConfig TrainConfig::parse(const std::string& text) {
    TrainConfig c;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            if (b == std::string::npos) return std::string{};
            const auto e = s.find_last_not_of(" \t\r");
            return s.substr(b, e - b + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        try {
            auto as_size = [&] {
                std::size_t used = 0;
                const long long v = std::stoll(value, &used);
                if (used != value.size() || v < 0) throw std::invalid_argument(value);
                return static_cast<std::size_t>(v);
            };
            auto as_double = [&] {
                std::size_t used = 0;
                const double v = std::stod(value, &used);
                if (used != value.size() || !std::isfinite(v)) throw std::invalid_argument(value);
                return v;
            };
            if (key == "steps") c.steps = as_size();
            else if (key == "lr") c.lr = as_double();
            else if (key == "weight_decay") c.weight_decay = as_double();
            else if (key == "seed") c.seed = as_size();
            else if (key == "frames") c.frames = as_size();
            else if (key == "latent_w") c.latent_w = as_size();
            else if (key == "latent_h") c.latent_h = as_size();
            else if (key == "d_model") c.model.d_model = as_size();
            else if (key == "d_text") c.model.d_text = as_size();
            else if (key == "heads") c.model.heads = as_size();
            else if (key == "target_w") c.model.target.w = as_size();
            else if (key == "target_h") c.model.target.h = as_size();
            else if (key == "timesteps") c.model.timesteps = as_size();
            else if (key == "beta_start") c.beta_start = as_double();
            else if (key == "beta_end") c.beta_end = as_double();
            else if (key == "fixed_noise") c.fixed_noise = as_size() != 0;
            else if (key == "clips") c.clips = as_size();
            else if (key == "prompt") c.prompt = value;
            else throw std::out_of_range(key);
        } catch (const std::out_of_range&) {
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key or value out of range: " + key);
        } catch (const std::invalid_argument&) {
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": bad value for " + key + ": " + value);
        }
    }
    return c;
}

std::string TrainConfig::to_string() const {
    std::ostringstream os;
    os << "steps=" << steps << " lr=" << lr << " weight_decay=" << weight_decay << " seed=" << seed
       << " frames=" << frames << " latent_w=" << latent_w << " latent_h=" << latent_h
       << " d_model=" << model.d_model << " d_text=" << model.d_text << " heads=" << model.heads
       << " target_w=" << model.target.w << " target_h=" << model.target.h
       << " timesteps=" << model.timesteps << " beta_start=" << beta_start << " beta_end=" << beta_end
       << " fixed_noise=" << fixed_noise << " clips=" << clips << " prompt=\"" << prompt << "\"";
    return os.str();
}

template <typename T>
TrainingExample<T> make_synthetic_example(std::size_t frames, std::size_t latent_w, std::size_t latent_h,
                                          const ToyCodec& codec, const ToyTextEncoder& text_encoder,
                                          const std::string& prompt, std::uint64_t seed) {
    const std::size_t s = codec.spatial_factor();
    const std::size_t c = codec.pixel_channels();
    const std::size_t w = latent_w * s, h = latent_h * s;
    Rng rng(seed);
    std::vector<double> phase(c), freq(c), color(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
        phase[ch] = rng.uniform(0.0, 6.283185307179586);
        freq[ch] = rng.uniform(0.5, 2.0);
        color[ch] = rng.uniform(0.6, 1.0);
    }
    const double radius = 0.12 * static_cast<double>(std::min(w, h));
    const double x_start = rng.uniform(0.25, 0.4) * static_cast<double>(w);
    const double x_end = rng.uniform(0.6, 0.75) * static_cast<double>(w);
    const double y_center = rng.uniform(0.35, 0.65) * static_cast<double>(h);

    Tensor<T> pixels({frames, c, w, h});
    TensorF mask({frames, 1, w, h});
    for (std::size_t f = 0; f < frames; ++f) {
        const double u = frames == 1 ? 0.0 : static_cast<double>(f) / static_cast<double>(frames - 1);
        const double cx = x_start + u * (x_end - x_start);
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t y = 0; y < h; ++y) {
                const double dx = static_cast<double>(x) + 0.5 - cx;
                const double dy = static_cast<double>(y) + 0.5 - y_center;
                const double blob = std::exp(-(dx * dx + dy * dy) / (2.0 * radius * radius * 0.25));
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const double bg = 0.35 + 0.15 * std::sin(freq[ch] * 6.283185307179586 *
                                                                 static_cast<double>(x + y) / static_cast<double>(w) + phase[ch]);
                    pixels[((f * c + ch) * w + x) * h + y] = static_cast<T>(bg * (1.0 - blob) + color[ch] * blob);
                }
                if (std::abs(dx) <= radius && std::abs(dy) <= radius) mask[(f * w + x) * h + y] = 1.0f;
            }
        }
    }
    Tensor<T> masked = pixels;
    for (std::size_t f = 0; f < frames; ++f)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < w * h; ++p)
                if (mask[f * w * h + p] != 0.0f) masked[(f * c + ch) * w * h + p] = T{0};

    TrainingExample<T> ex;
    ex.z0 = codec.encode(pixels);
    ex.mask = MaskSequence(std::move(mask));
    ex.z_masked = codec.encode(masked);
    ex.text = text_encoder.encode<T>(prompt);
    return ex;
}

template <typename T>
TrainResult<T> train_toy(ToyDenoiserParams<T> params, const std::vector<TrainingExample<T>>& dataset,
                         const NoiseSchedule& sched, const TrainConfig& config) {
    if (dataset.empty()) throw std::invalid_argument("training dataset is empty");
    Rng rng(config.seed);
    auto draw = [&](const TrainingExample<T>& ex) {
        const std::size_t t = rng.index(sched.steps());
        Tensor<T> eps(ex.z0.z.shape());
        for (auto& v : eps.data()) v = static_cast<T>(rng.normal());
        return std::pair{t, std::move(eps)};
    };
    std::vector<std::pair<std::size_t, Tensor<T>>> fixed;
    if (config.fixed_noise) {
        for (const auto& ex : dataset) fixed.push_back(draw(ex));
    }

    AdamW<T> opt({config.lr, 0.9, 0.999, 1e-8, config.weight_decay});
    TrainResult<T> result;
    result.losses.reserve(config.steps);
    for (std::size_t step = 0; step < config.steps; ++step) {
        const auto& ex = dataset[step % dataset.size()];
        auto [t, eps] = config.fixed_noise ? fixed[step % dataset.size()] : draw(ex);

        Tape<T> tape;
        auto bound = bind(tape, params);
        const auto z_t = forward_noise(ex.z0, t, eps, sched);
        const auto input = assemble_inpaint_input(z_t, ex.mask, ex.z_masked, t, ex.text);
        auto pred = toy_denoiser_forward(tape.leaf(input.channels, "channels"), t,
                                         tape.leaf(ex.text.tokens, "text"), bound);
        auto loss = ag::mse(pred, tape.leaf(eps, "eps"));
        result.losses.push_back(static_cast<double>(loss.value()[0]));

        const auto grads = backward(loss);
        std::vector<Tensor<T>*> slots;
        std::vector<const Tensor<T>*> gs;
        auto entries = params.entries();
        for (std::size_t i = 0; i < entries.size(); ++i) {
            slots.push_back(entries[i].second);
            gs.push_back(&grads.at(bound.leaf_ids[i].second));
        }
        opt.step(slots, gs);
    }
    result.params = std::move(params);
    return result;
}

std::string loss_csv(const std::vector<double>& losses) {
    std::ostringstream os;
    os.precision(9);
    os << "step,loss\n";
    for (std::size_t i = 0; i < losses.size(); ++i) os << i << ',' << losses[i] << '\n';
    return os.str();
}

#define VINPAINT_INSTANTIATE_DIFFUSION(T)                                                                  \
    template struct LatentClip<T>;                                                                         \
    template Tensor<T> MaskSequence::resized<T>(std::size_t, std::size_t) const;                           \
    template LatentClip<T> forward_noise(const LatentClip<T>&, const Tensor<T>&, double);                  \
    template LatentClip<T> forward_noise(const LatentClip<T>&, std::size_t, const Tensor<T>&,              \
                                         const NoiseSchedule&);                                            \
    template DenoiserInput<T> assemble_inpaint_input(const LatentClip<T>&, const MaskSequence&,            \
                                                     const LatentClip<T>&, std::size_t,                    \
                                                     const TextEmbedding<T>&);                             \
    template double training_loss(const Denoiser<T>&, const TrainingExample<T>&, std::size_t,              \
                                  const Tensor<T>&, const NoiseSchedule&);                                 \
    template Tensor<T> cfg_epsilon(const Tensor<T>&, const Tensor<T>&, double);                            \
    template Tensor<T> predict_x0(const Tensor<T>&, const Tensor<T>&, double);                             \
    template Tensor<T> composite_background(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);         \
    template SampleResult<T> ddim_sample(const Denoiser<T>&, const InpaintRequest<T>&,                     \
                                         const NoiseSchedule&, const SamplerOptions&);                     \
    template LatentClip<T> ToyCodec::encode(const Tensor<T>&) const;                                       \
    template Tensor<T> ToyCodec::decode(const LatentClip<T>&) const;                                       \
    template TextEmbedding<T> ToyTextEncoder::encode<T>(const std::string&) const;                         \
    template TextEmbedding<T> null_text_embedding<T>(std::size_t);                                         \
    template Tensor<T> timestep_embedding<T>(std::size_t, std::size_t);                                    \
    template struct ToyDenoiserParams<T>;                                                                  \
    template ToyDenoiserParams<T> init_toy_denoiser<T>(std::uint64_t, const DenoiserConfig&);              \
    template BoundToyDenoiser<T> bind(Tape<T>&, const ToyDenoiserParams<T>&);                              \
    template Var<T> toy_denoiser_forward(Var<T>, std::size_t, Var<T>, const BoundToyDenoiser<T>&);         \
    template Denoiser<T> make_toy_denoiser(ToyDenoiserParams<T>);                                          \
    template class AdamW<T>;                                                                               \
    template TrainingExample<T> make_synthetic_example<T>(std::size_t, std::size_t, std::size_t,           \
                                                          const ToyCodec&, const ToyTextEncoder&,          \
                                                          const std::string&, std::uint64_t);              \
    template TrainResult<T> train_toy(ToyDenoiserParams<T>, const std::vector<TrainingExample<T>>&,        \
                                      const NoiseSchedule&, const TrainConfig&);

VINPAINT_INSTANTIATE_DIFFUSION(float)
VINPAINT_INSTANTIATE_DIFFUSION(double)

#undef VINPAINT_INSTANTIATE_DIFFUSION

template ToyDenoiserParams<double> ToyDenoiserParams<float>::cast<double>() const;
template ToyDenoiserParams<float> ToyDenoiserParams<double>::cast<float>() const;

}  // namespace vinpaint::diffusion

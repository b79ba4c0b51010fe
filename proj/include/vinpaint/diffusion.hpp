#pragma once

// Latent-diffusion inpainting machinery: noise schedule, forward noising,
// the 9-channel denoiser input, the noise-prediction loss, DDIM sampling with
// classifier-free guidance, a deterministic stand-in codec, and a small
// trainable denoiser built around one motion-capture block.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "vinpaint/checkpoint.hpp"
#include "vinpaint/motion.hpp"
#include "vinpaint/rng.hpp"
#include "vinpaint/tape.hpp"
#include "vinpaint/tensor.hpp"

namespace vinpaint::diffusion {

using motion::TextEmbedding;

inline constexpr std::size_t kLatentChannels = 4;
inline constexpr std::size_t kInpaintChannels = 9;

struct NoiseSchedule {
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;

    std::size_t steps() const noexcept { return betas.size(); }
};

/// Linear β grid from beta_start to beta_end over `T` steps.
NoiseSchedule build_schedule(std::size_t T, double beta_start = 1e-4, double beta_end = 2e-2);

/// Latent video [f, 4, w1, h1].
template <typename T>
struct LatentClip {
    Tensor<T> z;

    LatentClip() : z({1, kLatentChannels, 1, 1}) {}
    explicit LatentClip(Tensor<T> latents);

    std::size_t frames() const { return z.dim(0); }
    std::size_t width() const { return z.dim(2); }
    std::size_t height() const { return z.dim(3); }
};

/// Binary per-frame mask [f, 1, w, h]; 1 marks the region to inpaint.
struct MaskSequence {
    TensorF m;

    MaskSequence() : m({1, 1, 1, 1}) {}
    explicit MaskSequence(TensorF mask);

    std::size_t frames() const { return m.dim(0); }
    std::size_t width() const { return m.dim(2); }
    std::size_t height() const { return m.dim(3); }

    /// Mask downsampled to latent resolution; values lie in [0, 1].
    template <typename T>
    Tensor<T> resized(std::size_t w1, std::size_t h1) const;

    /// Fraction of pixels set in `frame`.
    double area_fraction(std::size_t frame) const;
    bool empty() const;
};

/// z_t = sqrt(ᾱ)·z0 + sqrt(1 − ᾱ)·eps.
template <typename T>
LatentClip<T> forward_noise(const LatentClip<T>& z0, const Tensor<T>& eps, double alpha_bar);

template <typename T>
LatentClip<T> forward_noise(const LatentClip<T>& z0, std::size_t t, const Tensor<T>& eps,
                            const NoiseSchedule& sched);

template <typename T>
struct DenoiserInput {
    Tensor<T> channels;  // [f, 9, w1, h1]: z_t, resized mask, masked latents
    std::size_t t = 0;
    TextEmbedding<T> text;
};

/// Concatenates [z_t (4), m̄ (1), z_masked (4)] along the channel axis.
template <typename T>
DenoiserInput<T> assemble_inpaint_input(const LatentClip<T>& z_t, const MaskSequence& mask,
                                        const LatentClip<T>& z_masked, std::size_t t,
                                        const TextEmbedding<T>& text);

/// Predicts the noise in `input.channels[0:4]`; output shape [f, 4, w1, h1].
template <typename T>
using Denoiser = std::function<Tensor<T>(const DenoiserInput<T>&)>;

template <typename T>
struct TrainingExample {
    LatentClip<T> z0;
    MaskSequence mask;
    LatentClip<T> z_masked;  // encoding of the clip with the masked region removed
    TextEmbedding<T> text;
};

/// Mean over all elements of (eps − eps_θ(z_t, m̄, z_masked, t, text))².
template <typename T>
double training_loss(const Denoiser<T>& denoiser, const TrainingExample<T>& batch, std::size_t t,
                     const Tensor<T>& eps, const NoiseSchedule& sched);

/// eps_uncond + scale · (eps_cond − eps_uncond).
template <typename T>
Tensor<T> cfg_epsilon(const Tensor<T>& eps_cond, const Tensor<T>& eps_uncond, double scale);

/// Clean-latent estimate implied by a noise prediction at ᾱ.
template <typename T>
Tensor<T> predict_x0(const Tensor<T>& z_t, const Tensor<T>& eps, double alpha_bar);

/// Uniformly strided subset of [0, T) that includes T − 1, in descending order.
std::vector<std::size_t> ddim_timesteps(std::size_t T, std::size_t steps);

template <typename T>
struct InpaintRequest {
    MaskSequence mask;
    LatentClip<T> z_masked;  // conditioning latents of the masked clip
    LatentClip<T> known;     // background latents composited outside the mask
    TextEmbedding<T> text;
    TextEmbedding<T> null_text;
};

struct SamplerOptions {
    std::size_t steps = 50;
    double guidance_scale = 14.0;
    std::uint64_t seed = 0;
    bool keep_trace = false;
};

template <typename T>
struct SampleResult {
    LatentClip<T> latents;
    std::vector<std::size_t> timesteps;
    std::vector<Tensor<T>> x0_trace;  // predicted clean latents per step, when requested
};

/// Deterministic (η = 0) DDIM with classifier-free guidance, followed by
/// latent-space compositing m̄·generated + (1 − m̄)·known.
template <typename T>
SampleResult<T> ddim_sample(const Denoiser<T>& denoiser, const InpaintRequest<T>& request,
                            const NoiseSchedule& sched, const SamplerOptions& options);

/// m̄·generated + (1 − m̄)·known with exact pass-through where m̄ is 0 or 1.
template <typename T>
Tensor<T> composite_background(const Tensor<T>& generated, const Tensor<T>& known,
                               const Tensor<T>& resized_mask);

/// Stand-in for a VAE: s×s average pooling followed by a fixed seeded
/// orthonormal channel projection to 4 latent channels. Decoding applies the
/// pseudo-inverse (transpose projection, then nearest upsampling), so
/// encode(decode(z)) == z for latents in the encoder's range.
class ToyCodec {
public:
    explicit ToyCodec(std::size_t spatial_factor = 8, std::size_t pixel_channels = 3,
                      std::uint64_t seed = 0);

    template <typename T>
    LatentClip<T> encode(const Tensor<T>& pixels) const;  // [f, c, w, h] -> [f, 4, w/s, h/s]

    template <typename T>
    Tensor<T> decode(const LatentClip<T>& latents) const;

    std::size_t spatial_factor() const noexcept { return factor_; }
    std::size_t pixel_channels() const noexcept { return pixel_channels_; }
    const TensorD& projection() const noexcept { return projection_; }  // [4, c]

private:
    std::size_t factor_;
    std::size_t pixel_channels_;
    TensorD projection_;
};

/// Hashes whitespace-separated tokens to seeded unit-scale vectors. The empty
/// prompt maps to the null embedding (one all-zero row).
class ToyTextEncoder {
public:
    explicit ToyTextEncoder(std::size_t d_text = 8, std::uint64_t seed = 0) : d_text_(d_text), seed_(seed) {}

    template <typename T>
    TextEmbedding<T> encode(const std::string& prompt) const;

    std::size_t dim() const noexcept { return d_text_; }

private:
    std::size_t d_text_;
    std::uint64_t seed_;
};

template <typename T>
TextEmbedding<T> null_text_embedding(std::size_t d_text);

struct DenoiserConfig {
    std::size_t d_model = 8;
    std::size_t d_text = 8;
    std::size_t heads = 8;
    motion::GridSize target{8, 6};
    std::size_t timesteps = 1000;
};

/// 1×1 channel mixing 9 → d_model plus a timestep embedding, one motion-capture
/// block, and a d_model → 4 projection.
template <typename T>
struct ToyDenoiserParams {
    Tensor<T> in_proj;    // [9, d_model]
    Tensor<T> in_bias;    // [d_model]
    Tensor<T> time_proj;  // [d_model, d_model], applied to the sinusoidal embedding
    Tensor<T> out_proj;   // [d_model, 4]
    Tensor<T> out_bias;   // [4]
    motion::MotionBlockParams<T> block;

    std::vector<std::pair<std::string, Tensor<T>*>> entries();
    std::vector<std::pair<std::string, const Tensor<T>*>> entries() const;

    template <typename U>
    ToyDenoiserParams<U> cast() const;
};

template <typename T>
ToyDenoiserParams<T> init_toy_denoiser(std::uint64_t seed, const DenoiserConfig& config);

/// Sinusoidal embedding of timestep t, shape [dim].
template <typename T>
Tensor<T> timestep_embedding(std::size_t t, std::size_t dim);

template <typename T>
struct BoundToyDenoiser {
    Var<T> in_proj, in_bias, time_proj, out_proj, out_bias;
    motion::BoundMotionBlock<T> block;
    std::vector<std::pair<std::string, std::size_t>> leaf_ids;
};

template <typename T>
BoundToyDenoiser<T> bind(Tape<T>& tape, const ToyDenoiserParams<T>& params);

template <typename T>
Var<T> toy_denoiser_forward(Var<T> channels, std::size_t t, Var<T> text, const BoundToyDenoiser<T>& p);

/// Wraps trained parameters as a Denoiser.
template <typename T>
Denoiser<T> make_toy_denoiser(ToyDenoiserParams<T> params);

/// Parameters plus the architecture scalars as "meta.*" entries.
ckpt::Checkpoint to_checkpoint(const ToyDenoiserParams<float>& params, const DenoiserConfig& config);
ToyDenoiserParams<float> from_checkpoint(const ckpt::Checkpoint& ckpt, DenoiserConfig* config = nullptr);

struct AdamWOptions {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-2;
};

/// Decoupled-weight-decay Adam over a fixed, ordered parameter list.
template <typename T>
class AdamW {
public:
    explicit AdamW(AdamWOptions options) : options_(options) {}

    void step(const std::vector<Tensor<T>*>& params, const std::vector<const Tensor<T>*>& grads);
    std::size_t iterations() const noexcept { return step_; }

private:
    AdamWOptions options_;
    std::size_t step_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

struct TrainConfig {
    std::size_t steps = 500;
    double lr = 1e-4;
    double weight_decay = 1e-2;
    std::uint64_t seed = 0;
    std::size_t frames = 8;
    std::size_t latent_w = 16;
    std::size_t latent_h = 12;
    DenoiserConfig model;
    double beta_start = 1e-4;
    double beta_end = 2e-2;
    /// Draw (t, eps) once per example and reuse it every step.
    bool fixed_noise = true;
    std::size_t clips = 1;
    std::string prompt = "a red ball bouncing";

    /// Flat "key = value" text with '#' comments. Unknown keys are rejected.
    static TrainConfig parse(const std::string& text);
    std::string to_string() const;
};

template <typename T>
struct TrainResult {
    ToyDenoiserParams<T> params;
    std::vector<double> losses;
};

/// One synthetic clip: a bright blob drifting across a textured background,
/// encoded with `codec`, masked by a box around the blob's path.
template <typename T>
TrainingExample<T> make_synthetic_example(std::size_t frames, std::size_t latent_w, std::size_t latent_h,
                                          const ToyCodec& codec, const ToyTextEncoder& text_encoder,
                                          const std::string& prompt, std::uint64_t seed);

template <typename T>
TrainResult<T> train_toy(ToyDenoiserParams<T> params, const std::vector<TrainingExample<T>>& dataset,
                         const NoiseSchedule& sched, const TrainConfig& config);

/// Loss curve as CSV "step,loss".
std::string loss_csv(const std::vector<double>& losses);

}  // namespace vinpaint::diffusion

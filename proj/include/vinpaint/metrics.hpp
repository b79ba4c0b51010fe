#pragma once

// Video inpainting quality metrics: background preservation (L1 on a 0-255
// scale), temporal consistency of consecutive frame features, and a
// text-alignment score over a pluggable embedding provider.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vinpaint/diffusion.hpp"
#include "vinpaint/tensor.hpp"

namespace vinpaint::metrics {

using Feature = std::vector<double>;

/// Mean |original − result| × 255 over pixels where the mask is 0, across all
/// frames and channels jointly. nullopt when the mask leaves no background.
/// Inputs are [f, c, w, h] on a [0, 1] scale; the mask is [f, 1, w, h].
template <typename T>
std::optional<double> background_preservation(const Tensor<T>& original, const Tensor<T>& result,
                                              const diffusion::MaskSequence& mask);

/// cos(a, b) in f64; nullopt when either vector is all zeros.
std::optional<double> cosine(const Feature& a, const Feature& b);

/// 100 × mean cosine of consecutive frames; nullopt if any feature is zero.
std::optional<double> temporal_consistency(const std::vector<Feature>& frames);

/// Mean over frames of max(0, 100 × cos(frame, text)); nullopt if any feature is zero.
std::optional<double> clip_style_score(const std::vector<Feature>& frames, const Feature& text);

class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual std::size_t dim() const = 0;
    virtual Feature embed_frame(const TensorF& frame) const = 0;  // [c, w, h]
    virtual Feature embed_text(const std::string& text) const = 0;
};

/// Deterministic stand-in: frames are mean-pooled over a grid×grid layout per
/// channel, prompts are averaged hashed token vectors; both pass through fixed
/// seeded Gaussian projections.
class RandomProjectionProvider final : public EmbeddingProvider {
public:
    RandomProjectionProvider(std::size_t dim, std::size_t channels, std::uint64_t seed, std::size_t grid = 2,
                             std::size_t text_dim = 8);

    std::size_t dim() const override { return dim_; }
    Feature embed_frame(const TensorF& frame) const override;
    Feature embed_text(const std::string& text) const override;

private:
    std::size_t dim_, channels_, grid_, text_dim_;
    std::uint64_t seed_;
    std::vector<double> frame_proj_;  // [dim, channels·grid²]
    std::vector<double> text_proj_;   // [dim, text_dim]
};

std::vector<Feature> embed_frames(const EmbeddingProvider& provider, const TensorF& video);

struct MetricRow {
    std::string clip_id;
    std::optional<double> cs, bp, tc;
};

MetricRow evaluate_clip(const EmbeddingProvider& provider, const std::string& clip_id, const TensorF& original,
                        const TensorF& result, const diffusion::MaskSequence& mask, const std::string& prompt);

/// "clip_id,cs,bp,tc"; undefined values are written as "undefined".
std::string to_csv(const std::vector<MetricRow>& rows);

}  // namespace vinpaint::metrics

#include "vinpaint/metrics.hpp"

#include <cmath>
#include <sstream>

#include "vinpaint/error.hpp"
#include "vinpaint/rng.hpp"

namespace vinpaint::metrics {

template <typename T>
std::optional<double> background_preservation(const Tensor<T>& original, const Tensor<T>& result,
                                              const diffusion::MaskSequence& mask) {
    if (original.shape() != result.shape()) {
        throw ShapeError("original " + shape_str(original.shape()) + " vs result " + shape_str(result.shape()));
    }
    if (original.rank() != 4) throw ShapeError("videos must be [f,c,w,h]");
    const std::size_t f = original.dim(0), c = original.dim(1), plane = original.dim(2) * original.dim(3);
    if (mask.frames() != f || mask.width() != original.dim(2) || mask.height() != original.dim(3)) {
        throw ShapeError("mask " + shape_str(mask.m.shape()) + " does not match video " + shape_str(original.shape()));
    }
    double acc = 0;
    std::size_t n = 0;
    for (std::size_t fr = 0; fr < f; ++fr) {
        for (std::size_t p = 0; p < plane; ++p) {
            if (mask.m[fr * plane + p] != 0.0f) continue;
            for (std::size_t ch = 0; ch < c; ++ch) {
                const std::size_t i = (fr * c + ch) * plane + p;
                acc += std::abs(static_cast<double>(original[i]) - static_cast<double>(result[i]));
                ++n;
            }
        }
    }
    if (n == 0) return std::nullopt;
    return acc / static_cast<double>(n) * 255.0;
}

std::optional<double> cosine(const Feature& a, const Feature& b) {
    if (a.size() != b.size()) {
        throw ShapeError("feature dims " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
    }
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (aa == 0.0 || bb == 0.0) return std::nullopt;
    return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

std::optional<double> temporal_consistency(const std::vector<Feature>& frames) {
    if (frames.size() < 2) throw std::invalid_argument("temporal consistency needs at least 2 frames");
    double acc = 0;
    for (std::size_t i = 1; i < frames.size(); ++i) {
        const auto c = cosine(frames[i - 1], frames[i]);
        if (!c) return std::nullopt;
        acc += *c;
    }
    return 100.0 * acc / static_cast<double>(frames.size() - 1);
}

std::optional<double> clip_style_score(const std::vector<Feature>& frames, const Feature& text) {
    if (frames.empty()) throw std::invalid_argument("score needs at least one frame");
    double acc = 0;
    for (const auto& f : frames) {
        const auto c = cosine(f, text);
        if (!c) return std::nullopt;
        acc += std::max(0.0, 100.0 * *c);
    }
    return acc / static_cast<double>(frames.size());
}

RandomProjectionProvider::RandomProjectionProvider(std::size_t dim, std::size_t channels, std::uint64_t seed,
                                                   std::size_t grid, std::size_t text_dim)
    : dim_(dim), channels_(channels), grid_(grid), text_dim_(text_dim), seed_(seed) {
    if (dim == 0 || channels == 0 || grid == 0 || text_dim == 0) {
        throw std::invalid_argument("provider dims must be positive");
    }
    Rng rng(seed);
    frame_proj_.resize(dim * channels * grid * grid);
    for (auto& v : frame_proj_) v = rng.normal();
    text_proj_.resize(dim * text_dim);
    for (auto& v : text_proj_) v = rng.normal();
}

Feature RandomProjectionProvider::embed_frame(const TensorF& frame) const {
    if (frame.rank() != 3 || frame.dim(0) != channels_) {
        throw ShapeError("provider expects [" + std::to_string(channels_) + ",w,h], got " + shape_str(frame.shape()));
    }
    const std::size_t w = frame.dim(1), h = frame.dim(2);
    const std::size_t g = grid_;
    std::vector<double> pooled(channels_ * g * g);
    std::vector<double> counts(g * g);
    for (std::size_t x = 0; x < w; ++x) {
        for (std::size_t y = 0; y < h; ++y) {
            const std::size_t cell = (x * g / w) * g + y * g / h;
            counts[cell] += 1;
            for (std::size_t c = 0; c < channels_; ++c) pooled[c * g * g + cell] += frame[(c * w + x) * h + y];
        }
    }
    for (std::size_t c = 0; c < channels_; ++c)
        for (std::size_t cell = 0; cell < g * g; ++cell)
            if (counts[cell] > 0) pooled[c * g * g + cell] /= counts[cell];
    Feature out(dim_);
    for (std::size_t i = 0; i < dim_; ++i)
        for (std::size_t j = 0; j < pooled.size(); ++j) out[i] += frame_proj_[i * pooled.size() + j] * pooled[j];
    return out;
}

Feature RandomProjectionProvider::embed_text(const std::string& text) const {
    const auto tokens = diffusion::ToyTextEncoder(text_dim_, seed_).encode<double>(text).tokens;
    const std::size_t l = tokens.dim(0);
    std::vector<double> mean(text_dim_);
    for (std::size_t t = 0; t < l; ++t)
        for (std::size_t j = 0; j < text_dim_; ++j) mean[j] += tokens[t * text_dim_ + j] / static_cast<double>(l);
    Feature out(dim_);
    for (std::size_t i = 0; i < dim_; ++i)
        for (std::size_t j = 0; j < text_dim_; ++j) out[i] += text_proj_[i * text_dim_ + j] * mean[j];
    return out;
}

std::vector<Feature> embed_frames(const EmbeddingProvider& provider, const TensorF& video) {
    if (video.rank() != 4) throw ShapeError("video must be [f,c,w,h]");
    std::vector<Feature> out;
    for (std::size_t f = 0; f < video.dim(0); ++f) out.push_back(provider.embed_frame(reshape_view(slice(video, 0, f, f + 1), {video.dim(1), video.dim(2), video.dim(3)})));
    return out;
}

MetricRow evaluate_clip(const EmbeddingProvider& provider, const std::string& clip_id, const TensorF& original,
                        const TensorF& result, const diffusion::MaskSequence& mask, const std::string& prompt) {
    MetricRow row{clip_id, std::nullopt, background_preservation(original, result, mask), std::nullopt};
    const auto feats = embed_frames(provider, result);
    row.cs = clip_style_score(feats, provider.embed_text(prompt));
    if (feats.size() >= 2) row.tc = temporal_consistency(feats);
    return row;
}

std::string to_csv(const std::vector<MetricRow>& rows) {
    std::ostringstream os;
    os.precision(10);
    auto put = [&](const std::optional<double>& v) {
        if (v) os << *v;
        else os << "undefined";
    };
    os << "clip_id,cs,bp,tc\n";
    for (const auto& r : rows) {
        os << r.clip_id << ',';
        put(r.cs);
        os << ',';
        put(r.bp);
        os << ',';
        put(r.tc);
        os << '\n';
    }
    return os.str();
}

template std::optional<double> background_preservation(const Tensor<float>&, const Tensor<float>&,
                                                       const diffusion::MaskSequence&);
template std::optional<double> background_preservation(const Tensor<double>&, const Tensor<double>&,
                                                       const diffusion::MaskSequence&);

}  // namespace vinpaint::metrics

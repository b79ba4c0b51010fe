#pragma once

// Training-region selection: scene-cut filtering, phrase/box tracks pinned to
// the first frame's token spans, instance and random mask synthesis, and the
// three-way clip sampler.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "vinpaint/diffusion.hpp"
#include "vinpaint/rng.hpp"
#include "vinpaint/tensor.hpp"

namespace vinpaint::region {

using diffusion::MaskSequence;

/// Normalized box; x runs along the frame width, y along its height.
struct Box {
    double x0 = 0, y0 = 0, x1 = 1, y1 = 1;

    bool valid() const;
    double area() const;
    bool operator==(const Box&) const = default;
};

double iou(const Box& a, const Box& b);

struct Phrase {
    std::string text;
    std::size_t begin = 0;  // token span [begin, end) into the prompt
    std::size_t end = 0;
};

struct Detection {
    std::size_t phrase = 0;  // index into DetectionAnnotation::phrases
    Box box;
    double score = 0;
};

struct DetectionAnnotation {
    std::string prompt;
    std::vector<Phrase> phrases;
    std::vector<std::vector<Detection>> frames;
    std::optional<std::array<std::size_t, 2>> detector_resolution;  // metadata only

    std::vector<std::string> tokens() const;

    /// Throws std::invalid_argument describing the first broken invariant.
    void validate() const;

    /// Parses {prompt, phrases:[{text, span:[b,e]}], frames:[[{phrase, box, score}]]}.
    /// A detection's "phrase" is either an index or the phrase text.
    static DetectionAnnotation from_json(const std::string& text);
    std::string to_json() const;
};

DetectionAnnotation load_annotation(const std::filesystem::path& path);

struct SceneReport {
    std::vector<std::size_t> cuts;  // frame indices that start a new scene

    bool single_scene() const noexcept { return cuts.empty(); }
};

/// Frames [f, c, w, h] with values on a [0, 1] scale. A cut starts at frame i
/// when the mean absolute difference to frame i−1, times 255, exceeds `threshold`.
template <typename T>
SceneReport detect_scene_cuts(const Tensor<T>& frames, double threshold = 20.0);

struct Track {
    std::size_t phrase = 0;
    std::string text;
    std::vector<Box> boxes;      // one per frame
    std::vector<bool> observed;  // false where the box was carried forward
};

/// One track per phrase accepted in frame 0, ordered by phrase index.
/// Throws AssociationError when frame 0 has no detection at or above the threshold.
std::vector<Track> associate_tokenspan(const DetectionAnnotation& ann, double score_threshold = 0.2);

enum class MaskStyle { box, dilated, random_shape };

struct PixelRect {
    std::size_t x_begin, x_end, y_begin, y_end;  // half-open
};

/// Pixel footprint floor(x0·w) .. ceil(x1·w) − 1, clamped to the frame. A box
/// that rasterizes to nothing becomes the single pixel at its center.
PixelRect rasterize_box(const Box& box, std::size_t width, std::size_t height);

struct InstanceMaskOptions {
    MaskStyle style = MaskStyle::random_shape;
    std::size_t dilation = 2;        // pixels, for MaskStyle::dilated
    std::size_t polygon_vertices = 16;
    double max_outset = 0.25;        // random_shape offset bound, fraction of the box's larger side
};

MaskSequence synthesize_instance_mask(const std::vector<Box>& boxes, std::size_t width, std::size_t height,
                                      Rng& rng, const InstanceMaskOptions& options = {});

enum class RandomMaskKind { static_rect, moving_rect, stroke };

struct RandomMaskOptions {
    double min_area = 0.05;
    double max_area = 0.60;
};

struct RandomMask {
    RandomMaskKind kind;
    MaskSequence masks;
};

/// Every frame's area fraction lies in [min_area, max_area] whenever the frame
/// has enough pixels to express those bounds.
RandomMask synthesize_random_mask(std::size_t width, std::size_t height, std::size_t frames, Rng& rng,
                                  const RandomMaskOptions& options = {});

enum class ClipKind { precise, random, null_prompt };

const char* to_string(ClipKind kind);

struct ClipSample {
    ClipKind kind = ClipKind::random;
    MaskSequence masks;
    std::string prompt;
    std::optional<std::string> phrase;  // set iff kind == precise
    std::vector<Box> boxes;              // the covered track, iff kind == precise
    bool fell_back = false;              // a precise draw that found no association
};

struct SampleOptions {
    std::size_t width = 64;
    std::size_t height = 48;
    std::array<double, 3> probs{0.7, 0.2, 0.1};  // precise, random, null_prompt
    double score_threshold = 0.2;
    InstanceMaskOptions instance;
    RandomMaskOptions random;
};

ClipKind draw_clip_kind(Rng& rng, const std::array<double, 3>& probs);

ClipSample sample_training_clip(const DetectionAnnotation& ann, Rng& rng, const SampleOptions& options = {});

/// Binary P5 image of one mask frame: image columns follow x, rows follow y.
std::string encode_pgm(const MaskSequence& masks, std::size_t frame);

/// True when every pixel inside the rasterized box is set.
bool covers(const MaskSequence& masks, std::size_t frame, const Box& box);

}  // namespace vinpaint::region

#pragma once

// Task-vector checkpoint arithmetic: input-channel padding, deltas between
// checkpoints, α/β blending into a base, per-layer cosine analysis, and
// (α, β) sensitivity grids.

#include <array>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vinpaint/checkpoint.hpp"

namespace vinpaint::merge {

using ckpt::Checkpoint;

/// Zero-extends `layer`'s input-channel axis from `from` to `to`; every other
/// tensor is copied unchanged. Throws ShapeError when the axis is not `from` wide.
Checkpoint pad_input_channels(const Checkpoint& ckpt, const std::string& layer, std::size_t from = 4,
                              std::size_t to = 9, std::size_t axis = 1);

struct KeyReport {
    std::vector<std::string> only_in_first;
    std::vector<std::string> only_in_second;

    bool empty() const noexcept { return only_in_first.empty() && only_in_second.empty(); }
    std::string to_text() const;
};

KeyReport compare_keys(const Checkpoint& a, const Checkpoint& b);

struct TaskVector {
    Checkpoint delta;  // a − b over the shared keys
    KeyReport unmatched;
};

/// Throws MergeError naming the first shared key whose shapes differ.
TaskVector task_vector(const Checkpoint& a, const Checkpoint& b);

struct MergeRecipe {
    double alpha = 1.0;
    double beta = 1.0;

    /// Human-readable notes for values outside α ∈ [0.5, 1.5], β ∈ [1, 2].
    std::vector<std::string> warnings() const;
};

struct MergeResult {
    Checkpoint merged;
    std::vector<std::string> unmatched;  // keys present in some but not all of base, τ_ip, τ_p
    std::vector<std::string> warnings;
};

/// base + α·τ_ip + β·τ_p over keys present in all three, accumulated in f64.
MergeResult merge(const Checkpoint& base, const Checkpoint& tau_ip, const Checkpoint& tau_p,
                  const MergeRecipe& recipe);

enum class LayerType { conv, query, key, value, out_proj, ffn };
enum class Region { down, middle, up };

inline constexpr std::array<LayerType, 6> kLayerTypes{LayerType::conv,  LayerType::query,    LayerType::key,
                                                      LayerType::value, LayerType::out_proj, LayerType::ffn};
inline constexpr std::array<Region, 3> kRegions{Region::down, Region::middle, Region::up};

const char* to_string(LayerType t);
const char* to_string(Region r);

/// Ordered regex rules; the first match wins.
struct LayerClassifier {
    std::vector<std::pair<std::string, LayerType>> type_rules;
    std::vector<std::pair<std::string, Region>> region_rules;

    /// to_q / to_k / to_v / to_out / ff / conv and down_blocks / mid_block / up_blocks.
    static LayerClassifier defaults();

    std::optional<LayerType> type_of(const std::string& name) const;
    std::optional<Region> region_of(const std::string& name) const;
};

/// Cosine of the flattened tensors with f64 accumulation; nullopt when either
/// has zero norm. Throws ShapeError on differing element counts.
std::optional<double> cosine_similarity(const TensorF& a, const TensorF& b);

struct TensorSimilarity {
    std::string name;
    std::optional<double> cosine;
    std::optional<LayerType> type;
    std::optional<Region> region;
};

struct SimilarityCell {
    LayerType type;
    Region region;
    std::optional<double> mean;  // over defined similarities; nullopt when none
    std::size_t tensors = 0;
    std::size_t undefined = 0;
};

struct SimilarityReport {
    std::vector<TensorSimilarity> tensors;
    std::vector<SimilarityCell> cells;  // all 6 × 3 combinations, type-major
    KeyReport unmatched;

    const SimilarityCell& cell(LayerType t, Region r) const;
    std::size_t populated_cells() const;
    std::string to_csv() const;  // type,region,tensors,undefined,mean
};

SimilarityReport layer_similarity_report(const Checkpoint& a, const Checkpoint& b,
                                         const LayerClassifier& classifier = LayerClassifier::defaults());

using Evaluator = std::function<std::map<std::string, double>(const Checkpoint&)>;

struct SweepCell {
    double alpha = 0, beta = 0;
    std::map<std::string, double> metrics;
    std::optional<std::string> error;
};

struct SweepResult {
    std::vector<SweepCell> cells;  // alpha-major

    std::string to_csv() const;  // alpha,beta,<metrics...>,error
};

/// 0.8, 0.9, 1.0, 1.1, 1.2.
std::vector<double> default_sweep_grid();

/// Evaluates every (α, β) cell; an evaluator exception is recorded on its cell.
SweepResult sensitivity_sweep(const Checkpoint& base, const Checkpoint& tau_ip, const Checkpoint& tau_p,
                              const std::vector<double>& alphas, const std::vector<double>& betas,
                              const Evaluator& evaluator);

double frobenius_norm(const Checkpoint& ckpt);

}  // namespace vinpaint::merge

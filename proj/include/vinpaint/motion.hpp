#pragma once

// Motion-capture block: two temporal self-attentions, a damped global
// attention over a downsampled spatio-temporal sequence, and a textual
// cross-attention, each wrapped as a pre-norm residual sublayer.
//
// Video features use the layout [b, f, c, w, h]. Attention weights act on
// row vectors (token · W), so a d_in → d_out projection is stored as [d_in, d_out].

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vinpaint/checkpoint.hpp"
#include "vinpaint/rng.hpp"
#include "vinpaint/tape.hpp"
#include "vinpaint/tensor.hpp"

namespace vinpaint::motion {

struct GridSize {
    std::size_t w = 1;
    std::size_t h = 1;
};

template <typename T>
struct AttentionParams {
    Tensor<T> wq, wk, wv, wo;
    std::size_t heads = 1;

    std::size_t d_model() const { return wo.dim(-1); }
    /// Input dim of the key/value projections (d_model for self-attention).
    std::size_t d_kv() const { return wk.dim(0); }
    void validate(const std::string& name) const;
};

template <typename T>
struct NormParams {
    Tensor<T> scale;  // [d_model]
    Tensor<T> shift;  // [d_model]
};

template <typename T>
struct TextEmbedding {
    Tensor<T> tokens;  // [l_text, d_text]

    std::size_t length() const { return tokens.dim(0); }
    std::size_t dim() const { return tokens.dim(1); }
};

template <typename T>
struct MotionBlockParams {
    AttentionParams<T> temporal1, temporal2, dga, cross;
    /// Downsampled grid shared by the global and cross attentions.
    GridSize target;
    NormParams<T> norms[4];

    std::size_t d_model() const { return temporal1.d_model(); }
    std::size_t d_text() const { return cross.d_kv(); }
    void validate() const;

    /// Every tensor with its serialized name ("motion.<layer>.<matrix>").
    std::vector<std::pair<std::string, Tensor<T>*>> entries();
    std::vector<std::pair<std::string, const Tensor<T>*>> entries() const;

    template <typename U>
    MotionBlockParams<U> cast() const;
};

struct InitOptions {
    std::size_t heads = 8;
    GridSize target{8, 6};
    /// Zero the output projection of every freshly initialized attention so the
    /// untouched block is the identity map.
    bool zero_new_output_projections = true;
};

/// Kaiming-normal sample: N(0, 2 / fan_in).
template <typename T>
Tensor<T> kaiming_normal(const Shape& shape, std::size_t fan_in, Rng& rng);

/// Temporal attentions come from `pretrained` ("motion.temporal{1,2}.w{q,k,v,o}")
/// when it is supplied; everything else is Kaiming-initialized.
template <typename T>
MotionBlockParams<T> init_motion_block(std::uint64_t seed, std::size_t d_model, std::size_t d_text,
                                       const InitOptions& options = {},
                                       const ckpt::Checkpoint* pretrained = nullptr);

/// Attention weights registered as leaves of a tape.
template <typename T>
struct BoundAttention {
    Var<T> wq, wk, wv, wo;
    std::size_t heads = 1;
};

template <typename T>
struct BoundNorm {
    Var<T> scale, shift;
};

template <typename T>
struct BoundMotionBlock {
    BoundAttention<T> temporal1, temporal2, dga, cross;
    GridSize target;
    BoundNorm<T> norms[4];
    /// Leaf id of each parameter, keyed by serialized name.
    std::vector<std::pair<std::string, std::size_t>> leaf_ids;
};

template <typename T>
BoundMotionBlock<T> bind(Tape<T>& tape, const MotionBlockParams<T>& params);

template <typename T>
BoundAttention<T> bind(Tape<T>& tape, const AttentionParams<T>& params, const std::string& name);

// Differentiable sublayers on a tape.

template <typename T>
Var<T> temporal_attention(Var<T> x, const BoundAttention<T>& p);

template <typename T>
Var<T> damped_global_attention(Var<T> x, const BoundAttention<T>& p, GridSize target);

template <typename T>
Var<T> textual_cross_attention(Var<T> x, Var<T> text_tokens, const BoundAttention<T>& p,
                               GridSize target);

template <typename T>
Var<T> motion_block_forward(Var<T> x, Var<T> text_tokens, const BoundMotionBlock<T>& p);

// Tensor-in / tensor-out conveniences; each builds a scratch tape.

template <typename T>
Tensor<T> temporal_attention(const Tensor<T>& x, const AttentionParams<T>& p);

template <typename T>
Tensor<T> damped_global_attention(const Tensor<T>& x, const AttentionParams<T>& p, GridSize target);

template <typename T>
Tensor<T> textual_cross_attention(const Tensor<T>& x, const TextEmbedding<T>& text,
                                  const AttentionParams<T>& p, GridSize target);

template <typename T>
Tensor<T> motion_block_forward(const Tensor<T>& x, const TextEmbedding<T>& text,
                               const MotionBlockParams<T>& params);

/// Attention-map sizes (elements per head) for one block invocation.
struct AttentionCost {
    std::string name;
    std::uint64_t sequence_length = 0;  // query length of one map
    std::uint64_t key_length = 0;
    std::uint64_t maps = 0;             // independent maps (batch × sites)
    std::uint64_t elements = 0;         // maps × sequence_length × key_length
};

struct CostReport {
    std::uint64_t b = 0, f = 0, c = 0, w1 = 0, h1 = 0, l_text = 0;
    GridSize target;
    AttentionCost temporal;
    AttentionCost naive_global;
    AttentionCost damped_global;
    AttentionCost cross;  // standard Lq × Lk with resized visual queries
    /// The two map sizes quoted for textual cross-attention: the naive
    /// (f·w1·h1·l_text)² and the reduced (f·l_text)², per batch element.
    std::uint64_t quoted_cross_naive = 0;
    std::uint64_t quoted_cross_reduced = 0;

    /// naive_global.elements / damped_global.elements.
    double dga_reduction() const;
    double quoted_cross_reduction() const;
    std::string to_table() const;
};

CostReport attention_cost_report(std::uint64_t b, std::uint64_t f, std::uint64_t c, std::uint64_t w1,
                                 std::uint64_t h1, GridSize target, std::uint64_t l_text);

}  // namespace vinpaint::motion

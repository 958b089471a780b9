#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dtlsd/attention.hpp"
#include "dtlsd/autograd.hpp"
#include "dtlsd/geometry.hpp"
#include "dtlsd/nn.hpp"
#include "dtlsd/pyramid.hpp"
#include "dtlsd/rng.hpp"
#include "dtlsd/tensor.hpp"

namespace dtlsd {

/// One decoder query: a content vector plus a 4D line anchor whose
/// endpoints live in normalized [0,1] image coordinates.
struct LineQuery {
    Tensor content;       ///< [d]
    LineSegment anchor;
};

/// Model-wide hyperparameters.
struct ModelConfig {
    std::size_t d = 256;
    std::size_t heads = 8;
    std::size_t points = 4;  ///< sampling points per level and head
    std::size_t encoder_layers = 6;
    std::size_t decoder_layers = 6;
    std::size_t query_count = 900;
    std::size_t ffn_dim = 1024;
    std::vector<int> levels = {2, 3, 4, 5};
    bool aux_losses = true;  ///< supervise every decoder layer, not just the last

    /// Full-scale profile: 6/6 layers, 900 queries, d=256, ffn 1024, 8 heads,
    /// 4 points, 4 feature maps.
    static ModelConfig full();
    /// Small profile for CPU experiments: 2/2 layers, 50 queries, d=32.
    static ModelConfig toy();

    /// Throws std::invalid_argument unless every count is positive, d is
    /// divisible by heads, and at least one level is retained.
    void validate() const;
};

/// Squash/unsquash between (0,1) and logit space; the scalar twins of the
/// tape's sigmoid and logit ops (same clamping constant).
double squash(double x);
double unsquash(double p, double eps = 1e-3);

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// Multi-head dot-product self-attention with an optional row-wise mask.
/// Per-head projections feed per-head output maps that sum into the final
/// [n, d] result (equivalent to the usual concat-then-project form).
struct MultiHeadSelfAttn {
    std::size_t heads = 0;
    std::vector<LinearLayer> q, k, v;  ///< per head: d -> d/heads
    std::vector<Parameter*> out_w;     ///< per head: [d/heads, d]
    Parameter* out_b = nullptr;        ///< [d]

    static MultiHeadSelfAttn make(ParamStore& store, const std::string& name,
                                  std::size_t d, std::size_t heads, Rng& rng);

    /// x is [n, d]; `blocked` (optional) is an [n*n] row-major matrix where 1
    /// removes that key from the query's softmax. Passing no mask is
    /// bit-identical to passing an all-zero mask.
    ag::Var forward(ag::Tape& tape, ag::Var x,
                    const std::vector<std::uint8_t>* blocked) const;
};

/// One encoder layer: deformable self-attention over the token stack
/// (each token queries from its own pixel location), then a feedforward
/// block; residual + layer normalization after each (post-norm).
struct EncoderLayerParams {
    DeformAttnParams attn;
    LayerNormLayer ln1, ln2;
    MlpLayer ffn;  ///< d -> ffn_dim -> d

    static EncoderLayerParams make(ParamStore& store, const std::string& name,
                                   const ModelConfig& cfg, Rng& rng);
};

/// One decoder layer: masked self-attention among query contents, deformable
/// cross-attention into the memory anchored at each query's line midpoint,
/// then a feedforward block; post-norm residuals throughout.
struct DecoderLayerParams {
    MultiHeadSelfAttn self_attn;
    DeformAttnParams cross;
    LayerNormLayer ln1, ln2, ln3;
    MlpLayer ffn;

    static DecoderLayerParams make(ParamStore& store, const std::string& name,
                                   const ModelConfig& cfg, Rng& rng);
};

/// Heads that score every memory token and propose a 4D line for it.
struct SelectionHeads {
    LinearLayer score;   ///< d -> 1 logit of line-ness
    MlpLayer proposal;   ///< d -> d -> 4 endpoint deltas in logit space

    static SelectionHeads make(ParamStore& store, const std::string& name,
                               std::size_t d, Rng& rng);
};

/// Every trainable piece of the encoder-decoder stack.
struct TransformerParams {
    ModelConfig cfg;
    std::vector<EncoderLayerParams> enc;
    std::vector<DecoderLayerParams> dec;
    SelectionHeads selection;
    Parameter* content_embed = nullptr;  ///< [query_count, d] decoder inputs
    MlpLayer refine;     ///< d -> d -> 4 per-layer anchor update, zero-init last
    LinearLayer cls_head;  ///< d -> 1
    MlpLayer line_head;    ///< d -> d -> d -> 4, zero-init last

    static TransformerParams make(ParamStore& store, const std::string& name,
                                  const ModelConfig& cfg, Rng& rng);
};

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

/// Runs the encoder stack over the flattened token sequence [L, d].
/// Shape-preserving; zero layers is the identity. Token q's reference point
/// is its own normalized pixel center, layout.token_ref_xy(q).
ag::Var encoder_forward(ag::Tape& tape, ag::Var tokens, const MemoryLayout& layout,
                        const std::vector<EncoderLayerParams>& layers);

/// Result of ranking all memory tokens and keeping the best K.
struct SelectedQueries {
    std::vector<std::size_t> token_ids;  ///< selected tokens, best first
    Tensor scores;   ///< [K] line-ness scores in (0,1), descending
    Tensor anchors;  ///< [K, 4] normalized (x1, y1, x2, y2)
};

/// Scores every token, ranks by score (descending, index ties broken low),
/// and converts the top K proposals into 4D line anchors: the token's
/// reference point replicated to both endpoints, shifted by the predicted
/// deltas in logit space, squashed back to [0,1]. Content vectors for the
/// decoder are separate learnable embeddings, so this is a plain-value
/// computation with no gradient path.
/// Throws std::invalid_argument when k exceeds the token count.
SelectedQueries query_selection(const FlattenedMemory& memory,
                                const SelectionHeads& heads, std::size_t k);

/// Differentiable state of the query set after one decoder layer.
/// anchor_logits carries the layer's refinement while it is still attached
/// to the graph: logit(previous anchors) + refine(content). Squashing its
/// plain values gives `anchors`, the detached form that steers the next
/// layer's sampling geometry — so gradients reach the head that produced an
/// update but do not chain across layers.
struct DecoderLayerOutput {
    ag::Var content;        ///< [n, d]
    ag::Var anchor_logits;  ///< [n, 4] attached logit-space anchors
    Tensor anchors;         ///< [n, 4] squashed values of anchor_logits
};

/// Runs the decoder stack. content is [n, d] (learnable embeddings, plus any
/// denoising prefix), anchors [n, 4]; mask (optional) is an [n*n] row-major
/// self-attention block matrix. Cross-attention reads the memory at each
/// anchor's midpoint with offsets scaled per axis by the anchor half-extent
/// (|x1-x2|/2, |y1-y2|/2). After each layer the anchors move by the refine
/// head's output, added coordinate-wise in logit space.
/// Returns one entry per layer (inputs echoed back when there are none).
std::vector<DecoderLayerOutput> decoder_forward(
    ag::Tape& tape, ag::Var content, const Tensor& anchors, ag::Var memory,
    const MemoryLayout& layout, const std::vector<DecoderLayerParams>& layers,
    const MlpLayer& refine, const std::vector<std::uint8_t>* mask = nullptr);

/// Per-query line probability and endpoints, both differentiable.
struct HeadOutputs {
    ag::Var probs;  ///< [n] sigmoid class scores in (0,1)
    ag::Var lines;  ///< [n, 4] endpoints in [0,1]
};

/// Class head: linear + sigmoid. Line head: 3-layer perceptron whose output
/// is added to the anchor in logit space (the attached anchor_logits, so the
/// anchor refinement trains through the loss), then squashed to [0,1]^4.
HeadOutputs prediction_heads(ag::Tape& tape, const DecoderLayerOutput& state,
                             const TransformerParams& params);

/// Snapshot of a decoder state as plain per-query values.
std::vector<LineQuery> to_line_queries(ag::Tape& tape,
                                       const DecoderLayerOutput& state);

}  // namespace dtlsd

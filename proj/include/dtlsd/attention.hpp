#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "dtlsd/autograd.hpp"
#include "dtlsd/nn.hpp"
#include "dtlsd/pyramid.hpp"
#include "dtlsd/rng.hpp"
#include "dtlsd/tensor.hpp"

namespace dtlsd {

/// Bilinear interpolation of f (shape [H, W, C]) at a fractional
/// (row, col) location. Locations outside [0, H-1] x [0, W-1] read zeros,
/// so the sample is defined (and continuous) everywhere.
Tensor bilinear_sample(const Tensor& f, double row, double col);

/// Maps a normalized point (x, y) in [0,1]^2 to the continuous index grid
/// of a level, pixel-center convention: row = y*h - 0.5, col = x*w - 0.5.
std::pair<double, double> phi_rescale(double x, double y, const LevelShape& s);

/// Dense scaled dot-product attention: softmax(Q K^T / sqrt(d)) V.
/// q is [Nq, d]; k and v share their first dimension.
ag::Var global_attention(ag::Tape& tape, ag::Var q, ag::Var k, ag::Var v);

/// Same, with entries of the [Nq, Nk] `blocked` matrix (1 = no attention)
/// removed from each row's softmax entirely.
ag::Var masked_global_attention(ag::Tape& tape, ag::Var q, ag::Var k, ag::Var v,
                                const std::vector<std::uint8_t>& blocked);

/// Parameters of one multi-scale deformable attention block: a shared value
/// projection, linear maps predicting per-head sampling offsets and weights
/// from the query vector, and the output projection.
///
/// Per query and head, k points are sampled on each of the L levels; the
/// mixing weights are softmax-normalized jointly over all L*k samples, so
/// they always sum to 1 per (query, head).
struct DeformAttnParams {
    std::size_t d = 0;       ///< model width
    std::size_t heads = 0;   ///< M
    std::size_t levels = 0;  ///< L
    std::size_t points = 0;  ///< k per level

    LinearLayer value_proj;  ///< [d, d]
    LinearLayer offset;      ///< [d, M*L*k*2], (dx, dy) pairs
    LinearLayer weight;      ///< [d, M*L*k] mixing logits
    LinearLayer out_proj;    ///< [d, d]

    /// Offset weights start at zero with direction-ladder biases: head m
    /// points along angle 2*pi*m/M and point i sits at radius i+1, so the
    /// initial samples form a ring around the reference point. The weight
    /// layer starts at zero (uniform mixing).
    static DeformAttnParams make(ParamStore& store, const std::string& name,
                                 std::size_t d, std::size_t heads,
                                 std::size_t levels, std::size_t points,
                                 Rng& rng);

    std::size_t samples_per_head() const { return levels * points; }
};

/// Multi-scale deformable attention over a flattened token sequence.
///   queries:      [Nq, d] content vectors (z_q)
///   ref_xy:       [Nq, 2] normalized reference points, clamped to [0,1]
///   tokens:       [L_total, d] flattened multi-level features
///   offset_scale: optional [Nq, 2] per-axis multiplier in normalized units
///                 (anchor half-extents in the decoder); when absent,
///                 offsets are in level-index units.
/// Gradients flow into queries, tokens, and all four projections; the
/// reference points and offset scales are treated as constants.
ag::Var ms_deform_attn(ag::Tape& tape, ag::Var queries, const Tensor& ref_xy,
                       ag::Var tokens, const MemoryLayout& layout,
                       const DeformAttnParams& p,
                       const Tensor* offset_scale = nullptr);

/// Single-level deformable attention over one [H, W, d] feature map; the
/// L = 1 special case of ms_deform_attn with an index-unit reference point.
ag::Var deform_attn_single(ag::Tape& tape, ag::Var query, double ref_x,
                           double ref_y, ag::Var feature_map,
                           const DeformAttnParams& p);

// ---------------------------------------------------------------------------
// Complexity probe
// ---------------------------------------------------------------------------

struct ProbeRow {
    std::string mechanism;
    std::size_t tokens = 0;
    std::size_t d = 0;
    double median_seconds = 0.0;
};

struct ProbeResult {
    std::vector<ProbeRow> rows;
    double slope = 0.0;  ///< least-squares slope of log(time) vs log(tokens)
};

/// Times one attention pass (non-differentiable kernels) per token count and
/// fits the log-log scaling slope. mechanism is "global" or "deformable".
ProbeResult complexity_probe(const std::string& mechanism,
                             const std::vector<std::size_t>& token_counts,
                             std::size_t d, int repeats, Rng& rng);

/// CSV rows: mechanism,tokens,d,median_seconds,slope
void write_probe_csv(std::ostream& os, const std::vector<ProbeResult>& results);

}  // namespace dtlsd

#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "dtlsd/autograd.hpp"
#include "dtlsd/nn.hpp"
#include "dtlsd/tensor.hpp"

namespace dtlsd {

/// Spatial size of one pyramid level.
struct LevelShape {
    std::size_t h = 0;
    std::size_t w = 0;
};

/// Bookkeeping for the stacked multi-level token sequence: which pyramid
/// levels are present, their spatial shapes, and where each level's tokens
/// start in the flattened axis. Token t of level p covers pixel
/// (i, j) = ((t - offset_p) / w_p, (t - offset_p) % w_p).
struct MemoryLayout {
    std::vector<int> level_ids;           ///< e.g. {2,3,4,5}
    std::vector<LevelShape> shapes;       ///< per retained level
    std::vector<std::size_t> offsets;     ///< start token of each level
    std::size_t total = 0;                ///< token count L

    std::size_t level_count() const { return shapes.size(); }

    /// Flat token index of pixel (i, j) at retained-level position p.
    std::size_t token_index(std::size_t p, std::size_t i, std::size_t j) const;

    /// Inverse of token_index.
    void token_coords(std::size_t t, std::size_t* p, std::size_t* i,
                      std::size_t* j) const;

    /// Normalized (x, y) center of the token's pixel:
    /// ((j + 0.5) / w, (i + 0.5) / h).
    std::pair<double, double> token_ref_xy(std::size_t t) const;
};

/// Flattened multi-level feature tokens plus their layout.
struct FlattenedMemory {
    MemoryLayout layout;
    Tensor tokens;  ///< [L, d]
};

/// Configuration of the small convolutional feature extractor.
struct BackboneConfig {
    std::size_t in_channels = 1;    ///< grayscale by default
    std::size_t base_channels = 8;  ///< channels after the first stage
    std::vector<int> levels = {2, 3, 4, 5};  ///< retained pyramid levels
};

/// Chain of stride-2 3x3 convolutions with GELU between stages. Stage s
/// halves the spatial size (level l has H / 2^(l+1) rows) and has
/// base_channels * 2^l channels; the retained stages form the pyramid.
struct ToyBackbone {
    BackboneConfig cfg;
    std::vector<Parameter*> kernels;  ///< [3,3,c_in,c_out] per stage
    std::vector<Parameter*> biases;   ///< [c_out] per stage

    static ToyBackbone make(ParamStore& store, const std::string& name,
                            const BackboneConfig& cfg, Rng& rng);

    /// Number of conv stages = max retained level + 1.
    std::size_t stage_count() const { return kernels.size(); }

    std::size_t channels_at(int level) const {
        return cfg.base_channels << level;
    }

    /// img is [H, W, in_channels] with H, W divisible by 2^stage_count.
    /// Returns one [H_l, W_l, C_l] activation per retained level, in order.
    std::vector<ag::Var> forward(ag::Tape& tape, ag::Var img) const;

    /// All stage parameters (for the reduced backbone learning rate).
    std::vector<Parameter*> params() const;
};

/// Per-level 1x1 convolution mapping each level to a common channel count d.
/// Implemented as a per-pixel linear layer; levels keep their spatial shape
/// but are returned flattened to [H_l * W_l, d].
struct LevelProjection {
    std::vector<LinearLayer> proj;  ///< one per retained level
    std::size_t d = 0;

    static LevelProjection make(ParamStore& store, const std::string& name,
                                const ToyBackbone& backbone, std::size_t d,
                                Rng& rng);

    std::vector<ag::Var> forward(ag::Tape& tape,
                                 const std::vector<ag::Var>& levels) const;
};

/// 2D sinusoidal positional encoding of shape [h, w, d]. The first d/2
/// channels encode the row coordinate and the rest the column coordinate;
/// within each half, even channels are sines and odd channels cosines of
/// the position (normalized to [0, 2pi)) over a temperature-10000 frequency
/// ladder. d must be divisible by 4.
Tensor sine_pos_enc(std::size_t h, std::size_t w, std::size_t d);

/// Adds each level's positional encoding to its (flattened) features and
/// concatenates the levels into one [L, d] token matrix, recording shapes
/// and offsets in `layout`. `levels[p]` is [h_p * w_p, d]; `pos_encs[p]` is
/// the matching [h_p, w_p, d] encoding.
ag::Var flatten_and_stack(ag::Tape& tape, const std::vector<ag::Var>& levels,
                          const std::vector<int>& level_ids,
                          const std::vector<LevelShape>& shapes,
                          const std::vector<Tensor>& pos_encs,
                          MemoryLayout* layout);

}  // namespace dtlsd

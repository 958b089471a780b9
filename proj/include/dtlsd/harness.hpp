#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dtlsd/geometry.hpp"
#include "dtlsd/lcdn.hpp"
#include "dtlsd/matching_loss.hpp"
#include "dtlsd/metrics.hpp"
#include "dtlsd/nn.hpp"
#include "dtlsd/pyramid.hpp"
#include "dtlsd/rng.hpp"
#include "dtlsd/tensor.hpp"
#include "dtlsd/transformer.hpp"

namespace dtlsd {

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

/// One rendered line scene: a grayscale image with its exact ground truth.
struct SyntheticScene {
    Tensor image;                 ///< [size, size, 1], values in [0, 1]
    std::vector<LineSegment> gt;  ///< canonicalized, normalized coordinates
    std::uint64_t seed = 0;       ///< per-scene stream seed (provenance)
};

/// Renders `count` random scenes of side `size` (must be divisible by 64):
/// dark anti-aliased strokes about 1.5 px wide over a lightly textured gray
/// background, plus Gaussian pixel noise of sigma 0.05, clamped to [0, 1].
/// Every scene holds 2..12 lines whose endpoints stay inside the
/// [0.05, 0.95] margin box with length at least 0.1; the ground truth is the
/// exact sampled geometry. Deterministic given (seed, count, size).
std::vector<SyntheticScene> synth_generate(std::uint64_t seed,
                                           std::size_t count,
                                           std::size_t size);

// ---------------------------------------------------------------------------
// Wireframe-format annotations
// ---------------------------------------------------------------------------

/// One annotation record: an image file name plus its ground-truth lines,
/// already normalized to [0,1], clamped, and canonicalized.
struct WireframeRecord {
    std::string filename;
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<LineSegment> gt;
};

/// Parses an annotation array of records
///   {"filename": str, "width": int, "height": int,
///    "lines": [[x1, y1, x2, y2], ...]}
/// with pixel coordinates. Coordinates are divided by width/height, clamped
/// to [0,1], and canonicalized. Unrecognized record keys are ignored (real
/// annotation files carry extras). A line whose endpoints coincide after
/// clamping is dropped, with a note pushed to `warnings` when given.
/// Malformed input throws std::runtime_error naming the record index.
std::vector<WireframeRecord> wireframe_parse(
    const std::string& json_text, std::vector<std::string>* warnings = nullptr);

/// wireframe_parse over the contents of the file at `path`.
std::vector<WireframeRecord> wireframe_ingest(
    const std::string& path, std::vector<std::string>* warnings = nullptr);

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

/// Everything a training run depends on. The defaults are the full-scale
/// recipe; toy() shrinks the model to the desk profile while keeping the
/// optimizer schedule.
struct TrainConfig {
    ModelConfig model;
    DenoisingConfig dn;
    LossWeights weights;
    std::size_t backbone_channels = 8;  ///< first-stage width of the backbone
    double lr = 1e-4;                   ///< transformer + heads learning rate
    double backbone_lr = 1e-5;          ///< reduced backbone learning rate
    double weight_decay = 1e-4;
    std::size_t batch_size = 2;
    std::size_t epochs = 24;
    std::size_t lr_drop_epoch = 21;     ///< both learning rates x0.1 from here
    std::uint64_t seed = 0;
    bool lcdn_enabled = true;           ///< master switch for the denoising branch

    /// Desk profile: toy model (d=32, 2+2 layers, 50 queries), a 100-query
    /// denoising budget, and a small backbone.
    static TrainConfig toy();

    /// Throws std::invalid_argument unless rates are positive, weight decay
    /// and loss weights non-negative, counts positive, and the nested model
    /// and denoising configs validate.
    void validate() const;
};

/// Parses a config from JSON mirroring TrainConfig field for field, with
/// nested "model", "dn", and "weights" objects. Every field is optional and
/// defaults as the struct does; unknown keys anywhere throw
/// std::runtime_error naming the key.
TrainConfig train_config_from_json(const std::string& text);

/// Serializes every field; from_json(to_json(c)) reproduces c exactly.
std::string train_config_to_json(const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Model assembly
// ---------------------------------------------------------------------------

/// The complete detector: convolutional backbone, per-level projections to
/// the model width, the encoder-decoder stack, and the two-row label
/// embedding table that turns a denoising query's one-hot class vector into
/// its content vector. Owns all parameters; not copyable.
struct LineDetector {
    ParamStore store;
    BackboneConfig backbone_cfg;
    ToyBackbone backbone;
    LevelProjection project;
    TransformerParams xf;
    Parameter* label_embed = nullptr;  ///< [2, d]

    LineDetector(const ModelConfig& model, std::size_t backbone_channels,
                 std::uint64_t init_seed);
    explicit LineDetector(const TrainConfig& cfg)
        : LineDetector(cfg.model, cfg.backbone_channels, cfg.seed) {}

    /// Image sides must be divisible by this (2^stage_count).
    std::size_t image_divisor() const { return std::size_t{1} << backbone.stage_count(); }
};

/// Differentiable products of one full forward pass.
struct ForwardPass {
    MemoryLayout layout;
    SelectedQueries selected;  ///< top-K encoder proposals driving the decoder
    std::size_t dn_count = 0;  ///< denoising rows prefixed to the query set
    std::vector<HeadOutputs> dn_heads;     ///< per decoder layer; empty without dn
    std::vector<HeadOutputs> match_heads;  ///< per decoder layer; back() = output
};

/// Runs image -> pyramid -> encoder -> query selection -> decoder -> heads.
/// When `dn` is given and non-empty, its queries are prefixed to the
/// matching queries, its group mask gates decoder self-attention, and the
/// heads are evaluated separately per branch. `frozen` substitutes a fixed
/// query selection (finite-difference gradient checks must hold the discrete
/// selection constant while parameters are perturbed).
ForwardPass run_detector(ag::Tape& tape, const LineDetector& model,
                         const Tensor& image, const DenoisingBatch* dn = nullptr,
                         const SelectedQueries* frozen = nullptr);

/// Weighted training loss of one image, assembled from a forward pass.
struct ImageLoss {
    ag::Var total;            ///< matching + denoising, all supervised layers
    double loss_class = 0.0;  ///< matching focal sum (unweighted)
    double loss_line = 0.0;   ///< matching endpoint-L1 sum (unweighted)
    double loss_dn = 0.0;     ///< denoising-branch weighted loss value
};

/// Hungarian-matches each supervised decoder layer's predictions to the
/// ground truth and sums the layer losses; with `dn` present the denoising
/// branch adds its fixed-assignment loss per layer. `aux_losses` supervises
/// every layer instead of only the last. `frozen_match` substitutes a fixed
/// matching assignment for every supervised layer (gradient checks again).
ImageLoss image_loss(ag::Tape& tape, const ForwardPass& fwd,
                     const DenoisingBatch* dn,
                     const std::vector<LineSegment>& gt, const LossWeights& w,
                     bool aux_losses, const Assignment* frozen_match = nullptr);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
/// The file does not start with the checkpoint magic.
struct BadMagicError : CheckpointError {
    using CheckpointError::CheckpointError;
};
/// The file's format version differs from the one this build writes.
struct VersionError : CheckpointError {
    using CheckpointError::CheckpointError;
};
/// The file ends before the declared content does.
struct TruncationError : CheckpointError {
    using CheckpointError::CheckpointError;
};

/// Trained weights plus the exact config that produced them.
struct Checkpoint {
    std::vector<std::pair<std::string, Tensor>> tensors;  ///< creation order
    std::string config_json;  ///< TrainConfig snapshot
    std::uint64_t step = 0;   ///< optimizer steps taken
};

/// Snapshots every parameter of the model under its registered name.
Checkpoint checkpoint_from_model(const LineDetector& model,
                                 const TrainConfig& cfg, std::uint64_t step);

/// Binary format, all integers little-endian: magic "DTLS", version (u32),
/// step (u64), config length (u64) + UTF-8 config JSON, tensor count (u64),
/// then per tensor: name length (u64) + UTF-8 name, rank (u64), dims (u64
/// each), and the raw IEEE-754 doubles. save then load is bit-exact.
void save_checkpoint(const Checkpoint& ck, const std::string& path);

/// Throws BadMagicError / VersionError (naming both versions) /
/// TruncationError for the respective defects; plain CheckpointError for
/// other corruption (absurd sizes, trailing bytes).
Checkpoint load_checkpoint(const std::string& path);

/// Copies checkpoint tensors into the model's parameters by name. Throws
/// CheckpointError on unknown names, shape mismatches, or missing entries.
void load_into(LineDetector& model, const Checkpoint& ck);

/// Rebuilds the detector the checkpoint describes and loads its weights.
/// The parsed config is also returned through `out_cfg` when given.
std::unique_ptr<LineDetector> detector_from_checkpoint(
    const Checkpoint& ck, TrainConfig* out_cfg = nullptr);

// ---------------------------------------------------------------------------
// Training and evaluation
// ---------------------------------------------------------------------------

/// One optimizer step's loss terms, as logged.
struct TrainLogEntry {
    std::size_t step = 0;      ///< 1-based
    double loss = 0.0;         ///< weighted total, mean over the batch
    double loss_class = 0.0;   ///< matching focal sum, mean over the batch
    double loss_line = 0.0;    ///< matching L1 sum, mean over the batch
    double loss_dn = 0.0;      ///< weighted denoising loss, mean over the batch
};

/// JSON object line {"step":…, "loss":…, "loss_class":…, "loss_line":…,
/// "loss_dn":…}; parse(format(e)) == e exactly.
std::string train_log_to_json(const TrainLogEntry& e);
TrainLogEntry train_log_from_json(const std::string& line);

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<TrainLogEntry> log;
};

/// Both learning rates at the given epoch: the configured value before the
/// drop epoch, a tenth of it from the drop epoch on.
double lr_at_epoch(double base_lr, const TrainConfig& cfg, std::size_t epoch);

/// Runs the optimization: per step, a batch of images is forwarded, each
/// Hungarian-matched and scored by image_loss (with a fresh denoising batch
/// per image when lcdn_enabled and dn_number > 0 and the image has ground
/// truth), the batch-mean loss is backpropagated, and AdamW updates the
/// parameters — the backbone group at backbone_lr, everything else at lr.
/// Scenes are reshuffled every epoch. One log entry per step is recorded
/// and, when `log_stream` is given, written as a JSON line. `step_limit`
/// (when nonzero) stops after that many steps even mid-epoch; the epoch
/// budget still caps the run. Deterministic given (cfg, data). Throws
/// std::runtime_error with step diagnostics if the loss turns non-finite,
/// and std::invalid_argument for empty data or images the model cannot
/// consume.
TrainResult train_loop(const TrainConfig& cfg,
                       const std::vector<SyntheticScene>& data,
                       std::ostream* log_stream = nullptr,
                       std::size_t step_limit = 0);

/// Forward pass of one image; every query becomes a Detection carrying its
/// class probability as confidence. No suppression, no thresholding, no
/// randomness: the same checkpoint always yields the same detections.
std::vector<Detection> infer_image(const LineDetector& model,
                                   const Tensor& image);

/// Rebuilds the checkpointed model and scores it on the dataset with the
/// structural and heatmap metrics.
MetricReport evaluate_model(const Checkpoint& ck,
                            const std::vector<SyntheticScene>& data,
                            const std::vector<int>& taus = {5, 10, 15},
                            std::size_t raster = 128);

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

/// 8-bit binary PGM ("P5"). image is [h, w, 1] in [0, 1].
void write_pgm(const std::string& path, const Tensor& image);
/// Reads an 8-bit binary PGM into [h, w, 1] with values in [0, 1].
Tensor read_pgm(const std::string& path);

/// Writes scene images as PGM files plus an "annotations.json" in the
/// wireframe record format (pixel coordinates), creating `dir` if needed.
void write_dataset(const std::string& dir,
                   const std::vector<SyntheticScene>& scenes);

/// Loads a directory written by write_dataset (or any annotations.json with
/// PGM images next to it). Scene seeds are not recoverable from disk.
std::vector<SyntheticScene> load_dataset(const std::string& dir);

// ---------------------------------------------------------------------------
// Ablation driver
// ---------------------------------------------------------------------------

/// Where a cell's train and held-out scenes come from.
struct AblationDataSpec {
    std::uint64_t seed = 1;
    std::size_t train_count = 32;
    std::size_t eval_count = 8;
    std::size_t size = 64;
};

/// One train+evaluate cell of a config matrix.
struct AblationCell {
    std::string name;
    AblationDataSpec data;
    TrainConfig config;
    std::size_t steps = 0;  ///< step_limit for the cell's training run
};

struct AblationMatrix {
    std::vector<AblationCell> cells;
};

/// Parses {"data": {...}, "steps": n, "base": {TrainConfig...},
/// "cells": [{"name": str, "overrides": {...}, "data": {...}, "steps": n}]}.
/// Each cell's config is the base JSON deep-merged with its overrides and
/// then parsed, so unknown keys are rejected with the same messages as
/// train_config_from_json. "data" and "steps" at cell level override the
/// top-level values.
AblationMatrix ablation_matrix_from_json(const std::string& text);

struct AblationOutcome {
    std::string name;
    MetricReport report;
};

/// Trains and evaluates every cell on freshly generated scenes (held-out
/// evaluation scenes come from an independent stream of the cell's data
/// seed). Deterministic. Progress notes go to `progress` when given.
std::vector<AblationOutcome> run_ablation(const AblationMatrix& matrix,
                                          std::ostream* progress = nullptr);

}  // namespace dtlsd

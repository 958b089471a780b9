#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "dtlsd/geometry.hpp"
#include "dtlsd/matching_loss.hpp"
#include "dtlsd/rng.hpp"
#include "dtlsd/transformer.hpp"

namespace dtlsd {

/// Class indices used by the denoising queries' one-hot label vectors.
inline constexpr std::size_t kNoLineLabel = 0;
inline constexpr std::size_t kLineLabel = 1;

/// Hyperparameters of the contrastive denoising branch.
struct DenoisingConfig {
    std::size_t dn_number = 300;     ///< total denoising-query budget
    double label_noise_ratio = 0.5;  ///< per-query label flip probability
    double line_scale = 1.0;         ///< half-width s of the length-factor windows
    double line_rotation_deg = 7.0;  ///< rotation window tau, in degrees

    /// Throws std::invalid_argument unless label_noise_ratio is in [0,1],
    /// line_scale in (0,1], and line_rotation_deg in (0,90).
    void validate() const;
};

/// Square self-attention mask over the combined query sequence
/// [group 0 | group 1 | ... | matching]. blocked[r * total + c] is 1 when
/// query r must not attend to query c. A query may always attend within its
/// own denoising group and to every matching query; matching queries attend
/// only to each other, so ground-truth-derived content never leaks to them.
struct AttentionMask {
    std::size_t total = 0;       ///< denoising + matching queries
    std::size_t dn_total = 0;    ///< group_count * group_size
    std::size_t group_size = 0;  ///< queries per denoising group
    std::vector<std::uint8_t> blocked;  ///< [total * total], row-major

    bool is_blocked(std::size_t row, std::size_t col) const {
        return blocked[row * total + col] != 0;
    }
};

/// Provenance of one denoising query: its source line and the exact noise
/// that was drawn, kept so tests and dumps can audit the generation.
struct DenoisingRecord {
    std::size_t gt_index = 0;    ///< index into the ground-truth list
    bool is_positive = false;    ///< near-line query (true) or pushed-out decoy
    double scale_factor = 1.0;   ///< sampled length factor u
    double rotation = 0.0;       ///< sampled rotation, radians
    bool label_is_line = true;   ///< current class label of the content vector
    bool label_flipped = false;  ///< set when apply_label_noise flipped it
};

/// One training batch of contrastive denoising queries. Queries are grouped;
/// each group holds one positive and one negative query per used ground-truth
/// line (positive first, in ascending line order). The anchor is the noised
/// line; the content vector is the [2] one-hot of the (possibly noised) class
/// label, which the model maps through its label-embedding table.
struct DenoisingBatch {
    std::vector<LineQuery> queries;
    std::vector<DenoisingRecord> records;  ///< parallel to queries
    std::size_t group_count = 0;
    std::size_t group_size = 0;  ///< 2 * number of ground-truth lines used
    AttentionMask mask;          ///< covers denoising + matching queries
};

/// Builds the denoising queries for one image. Each used ground-truth line
/// contributes, per group, a positive query scaled by u = 1 - delta and a
/// negative scaled by u = 1 + delta, sharing one deviation delta drawn from
/// (0, line_scale) so the decoy is never the closer of the two; positives
/// rotate within (-tau, tau), negatives within +/-[tau, 2*tau). Scale is
/// applied first, rotation second, both about the segment midpoint, and the
/// result is clamped into the unit box. group_count is
/// max(1, dn_number / (2 * n_gt)); when even one group would overflow the
/// budget, a random subset of the lines is used instead. All queries start
/// with the "line" label. The mask covers the denoising queries followed by
/// n_match matching queries. An empty ground-truth list yields an empty
/// batch whose mask covers only the matching queries.
DenoisingBatch generate_denoising_batch(const std::vector<LineSegment>& gt,
                                        const DenoisingConfig& cfg,
                                        std::size_t n_match, Rng& rng);

/// Returns a copy of the batch where each query's class label was flipped
/// (line <-> no-line) independently with the given probability; the one-hot
/// content vectors follow the labels and every flip is recorded. Anchors and
/// the geometric noise records are untouched. Throws std::invalid_argument
/// unless ratio is in [0,1].
DenoisingBatch apply_label_noise(const DenoisingBatch& batch, double ratio,
                                 Rng& rng);

/// Builds the group-structured mask for group_count groups of
/// n_dn_per_group denoising queries followed by n_match matching queries.
/// Blocked pairs are exactly: denoising rows onto other groups, and matching
/// rows onto any denoising column. The diagonal is never blocked.
AttentionMask build_attention_mask(std::size_t n_dn_per_group,
                                   std::size_t group_count,
                                   std::size_t n_match);

/// Fixed supervision map of the denoising branch, shaped like a matching
/// result so the same loss stack applies: every positive query regresses to
/// its source line with the "line" class, every negative trains toward
/// "no-line" with no endpoint term. Label noise never changes the targets;
/// it only perturbs the content the decoder sees. pred_for_gt holds each
/// line's first positive query (or -1 when the line went unused).
Assignment denoising_assignment(const DenoisingBatch& batch, std::size_t n_gt);

}  // namespace dtlsd

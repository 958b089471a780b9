#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dtlsd/geometry.hpp"

namespace dtlsd {

/// One scored line prediction entering evaluation.
struct Detection {
    LineSegment line;
    double confidence = 0.0;
};

/// One precision/recall point of a ranked curve; the threshold is the
/// confidence that admits this point's last detection.
struct PRPoint {
    double threshold = 0.0;
    double precision = 0.0;
    double recall = 0.0;
};

/// Curve points ordered by descending threshold, so recall never decreases
/// along the list.
struct PRCurve {
    std::vector<PRPoint> points;
};

/// Predictions and ground truth of one image.
struct ImageEval {
    std::vector<Detection> dets;
    std::vector<LineSegment> gts;
};

// ---------------------------------------------------------------------------
// Structural metrics (endpoint distance on a scale x scale grid)
// ---------------------------------------------------------------------------

/// Flags each detection, processed in the order given (callers rank by
/// descending confidence; ties keep input order), as true positive when the
/// nearest still-unmatched ground-truth line lies within tau of it under
/// min_sq_endpoint_dist at the given grid scale. A matched line is consumed.
std::vector<std::uint8_t> greedy_match_structural(
    const std::vector<Detection>& dets, const std::vector<LineSegment>& gts,
    double tau, double scale = 128.0);

/// Ranked precision/recall curve pooled over a dataset: detections are
/// matched per image, then ranked globally by descending confidence (ties:
/// image order, then input order). The recall denominator is the total
/// ground-truth count. Throws std::invalid_argument when the dataset has no
/// ground-truth lines at all.
PRCurve structural_pr(const std::vector<ImageEval>& images, double tau,
                      double scale = 128.0);

/// Area under a ranked curve with the precision envelope (all-point
/// interpolation): sum of recall increments times the highest precision at
/// or beyond each recall. Empty curve gives 0.
double average_precision(const PRCurve& curve);

/// Largest F1 = 2PR/(P+R) over the curve's points; 0 for an empty curve.
double max_f1(const PRCurve& curve);

/// Structural AP over a dataset / a single image's detections.
double structural_ap(const std::vector<ImageEval>& images, double tau,
                     double scale = 128.0);
double structural_ap(const std::vector<Detection>& dets,
                     const std::vector<LineSegment>& gts, double tau,
                     double scale = 128.0);

/// Maximum structural F1 over a dataset / a single image's detections.
double structural_f(const std::vector<ImageEval>& images, double tau,
                    double scale = 128.0);
double structural_f(const std::vector<Detection>& dets,
                    const std::vector<LineSegment>& gts, double tau,
                    double scale = 128.0);

// ---------------------------------------------------------------------------
// Heatmap metrics (rasterized line pixels)
// ---------------------------------------------------------------------------

/// 4-connected pixel traversal of a segment on a raster x raster grid:
/// endpoints map to the cells containing them (floor of coordinate * raster,
/// clamped), and every step moves exactly one pixel along one axis, so a
/// traversal covers |dx| + |dy| + 1 pixels with no diagonal jumps.
std::vector<std::pair<int, int>> line_pixels(const LineSegment& line,
                                             std::size_t raster);

/// Marks a segment's pixels in a raster x raster row-major grid.
void rasterize_line(const LineSegment& line, std::size_t raster,
                    std::vector<std::uint8_t>& grid);

struct HeatmapScores {
    double ap = 0.0;
    double f = 0.0;
};

/// Pixel-level AP and max F1: ground truth and detections are rasterized per
/// image, the confidence sweep thresholds the detection heatmap, and pixel
/// counts pool across images. An empty threshold list sweeps every distinct
/// confidence present, descending. A threshold admitting no pixels counts as
/// precision 1 at recall 0. A dataset whose ground truth rasterizes to
/// nothing scores 0.
HeatmapScores heatmap_ap_f(const std::vector<ImageEval>& images,
                           std::size_t raster = 128,
                           std::vector<double> thresholds = {});

// ---------------------------------------------------------------------------
// Aggregate report
// ---------------------------------------------------------------------------

/// Per-image matching diagnostics at each structural threshold.
struct ImageBreakdown {
    std::size_t n_gt = 0;
    std::size_t n_det = 0;
    std::map<int, std::size_t> true_positives;  ///< tau -> matched detections
};

/// Dataset-level metric values (all in [0,1]) plus per-image diagnostics.
struct MetricReport {
    std::map<int, double> sap;  ///< tau -> structural AP
    std::map<int, double> sf;   ///< tau -> max structural F1
    double aph = 0.0;
    double fh = 0.0;
    std::vector<ImageBreakdown> per_image;
};

/// Evaluates every metric over the dataset. Throws std::invalid_argument
/// when the dataset has no ground-truth lines.
MetricReport evaluate_dataset(const std::vector<ImageEval>& images,
                              const std::vector<int>& taus = {5, 10, 15},
                              std::size_t raster = 128);

/// {"sAP":{"5":...},"sF":{...},"APH":...,"FH":...} with values in [0,1].
std::string report_to_json(const MetricReport& report);

/// "threshold,precision,recall" header plus one row per curve point.
std::string pr_to_csv(const PRCurve& curve);

}  // namespace dtlsd

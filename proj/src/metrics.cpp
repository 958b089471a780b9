#include "dtlsd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace dtlsd {

namespace {

/// Detection indices ordered by descending confidence, ties by input order.
std::vector<std::size_t> rank_by_confidence(const std::vector<Detection>& dets) {
    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return dets[a].confidence > dets[b].confidence;
    });
    return order;
}

}  // namespace

std::vector<std::uint8_t> greedy_match_structural(
    const std::vector<Detection>& dets, const std::vector<LineSegment>& gts,
    double tau, double scale) {
    std::vector<std::uint8_t> tp(dets.size(), 0);
    std::vector<std::uint8_t> taken(gts.size(), 0);
    for (std::size_t d = 0; d < dets.size(); ++d) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t best_g = gts.size();
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (taken[g]) continue;
            const double dist = min_sq_endpoint_dist(dets[d].line, gts[g], scale);
            if (dist < best) {
                best = dist;
                best_g = g;
            }
        }
        if (best_g < gts.size() && best <= tau) {
            tp[d] = 1;
            taken[best_g] = 1;
        }
    }
    return tp;
}

PRCurve structural_pr(const std::vector<ImageEval>& images, double tau,
                      double scale) {
    std::size_t total_gt = 0;
    for (const ImageEval& img : images) total_gt += img.gts.size();
    if (total_gt == 0) {
        throw std::invalid_argument("structural_pr: dataset has no ground truth");
    }

    struct Ranked {
        double confidence;
        std::uint8_t tp;
    };
    std::vector<Ranked> pool;
    for (const ImageEval& img : images) {
        const std::vector<std::size_t> order = rank_by_confidence(img.dets);
        std::vector<Detection> sorted;
        sorted.reserve(order.size());
        for (std::size_t i : order) sorted.push_back(img.dets[i]);
        const std::vector<std::uint8_t> tp =
            greedy_match_structural(sorted, img.gts, tau, scale);
        for (std::size_t i = 0; i < sorted.size(); ++i) {
            pool.push_back({sorted[i].confidence, tp[i]});
        }
    }
    std::stable_sort(pool.begin(), pool.end(), [](const Ranked& a, const Ranked& b) {
        return a.confidence > b.confidence;
    });

    PRCurve curve;
    curve.points.reserve(pool.size());
    double tp_cum = 0.0, fp_cum = 0.0;
    for (const Ranked& r : pool) {
        if (r.tp) tp_cum += 1.0;
        else fp_cum += 1.0;
        curve.points.push_back({r.confidence, tp_cum / (tp_cum + fp_cum),
                                tp_cum / static_cast<double>(total_gt)});
    }
    return curve;
}

double average_precision(const PRCurve& curve) {
    const auto& pts = curve.points;
    if (pts.empty()) return 0.0;
    std::vector<double> envelope(pts.size());
    double best = 0.0;
    for (std::size_t i = pts.size(); i-- > 0;) {
        best = std::max(best, pts[i].precision);
        envelope[i] = best;
    }
    double area = 0.0, prev_recall = 0.0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        area += (pts[i].recall - prev_recall) * envelope[i];
        prev_recall = pts[i].recall;
    }
    return area;
}

double max_f1(const PRCurve& curve) {
    double best = 0.0;
    for (const PRPoint& p : curve.points) {
        const double denom = p.precision + p.recall;
        if (denom <= 0.0) continue;
        best = std::max(best, 2.0 * p.precision * p.recall / denom);
    }
    return best;
}

double structural_ap(const std::vector<ImageEval>& images, double tau,
                     double scale) {
    return average_precision(structural_pr(images, tau, scale));
}

double structural_ap(const std::vector<Detection>& dets,
                     const std::vector<LineSegment>& gts, double tau,
                     double scale) {
    return structural_ap(std::vector<ImageEval>{{dets, gts}}, tau, scale);
}

double structural_f(const std::vector<ImageEval>& images, double tau,
                    double scale) {
    return max_f1(structural_pr(images, tau, scale));
}

double structural_f(const std::vector<Detection>& dets,
                    const std::vector<LineSegment>& gts, double tau,
                    double scale) {
    return structural_f(std::vector<ImageEval>{{dets, gts}}, tau, scale);
}

std::vector<std::pair<int, int>> line_pixels(const LineSegment& line,
                                             std::size_t raster) {
    if (raster == 0) {
        throw std::invalid_argument("line_pixels: raster must be positive");
    }
    const int n = static_cast<int>(raster);
    auto cell = [&](double v) {
        const int c = static_cast<int>(std::floor(v * n));
        return std::clamp(c, 0, n - 1);
    };
    const int x0 = cell(line.x1), y0 = cell(line.y1);
    const int x1 = cell(line.x2), y1 = cell(line.y2);
    const int dx = std::abs(x1 - x0), dy = std::abs(y1 - y0);
    const int sx = x1 >= x0 ? 1 : -1, sy = y1 >= y0 ? 1 : -1;

    std::vector<std::pair<int, int>> pixels;
    pixels.reserve(static_cast<std::size_t>(dx + dy + 1));
    int x = x0, y = y0, ix = 0, iy = 0;
    pixels.emplace_back(x, y);
    while (ix < dx || iy < dy) {
        // Step along whichever axis crosses its next pixel midpoint first;
        // exact integer comparison of (ix + 1/2)/dx against (iy + 1/2)/dy.
        const long long x_turn = (1 + 2LL * ix) * dy;
        const long long y_turn = (1 + 2LL * iy) * dx;
        if (iy >= dy || (ix < dx && x_turn < y_turn)) {
            x += sx;
            ++ix;
        } else {
            y += sy;
            ++iy;
        }
        pixels.emplace_back(x, y);
    }
    return pixels;
}

void rasterize_line(const LineSegment& line, std::size_t raster,
                    std::vector<std::uint8_t>& grid) {
    if (grid.size() != raster * raster) {
        throw std::invalid_argument("rasterize_line: grid size mismatch");
    }
    for (const auto& [x, y] : line_pixels(line, raster)) {
        grid[static_cast<std::size_t>(y) * raster + static_cast<std::size_t>(x)] = 1;
    }
}

HeatmapScores heatmap_ap_f(const std::vector<ImageEval>& images,
                           std::size_t raster, std::vector<double> thresholds) {
    if (thresholds.empty()) {
        for (const ImageEval& img : images) {
            for (const Detection& d : img.dets) thresholds.push_back(d.confidence);
        }
    }
    std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
    thresholds.erase(std::unique(thresholds.begin(), thresholds.end()),
                     thresholds.end());

    std::size_t gt_total = 0;
    std::vector<std::size_t> tp(thresholds.size(), 0);
    std::vector<std::size_t> pred(thresholds.size(), 0);
    const double none = -std::numeric_limits<double>::infinity();
    for (const ImageEval& img : images) {
        std::vector<std::uint8_t> gt_grid(raster * raster, 0);
        for (const LineSegment& l : img.gts) rasterize_line(l, raster, gt_grid);
        for (std::uint8_t v : gt_grid) gt_total += v;

        std::vector<double> conf(raster * raster, none);
        for (const Detection& d : img.dets) {
            for (const auto& [x, y] : line_pixels(d.line, raster)) {
                double& c = conf[static_cast<std::size_t>(y) * raster +
                                 static_cast<std::size_t>(x)];
                c = std::max(c, d.confidence);
            }
        }
        for (std::size_t t = 0; t < thresholds.size(); ++t) {
            for (std::size_t i = 0; i < conf.size(); ++i) {
                if (conf[i] < thresholds[t]) continue;
                ++pred[t];
                if (gt_grid[i]) ++tp[t];
            }
        }
    }
    if (gt_total == 0) return {};

    PRCurve curve;
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
        const double precision =
            pred[t] == 0 ? 1.0
                         : static_cast<double>(tp[t]) / static_cast<double>(pred[t]);
        const double recall =
            static_cast<double>(tp[t]) / static_cast<double>(gt_total);
        curve.points.push_back({thresholds[t], precision, recall});
    }
    return {average_precision(curve), max_f1(curve)};
}

MetricReport evaluate_dataset(const std::vector<ImageEval>& images,
                              const std::vector<int>& taus, std::size_t raster) {
    MetricReport report;
    for (int tau : taus) {
        const PRCurve curve = structural_pr(images, static_cast<double>(tau));
        report.sap[tau] = average_precision(curve);
        report.sf[tau] = max_f1(curve);
    }
    const HeatmapScores hm = heatmap_ap_f(images, raster);
    report.aph = hm.ap;
    report.fh = hm.f;

    for (const ImageEval& img : images) {
        ImageBreakdown breakdown;
        breakdown.n_gt = img.gts.size();
        breakdown.n_det = img.dets.size();
        const std::vector<std::size_t> order = rank_by_confidence(img.dets);
        std::vector<Detection> sorted;
        sorted.reserve(order.size());
        for (std::size_t i : order) sorted.push_back(img.dets[i]);
        for (int tau : taus) {
            const std::vector<std::uint8_t> tp = greedy_match_structural(
                sorted, img.gts, static_cast<double>(tau));
            breakdown.true_positives[tau] =
                static_cast<std::size_t>(std::count(tp.begin(), tp.end(), 1));
        }
        report.per_image.push_back(std::move(breakdown));
    }
    return report;
}

std::string report_to_json(const MetricReport& report) {
    nlohmann::ordered_json j;
    nlohmann::ordered_json sap = nlohmann::ordered_json::object();
    for (const auto& [tau, value] : report.sap) sap[std::to_string(tau)] = value;
    nlohmann::ordered_json sf = nlohmann::ordered_json::object();
    for (const auto& [tau, value] : report.sf) sf[std::to_string(tau)] = value;
    j["sAP"] = std::move(sap);
    j["sF"] = std::move(sf);
    j["APH"] = report.aph;
    j["FH"] = report.fh;
    return j.dump();
}

std::string pr_to_csv(const PRCurve& curve) {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "threshold,precision,recall\n";
    for (const PRPoint& p : curve.points) {
        os << p.threshold << ',' << p.precision << ',' << p.recall << '\n';
    }
    return os.str();
}

}  // namespace dtlsd

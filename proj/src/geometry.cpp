#include "dtlsd/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dtlsd {

LineSegment LineSegment::clamped(double ax, double ay, double bx, double by) {
    auto clip = [](double v) { return std::clamp(v, 0.0, 1.0); };
    return LineSegment(clip(ax), clip(ay), clip(bx), clip(by));
}

double length(const LineSegment& l) {
    return std::hypot(l.x2 - l.x1, l.y2 - l.y1);
}

LineSegment canonicalize(const LineSegment& l) {
    const bool swap = (l.x1 > l.x2) || (l.x1 == l.x2 && l.y1 > l.y2);
    return swap ? LineSegment(l.x2, l.y2, l.x1, l.y1) : l;
}

LineSegment rotate_about_midpoint(const LineSegment& l, double theta) {
    const double cx = l.mid_x(), cy = l.mid_y();
    const double c = std::cos(theta), s = std::sin(theta);
    auto rot = [&](double x, double y, double& ox, double& oy) {
        const double dx = x - cx, dy = y - cy;
        ox = cx + c * dx - s * dy;
        oy = cy + s * dx + c * dy;
    };
    LineSegment out;
    rot(l.x1, l.y1, out.x1, out.y1);
    rot(l.x2, l.y2, out.x2, out.y2);
    return out;
}

LineSegment scale_about_midpoint(const LineSegment& l, double factor) {
    if (factor < 0.0) {
        throw std::invalid_argument("scale_about_midpoint: negative factor");
    }
    const double cx = l.mid_x(), cy = l.mid_y();
    return LineSegment(cx + factor * (l.x1 - cx), cy + factor * (l.y1 - cy),
                       cx + factor * (l.x2 - cx), cy + factor * (l.y2 - cy));
}

double min_sq_endpoint_dist(const LineSegment& a, const LineSegment& b,
                            double scale) {
    if (scale <= 0.0) {
        throw std::invalid_argument("min_sq_endpoint_dist: scale must be positive");
    }
    auto sq = [](double v) { return v * v; };
    const double direct = sq(scale * (a.x1 - b.x1)) + sq(scale * (a.y1 - b.y1)) +
                          sq(scale * (a.x2 - b.x2)) + sq(scale * (a.y2 - b.y2));
    const double swapped = sq(scale * (a.x1 - b.x2)) + sq(scale * (a.y1 - b.y2)) +
                           sq(scale * (a.x2 - b.x1)) + sq(scale * (a.y2 - b.y1));
    return std::min(direct, swapped);
}

}  // namespace dtlsd

#pragma once

#include <cstddef>

namespace dtlsd {

/// A 2D line segment in normalized image coordinates: each coordinate is a
/// fraction of the image width/height in [0,1]. Plain value type.
struct LineSegment {
    double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;

    LineSegment() = default;
    LineSegment(double ax, double ay, double bx, double by)
        : x1(ax), y1(ay), x2(bx), y2(by) {}

    /// Constructor that clamps every coordinate into [0,1].
    static LineSegment clamped(double ax, double ay, double bx, double by);

    double mid_x() const { return 0.5 * (x1 + x2); }
    double mid_y() const { return 0.5 * (y1 + y2); }

    bool operator==(const LineSegment&) const = default;
};

/// Euclidean distance between the endpoints, in normalized units.
double length(const LineSegment& l);

/// Endpoints sorted lexicographically (x first, then y). Idempotent; gives
/// the order-sensitive L1 endpoint loss a well-defined orientation.
LineSegment canonicalize(const LineSegment& l);

/// Rotates both endpoints by theta (radians, counterclockwise in (x,y))
/// around the segment midpoint. Midpoint and length are preserved.
LineSegment rotate_about_midpoint(const LineSegment& l, double theta);

/// Scales the segment about its midpoint: new length = factor * old length.
/// Throws std::invalid_argument for negative factors.
LineSegment scale_about_midpoint(const LineSegment& l, double factor);

/// Minimum over the two endpoint pairings of the summed squared endpoint
/// distance, with both segments mapped onto a scale x scale pixel grid.
/// This is the structural distance used by the sAP/sF metrics.
double min_sq_endpoint_dist(const LineSegment& a, const LineSegment& b,
                            double scale);

}  // namespace dtlsd

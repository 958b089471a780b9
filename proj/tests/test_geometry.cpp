#include <cmath>
#include <numbers>
#include <stdexcept>

#include "doctest.h"
#include "dtlsd/geometry.hpp"
#include "dtlsd/rng.hpp"

using dtlsd::LineSegment;
using dtlsd::Rng;

namespace {
constexpr double kPi = std::numbers::pi;

bool close(const LineSegment& a, const LineSegment& b, double tol = 1e-12) {
    return std::abs(a.x1 - b.x1) <= tol && std::abs(a.y1 - b.y1) <= tol &&
           std::abs(a.x2 - b.x2) <= tol && std::abs(a.y2 - b.y2) <= tol;
}
}  // namespace

TEST_CASE("length: degenerate, 3-4-5, and endpoint-swap symmetry") {
    CHECK(dtlsd::length({0, 0, 0, 0}) == 0.0);
    CHECK(dtlsd::length({0, 0, 0.3, 0.4}) == doctest::Approx(0.5).epsilon(1e-15));
    Rng rng(6);
    for (int i = 0; i < 50; ++i) {
        LineSegment l(rng.uniform01(), rng.uniform01(), rng.uniform01(),
                      rng.uniform01());
        LineSegment swapped(l.x2, l.y2, l.x1, l.y1);
        CHECK(dtlsd::length(l) == doctest::Approx(dtlsd::length(swapped)).epsilon(1e-15));
        CHECK(dtlsd::length(l) >= 0.0);
    }
}

TEST_CASE("canonicalize sorts endpoints lexicographically") {
    LineSegment l(0.6, 0.1, 0.2, 0.9);
    LineSegment c = dtlsd::canonicalize(l);
    CHECK(close(c, {0.2, 0.9, 0.6, 0.1}));

    LineSegment already(0.1, 0.2, 0.3, 0.4);
    CHECK(close(dtlsd::canonicalize(already), already));

    // Equal x: tie-break on y.
    LineSegment tie(0.5, 0.8, 0.5, 0.2);
    CHECK(close(dtlsd::canonicalize(tie), {0.5, 0.2, 0.5, 0.8}));
}

TEST_CASE("canonicalize is idempotent on random segments") {
    Rng rng(77);
    for (int i = 0; i < 200; ++i) {
        LineSegment l(rng.uniform01(), rng.uniform01(), rng.uniform01(),
                      rng.uniform01());
        LineSegment once = dtlsd::canonicalize(l);
        CHECK(close(dtlsd::canonicalize(once), once, 0.0));
        CHECK((once.x1 < once.x2 ||
               (once.x1 == once.x2 && once.y1 <= once.y2)));
    }
}

TEST_CASE("rotate about midpoint: +90 degrees maps offsets (x,y)->(-y,x)") {
    LineSegment l(0.4, 0.5, 0.6, 0.5);
    LineSegment r = dtlsd::rotate_about_midpoint(l, kPi / 2.0);
    CHECK(close(r, {0.5, 0.4, 0.5, 0.6}, 1e-12));
}

TEST_CASE("rotate about midpoint: identity and inverse") {
    Rng rng(8);
    for (int i = 0; i < 100; ++i) {
        LineSegment l(rng.uniform01(), rng.uniform01(), rng.uniform01(),
                      rng.uniform01());
        CHECK(close(dtlsd::rotate_about_midpoint(l, 0.0), l, 0.0));
        const double theta = rng.uniform(-kPi, kPi);
        LineSegment back = dtlsd::rotate_about_midpoint(
            dtlsd::rotate_about_midpoint(l, theta), -theta);
        CHECK(close(back, l, 1e-12));

        // Midpoint and length preserved.
        LineSegment r = dtlsd::rotate_about_midpoint(l, theta);
        CHECK(std::abs(r.mid_x() - l.mid_x()) < 1e-12);
        CHECK(std::abs(r.mid_y() - l.mid_y()) < 1e-12);
        CHECK(std::abs(dtlsd::length(r) - dtlsd::length(l)) < 1e-12);
    }
}

TEST_CASE("scale about midpoint: collapse, halve, identity, negative") {
    LineSegment l(0.4, 0.5, 0.6, 0.5);
    LineSegment zero = dtlsd::scale_about_midpoint(l, 0.0);
    CHECK(close(zero, {0.5, 0.5, 0.5, 0.5}));

    LineSegment half = dtlsd::scale_about_midpoint(l, 0.5);
    CHECK(close(half, {0.45, 0.5, 0.55, 0.5}, 1e-15));

    CHECK(close(dtlsd::scale_about_midpoint(l, 1.0), l, 0.0));
    CHECK_THROWS_AS(dtlsd::scale_about_midpoint(l, -0.1), std::invalid_argument);
}

TEST_CASE("scale about midpoint preserves midpoint and scales length") {
    Rng rng(9);
    for (int i = 0; i < 100; ++i) {
        LineSegment l(rng.uniform01(), rng.uniform01(), rng.uniform01(),
                      rng.uniform01());
        const double f = rng.uniform(0.0, 2.0);
        LineSegment s = dtlsd::scale_about_midpoint(l, f);
        CHECK(std::abs(s.mid_x() - l.mid_x()) < 1e-12);
        CHECK(std::abs(s.mid_y() - l.mid_y()) < 1e-12);
        CHECK(std::abs(dtlsd::length(s) - f * dtlsd::length(l)) < 1e-12);
    }
}

TEST_CASE("rotate and scale about the midpoint commute") {
    Rng rng(10);
    for (int i = 0; i < 100; ++i) {
        LineSegment l(rng.uniform01(), rng.uniform01(), rng.uniform01(),
                      rng.uniform01());
        const double theta = rng.uniform(-kPi, kPi);
        const double f = rng.uniform(0.0, 2.0);
        LineSegment rs = dtlsd::scale_about_midpoint(
            dtlsd::rotate_about_midpoint(l, theta), f);
        LineSegment sr = dtlsd::rotate_about_midpoint(
            dtlsd::scale_about_midpoint(l, f), theta);
        CHECK(close(rs, sr, 1e-12));
    }
}

TEST_CASE("min_sq_endpoint_dist: identity, pairing swap, hand case") {
    LineSegment a(0.1, 0.2, 0.3, 0.4);
    CHECK(dtlsd::min_sq_endpoint_dist(a, a, 128.0) == 0.0);

    LineSegment fwd(0, 0, 1, 1), rev(1, 1, 0, 0);
    CHECK(dtlsd::min_sq_endpoint_dist(fwd, rev, 64.0) == 0.0);

    // Parallel vertical lines 0.1 apart at scale 128: 2 * (12.8)^2.
    LineSegment u(0, 0, 0, 1), v(0.1, 0, 0.1, 1);
    CHECK(dtlsd::min_sq_endpoint_dist(u, v, 128.0) ==
          doctest::Approx(327.68).epsilon(1e-12));
}

TEST_CASE("min_sq_endpoint_dist is symmetric and reorder-invariant") {
    Rng rng(11);
    for (int i = 0; i < 100; ++i) {
        LineSegment a(rng.uniform01(), rng.uniform01(), rng.uniform01(),
                      rng.uniform01());
        LineSegment b(rng.uniform01(), rng.uniform01(), rng.uniform01(),
                      rng.uniform01());
        const double d = dtlsd::min_sq_endpoint_dist(a, b, 128.0);
        CHECK(dtlsd::min_sq_endpoint_dist(b, a, 128.0) == doctest::Approx(d));
        LineSegment ar(a.x2, a.y2, a.x1, a.y1);
        LineSegment br(b.x2, b.y2, b.x1, b.y1);
        CHECK(dtlsd::min_sq_endpoint_dist(ar, b, 128.0) == doctest::Approx(d));
        CHECK(dtlsd::min_sq_endpoint_dist(a, br, 128.0) == doctest::Approx(d));
        CHECK(dtlsd::min_sq_endpoint_dist(ar, br, 128.0) == doctest::Approx(d));
    }
}

TEST_CASE("clamped constructor bounds all coordinates") {
    LineSegment l = LineSegment::clamped(-0.5, 0.3, 1.7, 2.0);
    CHECK(l.x1 == 0.0);
    CHECK(l.y1 == 0.3);
    CHECK(l.x2 == 1.0);
    CHECK(l.y2 == 1.0);
}

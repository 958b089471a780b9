#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "dtlsd/matching_loss.hpp"
#include "dtlsd/nn.hpp"
#include "dtlsd/rng.hpp"

using dtlsd::Assignment;
using dtlsd::LineSegment;
using dtlsd::LossWeights;
using dtlsd::Prediction;
using dtlsd::Rng;
using dtlsd::Tensor;
namespace ag = dtlsd::ag;

TEST_CASE("cost matrix: exact match with full confidence costs -2") {
    LineSegment l(0.2, 0.3, 0.6, 0.7);
    std::vector<Prediction> preds = {{1.0, l}};
    std::vector<LineSegment> gts = {l};
    Tensor c = dtlsd::build_cost_matrix(preds, gts, LossWeights{});
    CHECK(c.at2(0, 0) == doctest::Approx(-2.0).epsilon(1e-12));
}

TEST_CASE("cost matrix: half confidence and 0.2 L1 cancel to zero") {
    std::vector<Prediction> preds = {{0.5, LineSegment(0.25, 0.3, 0.5, 0.75)}};
    std::vector<LineSegment> gts = {LineSegment(0.2, 0.3, 0.6, 0.7)};
    Tensor c = dtlsd::build_cost_matrix(preds, gts, LossWeights{});
    CHECK(c.at2(0, 0) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("cost decreases in confidence and increases in distance") {
    LineSegment gt(0.2, 0.2, 0.8, 0.8);
    LossWeights w;
    auto cost_of = [&](double p, double dx) {
        std::vector<Prediction> preds = {
            {p, LineSegment(0.2 + dx, 0.2, 0.8 + dx, 0.8)}};
        std::vector<LineSegment> gts = {gt};
        return dtlsd::build_cost_matrix(preds, gts, w).at2(0, 0);
    };
    CHECK(cost_of(0.9, 0.0) < cost_of(0.5, 0.0));
    CHECK(cost_of(0.5, 0.1) > cost_of(0.5, 0.0));
}

TEST_CASE("hungarian: 2x2 hand case") {
    Tensor c({2, 2}, {1.0, 2.0, 2.0, 1.0});
    Assignment a = dtlsd::hungarian_assign(c);
    CHECK(a.gt_for_pred[0] == 0);
    CHECK(a.gt_for_pred[1] == 1);
    CHECK(a.total_cost == doctest::Approx(2.0));
}

TEST_CASE("hungarian: zero matrix resolves by lowest-index tie-break") {
    Tensor c({3, 3});
    Assignment a = dtlsd::hungarian_assign(c);
    CHECK(a.total_cost == 0.0);
    for (int g = 0; g < 3; ++g) CHECK(a.pred_for_gt[g] == g);
}

TEST_CASE("hungarian rejects wide matrices and non-finite costs") {
    CHECK_THROWS_AS(dtlsd::hungarian_assign(Tensor({1, 2})), std::invalid_argument);
    Tensor bad({1, 1});
    bad[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(dtlsd::hungarian_assign(bad), std::invalid_argument);
}

TEST_CASE("hungarian equals brute force on random square instances n<=7") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed * 601 + 7);
        const std::size_t n = 1 + rng.next_u64() % 7;
        Tensor c({n, n});
        for (std::size_t i = 0; i < c.size(); ++i) c[i] = rng.uniform(-5.0, 5.0);
        Assignment fast = dtlsd::hungarian_assign(c);
        Assignment slow = dtlsd::brute_force_assign(c);
        CHECK(fast.total_cost == doctest::Approx(slow.total_cost).epsilon(1e-9));
    }
}

TEST_CASE("hungarian equals brute force on rectangular instances") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(seed * 127 + 3);
        const std::size_t n_gt = 1 + rng.next_u64() % 5;
        const std::size_t n_pred = n_gt + rng.next_u64() % 4;
        Tensor c({n_pred, n_gt});
        for (std::size_t i = 0; i < c.size(); ++i) c[i] = rng.uniform(-5.0, 5.0);
        Assignment fast = dtlsd::hungarian_assign(c);
        Assignment slow = dtlsd::brute_force_assign(c);
        CHECK(fast.total_cost == doctest::Approx(slow.total_cost).epsilon(1e-9));
        // Every GT matched exactly once by a distinct prediction.
        std::vector<char> seen(n_pred, 0);
        for (std::size_t g = 0; g < n_gt; ++g) {
            const int p = fast.pred_for_gt[g];
            REQUIRE(p >= 0);
            CHECK(!seen[p]);
            seen[p] = 1;
        }
    }
}

TEST_CASE("scaling both lambdas leaves the assignment unchanged") {
    Rng rng(33);
    std::vector<Prediction> preds;
    std::vector<LineSegment> gts;
    for (int i = 0; i < 6; ++i) {
        preds.push_back({rng.uniform01(), LineSegment(rng.uniform01(), rng.uniform01(),
                                                      rng.uniform01(), rng.uniform01())});
        if (i < 4)
            gts.emplace_back(rng.uniform01(), rng.uniform01(), rng.uniform01(),
                             rng.uniform01());
    }
    LossWeights w1;
    LossWeights w3{3.0 * w1.lambda_class, 3.0 * w1.lambda_line};
    Assignment a1 = dtlsd::hungarian_assign(dtlsd::build_cost_matrix(preds, gts, w1));
    Assignment a3 = dtlsd::hungarian_assign(dtlsd::build_cost_matrix(preds, gts, w3));
    CHECK(a1.gt_for_pred == a3.gt_for_pred);
}

TEST_CASE("focal loss hand values") {
    CHECK(dtlsd::focal_loss(1.0, true) == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(dtlsd::focal_loss(0.5, true) == doctest::Approx(0.173287).epsilon(1e-6));
    CHECK(dtlsd::focal_loss(0.5, false) == doctest::Approx(0.043322).epsilon(1e-6));
    // Clamp keeps the endpoints finite.
    CHECK(std::isfinite(dtlsd::focal_loss(0.0, true)));
    CHECK(std::isfinite(dtlsd::focal_loss(1.0, false)));
}

TEST_CASE("line L1 loss hand values and indicator") {
    LineSegment l(0.2, 0.3, 0.6, 0.7), lh(0.25, 0.3, 0.5, 0.75);
    CHECK(dtlsd::line_l1_loss(l, l, true) == 0.0);
    CHECK(dtlsd::line_l1_loss(lh, l, true) == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(dtlsd::line_l1_loss(lh, l, false) == 0.0);
}

TEST_CASE("total loss: single matched query composes focal and L1") {
    ag::Tape tape;
    ag::Var probs = tape.input(Tensor({1}, {0.5}));
    ag::Var lines = tape.input(Tensor({1, 4}, {0.25, 0.3, 0.5, 0.75}));
    std::vector<LineSegment> gts = {LineSegment(0.2, 0.3, 0.6, 0.7)};
    Assignment assign;
    assign.gt_for_pred = {0};
    assign.pred_for_gt = {0};
    dtlsd::LossBreakdown bd;
    ag::Var loss = dtlsd::total_loss(tape, probs, lines, gts, assign,
                                     LossWeights{}, &bd);
    CHECK(tape.value(loss)[0] == doctest::Approx(1.346574).epsilon(1e-6));
    CHECK(bd.loss_class == doctest::Approx(0.173287).epsilon(1e-6));
    CHECK(bd.loss_line == doctest::Approx(0.2).epsilon(1e-6));
}

TEST_CASE("total loss vanishes for perfect predictions") {
    ag::Tape tape;
    ag::Var probs = tape.input(Tensor({2}, {1.0 - 1e-9, 1e-9}));
    ag::Var lines =
        tape.input(Tensor({2, 4}, {0.2, 0.3, 0.6, 0.7, 0.1, 0.1, 0.9, 0.9}));
    std::vector<LineSegment> gts = {LineSegment(0.2, 0.3, 0.6, 0.7)};
    Assignment assign;
    assign.gt_for_pred = {0, -1};
    assign.pred_for_gt = {0};
    ag::Var loss =
        dtlsd::total_loss(tape, probs, lines, gts, assign, LossWeights{}, nullptr);
    CHECK(tape.value(loss)[0] == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("total loss is invariant to GT permutation when re-solved") {
    Rng rng(55);
    const std::size_t n = 6, g = 3;
    Tensor pv({n}), lv({n, 4});
    for (std::size_t i = 0; i < n; ++i) pv[i] = rng.uniform(0.1, 0.9);
    for (std::size_t i = 0; i < lv.size(); ++i) lv[i] = rng.uniform01();
    std::vector<LineSegment> gts;
    for (std::size_t i = 0; i < g; ++i)
        gts.emplace_back(rng.uniform01(), rng.uniform01(), rng.uniform01(),
                         rng.uniform01());

    auto eval = [&](const std::vector<LineSegment>& order) {
        std::vector<Prediction> preds(n);
        for (std::size_t i = 0; i < n; ++i) {
            preds[i] = {pv[i], LineSegment(lv.at2(i, 0), lv.at2(i, 1),
                                           lv.at2(i, 2), lv.at2(i, 3))};
        }
        Assignment a =
            dtlsd::hungarian_assign(dtlsd::build_cost_matrix(preds, order, LossWeights{}));
        ag::Tape tape;
        ag::Var loss = dtlsd::total_loss(tape, tape.input(pv), tape.input(lv),
                                         order, a, LossWeights{}, nullptr);
        return tape.value(loss)[0];
    };

    std::vector<LineSegment> shuffled = {gts[2], gts[0], gts[1]};
    CHECK(eval(gts) == doctest::Approx(eval(shuffled)).epsilon(1e-12));
    CHECK(eval(gts) >= 0.0);
}

TEST_CASE("total loss gradient matches finite differences") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed * 211 + 9);
        dtlsd::ParamStore store;
        const std::size_t n = 4;
        Tensor pv({n}), lv({n, 4});
        for (std::size_t i = 0; i < n; ++i) pv[i] = rng.uniform(0.15, 0.85);
        // Keep x1 and x2 well separated so the canonical order is stable
        // under the +/- h probes.
        for (std::size_t i = 0; i < n; ++i) {
            lv.at2(i, 0) = rng.uniform(0.05, 0.40);
            lv.at2(i, 1) = rng.uniform01();
            lv.at2(i, 2) = rng.uniform(0.60, 0.95);
            lv.at2(i, 3) = rng.uniform01();
        }
        dtlsd::Parameter& probs = store.create("probs", pv);
        dtlsd::Parameter& lines = store.create("lines", lv);
        std::vector<LineSegment> gts = {
            LineSegment(0.1, 0.2, 0.7, 0.8),
            LineSegment(0.3, 0.9, 0.8, 0.1),
        };
        Assignment assign;
        assign.gt_for_pred = {1, -1, 0, -1};
        assign.pred_for_gt = {2, 0};
        auto build = [&](ag::Tape& tape) {
            return dtlsd::total_loss(tape, tape.leaf(probs), tape.leaf(lines),
                                     gts, assign, LossWeights{}, nullptr);
        };
        auto rep = dtlsd::grad_check(build, store.all(), 1e-5);
        CHECK(rep.max_rel_err < 1e-4);
    }
}

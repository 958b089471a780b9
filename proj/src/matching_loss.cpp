#include "dtlsd/matching_loss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace dtlsd {

namespace {
constexpr double kProbEps = 1e-8;

double l1_distance(const LineSegment& a, const LineSegment& b) {
    return std::abs(a.x1 - b.x1) + std::abs(a.y1 - b.y1) +
           std::abs(a.x2 - b.x2) + std::abs(a.y2 - b.y2);
}
}  // namespace

Tensor build_cost_matrix(const std::vector<Prediction>& preds,
                         const std::vector<LineSegment>& gts,
                         const LossWeights& w) {
    Tensor cost({std::max<std::size_t>(preds.size(), 1),
                 std::max<std::size_t>(gts.size(), 1)});
    for (std::size_t q = 0; q < preds.size(); ++q) {
        const LineSegment pl = canonicalize(preds[q].line);
        for (std::size_t g = 0; g < gts.size(); ++g) {
            cost.at2(q, g) = w.lambda_class * (-preds[q].p) +
                             w.lambda_line * l1_distance(pl, canonicalize(gts[g]));
        }
    }
    return cost;
}

Assignment hungarian_assign(const Tensor& cost) {
    if (cost.rank() != 2) {
        throw std::invalid_argument("hungarian_assign: cost must be 2D");
    }
    const std::size_t n_pred = cost.dim(0);
    const std::size_t n_gt = cost.dim(1);
    if (n_pred < n_gt) {
        throw std::invalid_argument(
            "hungarian_assign: need at least as many predictions as ground truths");
    }
    if (!cost.all_finite()) {
        throw std::invalid_argument("hungarian_assign: non-finite cost");
    }

    // Shortest-augmenting-path assignment with dual potentials, O(n^2 m).
    // Internally rows are ground truths (all must be covered) and columns are
    // predictions; 1-based with a virtual 0 slot, as is conventional.
    const std::size_t n = n_gt, m = n_pred;
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<std::size_t> match(m + 1, 0), way(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        match[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = match[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = cost.at2(j - 1, i0 - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (match[j0] != 0);
        // Walk the augmenting path backwards, flipping matches.
        do {
            const std::size_t j1 = way[j0];
            match[j0] = match[j1];
            j0 = j1;
        } while (j0 != 0);
    }

    Assignment out;
    out.gt_for_pred.assign(n_pred, -1);
    out.pred_for_gt.assign(n_gt, -1);
    for (std::size_t j = 1; j <= m; ++j) {
        if (match[j] == 0) continue;
        const std::size_t gt = match[j] - 1, pred = j - 1;
        out.gt_for_pred[pred] = static_cast<int>(gt);
        out.pred_for_gt[gt] = static_cast<int>(pred);
        out.total_cost += cost.at2(pred, gt);
    }
    return out;
}

Assignment brute_force_assign(const Tensor& cost) {
    if (cost.rank() != 2) {
        throw std::invalid_argument("brute_force_assign: cost must be 2D");
    }
    const std::size_t n_pred = cost.dim(0), n_gt = cost.dim(1);
    if (n_pred < n_gt) {
        throw std::invalid_argument("brute_force_assign: need rows >= cols");
    }

    std::vector<int> current(n_gt, -1), best;
    std::vector<char> used(n_pred, 0);
    double best_cost = std::numeric_limits<double>::infinity();

    // Depth-first enumeration of all injective gt -> prediction maps.
    auto recurse = [&](auto&& self, std::size_t g, double acc) -> void {
        if (g == n_gt) {
            if (acc < best_cost) {
                best_cost = acc;
                best = current;
            }
            return;
        }
        for (std::size_t p = 0; p < n_pred; ++p) {
            if (used[p]) continue;
            used[p] = 1;
            current[g] = static_cast<int>(p);
            self(self, g + 1, acc + cost.at2(p, g));
            used[p] = 0;
        }
    };
    recurse(recurse, 0, 0.0);

    Assignment out;
    out.gt_for_pred.assign(n_pred, -1);
    out.pred_for_gt.assign(n_gt, -1);
    out.total_cost = n_gt ? best_cost : 0.0;
    for (std::size_t g = 0; g < n_gt; ++g) {
        out.pred_for_gt[g] = best[g];
        out.gt_for_pred[best[g]] = static_cast<int>(g);
    }
    return out;
}

double focal_loss(double p, bool is_line) {
    const double pc = std::clamp(p, kProbEps, 1.0 - kProbEps);
    if (is_line) {
        return (1.0 - pc) * (1.0 - pc) * (-std::log(pc));
    }
    return 0.25 * pc * pc * (-std::log(1.0 - pc));
}

double line_l1_loss(const LineSegment& pred, const LineSegment& gt, bool matched) {
    return matched ? l1_distance(pred, gt) : 0.0;
}

ag::Var total_loss(ag::Tape& tape, ag::Var probs, ag::Var lines,
                   const std::vector<LineSegment>& gts,
                   const Assignment& assign, const LossWeights& w,
                   LossBreakdown* out) {
    const Tensor& pv = tape.value(probs);
    const Tensor& lv = tape.value(lines);
    if (pv.rank() != 1) throw std::invalid_argument("total_loss: probs must be [N]");
    const std::size_t n = pv.dim(0);
    if (lv.rank() != 2 || lv.dim(0) != n || lv.dim(1) != 4) {
        throw std::invalid_argument("total_loss: lines must be [N,4]");
    }
    if (assign.n_pred() != n) {
        throw std::invalid_argument("total_loss: assignment size mismatch");
    }

    // Matched-query mask, canonicalized GT targets, and the per-row endpoint
    // swap that canonicalizes the predictions. All discrete choices are
    // frozen into constants here; the graph itself stays differentiable.
    Tensor mask_pos({n});
    Tensor mask_pos4({n, 4});
    Tensor targets({n, 4});
    std::vector<std::uint8_t> swap(n, 0);
    for (std::size_t q = 0; q < n; ++q) {
        const double x1 = lv.at2(q, 0), y1 = lv.at2(q, 1);
        const double x2 = lv.at2(q, 2), y2 = lv.at2(q, 3);
        swap[q] = (x1 > x2 || (x1 == x2 && y1 > y2)) ? 1 : 0;
        const int g = assign.gt_for_pred[q];
        if (g < 0) continue;
        if (static_cast<std::size_t>(g) >= gts.size()) {
            throw std::invalid_argument("total_loss: assignment references missing GT");
        }
        mask_pos[q] = 1.0;
        const LineSegment t = canonicalize(gts[static_cast<std::size_t>(g)]);
        targets.at2(q, 0) = t.x1;
        targets.at2(q, 1) = t.y1;
        targets.at2(q, 2) = t.x2;
        targets.at2(q, 3) = t.y2;
        for (std::size_t j = 0; j < 4; ++j) mask_pos4.at2(q, j) = 1.0;
    }
    Tensor mask_neg({n});
    for (std::size_t q = 0; q < n; ++q) mask_neg[q] = 1.0 - mask_pos[q];

    ag::Var pc = ag::clamp(probs, kProbEps, 1.0 - kProbEps);
    ag::Var one_minus_p = ag::add_scalar(ag::neg(pc), 1.0);
    ag::Var pos_focal = ag::mul(ag::mul(one_minus_p, one_minus_p), ag::neg(ag::log(pc)));
    ag::Var neg_focal =
        ag::scale(ag::mul(ag::mul(pc, pc), ag::neg(ag::log(one_minus_p))), 0.25);
    ag::Var focal = ag::add(ag::mul(tape.constant(mask_pos), pos_focal),
                            ag::mul(tape.constant(mask_neg), neg_focal));
    ag::Var loss_class = ag::sum(focal);

    ag::Var canon = ag::swap_endpoints(lines, swap);
    ag::Var diff = ag::abs(ag::sub(canon, tape.constant(targets)));
    ag::Var loss_line = ag::sum(ag::mul(tape.constant(mask_pos4), diff));

    ag::Var total = ag::add(ag::scale(loss_class, w.lambda_class),
                            ag::scale(loss_line, w.lambda_line));
    if (out) {
        out->loss_class = tape.value(loss_class)[0];
        out->loss_line = tape.value(loss_line)[0];
        out->total = tape.value(total)[0];
    }
    return total;
}

}  // namespace dtlsd

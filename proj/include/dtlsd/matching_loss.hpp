#pragma once

#include <vector>

#include "dtlsd/autograd.hpp"
#include "dtlsd/geometry.hpp"
#include "dtlsd/tensor.hpp"

namespace dtlsd {

/// Loss-term weights of the training objective and of the matching cost.
struct LossWeights {
    double lambda_class = 2.0;
    double lambda_line = 5.0;
};

/// One scored line prediction (probability of being a real line + endpoints).
struct Prediction {
    double p = 0.0;
    LineSegment line;
};

/// Injective assignment of predictions onto ground-truth lines.
struct Assignment {
    std::vector<int> gt_for_pred;   ///< per prediction: matched GT index or -1
    std::vector<int> pred_for_gt;   ///< per GT: the matched prediction index
    double total_cost = 0.0;

    std::size_t n_pred() const { return gt_for_pred.size(); }
    std::size_t n_gt() const { return pred_for_gt.size(); }
};

/// cost(q, g) = lambda_class * (-p_q) + lambda_line * L1(l_q, l_g), with both
/// segments canonicalized. Rows are predictions, columns ground truths.
Tensor build_cost_matrix(const std::vector<Prediction>& preds,
                         const std::vector<LineSegment>& gts,
                         const LossWeights& w);

/// Minimum-cost injective assignment covering every column (ground truth).
/// Requires rows >= cols; ties broken toward the lowest prediction index.
Assignment hungarian_assign(const Tensor& cost);

/// Exhaustive minimum over all injective column assignments; factorially
/// expensive, usable only for small instances. Shares the cost convention
/// with hungarian_assign and serves as its correctness oracle.
Assignment brute_force_assign(const Tensor& cost);

/// Class loss for one prediction. Probability is clamped to
/// [1e-8, 1 - 1e-8] before the logarithm.
///   line:    (1-p)^2 * (-ln p)
///   no-line: 0.25 * p^2 * (-ln(1-p))
double focal_loss(double p, bool is_line);

/// Endpoint regression loss: sum of |component differences| when matched,
/// zero otherwise. Both segments should be canonicalized by the caller.
double line_l1_loss(const LineSegment& pred, const LineSegment& gt, bool matched);

/// Values of the individual loss terms (pre-weighting) plus the weighted sum.
struct LossBreakdown {
    double total = 0.0;
    double loss_class = 0.0;  ///< focal sum over all queries
    double loss_line = 0.0;   ///< L1 sum over matched queries
};

/// Differentiable total loss over one image's query set.
///   probs: [N] probabilities in (0,1); lines: [N,4] predicted endpoints.
/// Matched queries (per the assignment) contribute line-class focal loss and
/// canonicalized endpoint L1 against their GT; unmatched queries contribute
/// the no-line focal term only. Returns the weighted scalar; reports the
/// unweighted term values through `out` when given.
ag::Var total_loss(ag::Tape& tape, ag::Var probs, ag::Var lines,
                   const std::vector<LineSegment>& gts,
                   const Assignment& assign, const LossWeights& w,
                   LossBreakdown* out = nullptr);

}  // namespace dtlsd

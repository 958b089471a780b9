#include "dtlsd/lcdn.hpp"

#include <algorithm>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace dtlsd {

namespace {

Tensor label_one_hot(bool is_line) {
    Tensor t({2});
    t[is_line ? kLineLabel : kNoLineLabel] = 1.0;
    return t;
}

LineSegment noised_line(const LineSegment& gt, double u, double theta) {
    const LineSegment s = rotate_about_midpoint(scale_about_midpoint(gt, u), theta);
    return LineSegment::clamped(s.x1, s.y1, s.x2, s.y2);
}

}  // namespace

void DenoisingConfig::validate() const {
    if (label_noise_ratio < 0.0 || label_noise_ratio > 1.0) {
        throw std::invalid_argument("DenoisingConfig: label_noise_ratio outside [0,1]");
    }
    if (!(line_scale > 0.0) || line_scale > 1.0) {
        throw std::invalid_argument("DenoisingConfig: line_scale outside (0,1]");
    }
    if (!(line_rotation_deg > 0.0) || !(line_rotation_deg < 90.0)) {
        throw std::invalid_argument("DenoisingConfig: line_rotation_deg outside (0,90)");
    }
}

DenoisingBatch generate_denoising_batch(const std::vector<LineSegment>& gt,
                                        const DenoisingConfig& cfg,
                                        std::size_t n_match, Rng& rng) {
    cfg.validate();
    DenoisingBatch batch;
    if (gt.empty()) {
        batch.mask = build_attention_mask(0, 0, n_match);
        return batch;
    }

    const std::size_t budget_pairs = cfg.dn_number / 2;
    const std::size_t n_used = std::min(gt.size(), budget_pairs);
    const std::size_t groups = std::max<std::size_t>(1, cfg.dn_number / (2 * gt.size()));

    std::vector<std::size_t> used(gt.size());
    std::iota(used.begin(), used.end(), std::size_t{0});
    if (n_used < gt.size()) {
        for (std::size_t i = 0; i < n_used; ++i) {
            const std::size_t j = static_cast<std::size_t>(rng.uniform_int(
                static_cast<std::int64_t>(i), static_cast<std::int64_t>(gt.size()) - 1));
            std::swap(used[i], used[j]);
        }
        used.resize(n_used);
        std::sort(used.begin(), used.end());
    }

    const double s = cfg.line_scale;
    const double tau = cfg.line_rotation_deg * std::numbers::pi / 180.0;
    batch.group_count = groups;
    batch.group_size = 2 * n_used;
    batch.queries.reserve(groups * batch.group_size);
    batch.records.reserve(groups * batch.group_size);

    for (std::size_t g = 0; g < groups; ++g) {
        for (std::size_t j = 0; j < n_used; ++j) {
            const LineSegment& line = gt[used[j]];

            double delta = rng.uniform(0.0, s);
            while (delta <= 0.0) delta = rng.uniform(0.0, s);
            double theta_pos = rng.uniform(-tau, tau);
            while (theta_pos <= -tau) theta_pos = rng.uniform(-tau, tau);
            const double mag = rng.uniform(tau, 2.0 * tau);
            const double theta_neg = rng.bernoulli(0.5) ? mag : -mag;

            const double u_pos = 1.0 - delta;
            const double u_neg = 1.0 + delta;
            batch.queries.push_back(
                {label_one_hot(true), noised_line(line, u_pos, theta_pos)});
            batch.records.push_back({used[j], true, u_pos, theta_pos, true, false});
            batch.queries.push_back(
                {label_one_hot(true), noised_line(line, u_neg, theta_neg)});
            batch.records.push_back({used[j], false, u_neg, theta_neg, true, false});
        }
    }
    batch.mask = build_attention_mask(batch.group_size, groups, n_match);
    return batch;
}

DenoisingBatch apply_label_noise(const DenoisingBatch& batch, double ratio,
                                 Rng& rng) {
    if (ratio < 0.0 || ratio > 1.0) {
        throw std::invalid_argument("apply_label_noise: ratio outside [0,1]");
    }
    DenoisingBatch out = batch;
    for (std::size_t q = 0; q < out.records.size(); ++q) {
        if (!rng.bernoulli(ratio)) continue;
        DenoisingRecord& rec = out.records[q];
        rec.label_is_line = !rec.label_is_line;
        rec.label_flipped = !rec.label_flipped;
        out.queries[q].content = label_one_hot(rec.label_is_line);
    }
    return out;
}

AttentionMask build_attention_mask(std::size_t n_dn_per_group,
                                   std::size_t group_count,
                                   std::size_t n_match) {
    AttentionMask mask;
    mask.group_size = n_dn_per_group;
    mask.dn_total = n_dn_per_group * group_count;
    mask.total = mask.dn_total + n_match;
    mask.blocked.assign(mask.total * mask.total, 0);
    for (std::size_t r = 0; r < mask.total; ++r) {
        const bool r_dn = r < mask.dn_total;
        for (std::size_t c = 0; c < mask.total; ++c) {
            const bool c_dn = c < mask.dn_total;
            bool allowed;
            if (r_dn) {
                allowed = !c_dn || r / n_dn_per_group == c / n_dn_per_group;
            } else {
                allowed = !c_dn;
            }
            if (!allowed) mask.blocked[r * mask.total + c] = 1;
        }
    }
    return mask;
}

Assignment denoising_assignment(const DenoisingBatch& batch, std::size_t n_gt) {
    Assignment assign;
    assign.gt_for_pred.assign(batch.records.size(), -1);
    assign.pred_for_gt.assign(n_gt, -1);
    for (std::size_t q = 0; q < batch.records.size(); ++q) {
        const DenoisingRecord& rec = batch.records[q];
        if (!rec.is_positive) continue;
        if (rec.gt_index >= n_gt) {
            throw std::invalid_argument(
                "denoising_assignment: record references missing ground truth");
        }
        assign.gt_for_pred[q] = static_cast<int>(rec.gt_index);
        if (assign.pred_for_gt[rec.gt_index] < 0) {
            assign.pred_for_gt[rec.gt_index] = static_cast<int>(q);
        }
    }
    return assign;
}

}  // namespace dtlsd

#include <cmath>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "dtlsd/lcdn.hpp"
#include "dtlsd/matching_loss.hpp"
#include "dtlsd/transformer.hpp"

using dtlsd::AttentionMask;
using dtlsd::DenoisingBatch;
using dtlsd::DenoisingConfig;
using dtlsd::DenoisingRecord;
using dtlsd::LineSegment;
using dtlsd::MemoryLayout;
using dtlsd::ModelConfig;
using dtlsd::ParamStore;
using dtlsd::Rng;
using dtlsd::Tensor;
using dtlsd::TransformerParams;
namespace ag = dtlsd::ag;

namespace {

constexpr double kTau7 = 7.0 * std::numbers::pi / 180.0;

/// Independent re-derivation of the noising transform: scale about the
/// midpoint, rotate about the midpoint, clamp into the unit box.
LineSegment oracle_noise(const LineSegment& gt, double u, double theta) {
    const double mx = 0.5 * (gt.x1 + gt.x2), my = 0.5 * (gt.y1 + gt.y2);
    const double c = std::cos(theta), s = std::sin(theta);
    auto map = [&](double x, double y, double& ox, double& oy) {
        const double sx = u * (x - mx), sy = u * (y - my);
        ox = mx + c * sx - s * sy;
        oy = my + s * sx + c * sy;
    };
    double ax, ay, bx, by;
    map(gt.x1, gt.y1, ax, ay);
    map(gt.x2, gt.y2, bx, by);
    return LineSegment::clamped(ax, ay, bx, by);
}

/// The masking rule stated directly: a row may attend to a column when they
/// share a denoising group, when a denoising row looks at a matching column,
/// or when both are matching queries.
bool oracle_allowed(std::size_t r, std::size_t c, std::size_t per_group,
                    std::size_t dn_total) {
    const bool r_dn = r < dn_total, c_dn = c < dn_total;
    if (r_dn && c_dn) return r / per_group == c / per_group;
    if (r_dn && !c_dn) return true;
    return !r_dn && !c_dn;
}

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0,
                     double hi = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

MemoryLayout two_level_layout() {
    MemoryLayout layout;
    layout.level_ids = {2, 3};
    layout.shapes = {{4, 4}, {2, 2}};
    layout.offsets = {0, 16};
    layout.total = 20;
    return layout;
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.d = 8;
    cfg.heads = 2;
    cfg.points = 2;
    cfg.encoder_layers = 1;
    cfg.decoder_layers = 2;
    cfg.query_count = 4;
    cfg.ffn_dim = 16;
    cfg.levels = {2, 3};
    return cfg;
}

void randomize(dtlsd::Parameter* p, Rng& rng, double range) {
    for (std::size_t i = 0; i < p->value.size(); ++i)
        p->value[i] = rng.uniform(-range, range);
}

}  // namespace

TEST_CASE("denoising config accepts defaults and rejects each bad field") {
    DenoisingConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    CHECK(cfg.dn_number == 300);
    CHECK(cfg.label_noise_ratio == 0.5);
    CHECK(cfg.line_scale == 1.0);
    CHECK(cfg.line_rotation_deg == 7.0);

    DenoisingConfig bad = cfg;
    bad.label_noise_ratio = -0.1;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad.label_noise_ratio = 1.1;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.label_noise_ratio = 0.0;
    CHECK_NOTHROW(bad.validate());
    bad.label_noise_ratio = 1.0;
    CHECK_NOTHROW(bad.validate());

    bad = cfg;
    bad.line_scale = 0.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad.line_scale = 1.5;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    bad = cfg;
    bad.line_rotation_deg = 0.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad.line_rotation_deg = 90.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad.line_rotation_deg = 89.0;
    CHECK_NOTHROW(bad.validate());
}

TEST_CASE("no ground truth yields an empty batch with an all-clear mask") {
    Rng rng(1);
    DenoisingBatch batch =
        dtlsd::generate_denoising_batch({}, DenoisingConfig{}, 3, rng);
    CHECK(batch.queries.empty());
    CHECK(batch.records.empty());
    CHECK(batch.group_count == 0);
    CHECK(batch.group_size == 0);
    CHECK(batch.mask.total == 3);
    CHECK(batch.mask.dn_total == 0);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 3; ++c) CHECK_FALSE(batch.mask.is_blocked(r, c));
}

TEST_CASE("half-scale zero-rotation noise lands at the quarter points") {
    LineSegment gt(0.4, 0.5, 0.6, 0.5);
    LineSegment pos = oracle_noise(gt, 0.5, 0.0);
    CHECK(pos.x1 == doctest::Approx(0.45).epsilon(1e-12));
    CHECK(pos.y1 == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(pos.x2 == doctest::Approx(0.55).epsilon(1e-12));
    CHECK(pos.y2 == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("every noised anchor reproduces from its recorded scale and rotation") {
    Rng rng(2);
    DenoisingConfig cfg;
    cfg.dn_number = 40;
    std::vector<LineSegment> gt;
    for (int i = 0; i < 5; ++i) {
        gt.emplace_back(rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0),
                        rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0));
    }
    DenoisingBatch batch = dtlsd::generate_denoising_batch(gt, cfg, 2, rng);
    REQUIRE(batch.queries.size() == batch.records.size());
    REQUIRE_FALSE(batch.queries.empty());
    for (std::size_t q = 0; q < batch.queries.size(); ++q) {
        const DenoisingRecord& rec = batch.records[q];
        LineSegment expect =
            oracle_noise(gt[rec.gt_index], rec.scale_factor, rec.rotation);
        CHECK(batch.queries[q].anchor.x1 == doctest::Approx(expect.x1).epsilon(1e-12));
        CHECK(batch.queries[q].anchor.y1 == doctest::Approx(expect.y1).epsilon(1e-12));
        CHECK(batch.queries[q].anchor.x2 == doctest::Approx(expect.x2).epsilon(1e-12));
        CHECK(batch.queries[q].anchor.y2 == doctest::Approx(expect.y2).epsilon(1e-12));
        CHECK(batch.queries[q].anchor.x1 >= 0.0);
        CHECK(batch.queries[q].anchor.x1 <= 1.0);
        CHECK(batch.queries[q].anchor.y1 >= 0.0);
        CHECK(batch.queries[q].anchor.y1 <= 1.0);
    }
}

TEST_CASE("group count and sizes follow the query budget") {
    Rng rng(3);
    DenoisingConfig cfg;

    SUBCASE("three lines fill fifty groups of six") {
        std::vector<LineSegment> gt(3, LineSegment(0.2, 0.2, 0.8, 0.8));
        DenoisingBatch b = dtlsd::generate_denoising_batch(gt, cfg, 7, rng);
        CHECK(b.group_count == 50);
        CHECK(b.group_size == 6);
        CHECK(b.queries.size() == 300);
        CHECK(b.mask.total == 307);
        CHECK(b.mask.dn_total == 300);
    }
    SUBCASE("seven lines leave headroom below the budget") {
        std::vector<LineSegment> gt(7, LineSegment(0.2, 0.2, 0.8, 0.8));
        DenoisingBatch b = dtlsd::generate_denoising_batch(gt, cfg, 0, rng);
        CHECK(b.group_count == 21);
        CHECK(b.group_size == 14);
        CHECK(b.queries.size() == 294);
        CHECK(b.queries.size() <= cfg.dn_number);
    }
    SUBCASE("more lines than the budget allows are subsampled") {
        std::vector<LineSegment> gt(200, LineSegment(0.2, 0.2, 0.8, 0.8));
        DenoisingBatch b = dtlsd::generate_denoising_batch(gt, cfg, 0, rng);
        CHECK(b.group_count == 1);
        CHECK(b.group_size == 300);
        CHECK(b.queries.size() == 300);
        std::vector<std::size_t> used;
        for (std::size_t q = 0; q + 1 < b.records.size(); q += 2)
            used.push_back(b.records[q].gt_index);
        CHECK(used.size() == 150);
        for (std::size_t i = 1; i < used.size(); ++i) {
            CHECK(used[i - 1] < used[i]);  // distinct and ascending
            CHECK(used[i] < 200);
        }
    }
    SUBCASE("a budget below one pair yields an empty group") {
        std::vector<LineSegment> gt(1, LineSegment(0.2, 0.2, 0.8, 0.8));
        DenoisingConfig tiny = cfg;
        tiny.dn_number = 1;
        DenoisingBatch b = dtlsd::generate_denoising_batch(gt, tiny, 4, rng);
        CHECK(b.group_count == 1);
        CHECK(b.group_size == 0);
        CHECK(b.queries.empty());
        CHECK(b.mask.total == 4);
    }
}

TEST_CASE("each group pairs every used line as positive then negative") {
    Rng rng(4);
    DenoisingConfig cfg;
    cfg.dn_number = 60;
    std::vector<LineSegment> gt;
    for (int i = 0; i < 4; ++i)
        gt.emplace_back(0.3, 0.3 + 0.1 * i, 0.7, 0.35 + 0.1 * i);
    DenoisingBatch b = dtlsd::generate_denoising_batch(gt, cfg, 5, rng);
    REQUIRE(b.group_count == 7);
    REQUIRE(b.group_size == 8);
    for (std::size_t g = 0; g < b.group_count; ++g) {
        for (std::size_t j = 0; j < 4; ++j) {
            const DenoisingRecord& pos = b.records[g * 8 + 2 * j];
            const DenoisingRecord& neg = b.records[g * 8 + 2 * j + 1];
            CHECK(pos.gt_index == j);
            CHECK(neg.gt_index == j);
            CHECK(pos.is_positive);
            CHECK_FALSE(neg.is_positive);
            CHECK(pos.scale_factor + neg.scale_factor ==
                  doctest::Approx(2.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("sampled noise stays inside the documented windows") {
    Rng rng(5);
    DenoisingConfig cfg;
    cfg.dn_number = 10000;
    // Short interior line: even doubled it never reaches the border, so the
    // realized length must equal the recorded factor times the original.
    std::vector<LineSegment> gt(5, LineSegment(0.45, 0.48, 0.55, 0.52));
    const double l = dtlsd::length(gt[0]);
    DenoisingBatch b = dtlsd::generate_denoising_batch(gt, cfg, 0, rng);
    REQUIRE(b.queries.size() == 10000);
    for (std::size_t q = 0; q < b.records.size(); ++q) {
        const DenoisingRecord& rec = b.records[q];
        const double len = dtlsd::length(b.queries[q].anchor);
        CHECK(len == doctest::Approx(rec.scale_factor * l).epsilon(1e-10));
        if (rec.is_positive) {
            CHECK(rec.scale_factor >= 1.0 - cfg.line_scale);
            CHECK(rec.scale_factor < 1.0);      // length strictly below l
            CHECK(std::abs(rec.rotation) < kTau7);
        } else {
            CHECK(rec.scale_factor > 1.0);      // length strictly above l
            CHECK(rec.scale_factor < 1.0 + cfg.line_scale);
            CHECK(std::abs(rec.rotation) >= kTau7);
            CHECK(std::abs(rec.rotation) < 2.0 * kTau7);
        }
    }
}

TEST_CASE("positives sit closer to their line than negatives almost always") {
    Rng rng(6);
    DenoisingConfig cfg;
    cfg.dn_number = 8;  // one line -> four pos/neg pairs per batch
    std::size_t pairs = 0, closer = 0;
    for (int trial = 0; trial < 2500; ++trial) {
        LineSegment gt(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8),
                       rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8));
        DenoisingBatch b = dtlsd::generate_denoising_batch({gt}, cfg, 0, rng);
        for (std::size_t q = 0; q + 1 < b.queries.size(); q += 2) {
            const double dp =
                dtlsd::min_sq_endpoint_dist(b.queries[q].anchor, gt, 1.0);
            const double dn =
                dtlsd::min_sq_endpoint_dist(b.queries[q + 1].anchor, gt, 1.0);
            ++pairs;
            if (dp <= dn) ++closer;
        }
    }
    REQUIRE(pairs == 10000);
    CHECK(static_cast<double>(closer) / static_cast<double>(pairs) >= 0.95);
}

TEST_CASE("fresh queries carry the line label as a one-hot vector") {
    Rng rng(7);
    std::vector<LineSegment> gt(2, LineSegment(0.3, 0.3, 0.7, 0.7));
    DenoisingConfig cfg;
    cfg.dn_number = 8;
    DenoisingBatch b = dtlsd::generate_denoising_batch(gt, cfg, 0, rng);
    for (std::size_t q = 0; q < b.queries.size(); ++q) {
        const Tensor& content = b.queries[q].content;
        REQUIRE(content.size() == 2);
        CHECK(content[dtlsd::kLineLabel] == 1.0);
        CHECK(content[dtlsd::kNoLineLabel] == 0.0);
        CHECK(b.records[q].label_is_line);
        CHECK_FALSE(b.records[q].label_flipped);
    }
}

TEST_CASE("label noise flips nothing at zero and everything at one") {
    Rng rng(8);
    std::vector<LineSegment> gt(3, LineSegment(0.2, 0.4, 0.8, 0.6));
    DenoisingConfig cfg;
    cfg.dn_number = 30;
    DenoisingBatch base = dtlsd::generate_denoising_batch(gt, cfg, 0, rng);

    DenoisingBatch same = dtlsd::apply_label_noise(base, 0.0, rng);
    for (std::size_t q = 0; q < same.records.size(); ++q) {
        CHECK_FALSE(same.records[q].label_flipped);
        CHECK(same.records[q].label_is_line);
        CHECK(same.queries[q].content[dtlsd::kLineLabel] == 1.0);
    }

    DenoisingBatch all = dtlsd::apply_label_noise(base, 1.0, rng);
    for (std::size_t q = 0; q < all.records.size(); ++q) {
        CHECK(all.records[q].label_flipped);
        CHECK_FALSE(all.records[q].label_is_line);
        CHECK(all.queries[q].content[dtlsd::kNoLineLabel] == 1.0);
        CHECK(all.queries[q].content[dtlsd::kLineLabel] == 0.0);
        CHECK(all.queries[q].anchor == base.queries[q].anchor);
        CHECK(all.records[q].scale_factor == base.records[q].scale_factor);
        CHECK(all.records[q].rotation == base.records[q].rotation);
    }

    DenoisingBatch back = dtlsd::apply_label_noise(all, 1.0, rng);
    for (std::size_t q = 0; q < back.records.size(); ++q) {
        CHECK_FALSE(back.records[q].label_flipped);
        CHECK(back.records[q].label_is_line);
    }

    CHECK_THROWS_AS(dtlsd::apply_label_noise(base, 1.5, rng),
                    std::invalid_argument);
    CHECK_THROWS_AS(dtlsd::apply_label_noise(base, -0.5, rng),
                    std::invalid_argument);
}

TEST_CASE("half-ratio label noise flips about half of ten thousand queries") {
    Rng rng(9);
    DenoisingConfig cfg;
    cfg.dn_number = 10000;
    std::vector<LineSegment> gt(5, LineSegment(0.3, 0.3, 0.7, 0.7));
    DenoisingBatch base = dtlsd::generate_denoising_batch(gt, cfg, 0, rng);
    REQUIRE(base.records.size() == 10000);
    DenoisingBatch noised = dtlsd::apply_label_noise(base, 0.5, rng);
    std::size_t flips = 0;
    for (const DenoisingRecord& rec : noised.records) flips += rec.label_flipped;
    const double fraction = static_cast<double>(flips) / 10000.0;
    CHECK(fraction >= 0.48);
    CHECK(fraction <= 0.52);
}

TEST_CASE("mask blocks exactly the matching-to-denoising quadrant") {
    AttentionMask m = dtlsd::build_attention_mask(2, 1, 2);
    REQUIRE(m.total == 4);
    for (std::size_t r = 0; r < 4; ++r) {
        for (std::size_t c = 0; c < 4; ++c) {
            const bool expect_blocked = r >= 2 && c < 2;
            CHECK(m.is_blocked(r, c) == expect_blocked);
        }
    }
}

TEST_CASE("mask blocks exactly the inter-group blocks when only groups exist") {
    AttentionMask m = dtlsd::build_attention_mask(2, 2, 0);
    REQUIRE(m.total == 4);
    for (std::size_t r = 0; r < 4; ++r) {
        for (std::size_t c = 0; c < 4; ++c) {
            const bool expect_blocked = (r / 2) != (c / 2);
            CHECK(m.is_blocked(r, c) == expect_blocked);
        }
    }
}

TEST_CASE("mask with no groups allows everything among matching queries") {
    AttentionMask m = dtlsd::build_attention_mask(0, 0, 3);
    REQUIRE(m.total == 3);
    for (std::size_t i = 0; i < 9; ++i) CHECK(m.blocked[i] == 0);
}

TEST_CASE("mask agrees with the attend-permission rule at every index pair") {
    AttentionMask m = dtlsd::build_attention_mask(3, 4, 5);
    REQUIRE(m.total == 17);
    REQUIRE(m.dn_total == 12);
    for (std::size_t r = 0; r < m.total; ++r) {
        CHECK_FALSE(m.is_blocked(r, r));
        for (std::size_t c = 0; c < m.total; ++c)
            CHECK(m.is_blocked(r, c) == !oracle_allowed(r, c, 3, 12));
    }
}

TEST_CASE("an empty denoising branch leaves decoder predictions bit-identical") {
    ParamStore store;
    Rng rng(10);
    ModelConfig cfg = tiny_config();
    TransformerParams params = TransformerParams::make(store, "xf", cfg, rng);
    for (auto& layer : params.dec) {
        randomize(layer.cross.offset.b, rng, 1.0);
        randomize(layer.cross.weight.b, rng, 0.5);
    }
    randomize(params.refine.layers.back().w, rng, 0.5);

    MemoryLayout layout = two_level_layout();
    Tensor cv = random_tensor({4, 8}, rng);
    Tensor mv = random_tensor({20, 8}, rng);
    Tensor av = random_tensor({4, 4}, rng, 0.1, 0.9);

    Rng batch_rng(11);
    DenoisingBatch empty =
        dtlsd::generate_denoising_batch({}, DenoisingConfig{}, 4, batch_rng);
    REQUIRE(empty.mask.total == 4);

    ag::Tape ta, tb;
    auto plain = dtlsd::decoder_forward(ta, ta.input(cv), av, ta.input(mv),
                                        layout, params.dec, params.refine);
    auto branch = dtlsd::decoder_forward(tb, tb.input(cv), av, tb.input(mv),
                                         layout, params.dec, params.refine,
                                         &empty.mask.blocked);
    REQUIRE(plain.size() == branch.size());
    auto ha = dtlsd::prediction_heads(ta, plain.back(), params);
    auto hb = dtlsd::prediction_heads(tb, branch.back(), params);
    const Tensor& pa = ta.value(ha.probs);
    const Tensor& pb = tb.value(hb.probs);
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i] == pb[i]);
    const Tensor& la = ta.value(ha.lines);
    const Tensor& lb = tb.value(hb.lines);
    for (std::size_t i = 0; i < la.size(); ++i) CHECK(la[i] == lb[i]);
}

TEST_CASE("denoising supervision maps positives to lines, negatives to none") {
    Rng rng(12);
    std::vector<LineSegment> gt = {LineSegment(0.2, 0.3, 0.6, 0.3),
                                   LineSegment(0.4, 0.5, 0.4, 0.9)};
    DenoisingConfig cfg;
    cfg.dn_number = 4;
    DenoisingBatch b = dtlsd::generate_denoising_batch(gt, cfg, 0, rng);
    REQUIRE(b.queries.size() == 4);

    dtlsd::Assignment a = dtlsd::denoising_assignment(b, gt.size());
    CHECK(a.gt_for_pred == std::vector<int>{0, -1, 1, -1});
    CHECK(a.pred_for_gt == std::vector<int>{0, 2});

    // Label noise must not change the supervision targets.
    DenoisingBatch flipped = dtlsd::apply_label_noise(b, 1.0, rng);
    dtlsd::Assignment a2 = dtlsd::denoising_assignment(flipped, gt.size());
    CHECK(a2.gt_for_pred == a.gt_for_pred);

    CHECK_THROWS_AS(dtlsd::denoising_assignment(b, 1), std::invalid_argument);
}

TEST_CASE("denoising loss charges endpoint error only on positive queries") {
    Rng rng(13);
    std::vector<LineSegment> gt = {LineSegment(0.2, 0.3, 0.6, 0.3)};
    DenoisingConfig cfg;
    cfg.dn_number = 2;
    DenoisingBatch b = dtlsd::generate_denoising_batch(gt, cfg, 0, rng);
    dtlsd::Assignment assign = dtlsd::denoising_assignment(b, 1);

    ag::Tape tape;
    Tensor probs({2}, {0.8, 0.3});
    Tensor lines({2, 4}, {0.25, 0.3, 0.6, 0.35,   // positive: off by 0.1 total
                          0.9, 0.9, 0.1, 0.1});   // negative: far but uncharged
    dtlsd::LossBreakdown parts;
    ag::Var loss = dtlsd::total_loss(tape, tape.input(probs), tape.input(lines),
                                     gt, assign, dtlsd::LossWeights{}, &parts);
    const double expect_class =
        dtlsd::focal_loss(0.8, true) + dtlsd::focal_loss(0.3, false);
    CHECK(parts.loss_class == doctest::Approx(expect_class).epsilon(1e-12));
    CHECK(parts.loss_line == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(tape.value(loss)[0] ==
          doctest::Approx(2.0 * expect_class + 5.0 * 0.1).epsilon(1e-12));
}

TEST_CASE("generation is reproducible per seed and varies across seeds") {
    std::vector<LineSegment> gt = {LineSegment(0.1, 0.2, 0.9, 0.4),
                                   LineSegment(0.5, 0.1, 0.5, 0.9)};
    DenoisingConfig cfg;
    cfg.dn_number = 20;
    Rng r1(42), r2(42), r3(43);
    DenoisingBatch a = dtlsd::generate_denoising_batch(gt, cfg, 3, r1);
    DenoisingBatch b = dtlsd::generate_denoising_batch(gt, cfg, 3, r2);
    DenoisingBatch c = dtlsd::generate_denoising_batch(gt, cfg, 3, r3);
    REQUIRE(a.queries.size() == b.queries.size());
    bool differs = false;
    for (std::size_t q = 0; q < a.queries.size(); ++q) {
        CHECK(a.queries[q].anchor == b.queries[q].anchor);
        CHECK(a.records[q].scale_factor == b.records[q].scale_factor);
        CHECK(a.records[q].rotation == b.records[q].rotation);
        if (!(a.queries[q].anchor == c.queries[q].anchor)) differs = true;
    }
    CHECK(differs);
}

TEST_CASE("generated mask matches a freshly built one entry for entry") {
    Rng rng(14);
    std::vector<LineSegment> gt(3, LineSegment(0.2, 0.2, 0.8, 0.8));
    DenoisingConfig cfg;
    cfg.dn_number = 24;
    DenoisingBatch b = dtlsd::generate_denoising_batch(gt, cfg, 6, rng);
    AttentionMask fresh =
        dtlsd::build_attention_mask(b.group_size, b.group_count, 6);
    REQUIRE(b.mask.total == fresh.total);
    REQUIRE(b.mask.blocked.size() == fresh.blocked.size());
    for (std::size_t i = 0; i < fresh.blocked.size(); ++i)
        CHECK(b.mask.blocked[i] == fresh.blocked[i]);
    CHECK(b.mask.group_size == b.group_size);
    CHECK(b.mask.dn_total == b.group_size * b.group_count);
}

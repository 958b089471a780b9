#include "dtlsd/attention.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <memory>
#include <numbers>
#include <ostream>
#include <stdexcept>

namespace dtlsd {

Tensor bilinear_sample(const Tensor& f, double row, double col) {
    if (f.rank() != 3) {
        throw std::invalid_argument("bilinear_sample: feature map must be [H,W,C]");
    }
    const std::size_t h = f.dim(0), w = f.dim(1), c = f.dim(2);
    Tensor out({c});
    const double r0f = std::floor(row), c0f = std::floor(col);
    const long r0 = static_cast<long>(r0f), c0 = static_cast<long>(c0f);
    const double fr = row - r0f, fc = col - c0f;
    const double cw[4] = {(1.0 - fr) * (1.0 - fc), (1.0 - fr) * fc,
                          fr * (1.0 - fc), fr * fc};
    const long rr[4] = {r0, r0, r0 + 1, r0 + 1};
    const long cc[4] = {c0, c0 + 1, c0, c0 + 1};
    for (int corner = 0; corner < 4; ++corner) {
        if (rr[corner] < 0 || cc[corner] < 0 ||
            rr[corner] >= static_cast<long>(h) || cc[corner] >= static_cast<long>(w)) {
            continue;  // zero padding outside the map
        }
        const double* src =
            f.data() + (static_cast<std::size_t>(rr[corner]) * w +
                        static_cast<std::size_t>(cc[corner])) * c;
        for (std::size_t ch = 0; ch < c; ++ch) out[ch] += cw[corner] * src[ch];
    }
    return out;
}

std::pair<double, double> phi_rescale(double x, double y, const LevelShape& s) {
    return {y * static_cast<double>(s.h) - 0.5, x * static_cast<double>(s.w) - 0.5};
}

ag::Var global_attention(ag::Tape& tape, ag::Var q, ag::Var k, ag::Var v) {
    const Tensor& qv = tape.value(q);
    const Tensor& kv = tape.value(k);
    const Tensor& vv = tape.value(v);
    if (qv.rank() != 2 || kv.rank() != 2 || vv.rank() != 2 ||
        qv.dim(1) != kv.dim(1) || kv.dim(0) != vv.dim(0)) {
        throw std::invalid_argument("global_attention: incompatible shapes");
    }
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(qv.dim(1)));
    ag::Var scores = ag::scale(ag::matmul_nt(q, k), inv_sqrt_d);
    return ag::matmul(ag::softmax(scores, 1), v);
}

ag::Var masked_global_attention(ag::Tape& tape, ag::Var q, ag::Var k, ag::Var v,
                                const std::vector<std::uint8_t>& blocked) {
    const Tensor& qv = tape.value(q);
    const Tensor& kv = tape.value(k);
    const Tensor& vv = tape.value(v);
    if (qv.rank() != 2 || kv.rank() != 2 || vv.rank() != 2 ||
        qv.dim(1) != kv.dim(1) || kv.dim(0) != vv.dim(0)) {
        throw std::invalid_argument("masked_global_attention: incompatible shapes");
    }
    if (blocked.size() != qv.dim(0) * kv.dim(0)) {
        throw std::invalid_argument("masked_global_attention: mask size mismatch");
    }
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(qv.dim(1)));
    ag::Var scores = ag::scale(ag::matmul_nt(q, k), inv_sqrt_d);
    return ag::matmul(ag::masked_softmax_rows(scores, blocked), v);
}

DeformAttnParams DeformAttnParams::make(ParamStore& store, const std::string& name,
                                        std::size_t d, std::size_t heads,
                                        std::size_t levels, std::size_t points,
                                        Rng& rng) {
    if (d == 0 || heads == 0 || levels == 0 || points == 0 || d % heads != 0) {
        throw std::invalid_argument(
            "deform attention: d, heads, levels, points must be positive and "
            "d divisible by heads");
    }
    DeformAttnParams p;
    p.d = d;
    p.heads = heads;
    p.levels = levels;
    p.points = points;
    p.value_proj = LinearLayer::make(store, name + ".value", d, d, rng);
    p.out_proj = LinearLayer::make(store, name + ".out", d, d, rng);
    p.offset = LinearLayer::make(store, name + ".offset", d, heads * levels * points * 2, rng);
    p.weight = LinearLayer::make(store, name + ".weight", d, heads * levels * points, rng);

    // Zero the predicted parts so the initial behaviour is data-independent:
    // uniform mixing weights and a deterministic ring of sample points.
    for (std::size_t i = 0; i < p.offset.w->value.size(); ++i) p.offset.w->value[i] = 0.0;
    for (std::size_t i = 0; i < p.weight.w->value.size(); ++i) p.weight.w->value[i] = 0.0;
    for (std::size_t i = 0; i < p.weight.b->value.size(); ++i) p.weight.b->value[i] = 0.0;
    Tensor& ob = p.offset.b->value;
    for (std::size_t h = 0; h < heads; ++h) {
        const double angle =
            2.0 * std::numbers::pi * static_cast<double>(h) / static_cast<double>(heads);
        for (std::size_t l = 0; l < levels; ++l) {
            for (std::size_t i = 0; i < points; ++i) {
                const std::size_t idx = ((h * levels + l) * points + i) * 2;
                ob[idx + 0] = std::cos(angle) * static_cast<double>(i + 1);
                ob[idx + 1] = std::sin(angle) * static_cast<double>(i + 1);
            }
        }
    }
    return p;
}

namespace {

/// Geometry captured by the sampling node: everything needed to recompute
/// sample locations in the backward pass without touching the tape.
struct SampleGeom {
    std::size_t nq = 0, d = 0, heads = 0, levels = 0, points = 0, dh = 0;
    MemoryLayout layout;
    Tensor ref;   ///< [Nq, 2] clamped normalized reference points
    Tensor mult;  ///< [Nq, levels*2] per-level (x, y) offset multipliers
};

/// Core sampling + mixing node. values [Lt, d] are the projected tokens,
/// offsets [Nq, M*L*k*2] raw predicted offsets, weights [Nq, M*L*k] already
/// softmax-normalized per (query, head). Output [Nq, d].
ag::Var deform_sample_mix(ag::Tape& tape, ag::Var values, ag::Var offsets,
                          ag::Var weights, SampleGeom geom) {
    const Tensor& val = tape.value(values);
    const Tensor& off = tape.value(offsets);
    const Tensor& wgt = tape.value(weights);
    const std::size_t nq = geom.nq, heads = geom.heads, levels = geom.levels,
                      points = geom.points, dh = geom.dh;

    auto corner_setup = [](double row, double col, long h, long w, long (&rr)[4],
                           long (&cc)[4], double (&cw)[4], double& fr, double& fc) {
        const double r0f = std::floor(row), c0f = std::floor(col);
        const long r0 = static_cast<long>(r0f), c0 = static_cast<long>(c0f);
        fr = row - r0f;
        fc = col - c0f;
        rr[0] = r0; rr[1] = r0; rr[2] = r0 + 1; rr[3] = r0 + 1;
        cc[0] = c0; cc[1] = c0 + 1; cc[2] = c0; cc[3] = c0 + 1;
        cw[0] = (1.0 - fr) * (1.0 - fc);
        cw[1] = (1.0 - fr) * fc;
        cw[2] = fr * (1.0 - fc);
        cw[3] = fr * fc;
        for (int corner = 0; corner < 4; ++corner) {
            if (rr[corner] < 0 || cc[corner] < 0 || rr[corner] >= h || cc[corner] >= w) {
                cw[corner] = 0.0;
                rr[corner] = 0;
                cc[corner] = 0;
            }
        }
    };

    Tensor out({nq, geom.d});
    for (std::size_t q = 0; q < nq; ++q) {
        const double rx = geom.ref.at2(q, 0), ry = geom.ref.at2(q, 1);
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t l = 0; l < levels; ++l) {
                const LevelShape& ls = geom.layout.shapes[l];
                const double mx = geom.mult.at2(q, l * 2 + 0);
                const double my = geom.mult.at2(q, l * 2 + 1);
                const double base_col = rx * static_cast<double>(ls.w) - 0.5;
                const double base_row = ry * static_cast<double>(ls.h) - 0.5;
                for (std::size_t i = 0; i < points; ++i) {
                    const std::size_t idx = (h * levels + l) * points + i;
                    const double a = wgt.at2(q, idx);
                    const double col = base_col + off.at2(q, idx * 2 + 0) * mx;
                    const double row = base_row + off.at2(q, idx * 2 + 1) * my;
                    long rr[4], cc[4];
                    double cw[4], fr, fc;
                    corner_setup(row, col, static_cast<long>(ls.h),
                                 static_cast<long>(ls.w), rr, cc, cw, fr, fc);
                    for (int corner = 0; corner < 4; ++corner) {
                        if (cw[corner] == 0.0) continue;
                        const std::size_t tok = geom.layout.token_index(
                            l, static_cast<std::size_t>(rr[corner]),
                            static_cast<std::size_t>(cc[corner]));
                        const double* src = val.data() + tok * geom.d + h * dh;
                        double* dst = out.data() + q * geom.d + h * dh;
                        const double aw = a * cw[corner];
                        for (std::size_t ch = 0; ch < dh; ++ch) dst[ch] += aw * src[ch];
                    }
                }
            }
        }
    }

    const int vid = values.id, oid = offsets.id, wid = weights.id;
    auto g = std::make_shared<SampleGeom>(std::move(geom));
    return tape.make_node(
        std::move(out), {values, offsets, weights},
        [vid, oid, wid, g, corner_setup](ag::Tape& tp, int self) {
            const Tensor& dy = tp.grad_buf(self);
            const Tensor& val = tp.node_value(vid);
            const Tensor& off = tp.node_value(oid);
            const Tensor& wgt = tp.node_value(wid);
            Tensor* dval = tp.maybe_grad(vid);
            Tensor* doff = tp.maybe_grad(oid);
            Tensor* dwgt = tp.maybe_grad(wid);
            const std::size_t nq = g->nq, heads = g->heads, levels = g->levels,
                              points = g->points, dh = g->dh, d = g->d;

            for (std::size_t q = 0; q < nq; ++q) {
                const double rx = g->ref.at2(q, 0), ry = g->ref.at2(q, 1);
                for (std::size_t h = 0; h < heads; ++h) {
                    const double* dyq = dy.data() + q * d + h * dh;
                    for (std::size_t l = 0; l < levels; ++l) {
                        const LevelShape& ls = g->layout.shapes[l];
                        const double mx = g->mult.at2(q, l * 2 + 0);
                        const double my = g->mult.at2(q, l * 2 + 1);
                        const double base_col = rx * static_cast<double>(ls.w) - 0.5;
                        const double base_row = ry * static_cast<double>(ls.h) - 0.5;
                        for (std::size_t i = 0; i < points; ++i) {
                            const std::size_t idx = (h * levels + l) * points + i;
                            const double a = wgt.at2(q, idx);
                            const double col = base_col + off.at2(q, idx * 2 + 0) * mx;
                            const double row = base_row + off.at2(q, idx * 2 + 1) * my;
                            long rr[4], cc[4];
                            double cw[4], fr, fc;
                            corner_setup(row, col, static_cast<long>(ls.h),
                                         static_cast<long>(ls.w), rr, cc, cw, fr, fc);

                            // Per-corner token index and value pointer; padded
                            // corners keep cw == 0 and contribute nothing.
                            const double* src[4];
                            std::size_t tok[4];
                            for (int corner = 0; corner < 4; ++corner) {
                                tok[corner] = g->layout.token_index(
                                    l, static_cast<std::size_t>(rr[corner]),
                                    static_cast<std::size_t>(cc[corner]));
                                src[corner] = val.data() + tok[corner] * d + h * dh;
                            }

                            double dotA = 0.0;      // d(loss)/d(weight idx)
                            double dcol = 0.0;      // d(loss)/d(col) / a
                            double drow = 0.0;      // d(loss)/d(row) / a
                            for (std::size_t ch = 0; ch < dh; ++ch) {
                                const double gch = dyq[ch];
                                const double f00 = cw[0] != 0.0 ? src[0][ch] : 0.0;
                                const double f01 = cw[1] != 0.0 ? src[1][ch] : 0.0;
                                const double f10 = cw[2] != 0.0 ? src[2][ch] : 0.0;
                                const double f11 = cw[3] != 0.0 ? src[3][ch] : 0.0;
                                // Recompute padded-corner zeroing consistently
                                // with the forward pass.
                                const double sample = cw[0] * f00 + cw[1] * f01 +
                                                      cw[2] * f10 + cw[3] * f11;
                                dotA += gch * sample;
                                dcol += gch * ((1.0 - fr) * (f01 - f00) + fr * (f11 - f10));
                                drow += gch * ((1.0 - fc) * (f10 - f00) + fc * (f11 - f01));
                            }
                            if (dwgt) dwgt->at2(q, idx) += dotA;
                            if (doff) {
                                doff->at2(q, idx * 2 + 0) += a * dcol * mx;
                                doff->at2(q, idx * 2 + 1) += a * drow * my;
                            }
                            if (dval) {
                                for (int corner = 0; corner < 4; ++corner) {
                                    if (cw[corner] == 0.0) continue;
                                    double* dst = dval->data() + tok[corner] * d + h * dh;
                                    const double aw = a * cw[corner];
                                    for (std::size_t ch = 0; ch < dh; ++ch)
                                        dst[ch] += aw * dyq[ch];
                                }
                            }
                        }
                    }
                }
            }
        });
}

}  // namespace

ag::Var ms_deform_attn(ag::Tape& tape, ag::Var queries, const Tensor& ref_xy,
                       ag::Var tokens, const MemoryLayout& layout,
                       const DeformAttnParams& p, const Tensor* offset_scale) {
    const Tensor& qv = tape.value(queries);
    const Tensor& tv = tape.value(tokens);
    if (qv.rank() != 2 || qv.dim(1) != p.d) {
        throw std::invalid_argument("ms_deform_attn: queries must be [Nq, d]");
    }
    const std::size_t nq = qv.dim(0);
    if (tv.rank() != 2 || tv.dim(0) != layout.total || tv.dim(1) != p.d) {
        throw std::invalid_argument("ms_deform_attn: tokens disagree with layout");
    }
    if (layout.level_count() != p.levels) {
        throw std::invalid_argument("ms_deform_attn: level count mismatch");
    }
    if (ref_xy.rank() != 2 || ref_xy.dim(0) != nq || ref_xy.dim(1) != 2) {
        throw std::invalid_argument("ms_deform_attn: ref points must be [Nq, 2]");
    }
    if (offset_scale &&
        (offset_scale->rank() != 2 || offset_scale->dim(0) != nq ||
         offset_scale->dim(1) != 2)) {
        throw std::invalid_argument("ms_deform_attn: offset scale must be [Nq, 2]");
    }

    ag::Var values = p.value_proj.forward(tape, tokens);
    ag::Var offsets = p.offset.forward(tape, queries);
    ag::Var logits = p.weight.forward(tape, queries);
    // Mixing weights are normalized jointly over all levels and points of a
    // head, so they sum to one per (query, head).
    ag::Var weights = ag::reshape(
        ag::softmax(ag::reshape(logits, {nq * p.heads, p.levels * p.points}), 1),
        {nq, p.heads * p.levels * p.points});

    SampleGeom geom;
    geom.nq = nq;
    geom.d = p.d;
    geom.heads = p.heads;
    geom.levels = p.levels;
    geom.points = p.points;
    geom.dh = p.d / p.heads;
    geom.layout = layout;
    geom.ref = Tensor({nq, 2});
    for (std::size_t q = 0; q < nq; ++q) {
        geom.ref.at2(q, 0) = std::clamp(ref_xy.at2(q, 0), 0.0, 1.0);
        geom.ref.at2(q, 1) = std::clamp(ref_xy.at2(q, 1), 0.0, 1.0);
    }
    geom.mult = Tensor({nq, p.levels * 2});
    for (std::size_t q = 0; q < nq; ++q) {
        for (std::size_t l = 0; l < p.levels; ++l) {
            if (offset_scale) {
                geom.mult.at2(q, l * 2 + 0) =
                    offset_scale->at2(q, 0) * static_cast<double>(layout.shapes[l].w);
                geom.mult.at2(q, l * 2 + 1) =
                    offset_scale->at2(q, 1) * static_cast<double>(layout.shapes[l].h);
            } else {
                geom.mult.at2(q, l * 2 + 0) = 1.0;
                geom.mult.at2(q, l * 2 + 1) = 1.0;
            }
        }
    }

    ag::Var mixed = deform_sample_mix(tape, values, offsets, weights, std::move(geom));
    return p.out_proj.forward(tape, mixed);
}

ag::Var deform_attn_single(ag::Tape& tape, ag::Var query, double ref_x,
                           double ref_y, ag::Var feature_map,
                           const DeformAttnParams& p) {
    if (p.levels != 1) {
        throw std::invalid_argument("deform_attn_single: params must have L = 1");
    }
    const Tensor& fv = tape.value(feature_map);
    if (fv.rank() != 3 || fv.dim(2) != p.d) {
        throw std::invalid_argument("deform_attn_single: feature map must be [H,W,d]");
    }
    const std::size_t h = fv.dim(0), w = fv.dim(1);
    MemoryLayout layout;
    layout.level_ids = {0};
    layout.shapes = {{h, w}};
    layout.offsets = {0};
    layout.total = h * w;

    ag::Var tokens = ag::reshape(feature_map, {h * w, p.d});
    const Tensor& q = tape.value(query);
    if (q.rank() != 1 || q.dim(0) != p.d) {
        throw std::invalid_argument("deform_attn_single: query must be [d]");
    }
    ag::Var q2 = ag::reshape(query, {1, p.d});
    // The index-space reference point converts back to normalized form so a
    // single phi application lands exactly on (ref_y, ref_x).
    Tensor ref({1, 2});
    ref.at2(0, 0) = (ref_x + 0.5) / static_cast<double>(w);
    ref.at2(0, 1) = (ref_y + 0.5) / static_cast<double>(h);
    ag::Var out = ms_deform_attn(tape, q2, ref, tokens, layout, p);
    return ag::reshape(out, {p.d});
}

// ---------------------------------------------------------------------------
// Complexity probe
// ---------------------------------------------------------------------------

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// One dense-attention pass over n tokens: scores, row softmax, mix.
void run_global_once(const Tensor& q, const Tensor& k, const Tensor& v,
                     Tensor& scores, Tensor& out) {
    const std::size_t n = q.dim(0), d = q.dim(1);
    mm_nt(q.data(), k.data(), scores.data(), n, d, n, false);
    const double inv = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t i = 0; i < scores.size(); ++i) scores[i] *= inv;
    Tensor sm = softmax(scores, 1);
    mm_nn(sm.data(), v.data(), out.data(), n, n, d, false);
}

/// One deformable pass over n tokens arranged as a sqrt(n) square grid:
/// value projection, per-token offset/weight prediction, sampling, output
/// projection. Work per token is independent of n.
void run_deformable_once(const Tensor& tokens, const Tensor& wv, const Tensor& wo,
                         const Tensor& woff, const Tensor& wwgt,
                         std::size_t heads, std::size_t points, Tensor& values,
                         Tensor& out) {
    const std::size_t n = tokens.dim(0), d = tokens.dim(1);
    const std::size_t side = static_cast<std::size_t>(std::lround(std::sqrt(
        static_cast<double>(n))));
    const std::size_t dh = d / heads;
    const std::size_t per_head = points;  // single level in the probe
    mm_nn(tokens.data(), wv.data(), values.data(), n, d, d, false);

    std::vector<double> offs(heads * per_head * 2), logits(heads * per_head);
    std::vector<double> mixed(d);
    for (std::size_t t = 0; t < n; ++t) {
        const double* z = tokens.data() + t * d;
        // Offset and weight heads.
        mm_nn(z, woff.data(), offs.data(), 1, d, offs.size(), false);
        mm_nn(z, wwgt.data(), logits.data(), 1, d, logits.size(), false);
        std::fill(mixed.begin(), mixed.end(), 0.0);
        const double row0 = static_cast<double>(t / side);
        const double col0 = static_cast<double>(t % side);
        for (std::size_t h = 0; h < heads; ++h) {
            // Softmax over this head's points.
            double mx = -1e300, sum = 0.0;
            for (std::size_t i = 0; i < per_head; ++i)
                mx = std::max(mx, logits[h * per_head + i]);
            for (std::size_t i = 0; i < per_head; ++i) {
                logits[h * per_head + i] = std::exp(logits[h * per_head + i] - mx);
                sum += logits[h * per_head + i];
            }
            for (std::size_t i = 0; i < per_head; ++i) {
                const double a = logits[h * per_head + i] / sum;
                const double row = row0 + offs[(h * per_head + i) * 2 + 1];
                const double col = col0 + offs[(h * per_head + i) * 2 + 0];
                const double r0f = std::floor(row), c0f = std::floor(col);
                const long r0 = static_cast<long>(r0f), c0 = static_cast<long>(c0f);
                const double fr = row - r0f, fc = col - c0f;
                const long rr[4] = {r0, r0, r0 + 1, r0 + 1};
                const long cc[4] = {c0, c0 + 1, c0, c0 + 1};
                const double cw[4] = {(1 - fr) * (1 - fc), (1 - fr) * fc,
                                      fr * (1 - fc), fr * fc};
                for (int corner = 0; corner < 4; ++corner) {
                    if (rr[corner] < 0 || cc[corner] < 0 ||
                        rr[corner] >= static_cast<long>(side) ||
                        cc[corner] >= static_cast<long>(side)) {
                        continue;
                    }
                    const double* src =
                        values.data() +
                        (static_cast<std::size_t>(rr[corner]) * side +
                         static_cast<std::size_t>(cc[corner])) * d + h * dh;
                    for (std::size_t ch = 0; ch < dh; ++ch)
                        mixed[h * dh + ch] += a * cw[corner] * src[ch];
                }
            }
        }
        mm_nn(mixed.data(), wo.data(), out.data() + t * d, 1, d, d, false);
    }
}

double fit_loglog_slope(const std::vector<std::pair<double, double>>& xy) {
    // Least squares on (log x, log y).
    const double n = static_cast<double>(xy.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (const auto& [x, y] : xy) {
        const double lx = std::log(x), ly = std::log(y);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace

ProbeResult complexity_probe(const std::string& mechanism,
                             const std::vector<std::size_t>& token_counts,
                             std::size_t d, int repeats, Rng& rng) {
    if (mechanism != "global" && mechanism != "deformable") {
        throw std::invalid_argument("complexity_probe: unknown mechanism " + mechanism);
    }
    if (token_counts.size() < 2 || repeats < 1) {
        throw std::invalid_argument("complexity_probe: need >= 2 token counts");
    }
    const std::size_t heads = 4, points = 4;
    if (d % heads != 0) {
        throw std::invalid_argument("complexity_probe: d must be divisible by 4");
    }

    ProbeResult result;
    using clock = std::chrono::steady_clock;
    for (std::size_t n : token_counts) {
        Tensor tokens({n, d});
        for (std::size_t i = 0; i < tokens.size(); ++i)
            tokens[i] = rng.uniform(-1.0, 1.0);
        std::vector<double> times;
        if (mechanism == "global") {
            Tensor scores({n, n}), out({n, d});
            for (int r = 0; r < repeats; ++r) {
                const auto t0 = clock::now();
                run_global_once(tokens, tokens, tokens, scores, out);
                const auto t1 = clock::now();
                times.push_back(std::chrono::duration<double>(t1 - t0).count());
            }
        } else {
            auto rand_mat = [&](std::size_t rows, std::size_t cols) {
                Tensor m({rows, cols});
                for (std::size_t i = 0; i < m.size(); ++i)
                    m[i] = rng.uniform(-0.5, 0.5);
                return m;
            };
            Tensor wv = rand_mat(d, d), wo = rand_mat(d, d);
            Tensor woff = rand_mat(d, heads * points * 2);
            Tensor wwgt = rand_mat(d, heads * points);
            Tensor values({n, d}), out({n, d});
            for (int r = 0; r < repeats; ++r) {
                const auto t0 = clock::now();
                run_deformable_once(tokens, wv, wo, woff, wwgt, heads, points,
                                    values, out);
                const auto t1 = clock::now();
                times.push_back(std::chrono::duration<double>(t1 - t0).count());
            }
        }
        result.rows.push_back({mechanism, n, d, median(times)});
    }

    std::vector<std::pair<double, double>> xy;
    for (const ProbeRow& row : result.rows) {
        xy.emplace_back(static_cast<double>(row.tokens), row.median_seconds);
    }
    result.slope = fit_loglog_slope(xy);
    return result;
}

void write_probe_csv(std::ostream& os, const std::vector<ProbeResult>& results) {
    os << "mechanism,tokens,d,median_seconds,slope\n";
    for (const ProbeResult& res : results) {
        for (const ProbeRow& row : res.rows) {
            os << row.mechanism << ',' << row.tokens << ',' << row.d << ','
               << row.median_seconds << ',' << res.slope << '\n';
        }
    }
}

}  // namespace dtlsd

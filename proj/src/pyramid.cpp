#include "dtlsd/pyramid.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace dtlsd {

std::size_t MemoryLayout::token_index(std::size_t p, std::size_t i,
                                      std::size_t j) const {
    return offsets[p] + i * shapes[p].w + j;
}

void MemoryLayout::token_coords(std::size_t t, std::size_t* p, std::size_t* i,
                                std::size_t* j) const {
    for (std::size_t q = level_count(); q-- > 0;) {
        if (t >= offsets[q]) {
            const std::size_t rel = t - offsets[q];
            *p = q;
            *i = rel / shapes[q].w;
            *j = rel % shapes[q].w;
            return;
        }
    }
    throw std::out_of_range("token_coords: token index out of range");
}

std::pair<double, double> MemoryLayout::token_ref_xy(std::size_t t) const {
    std::size_t p = 0, i = 0, j = 0;
    token_coords(t, &p, &i, &j);
    return {(static_cast<double>(j) + 0.5) / static_cast<double>(shapes[p].w),
            (static_cast<double>(i) + 0.5) / static_cast<double>(shapes[p].h)};
}

ToyBackbone ToyBackbone::make(ParamStore& store, const std::string& name,
                              const BackboneConfig& cfg, Rng& rng) {
    if (cfg.levels.empty() || cfg.base_channels == 0 || cfg.in_channels == 0) {
        throw std::invalid_argument("backbone: empty levels or zero channels");
    }
    for (int l : cfg.levels) {
        if (l < 0) throw std::invalid_argument("backbone: negative level");
    }
    ToyBackbone bb;
    bb.cfg = cfg;
    const int max_level = *std::max_element(cfg.levels.begin(), cfg.levels.end());
    std::size_t c_in = cfg.in_channels;
    for (int s = 0; s <= max_level; ++s) {
        const std::size_t c_out = cfg.base_channels << s;
        // Fan-based scale over the 3x3 receptive field.
        const double sigma = std::sqrt(2.0 / (9.0 * static_cast<double>(c_in)));
        Tensor k = normal_init({3, 3, c_in, c_out}, sigma, rng);
        bb.kernels.push_back(&store.create(
            name + ".stage" + std::to_string(s) + ".k", std::move(k)));
        bb.biases.push_back(&store.create(
            name + ".stage" + std::to_string(s) + ".b", Tensor({c_out})));
        c_in = c_out;
    }
    return bb;
}

std::vector<ag::Var> ToyBackbone::forward(ag::Tape& tape, ag::Var img) const {
    const Tensor& iv = tape.value(img);
    if (iv.rank() != 3 || iv.dim(2) != cfg.in_channels) {
        throw std::invalid_argument("backbone: image must be [H, W, in_channels]");
    }
    const std::size_t divisor = std::size_t{1} << stage_count();
    if (iv.dim(0) % divisor != 0 || iv.dim(1) % divisor != 0) {
        throw std::invalid_argument(
            "backbone: image size " + std::to_string(iv.dim(0)) + "x" +
            std::to_string(iv.dim(1)) + " not divisible by " +
            std::to_string(divisor));
    }

    std::vector<ag::Var> retained;
    ag::Var h = img;
    for (std::size_t s = 0; s < stage_count(); ++s) {
        h = ag::conv3x3_s2(h, tape.leaf(*kernels[s]), tape.leaf(*biases[s]));
        h = ag::gelu(h);
        if (std::find(cfg.levels.begin(), cfg.levels.end(), static_cast<int>(s)) !=
            cfg.levels.end()) {
            retained.push_back(h);
        }
    }
    return retained;
}

std::vector<Parameter*> ToyBackbone::params() const {
    std::vector<Parameter*> out;
    for (std::size_t s = 0; s < kernels.size(); ++s) {
        out.push_back(kernels[s]);
        out.push_back(biases[s]);
    }
    return out;
}

LevelProjection LevelProjection::make(ParamStore& store, const std::string& name,
                                      const ToyBackbone& backbone, std::size_t d,
                                      Rng& rng) {
    if (d == 0) throw std::invalid_argument("projection: d must be positive");
    LevelProjection lp;
    lp.d = d;
    for (std::size_t p = 0; p < backbone.cfg.levels.size(); ++p) {
        const std::size_t c = backbone.channels_at(backbone.cfg.levels[p]);
        lp.proj.push_back(LinearLayer::make(
            store, name + ".lvl" + std::to_string(backbone.cfg.levels[p]), c, d,
            rng));
    }
    return lp;
}

std::vector<ag::Var> LevelProjection::forward(
    ag::Tape& tape, const std::vector<ag::Var>& levels) const {
    if (levels.size() != proj.size()) {
        throw std::invalid_argument("projection: level count mismatch");
    }
    std::vector<ag::Var> out;
    for (std::size_t p = 0; p < levels.size(); ++p) {
        const Tensor& v = tape.value(levels[p]);
        if (v.rank() != 3) {
            throw std::invalid_argument("projection: levels must be [H, W, C]");
        }
        ag::Var flat = ag::reshape(levels[p], {v.dim(0) * v.dim(1), v.dim(2)});
        out.push_back(proj[p].forward(tape, flat));
    }
    return out;
}

Tensor sine_pos_enc(std::size_t h, std::size_t w, std::size_t d) {
    if (d % 4 != 0 || d == 0) {
        throw std::invalid_argument("sine_pos_enc: d must be divisible by 4");
    }
    const std::size_t half = d / 2;
    const double two_pi = 2.0 * std::numbers::pi;
    // Frequency ladder shared by both axes: pairs (sin, cos) at temperature
    // 10000^(2*pair/half).
    std::vector<double> inv_freq(half);
    for (std::size_t t = 0; t < half; ++t) {
        const double expo =
            2.0 * static_cast<double>(t / 2) / static_cast<double>(half);
        inv_freq[t] = 1.0 / std::pow(10000.0, expo);
    }

    Tensor pe({h, w, d});
    for (std::size_t i = 0; i < h; ++i) {
        const double y = two_pi * static_cast<double>(i) / static_cast<double>(h);
        for (std::size_t j = 0; j < w; ++j) {
            const double x = two_pi * static_cast<double>(j) / static_cast<double>(w);
            double* row = pe.data() + (i * w + j) * d;
            for (std::size_t t = 0; t < half; ++t) {
                const double ay = y * inv_freq[t];
                const double ax = x * inv_freq[t];
                row[t] = (t % 2 == 0) ? std::sin(ay) : std::cos(ay);
                row[half + t] = (t % 2 == 0) ? std::sin(ax) : std::cos(ax);
            }
        }
    }
    return pe;
}

ag::Var flatten_and_stack(ag::Tape& tape, const std::vector<ag::Var>& levels,
                          const std::vector<int>& level_ids,
                          const std::vector<LevelShape>& shapes,
                          const std::vector<Tensor>& pos_encs,
                          MemoryLayout* layout) {
    if (levels.empty() || levels.size() != shapes.size() ||
        levels.size() != pos_encs.size() || levels.size() != level_ids.size()) {
        throw std::invalid_argument("flatten_and_stack: per-level inputs disagree");
    }
    const std::size_t d = tape.value(levels[0]).dim(1);
    std::vector<ag::Var> parts;
    MemoryLayout out;
    out.level_ids = level_ids;
    out.shapes = shapes;
    for (std::size_t p = 0; p < levels.size(); ++p) {
        const Tensor& v = tape.value(levels[p]);
        const std::size_t hw = shapes[p].h * shapes[p].w;
        if (v.rank() != 2 || v.dim(0) != hw || v.dim(1) != d) {
            throw std::invalid_argument("flatten_and_stack: level shape mismatch");
        }
        if (pos_encs[p].size() != hw * d) {
            throw std::invalid_argument("flatten_and_stack: encoding shape mismatch");
        }
        out.offsets.push_back(out.total);
        out.total += hw;
        ag::Var pe = tape.constant(pos_encs[p].reshaped({hw, d}));
        parts.push_back(ag::add(levels[p], pe));
    }
    if (layout) *layout = out;
    return ag::concat_rows(parts);
}

}  // namespace dtlsd

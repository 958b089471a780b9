#include "dtlsd/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace dtlsd {

ModelConfig ModelConfig::full() { return ModelConfig{}; }

ModelConfig ModelConfig::toy() {
    ModelConfig cfg;
    cfg.d = 32;
    cfg.heads = 4;
    cfg.points = 4;
    cfg.encoder_layers = 2;
    cfg.decoder_layers = 2;
    cfg.query_count = 50;
    cfg.ffn_dim = 64;
    return cfg;
}

void ModelConfig::validate() const {
    if (d == 0 || heads == 0 || points == 0 || encoder_layers == 0 ||
        decoder_layers == 0 || query_count == 0 || ffn_dim == 0) {
        throw std::invalid_argument("model config: all counts must be positive");
    }
    if (d % heads != 0) {
        throw std::invalid_argument("model config: d must be divisible by heads");
    }
    if (levels.empty()) {
        throw std::invalid_argument("model config: need at least one level");
    }
    for (int l : levels) {
        if (l < 0) throw std::invalid_argument("model config: negative level id");
    }
}

double squash(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double unsquash(double p, double eps) {
    const double c = std::min(std::max(p, eps), 1.0 - eps);
    return std::log(c / (1.0 - c));
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

MultiHeadSelfAttn MultiHeadSelfAttn::make(ParamStore& store,
                                          const std::string& name, std::size_t d,
                                          std::size_t heads, Rng& rng) {
    if (heads == 0 || d % heads != 0) {
        throw std::invalid_argument("self-attention: d must be divisible by heads");
    }
    MultiHeadSelfAttn m;
    m.heads = heads;
    const std::size_t dh = d / heads;
    for (std::size_t h = 0; h < heads; ++h) {
        const std::string hn = name + ".h" + std::to_string(h);
        m.q.push_back(LinearLayer::make(store, hn + ".q", d, dh, rng));
        m.k.push_back(LinearLayer::make(store, hn + ".k", d, dh, rng));
        m.v.push_back(LinearLayer::make(store, hn + ".v", d, dh, rng));
        m.out_w.push_back(
            &store.create(hn + ".out.w", xavier_uniform(dh, d, rng)));
    }
    m.out_b = &store.create(name + ".out.b", Tensor({d}));
    return m;
}

ag::Var MultiHeadSelfAttn::forward(ag::Tape& tape, ag::Var x,
                                   const std::vector<std::uint8_t>* blocked) const {
    ag::Var acc{nullptr, -1};
    for (std::size_t h = 0; h < heads; ++h) {
        ag::Var qh = q[h].forward(tape, x);
        ag::Var kh = k[h].forward(tape, x);
        ag::Var vh = v[h].forward(tape, x);
        ag::Var ah = blocked
                         ? masked_global_attention(tape, qh, kh, vh, *blocked)
                         : global_attention(tape, qh, kh, vh);
        if (h == 0) {
            acc = ag::linear(ah, tape.leaf(*out_w[0]), tape.leaf(*out_b));
        } else {
            acc = ag::add(acc, ag::matmul(ah, tape.leaf(*out_w[h])));
        }
    }
    return acc;
}

EncoderLayerParams EncoderLayerParams::make(ParamStore& store,
                                            const std::string& name,
                                            const ModelConfig& cfg, Rng& rng) {
    EncoderLayerParams p;
    p.attn = DeformAttnParams::make(store, name + ".attn", cfg.d, cfg.heads,
                                    cfg.levels.size(), cfg.points, rng);
    p.ln1 = LayerNormLayer::make(store, name + ".ln1", cfg.d);
    p.ln2 = LayerNormLayer::make(store, name + ".ln2", cfg.d);
    p.ffn = MlpLayer::make(store, name + ".ffn", {cfg.d, cfg.ffn_dim, cfg.d}, rng);
    return p;
}

DecoderLayerParams DecoderLayerParams::make(ParamStore& store,
                                            const std::string& name,
                                            const ModelConfig& cfg, Rng& rng) {
    DecoderLayerParams p;
    p.self_attn = MultiHeadSelfAttn::make(store, name + ".self", cfg.d,
                                          cfg.heads, rng);
    p.cross = DeformAttnParams::make(store, name + ".cross", cfg.d, cfg.heads,
                                     cfg.levels.size(), cfg.points, rng);
    p.ln1 = LayerNormLayer::make(store, name + ".ln1", cfg.d);
    p.ln2 = LayerNormLayer::make(store, name + ".ln2", cfg.d);
    p.ln3 = LayerNormLayer::make(store, name + ".ln3", cfg.d);
    p.ffn = MlpLayer::make(store, name + ".ffn", {cfg.d, cfg.ffn_dim, cfg.d}, rng);
    return p;
}

SelectionHeads SelectionHeads::make(ParamStore& store, const std::string& name,
                                    std::size_t d, Rng& rng) {
    SelectionHeads h;
    h.score = LinearLayer::make(store, name + ".score", d, 1, rng);
    h.proposal = MlpLayer::make(store, name + ".proposal", {d, d, 4}, rng);
    return h;
}

namespace {

void zero_last_layer(MlpLayer& mlp) {
    LinearLayer& last = mlp.layers.back();
    for (std::size_t i = 0; i < last.w->value.size(); ++i) last.w->value[i] = 0.0;
    for (std::size_t i = 0; i < last.b->value.size(); ++i) last.b->value[i] = 0.0;
}

}  // namespace

TransformerParams TransformerParams::make(ParamStore& store,
                                          const std::string& name,
                                          const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    TransformerParams p;
    p.cfg = cfg;
    for (std::size_t i = 0; i < cfg.encoder_layers; ++i) {
        p.enc.push_back(EncoderLayerParams::make(
            store, name + ".enc" + std::to_string(i), cfg, rng));
    }
    for (std::size_t i = 0; i < cfg.decoder_layers; ++i) {
        p.dec.push_back(DecoderLayerParams::make(
            store, name + ".dec" + std::to_string(i), cfg, rng));
    }
    p.selection = SelectionHeads::make(store, name + ".sel", cfg.d, rng);
    p.content_embed = &store.create(
        name + ".content", normal_init({cfg.query_count, cfg.d}, 1.0, rng));
    p.refine = MlpLayer::make(store, name + ".refine", {cfg.d, cfg.d, 4}, rng);
    p.cls_head = LinearLayer::make(store, name + ".cls", cfg.d, 1, rng);
    p.line_head =
        MlpLayer::make(store, name + ".line", {cfg.d, cfg.d, cfg.d, 4}, rng);
    // Zero-initialized final layers: proposals start at the token reference,
    // anchors start frozen, and line predictions start at the anchor.
    zero_last_layer(p.selection.proposal);
    zero_last_layer(p.refine);
    zero_last_layer(p.line_head);
    return p;
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

ag::Var encoder_forward(ag::Tape& tape, ag::Var tokens, const MemoryLayout& layout,
                        const std::vector<EncoderLayerParams>& layers) {
    const Tensor& tv = tape.value(tokens);
    if (tv.rank() != 2 || tv.dim(0) != layout.total) {
        throw std::invalid_argument("encoder: tokens disagree with layout");
    }
    Tensor refs({layout.total, 2});
    for (std::size_t t = 0; t < layout.total; ++t) {
        auto [x, y] = layout.token_ref_xy(t);
        refs.at2(t, 0) = x;
        refs.at2(t, 1) = y;
    }
    ag::Var cur = tokens;
    for (const EncoderLayerParams& layer : layers) {
        ag::Var a = ms_deform_attn(tape, cur, refs, cur, layout, layer.attn);
        cur = layer.ln1.forward(tape, ag::add(cur, a));
        ag::Var f = layer.ffn.forward(tape, cur);
        cur = layer.ln2.forward(tape, ag::add(cur, f));
    }
    return cur;
}

SelectedQueries query_selection(const FlattenedMemory& memory,
                                const SelectionHeads& heads, std::size_t k) {
    const std::size_t total = memory.layout.total;
    if (k > total) {
        throw std::invalid_argument("query selection: k exceeds the token count");
    }
    if (memory.tokens.rank() != 2 || memory.tokens.dim(0) != total) {
        throw std::invalid_argument("query selection: tokens disagree with layout");
    }

    // Plain-value evaluation: selection is discrete and the decoder's content
    // vectors are separate embeddings, so nothing here carries gradient.
    ag::Tape tape;
    ag::Var tok = tape.constant(memory.tokens);
    const Tensor& logits = tape.value(heads.score.forward(tape, tok));
    const Tensor& deltas = tape.value(heads.proposal.forward(tape, tok));

    std::vector<std::size_t> order(total);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) {
                         return logits.at2(a, 0) > logits.at2(b, 0);
                     });

    SelectedQueries out;
    out.token_ids.assign(order.begin(), order.begin() + k);
    out.scores = Tensor({k});
    out.anchors = Tensor({k, 4});
    for (std::size_t r = 0; r < k; ++r) {
        const std::size_t t = out.token_ids[r];
        out.scores[r] = squash(logits.at2(t, 0));
        auto [x, y] = memory.layout.token_ref_xy(t);
        const double gx = unsquash(x), gy = unsquash(y);
        out.anchors.at2(r, 0) = squash(gx + deltas.at2(t, 0));
        out.anchors.at2(r, 1) = squash(gy + deltas.at2(t, 1));
        out.anchors.at2(r, 2) = squash(gx + deltas.at2(t, 2));
        out.anchors.at2(r, 3) = squash(gy + deltas.at2(t, 3));
    }
    return out;
}

std::vector<DecoderLayerOutput> decoder_forward(
    ag::Tape& tape, ag::Var content, const Tensor& anchors, ag::Var memory,
    const MemoryLayout& layout, const std::vector<DecoderLayerParams>& layers,
    const MlpLayer& refine, const std::vector<std::uint8_t>* mask) {
    const Tensor& cv = tape.value(content);
    if (cv.rank() != 2) {
        throw std::invalid_argument("decoder: content must be [n, d]");
    }
    const std::size_t n = cv.dim(0);
    if (anchors.rank() != 2 || anchors.dim(0) != n || anchors.dim(1) != 4) {
        throw std::invalid_argument("decoder: anchors must be [n, 4]");
    }
    if (mask && mask->size() != n * n) {
        throw std::invalid_argument("decoder: mask must be square over the queries");
    }

    auto anchor_logits_of = [](const Tensor& a) {
        Tensor g(a.shape());
        for (std::size_t i = 0; i < a.size(); ++i) g[i] = unsquash(a[i]);
        return g;
    };

    std::vector<DecoderLayerOutput> outputs;
    if (layers.empty()) {
        outputs.push_back({content, tape.constant(anchor_logits_of(anchors)),
                           anchors});
        return outputs;
    }

    ag::Var cur = content;
    Tensor cur_anchors = anchors;
    for (const DecoderLayerParams& layer : layers) {
        // Anchor geometry for this layer's cross-attention.
        Tensor refs({n, 2}), scale({n, 2});
        for (std::size_t i = 0; i < n; ++i) {
            const double x1 = cur_anchors.at2(i, 0), y1 = cur_anchors.at2(i, 1);
            const double x2 = cur_anchors.at2(i, 2), y2 = cur_anchors.at2(i, 3);
            refs.at2(i, 0) = 0.5 * (x1 + x2);
            refs.at2(i, 1) = 0.5 * (y1 + y2);
            scale.at2(i, 0) = 0.5 * std::abs(x1 - x2);
            scale.at2(i, 1) = 0.5 * std::abs(y1 - y2);
        }

        ag::Var sa = layer.self_attn.forward(tape, cur, mask);
        cur = layer.ln1.forward(tape, ag::add(cur, sa));
        ag::Var ca =
            ms_deform_attn(tape, cur, refs, memory, layout, layer.cross, &scale);
        cur = layer.ln2.forward(tape, ag::add(cur, ca));
        ag::Var f = layer.ffn.forward(tape, cur);
        cur = layer.ln3.forward(tape, ag::add(cur, f));

        // Logit-space anchor update. The attached form feeds this layer's
        // predictions (training the refine head); its squashed values are
        // detached to become the next layer's sampling geometry.
        ag::Var delta = refine.forward(tape, cur);
        ag::Var logits = ag::add(
            tape.constant(anchor_logits_of(cur_anchors)), delta);
        const Tensor& lv = tape.value(logits);
        Tensor next({n, 4});
        for (std::size_t i = 0; i < next.size(); ++i) next[i] = squash(lv[i]);
        cur_anchors = next;
        outputs.push_back({cur, logits, cur_anchors});
    }
    return outputs;
}

HeadOutputs prediction_heads(ag::Tape& tape, const DecoderLayerOutput& state,
                             const TransformerParams& params) {
    const Tensor& cv = tape.value(state.content);
    const std::size_t n = cv.dim(0);
    if (state.anchors.dim(0) != n ||
        tape.value(state.anchor_logits).dim(0) != n) {
        throw std::invalid_argument("prediction heads: content/anchor mismatch");
    }

    HeadOutputs out;
    out.probs = ag::reshape(
        ag::sigmoid(params.cls_head.forward(tape, state.content)), {n});

    ag::Var mlp_out = params.line_head.forward(tape, state.content);
    out.lines = ag::sigmoid(ag::add(mlp_out, state.anchor_logits));
    return out;
}

std::vector<LineQuery> to_line_queries(ag::Tape& tape,
                                       const DecoderLayerOutput& state) {
    const Tensor& cv = tape.value(state.content);
    const std::size_t n = cv.dim(0), d = cv.dim(1);
    std::vector<LineQuery> queries;
    queries.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        LineQuery q;
        q.content = Tensor({d});
        for (std::size_t c = 0; c < d; ++c) q.content[c] = cv.at2(i, c);
        q.anchor = LineSegment{state.anchors.at2(i, 0), state.anchors.at2(i, 1),
                               state.anchors.at2(i, 2), state.anchors.at2(i, 3)};
        queries.push_back(std::move(q));
    }
    return queries;
}

}  // namespace dtlsd

#include "dtlsd/harness.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace dtlsd {
namespace {

using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Synthetic scene rendering
// ---------------------------------------------------------------------------

constexpr double kMargin = 0.05;     ///< endpoint margin box
constexpr double kMinLen = 0.12;     ///< sampled lengths (floor is 0.1)
constexpr double kMaxLen = 0.75;
constexpr double kNoiseSigma = 0.05;

/// Distance from a point to a segment, all in pixel units.
double point_segment_dist(double px, double py, double ax, double ay,
                          double bx, double by) {
    const double dx = bx - ax, dy = by - ay;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0.0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double qx = ax + t * dx, qy = ay + t * dy;
    return std::hypot(px - qx, py - qy);
}

std::vector<LineSegment> sample_scene_lines(Rng& rng) {
    const std::size_t n =
        static_cast<std::size_t>(rng.uniform_int(2, 12));
    std::vector<LineSegment> lines;
    lines.reserve(n);
    while (lines.size() < n) {
        const double x1 = rng.uniform(kMargin, 1.0 - kMargin);
        const double y1 = rng.uniform(kMargin, 1.0 - kMargin);
        const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double len = rng.uniform(kMinLen, kMaxLen);
        const double x2 = x1 + len * std::cos(angle);
        const double y2 = y1 + len * std::sin(angle);
        if (x2 < kMargin || x2 > 1.0 - kMargin || y2 < kMargin ||
            y2 > 1.0 - kMargin) {
            continue;  // rejection keeps the exact endpoints inside the box
        }
        lines.push_back(canonicalize(LineSegment(x1, y1, x2, y2)));
    }
    return lines;
}

SyntheticScene render_scene(std::uint64_t scene_seed, std::size_t size) {
    Rng rng(scene_seed);
    SyntheticScene scene;
    scene.seed = scene_seed;
    scene.gt = sample_scene_lines(rng);
    scene.image = Tensor({size, size, 1});
    const double s = static_cast<double>(size);

    // Lightly textured gray background: two low-frequency cosine gratings.
    struct Grating {
        double amp, fx, fy, phase;
    };
    Grating g[2];
    for (Grating& gr : g) {
        gr.amp = rng.uniform(0.01, 0.04);
        gr.fx = rng.uniform(-3.0, 3.0);
        gr.fy = rng.uniform(-3.0, 3.0);
        gr.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
    for (std::size_t i = 0; i < size; ++i) {
        for (std::size_t j = 0; j < size; ++j) {
            const double u = (static_cast<double>(j) + 0.5) / s;
            const double v = (static_cast<double>(i) + 0.5) / s;
            double val = 0.84;
            for (const Grating& gr : g) {
                val += gr.amp * std::cos(2.0 * std::numbers::pi *
                                             (gr.fx * u + gr.fy * v) +
                                         gr.phase);
            }
            scene.image[(i * size + j)] = val;
        }
    }

    // Dark anti-aliased strokes: full ink within a quarter pixel of the
    // segment, linear falloff to nothing at 1.25 px (about 1.5 px wide).
    for (const LineSegment& l : scene.gt) {
        const double ink = 0.10 + rng.uniform(0.0, 0.10);
        const double ax = l.x1 * s, ay = l.y1 * s;
        const double bx = l.x2 * s, by = l.y2 * s;
        const long i0 = std::max(0L, std::lround(std::min(ay, by) - 3.0));
        const long i1 = std::min<long>(size - 1, std::lround(std::max(ay, by) + 3.0));
        const long j0 = std::max(0L, std::lround(std::min(ax, bx) - 3.0));
        const long j1 = std::min<long>(size - 1, std::lround(std::max(ax, bx) + 3.0));
        for (long i = i0; i <= i1; ++i) {
            for (long j = j0; j <= j1; ++j) {
                const double d = point_segment_dist(
                    static_cast<double>(j) + 0.5, static_cast<double>(i) + 0.5,
                    ax, ay, bx, by);
                const double alpha = std::clamp(1.25 - d, 0.0, 1.0);
                if (alpha <= 0.0) continue;
                double& px = scene.image[static_cast<std::size_t>(i) * size +
                                         static_cast<std::size_t>(j)];
                px = px * (1.0 - alpha) + ink * alpha;
            }
        }
    }

    for (std::size_t i = 0; i < scene.image.size(); ++i) {
        scene.image[i] =
            std::clamp(scene.image[i] + rng.normal(0.0, kNoiseSigma), 0.0, 1.0);
    }
    return scene;
}

// ---------------------------------------------------------------------------
// JSON plumbing
// ---------------------------------------------------------------------------

[[noreturn]] void bad_key(const std::string& where, const std::string& key) {
    throw std::runtime_error("config: unknown key \"" +
                             (where.empty() ? key : where + "." + key) + "\"");
}

double as_f64(const json& j, const std::string& path) {
    if (!j.is_number()) {
        throw std::runtime_error("config: \"" + path + "\" must be a number");
    }
    return j.get<double>();
}

std::uint64_t as_u64(const json& j, const std::string& path) {
    if (!j.is_number_integer() || (j.is_number_integer() && j.get<std::int64_t>() < 0 &&
                                   !j.is_number_unsigned())) {
        throw std::runtime_error("config: \"" + path +
                                 "\" must be a non-negative integer");
    }
    return j.get<std::uint64_t>();
}

bool as_bool(const json& j, const std::string& path) {
    if (!j.is_boolean()) {
        throw std::runtime_error("config: \"" + path + "\" must be a boolean");
    }
    return j.get<bool>();
}

void parse_model(const json& j, ModelConfig& m) {
    if (!j.is_object()) throw std::runtime_error("config: \"model\" must be an object");
    for (const auto& [key, val] : j.items()) {
        if (key == "d") m.d = as_u64(val, "model.d");
        else if (key == "heads") m.heads = as_u64(val, "model.heads");
        else if (key == "points") m.points = as_u64(val, "model.points");
        else if (key == "encoder_layers") m.encoder_layers = as_u64(val, "model.encoder_layers");
        else if (key == "decoder_layers") m.decoder_layers = as_u64(val, "model.decoder_layers");
        else if (key == "query_count") m.query_count = as_u64(val, "model.query_count");
        else if (key == "ffn_dim") m.ffn_dim = as_u64(val, "model.ffn_dim");
        else if (key == "aux_losses") m.aux_losses = as_bool(val, "model.aux_losses");
        else if (key == "levels") {
            if (!val.is_array()) {
                throw std::runtime_error("config: \"model.levels\" must be an array");
            }
            m.levels.clear();
            for (const auto& lv : val) {
                m.levels.push_back(static_cast<int>(as_u64(lv, "model.levels[]")));
            }
        } else {
            bad_key("model", key);
        }
    }
}

void parse_dn(const json& j, DenoisingConfig& d) {
    if (!j.is_object()) throw std::runtime_error("config: \"dn\" must be an object");
    for (const auto& [key, val] : j.items()) {
        if (key == "dn_number") d.dn_number = as_u64(val, "dn.dn_number");
        else if (key == "label_noise_ratio") d.label_noise_ratio = as_f64(val, "dn.label_noise_ratio");
        else if (key == "line_scale") d.line_scale = as_f64(val, "dn.line_scale");
        else if (key == "line_rotation_deg") d.line_rotation_deg = as_f64(val, "dn.line_rotation_deg");
        else bad_key("dn", key);
    }
}

void parse_weights(const json& j, LossWeights& w) {
    if (!j.is_object()) throw std::runtime_error("config: \"weights\" must be an object");
    for (const auto& [key, val] : j.items()) {
        if (key == "lambda_class") w.lambda_class = as_f64(val, "weights.lambda_class");
        else if (key == "lambda_line") w.lambda_line = as_f64(val, "weights.lambda_line");
        else bad_key("weights", key);
    }
}

TrainConfig parse_train_config(const json& j) {
    if (!j.is_object()) throw std::runtime_error("config: top level must be an object");
    TrainConfig cfg;
    for (const auto& [key, val] : j.items()) {
        if (key == "model") parse_model(val, cfg.model);
        else if (key == "dn") parse_dn(val, cfg.dn);
        else if (key == "weights") parse_weights(val, cfg.weights);
        else if (key == "backbone_channels") cfg.backbone_channels = as_u64(val, key);
        else if (key == "lr") cfg.lr = as_f64(val, key);
        else if (key == "backbone_lr") cfg.backbone_lr = as_f64(val, key);
        else if (key == "weight_decay") cfg.weight_decay = as_f64(val, key);
        else if (key == "batch_size") cfg.batch_size = as_u64(val, key);
        else if (key == "epochs") cfg.epochs = as_u64(val, key);
        else if (key == "lr_drop_epoch") cfg.lr_drop_epoch = as_u64(val, key);
        else if (key == "seed") cfg.seed = as_u64(val, key);
        else if (key == "lcdn_enabled") cfg.lcdn_enabled = as_bool(val, key);
        else bad_key("", key);
    }
    return cfg;
}

ordered_json train_config_to_ojson(const TrainConfig& cfg) {
    ordered_json model;
    model["d"] = cfg.model.d;
    model["heads"] = cfg.model.heads;
    model["points"] = cfg.model.points;
    model["encoder_layers"] = cfg.model.encoder_layers;
    model["decoder_layers"] = cfg.model.decoder_layers;
    model["query_count"] = cfg.model.query_count;
    model["ffn_dim"] = cfg.model.ffn_dim;
    model["levels"] = cfg.model.levels;
    model["aux_losses"] = cfg.model.aux_losses;
    ordered_json dn;
    dn["dn_number"] = cfg.dn.dn_number;
    dn["label_noise_ratio"] = cfg.dn.label_noise_ratio;
    dn["line_scale"] = cfg.dn.line_scale;
    dn["line_rotation_deg"] = cfg.dn.line_rotation_deg;
    ordered_json weights;
    weights["lambda_class"] = cfg.weights.lambda_class;
    weights["lambda_line"] = cfg.weights.lambda_line;
    ordered_json j;
    j["model"] = model;
    j["dn"] = dn;
    j["weights"] = weights;
    j["backbone_channels"] = cfg.backbone_channels;
    j["lr"] = cfg.lr;
    j["backbone_lr"] = cfg.backbone_lr;
    j["weight_decay"] = cfg.weight_decay;
    j["batch_size"] = cfg.batch_size;
    j["epochs"] = cfg.epochs;
    j["lr_drop_epoch"] = cfg.lr_drop_epoch;
    j["seed"] = cfg.seed;
    j["lcdn_enabled"] = cfg.lcdn_enabled;
    return j;
}

json parse_json_or_throw(const std::string& text, const char* what) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) {
        throw std::runtime_error(std::string(what) + ": not valid JSON");
    }
    return j;
}

// ---------------------------------------------------------------------------
// Checkpoint bytes
// ---------------------------------------------------------------------------

constexpr std::uint32_t kCheckpointVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put_u64(out, bits);
}

struct ByteReader {
    const std::string& buf;
    std::size_t at = 0;

    void need(std::size_t n, const char* what) const {
        if (at + n > buf.size()) {
            throw TruncationError(std::string("truncated checkpoint: file ends inside ") + what);
        }
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
        }
        at += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
        }
        at += 8;
        return v;
    }
    double f64(const char* what) {
        const std::uint64_t bits = u64(what);
        double d;
        std::memcpy(&d, &bits, 8);
        return d;
    }
    std::string bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string s = buf.substr(at, n);
        at += n;
        return s;
    }
};

// ---------------------------------------------------------------------------
// Shared forward helpers
// ---------------------------------------------------------------------------

Tensor slice_tensor_rows(const Tensor& t, std::size_t begin, std::size_t end) {
    const std::size_t cols = t.dim(1);
    Tensor out({end - begin, cols});
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = t[begin * cols + i];
    return out;
}

/// Detections of the given head outputs, in query order.
std::vector<Detection> detections_from_heads(ag::Tape& tape,
                                             const HeadOutputs& heads) {
    const Tensor& p = tape.value(heads.probs);
    const Tensor& l = tape.value(heads.lines);
    std::vector<Detection> dets;
    dets.reserve(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        Detection d;
        d.confidence = p[i];
        d.line = LineSegment(l.at2(i, 0), l.at2(i, 1), l.at2(i, 2), l.at2(i, 3));
        dets.push_back(d);
    }
    return dets;
}

Assignment match_or_empty(ag::Tape& tape, const HeadOutputs& heads,
                          const std::vector<LineSegment>& gt,
                          const LossWeights& w) {
    const Tensor& p = tape.value(heads.probs);
    if (gt.empty()) {
        Assignment none;
        none.gt_for_pred.assign(p.size(), -1);
        return none;
    }
    const Tensor& l = tape.value(heads.lines);
    std::vector<Prediction> preds(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        preds[i].p = p[i];
        preds[i].line = LineSegment(l.at2(i, 0), l.at2(i, 1), l.at2(i, 2), l.at2(i, 3));
    }
    return hungarian_assign(build_cost_matrix(preds, gt, w));
}

void check_trainable_image(const Tensor& image, const LineDetector& model,
                           const char* who) {
    const std::size_t div = model.image_divisor();
    if (image.rank() != 3 || image.dim(2) != model.backbone_cfg.in_channels) {
        throw std::invalid_argument(std::string(who) +
                                    ": image must be [h, w, in_channels]");
    }
    if (image.dim(0) == 0 || image.dim(0) % div != 0 || image.dim(1) % div != 0) {
        throw std::invalid_argument(
            std::string(who) + ": image sides must be positive multiples of " +
            std::to_string(div));
    }
}

std::uint64_t splitmix64(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

}  // namespace

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

std::vector<SyntheticScene> synth_generate(std::uint64_t seed,
                                           std::size_t count,
                                           std::size_t size) {
    if (size == 0 || size % 64 != 0) {
        throw std::invalid_argument("synth_generate: size must be a positive multiple of 64");
    }
    std::vector<SyntheticScene> scenes;
    scenes.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        scenes.push_back(render_scene(
            splitmix64(seed + (i + 1) * 0x9E3779B97F4A7C15ull), size));
    }
    return scenes;
}

// ---------------------------------------------------------------------------
// Wireframe-format annotations
// ---------------------------------------------------------------------------

std::vector<WireframeRecord> wireframe_parse(const std::string& json_text,
                                             std::vector<std::string>* warnings) {
    json root = json::parse(json_text, nullptr, false);
    if (root.is_discarded()) {
        throw std::runtime_error("annotations: not valid JSON");
    }
    if (!root.is_array()) {
        throw std::runtime_error("annotations: top level must be an array of records");
    }
    std::vector<WireframeRecord> records;
    records.reserve(root.size());
    for (std::size_t r = 0; r < root.size(); ++r) {
        const std::string at = "record " + std::to_string(r);
        const json& rec = root[r];
        if (!rec.is_object()) throw std::runtime_error(at + ": not an object");
        for (const char* field : {"filename", "width", "height", "lines"}) {
            if (!rec.contains(field)) {
                throw std::runtime_error(at + ": missing \"" + field + "\"");
            }
        }
        WireframeRecord out;
        if (!rec["filename"].is_string()) {
            throw std::runtime_error(at + ": \"filename\" must be a string");
        }
        out.filename = rec["filename"].get<std::string>();
        if (!rec["width"].is_number_integer() || rec["width"].get<std::int64_t>() <= 0 ||
            !rec["height"].is_number_integer() || rec["height"].get<std::int64_t>() <= 0) {
            throw std::runtime_error(at + ": width/height must be positive integers");
        }
        out.width = rec["width"].get<std::size_t>();
        out.height = rec["height"].get<std::size_t>();
        const json& lines = rec["lines"];
        if (!lines.is_array()) {
            throw std::runtime_error(at + ": \"lines\" must be an array");
        }
        const double w = static_cast<double>(out.width);
        const double h = static_cast<double>(out.height);
        for (std::size_t i = 0; i < lines.size(); ++i) {
            const json& ln = lines[i];
            if (!ln.is_array() || ln.size() != 4 || !ln[0].is_number() ||
                !ln[1].is_number() || !ln[2].is_number() || !ln[3].is_number()) {
                throw std::runtime_error(at + ": line " + std::to_string(i) +
                                         " must be [x1, y1, x2, y2]");
            }
            const LineSegment seg = LineSegment::clamped(
                ln[0].get<double>() / w, ln[1].get<double>() / h,
                ln[2].get<double>() / w, ln[3].get<double>() / h);
            if (seg.x1 == seg.x2 && seg.y1 == seg.y2) {
                if (warnings) {
                    warnings->push_back(at + ": dropped line " + std::to_string(i) +
                                        " (identical endpoints)");
                }
                continue;
            }
            out.gt.push_back(canonicalize(seg));
        }
        records.push_back(std::move(out));
    }
    return records;
}

std::vector<WireframeRecord> wireframe_ingest(const std::string& path,
                                              std::vector<std::string>* warnings) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("annotations: cannot open " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return wireframe_parse(buf.str(), warnings);
}

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

TrainConfig TrainConfig::toy() {
    TrainConfig cfg;
    cfg.model = ModelConfig::toy();
    cfg.dn.dn_number = 100;
    cfg.backbone_channels = 8;
    return cfg;
}

void TrainConfig::validate() const {
    model.validate();
    dn.validate();
    if (weights.lambda_class < 0.0 || weights.lambda_line < 0.0) {
        throw std::invalid_argument("TrainConfig: loss weights must be non-negative");
    }
    if (!(lr > 0.0) || !(backbone_lr > 0.0)) {
        throw std::invalid_argument("TrainConfig: learning rates must be positive");
    }
    if (weight_decay < 0.0) {
        throw std::invalid_argument("TrainConfig: weight decay must be non-negative");
    }
    if (backbone_channels == 0 || batch_size == 0 || epochs == 0 || lr_drop_epoch == 0) {
        throw std::invalid_argument("TrainConfig: counts must be positive");
    }
}

TrainConfig train_config_from_json(const std::string& text) {
    return parse_train_config(parse_json_or_throw(text, "config"));
}

std::string train_config_to_json(const TrainConfig& cfg) {
    return train_config_to_ojson(cfg).dump();
}

// ---------------------------------------------------------------------------
// Model assembly
// ---------------------------------------------------------------------------

LineDetector::LineDetector(const ModelConfig& model, std::size_t backbone_channels,
                           std::uint64_t init_seed) {
    model.validate();
    if (backbone_channels == 0) {
        throw std::invalid_argument("LineDetector: backbone_channels must be positive");
    }
    Rng rng(init_seed);
    backbone_cfg.in_channels = 1;
    backbone_cfg.base_channels = backbone_channels;
    backbone_cfg.levels = model.levels;
    backbone = ToyBackbone::make(store, "backbone", backbone_cfg, rng);
    project = LevelProjection::make(store, "project", backbone, model.d, rng);
    xf = TransformerParams::make(store, "xf", model, rng);
    label_embed = &store.create("label_embed", normal_init({2, model.d}, 0.02, rng));
}

ForwardPass run_detector(ag::Tape& tape, const LineDetector& model,
                         const Tensor& image, const DenoisingBatch* dn,
                         const SelectedQueries* frozen) {
    check_trainable_image(image, model, "run_detector");
    const ModelConfig& cfg = model.xf.cfg;

    std::vector<ag::Var> feats = model.backbone.forward(tape, tape.constant(image));
    std::vector<LevelShape> shapes;
    std::vector<Tensor> pos;
    shapes.reserve(feats.size());
    pos.reserve(feats.size());
    for (ag::Var f : feats) {
        const Tensor& fv = tape.value(f);
        shapes.push_back({fv.dim(0), fv.dim(1)});
        pos.push_back(sine_pos_enc(fv.dim(0), fv.dim(1), cfg.d));
    }
    std::vector<ag::Var> proj = model.project.forward(tape, feats);

    ForwardPass out;
    ag::Var tokens = flatten_and_stack(tape, proj, model.backbone_cfg.levels,
                                       shapes, pos, &out.layout);
    ag::Var memory = encoder_forward(tape, tokens, out.layout, model.xf.enc);

    out.selected = frozen ? *frozen
                          : query_selection(FlattenedMemory{out.layout, tape.value(memory)},
                                            model.xf.selection, cfg.query_count);
    if (out.selected.token_ids.size() != cfg.query_count) {
        throw std::invalid_argument("run_detector: selection size does not match query_count");
    }

    ag::Var content = tape.leaf(*model.xf.content_embed);
    Tensor anchors = out.selected.anchors;
    const std::vector<std::uint8_t>* mask = nullptr;
    out.dn_count = dn ? dn->queries.size() : 0;
    if (out.dn_count > 0) {
        if (dn->mask.total != out.dn_count + cfg.query_count) {
            throw std::invalid_argument(
                "run_detector: denoising mask does not cover this query count");
        }
        Tensor onehot({out.dn_count, 2});
        Tensor combined({out.dn_count + cfg.query_count, 4});
        for (std::size_t i = 0; i < out.dn_count; ++i) {
            const LineQuery& q = dn->queries[i];
            if (q.content.size() != 2) {
                throw std::invalid_argument("run_detector: denoising content must be a [2] one-hot");
            }
            onehot.at2(i, 0) = q.content[0];
            onehot.at2(i, 1) = q.content[1];
            combined.at2(i, 0) = q.anchor.x1;
            combined.at2(i, 1) = q.anchor.y1;
            combined.at2(i, 2) = q.anchor.x2;
            combined.at2(i, 3) = q.anchor.y2;
        }
        for (std::size_t i = 0; i < cfg.query_count; ++i) {
            for (std::size_t c = 0; c < 4; ++c) {
                combined.at2(out.dn_count + i, c) = out.selected.anchors.at2(i, c);
            }
        }
        ag::Var dn_content =
            ag::matmul(tape.constant(std::move(onehot)), tape.leaf(*model.label_embed));
        content = ag::concat_rows({dn_content, content});
        anchors = std::move(combined);
        mask = &dn->mask.blocked;
    }

    std::vector<DecoderLayerOutput> states =
        decoder_forward(tape, content, anchors, memory, out.layout, model.xf.dec,
                        model.xf.refine, mask);
    const std::size_t n_total = out.dn_count + cfg.query_count;
    for (const DecoderLayerOutput& st : states) {
        if (out.dn_count > 0) {
            DecoderLayerOutput dn_state{
                ag::slice_rows(st.content, 0, out.dn_count),
                ag::slice_rows(st.anchor_logits, 0, out.dn_count),
                slice_tensor_rows(st.anchors, 0, out.dn_count)};
            out.dn_heads.push_back(prediction_heads(tape, dn_state, model.xf));
            DecoderLayerOutput match_state{
                ag::slice_rows(st.content, out.dn_count, n_total),
                ag::slice_rows(st.anchor_logits, out.dn_count, n_total),
                slice_tensor_rows(st.anchors, out.dn_count, n_total)};
            out.match_heads.push_back(prediction_heads(tape, match_state, model.xf));
        } else {
            out.match_heads.push_back(prediction_heads(tape, st, model.xf));
        }
    }
    return out;
}

ImageLoss image_loss(ag::Tape& tape, const ForwardPass& fwd,
                     const DenoisingBatch* dn,
                     const std::vector<LineSegment>& gt, const LossWeights& w,
                     bool aux_losses, const Assignment* frozen_match) {
    if (fwd.match_heads.empty()) {
        throw std::invalid_argument("image_loss: forward pass has no head outputs");
    }
    std::vector<std::size_t> layers;
    if (aux_losses) {
        layers.resize(fwd.match_heads.size());
        std::iota(layers.begin(), layers.end(), std::size_t{0});
    } else {
        layers.push_back(fwd.match_heads.size() - 1);
    }

    const bool with_dn = dn != nullptr && fwd.dn_count > 0;
    const Assignment dn_assign =
        with_dn ? denoising_assignment(*dn, gt.size()) : Assignment{};

    ImageLoss out;
    bool first = true;
    for (std::size_t idx : layers) {
        const HeadOutputs& mh = fwd.match_heads[idx];
        const Assignment assign =
            frozen_match ? *frozen_match : match_or_empty(tape, mh, gt, w);
        LossBreakdown bd;
        ag::Var term = total_loss(tape, mh.probs, mh.lines, gt, assign, w, &bd);
        out.loss_class += bd.loss_class;
        out.loss_line += bd.loss_line;
        out.total = first ? term : ag::add(out.total, term);
        first = false;

        if (with_dn) {
            LossBreakdown dn_bd;
            ag::Var dn_term = total_loss(tape, fwd.dn_heads[idx].probs,
                                         fwd.dn_heads[idx].lines, gt, dn_assign,
                                         w, &dn_bd);
            out.loss_dn += dn_bd.total;
            out.total = ag::add(out.total, dn_term);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

Checkpoint checkpoint_from_model(const LineDetector& model,
                                 const TrainConfig& cfg, std::uint64_t step) {
    Checkpoint ck;
    ck.step = step;
    ck.config_json = train_config_to_json(cfg);
    ck.tensors.reserve(model.store.all().size());
    for (const Parameter* p : model.store.all()) {
        ck.tensors.emplace_back(p->name, p->value);
    }
    return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::string out;
    out.append("DTLS", 4);
    put_u32(out, kCheckpointVersion);
    put_u64(out, ck.step);
    put_u64(out, ck.config_json.size());
    out.append(ck.config_json);
    put_u64(out, ck.tensors.size());
    for (const auto& [name, tensor] : ck.tensors) {
        put_u64(out, name.size());
        out.append(name);
        put_u64(out, tensor.rank());
        for (std::size_t i = 0; i < tensor.rank(); ++i) put_u64(out, tensor.dim(i));
        for (std::size_t i = 0; i < tensor.size(); ++i) put_f64(out, tensor[i]);
    }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot open for writing: " + path);
    os.write(out.data(), static_cast<std::streamsize>(out.size()));
    os.flush();
    if (!os) throw CheckpointError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open: " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    const std::string bytes = buf.str();

    ByteReader r{bytes};
    r.need(4, "the magic");
    if (bytes.compare(0, 4, "DTLS") != 0) {
        throw BadMagicError("not a checkpoint file (bad magic): " + path);
    }
    r.at = 4;
    const std::uint32_t version = r.u32("the version field");
    if (version != kCheckpointVersion) {
        throw VersionError("checkpoint has version " + std::to_string(version) +
                           "; this build reads version " +
                           std::to_string(kCheckpointVersion));
    }
    Checkpoint ck;
    ck.step = r.u64("the step counter");
    const std::uint64_t cfg_len = r.u64("the config length");
    ck.config_json = r.bytes(cfg_len, "the config snapshot");
    const std::uint64_t count = r.u64("the tensor count");
    if (count > (1ull << 20)) {
        throw CheckpointError("corrupt checkpoint: absurd tensor count");
    }
    ck.tensors.reserve(count);
    for (std::uint64_t t = 0; t < count; ++t) {
        const std::uint64_t name_len = r.u64("a tensor name length");
        if (name_len > (1ull << 16)) {
            throw CheckpointError("corrupt checkpoint: absurd name length");
        }
        std::string name = r.bytes(name_len, "a tensor name");
        const std::uint64_t rank = r.u64("a tensor rank");
        if (rank > 8) throw CheckpointError("corrupt checkpoint: absurd tensor rank");
        std::vector<std::size_t> dims(rank);
        std::uint64_t total = 1;
        for (std::uint64_t i = 0; i < rank; ++i) {
            dims[i] = r.u64("a tensor dimension");
            if (dims[i] > (1ull << 32) || total > (1ull << 32)) {
                throw CheckpointError("corrupt checkpoint: absurd tensor size");
            }
            total *= dims[i];
        }
        if (total > (1ull << 32)) {
            throw CheckpointError("corrupt checkpoint: absurd tensor size");
        }
        Tensor tensor(dims);
        r.need(static_cast<std::size_t>(total) * 8, "tensor values");
        for (std::uint64_t i = 0; i < total; ++i) tensor[i] = r.f64("tensor values");
        ck.tensors.emplace_back(std::move(name), std::move(tensor));
    }
    if (r.at != bytes.size()) {
        throw CheckpointError("corrupt checkpoint: trailing bytes after the last tensor");
    }
    return ck;
}

void load_into(LineDetector& model, const Checkpoint& ck) {
    std::size_t loaded = 0;
    for (const auto& [name, tensor] : ck.tensors) {
        Parameter* p = model.store.find(name);
        if (p == nullptr) {
            throw CheckpointError("checkpoint names unknown parameter \"" + name + "\"");
        }
        if (p->value.shape() != tensor.shape()) {
            throw CheckpointError("checkpoint tensor \"" + name + "\" has the wrong shape");
        }
        p->value = tensor;
        ++loaded;
    }
    if (loaded != model.store.count()) {
        throw CheckpointError("checkpoint is missing parameters (" +
                              std::to_string(loaded) + " of " +
                              std::to_string(model.store.count()) + ")");
    }
}

std::unique_ptr<LineDetector> detector_from_checkpoint(const Checkpoint& ck,
                                                       TrainConfig* out_cfg) {
    TrainConfig cfg = train_config_from_json(ck.config_json);
    auto model = std::make_unique<LineDetector>(cfg);
    load_into(*model, ck);
    if (out_cfg) *out_cfg = cfg;
    return model;
}

// ---------------------------------------------------------------------------
// Training and evaluation
// ---------------------------------------------------------------------------

std::string train_log_to_json(const TrainLogEntry& e) {
    ordered_json j;
    j["step"] = e.step;
    j["loss"] = e.loss;
    j["loss_class"] = e.loss_class;
    j["loss_line"] = e.loss_line;
    j["loss_dn"] = e.loss_dn;
    return j.dump();
}

TrainLogEntry train_log_from_json(const std::string& line) {
    const json j = parse_json_or_throw(line, "loss log line");
    TrainLogEntry e;
    e.step = as_u64(j.at("step"), "step");
    e.loss = as_f64(j.at("loss"), "loss");
    e.loss_class = as_f64(j.at("loss_class"), "loss_class");
    e.loss_line = as_f64(j.at("loss_line"), "loss_line");
    e.loss_dn = as_f64(j.at("loss_dn"), "loss_dn");
    return e;
}

double lr_at_epoch(double base_lr, const TrainConfig& cfg, std::size_t epoch) {
    return epoch >= cfg.lr_drop_epoch ? 0.1 * base_lr : base_lr;
}

TrainResult train_loop(const TrainConfig& cfg,
                       const std::vector<SyntheticScene>& data,
                       std::ostream* log_stream, std::size_t step_limit) {
    cfg.validate();
    if (data.empty()) throw std::invalid_argument("train_loop: no training scenes");

    LineDetector model(cfg);
    for (const SyntheticScene& s : data) {
        check_trainable_image(s.image, model, "train_loop");
    }

    // The backbone trains at its own reduced rate; everything else at lr.
    std::vector<Parameter*> backbone_params = model.backbone.params();
    const std::set<Parameter*> backbone_set(backbone_params.begin(),
                                            backbone_params.end());
    std::vector<Parameter*> main_params;
    for (Parameter* p : model.store.all()) {
        if (!backbone_set.contains(p)) main_params.push_back(p);
    }
    AdamWConfig opt_cfg;
    opt_cfg.lr = cfg.lr;
    opt_cfg.weight_decay = cfg.weight_decay;
    AdamW opt_main(std::move(main_params), opt_cfg);
    opt_cfg.lr = cfg.backbone_lr;
    AdamW opt_backbone(std::move(backbone_params), opt_cfg);

    Rng rng = Rng(cfg.seed).fork(0x74726e); // training stream, distinct from init
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    const std::size_t steps_per_epoch =
        (data.size() + cfg.batch_size - 1) / cfg.batch_size;
    std::size_t total_steps = cfg.epochs * steps_per_epoch;
    if (step_limit != 0) total_steps = std::min(total_steps, step_limit);

    TrainResult result;
    result.log.reserve(total_steps);
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs && step < total_steps; ++epoch) {
        opt_main.config().lr = lr_at_epoch(cfg.lr, cfg, epoch);
        opt_backbone.config().lr = lr_at_epoch(cfg.backbone_lr, cfg, epoch);
        for (std::size_t i = 0; i + 1 < order.size(); ++i) {  // Fisher-Yates
            const std::size_t j = static_cast<std::size_t>(
                rng.uniform_int(static_cast<std::int64_t>(i),
                                static_cast<std::int64_t>(order.size() - 1)));
            std::swap(order[i], order[j]);
        }
        for (std::size_t at = 0; at < order.size() && step < total_steps;
             at += cfg.batch_size) {
            const std::size_t batch_end = std::min(order.size(), at + cfg.batch_size);
            const double inv = 1.0 / static_cast<double>(batch_end - at);

            ag::Tape tape;
            ag::Var batch_total;
            TrainLogEntry entry;
            bool first = true;
            for (std::size_t b = at; b < batch_end; ++b) {
                const SyntheticScene& scene = data[order[b]];
                DenoisingBatch dn_batch;
                const DenoisingBatch* dn = nullptr;
                if (cfg.lcdn_enabled && cfg.dn.dn_number > 0 && !scene.gt.empty()) {
                    dn_batch = apply_label_noise(
                        generate_denoising_batch(scene.gt, cfg.dn,
                                                 cfg.model.query_count, rng),
                        cfg.dn.label_noise_ratio, rng);
                    dn = &dn_batch;
                }
                ForwardPass fwd = run_detector(tape, model, scene.image, dn);
                ImageLoss il = image_loss(tape, fwd, dn, scene.gt, cfg.weights,
                                          cfg.model.aux_losses);
                entry.loss_class += il.loss_class * inv;
                entry.loss_line += il.loss_line * inv;
                entry.loss_dn += il.loss_dn * inv;
                batch_total = first ? il.total : ag::add(batch_total, il.total);
                first = false;
            }
            batch_total = ag::scale(batch_total, inv);

            entry.step = step + 1;
            entry.loss = tape.value(batch_total)[0];
            if (!std::isfinite(entry.loss) || !std::isfinite(entry.loss_class) ||
                !std::isfinite(entry.loss_line) || !std::isfinite(entry.loss_dn)) {
                std::ostringstream msg;
                msg << "training aborted at step " << entry.step << " (epoch "
                    << epoch << "): non-finite loss"
                    << " total=" << entry.loss << " class=" << entry.loss_class
                    << " line=" << entry.loss_line << " dn=" << entry.loss_dn
                    << " scenes=[";
                for (std::size_t b = at; b < batch_end; ++b) {
                    msg << (b > at ? " " : "") << order[b];
                }
                msg << "]";
                throw std::runtime_error(msg.str());
            }

            tape.backward(batch_total);
            opt_main.step();
            opt_backbone.step();
            ++step;

            result.log.push_back(entry);
            if (log_stream) *log_stream << train_log_to_json(entry) << "\n";
        }
    }
    result.checkpoint = checkpoint_from_model(model, cfg, step);
    return result;
}

std::vector<Detection> infer_image(const LineDetector& model, const Tensor& image) {
    ag::Tape tape;
    ForwardPass fwd = run_detector(tape, model, image);
    return detections_from_heads(tape, fwd.match_heads.back());
}

MetricReport evaluate_model(const Checkpoint& ck,
                            const std::vector<SyntheticScene>& data,
                            const std::vector<int>& taus, std::size_t raster) {
    std::unique_ptr<LineDetector> model = detector_from_checkpoint(ck);
    std::vector<ImageEval> evals;
    evals.reserve(data.size());
    for (const SyntheticScene& scene : data) {
        evals.push_back({infer_image(*model, scene.image), scene.gt});
    }
    return evaluate_dataset(evals, taus, raster);
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

void write_pgm(const std::string& path, const Tensor& image) {
    if (image.rank() != 3 || image.dim(2) != 1) {
        throw std::invalid_argument("write_pgm: image must be [h, w, 1]");
    }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("write_pgm: cannot open " + path);
    os << "P5\n" << image.dim(1) << " " << image.dim(0) << "\n255\n";
    for (std::size_t i = 0; i < image.size(); ++i) {
        const double v = std::clamp(image[i], 0.0, 1.0);
        os.put(static_cast<char>(std::lround(v * 255.0)));
    }
    os.flush();
    if (!os) throw std::runtime_error("write_pgm: write failed: " + path);
}

Tensor read_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("read_pgm: cannot open " + path);

    auto next_token = [&is, &path]() -> std::string {
        std::string tok;
        int c = is.get();
        while (c != EOF) {
            if (c == '#') {  // comment to end of line
                while (c != EOF && c != '\n') c = is.get();
            } else if (std::isspace(c)) {
                c = is.get();
            } else {
                break;
            }
        }
        while (c != EOF && !std::isspace(c)) {
            tok.push_back(static_cast<char>(c));
            c = is.get();
        }
        if (tok.empty()) throw std::runtime_error("read_pgm: unexpected end of header: " + path);
        return tok;
    };

    if (next_token() != "P5") {
        throw std::runtime_error("read_pgm: not a binary PGM: " + path);
    }
    const std::size_t w = std::stoul(next_token());
    const std::size_t h = std::stoul(next_token());
    const std::size_t maxval = std::stoul(next_token());
    if (w == 0 || h == 0 || maxval != 255) {
        throw std::runtime_error("read_pgm: unsupported PGM header: " + path);
    }
    Tensor image({h, w, 1});
    for (std::size_t i = 0; i < image.size(); ++i) {
        const int c = is.get();
        if (c == EOF) throw std::runtime_error("read_pgm: truncated pixels: " + path);
        image[i] = static_cast<double>(c) / 255.0;
    }
    return image;
}

void write_dataset(const std::string& dir,
                   const std::vector<SyntheticScene>& scenes) {
    std::filesystem::create_directories(dir);
    ordered_json records = ordered_json::array();
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        const SyntheticScene& s = scenes[i];
        char name[32];
        std::snprintf(name, sizeof name, "scene_%04zu.pgm", i);
        write_pgm(dir + "/" + name, s.image);
        const double w = static_cast<double>(s.image.dim(1));
        const double h = static_cast<double>(s.image.dim(0));
        ordered_json rec;
        rec["filename"] = name;
        rec["width"] = s.image.dim(1);
        rec["height"] = s.image.dim(0);
        rec["seed"] = s.seed;
        ordered_json lines = ordered_json::array();
        for (const LineSegment& l : s.gt) {
            lines.push_back({l.x1 * w, l.y1 * h, l.x2 * w, l.y2 * h});
        }
        rec["lines"] = lines;
        records.push_back(rec);
    }
    std::ofstream os(dir + "/annotations.json", std::ios::trunc);
    if (!os) throw std::runtime_error("write_dataset: cannot open " + dir + "/annotations.json");
    os << records.dump(2) << "\n";
    if (!os) throw std::runtime_error("write_dataset: write failed");
}

std::vector<SyntheticScene> load_dataset(const std::string& dir) {
    std::vector<WireframeRecord> records = wireframe_ingest(dir + "/annotations.json");
    std::vector<SyntheticScene> scenes;
    scenes.reserve(records.size());
    for (const WireframeRecord& rec : records) {
        SyntheticScene s;
        s.image = read_pgm(dir + "/" + rec.filename);
        s.gt = rec.gt;
        scenes.push_back(std::move(s));
    }
    return scenes;
}

// ---------------------------------------------------------------------------
// Ablation driver
// ---------------------------------------------------------------------------

namespace {

AblationDataSpec parse_data_spec(const json& j, AblationDataSpec base) {
    if (!j.is_object()) throw std::runtime_error("ablation: \"data\" must be an object");
    for (const auto& [key, val] : j.items()) {
        if (key == "seed") base.seed = as_u64(val, "data.seed");
        else if (key == "train_count") base.train_count = as_u64(val, "data.train_count");
        else if (key == "eval_count") base.eval_count = as_u64(val, "data.eval_count");
        else if (key == "size") base.size = as_u64(val, "data.size");
        else bad_key("data", key);
    }
    return base;
}

void deep_merge(json& base, const json& over) {
    if (!base.is_object() || !over.is_object()) {
        base = over;
        return;
    }
    for (const auto& [key, val] : over.items()) {
        if (base.contains(key)) {
            deep_merge(base[key], val);
        } else {
            base[key] = val;
        }
    }
}

}  // namespace

AblationMatrix ablation_matrix_from_json(const std::string& text) {
    const json root = parse_json_or_throw(text, "ablation matrix");
    if (!root.is_object()) {
        throw std::runtime_error("ablation: top level must be an object");
    }
    AblationDataSpec base_data;
    json base_cfg = json::object();
    std::size_t base_steps = 0;
    const json* cells = nullptr;
    for (const auto& [key, val] : root.items()) {
        if (key == "data") base_data = parse_data_spec(val, base_data);
        else if (key == "base") base_cfg = val;
        else if (key == "steps") base_steps = as_u64(val, "steps");
        else if (key == "cells") cells = &val;
        else bad_key("", key);
    }
    if (cells == nullptr || !cells->is_array() || cells->empty()) {
        throw std::runtime_error("ablation: \"cells\" must be a non-empty array");
    }

    AblationMatrix matrix;
    for (std::size_t i = 0; i < cells->size(); ++i) {
        const json& c = (*cells)[i];
        const std::string at = "cell " + std::to_string(i);
        if (!c.is_object()) throw std::runtime_error("ablation: " + at + " must be an object");
        AblationCell cell;
        cell.data = base_data;
        cell.steps = base_steps;
        json merged = base_cfg;
        for (const auto& [key, val] : c.items()) {
            if (key == "name") {
                if (!val.is_string() || val.get<std::string>().empty()) {
                    throw std::runtime_error("ablation: " + at + ": \"name\" must be a non-empty string");
                }
                cell.name = val.get<std::string>();
            } else if (key == "overrides") {
                if (!val.is_object()) {
                    throw std::runtime_error("ablation: " + at + ": \"overrides\" must be an object");
                }
                deep_merge(merged, val);
            } else if (key == "data") {
                cell.data = parse_data_spec(val, cell.data);
            } else if (key == "steps") {
                cell.steps = as_u64(val, "steps");
            } else {
                bad_key(at, key);
            }
        }
        if (cell.name.empty()) {
            throw std::runtime_error("ablation: " + at + ": missing \"name\"");
        }
        cell.config = parse_train_config(merged);
        cell.config.validate();
        matrix.cells.push_back(std::move(cell));
    }
    return matrix;
}

std::vector<AblationOutcome> run_ablation(const AblationMatrix& matrix,
                                          std::ostream* progress) {
    std::vector<AblationOutcome> outcomes;
    outcomes.reserve(matrix.cells.size());
    for (const AblationCell& cell : matrix.cells) {
        if (progress) {
            *progress << "[" << cell.name << "] generating "
                      << cell.data.train_count << "+" << cell.data.eval_count
                      << " scenes at " << cell.data.size << "px\n";
        }
        const std::vector<SyntheticScene> train_data =
            synth_generate(cell.data.seed, cell.data.train_count, cell.data.size);
        const std::vector<SyntheticScene> eval_data = synth_generate(
            splitmix64(cell.data.seed ^ 0x6865'6c64'6f75'74ull),  // held-out stream
            cell.data.eval_count, cell.data.size);
        if (progress) {
            *progress << "[" << cell.name << "] training"
                      << (cell.steps ? " (" + std::to_string(cell.steps) + " steps)" : "")
                      << "\n";
        }
        TrainResult tr = train_loop(cell.config, train_data, nullptr, cell.steps);
        if (progress) {
            *progress << "[" << cell.name << "] evaluating\n";
        }
        outcomes.push_back({cell.name, evaluate_model(tr.checkpoint, eval_data)});
    }
    return outcomes;
}

}  // namespace dtlsd

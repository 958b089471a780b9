// Python bindings for the line-segment detection core.
//
// Exposes the main operations: synthetic scene generation, annotation
// parsing, Hungarian matching, the loss building blocks, denoising-query
// generation, structural/heatmap metrics, and the train/eval/infer drivers.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dtlsd/attention.hpp"
#include "dtlsd/geometry.hpp"
#include "dtlsd/harness.hpp"
#include "dtlsd/lcdn.hpp"
#include "dtlsd/matching_loss.hpp"
#include "dtlsd/metrics.hpp"
#include "dtlsd/rng.hpp"
#include "dtlsd/tensor.hpp"

namespace py = pybind11;
using dtlsd::LineSegment;
using dtlsd::Tensor;

namespace {

py::array_t<double> image_to_numpy(const Tensor& img) {
    // [h, w, 1] -> (h, w)
    py::array_t<double> out({img.dim(0), img.dim(1)});
    std::copy(img.data(), img.data() + img.size(), out.mutable_data());
    return out;
}

Tensor image_from_numpy(const py::array_t<double, py::array::c_style |
                                                       py::array::forcecast>& a) {
    if (a.ndim() != 2) throw std::invalid_argument("image must be a 2D array");
    const std::size_t h = static_cast<std::size_t>(a.shape(0));
    const std::size_t w = static_cast<std::size_t>(a.shape(1));
    Tensor img({h, w, 1});
    std::copy(a.data(), a.data() + h * w, img.data());
    return img;
}

py::array_t<double> lines_to_numpy(const std::vector<LineSegment>& lines) {
    py::array_t<double> out({lines.size(), std::size_t{4}});
    double* p = out.mutable_data();
    for (const LineSegment& l : lines) {
        *p++ = l.x1;
        *p++ = l.y1;
        *p++ = l.x2;
        *p++ = l.y2;
    }
    return out;
}

std::vector<LineSegment> lines_from_numpy(
    const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 2 || a.shape(1) != 4) {
        throw std::invalid_argument("lines must be an (n, 4) array");
    }
    std::vector<LineSegment> out;
    out.reserve(static_cast<std::size_t>(a.shape(0)));
    const double* p = a.data();
    for (py::ssize_t i = 0; i < a.shape(0); ++i, p += 4) {
        out.emplace_back(p[0], p[1], p[2], p[3]);
    }
    return out;
}

/// (n, 5) rows of [x1, y1, x2, y2, confidence] -> Detections.
std::vector<dtlsd::Detection> detections_from_numpy(
    const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 2 || a.shape(1) != 5) {
        throw std::invalid_argument("detections must be an (n, 5) array");
    }
    std::vector<dtlsd::Detection> out;
    out.reserve(static_cast<std::size_t>(a.shape(0)));
    const double* p = a.data();
    for (py::ssize_t i = 0; i < a.shape(0); ++i, p += 5) {
        out.push_back({LineSegment(p[0], p[1], p[2], p[3]), p[4]});
    }
    return out;
}

using EvalPair = std::pair<
    py::array_t<double, py::array::c_style | py::array::forcecast>,
    py::array_t<double, py::array::c_style | py::array::forcecast>>;

std::vector<dtlsd::ImageEval> evals_from_pairs(const std::vector<EvalPair>& images) {
    std::vector<dtlsd::ImageEval> evals;
    evals.reserve(images.size());
    for (const EvalPair& pair : images) {
        evals.push_back(
            {detections_from_numpy(pair.first), lines_from_numpy(pair.second)});
    }
    return evals;
}

py::dict report_to_dict(const dtlsd::MetricReport& report) {
    py::dict sap, sf;
    for (const auto& [tau, v] : report.sap) sap[py::int_(tau)] = v;
    for (const auto& [tau, v] : report.sf) sf[py::int_(tau)] = v;
    py::dict out;
    out["sAP"] = sap;
    out["sF"] = sf;
    out["APH"] = report.aph;
    out["FH"] = report.fh;
    return out;
}

py::list log_to_list(const std::vector<dtlsd::TrainLogEntry>& log) {
    py::list out;
    for (const dtlsd::TrainLogEntry& e : log) {
        py::dict d;
        d["step"] = e.step;
        d["loss"] = e.loss;
        d["loss_class"] = e.loss_class;
        d["loss_line"] = e.loss_line;
        d["loss_dn"] = e.loss_dn;
        out.append(d);
    }
    return out;
}

}  // namespace

PYBIND11_MODULE(_dtlsd, m) {
    m.doc() = "line segment detection core";
    m.attr("__version__") = "0.1.0";

    // -- synthesis and ingestion --------------------------------------------

    m.def(
        "synth_generate",
        [](std::uint64_t seed, std::size_t count, std::size_t size) {
            py::list out;
            for (const dtlsd::SyntheticScene& s :
                 dtlsd::synth_generate(seed, count, size)) {
                py::dict d;
                d["image"] = image_to_numpy(s.image);
                d["lines"] = lines_to_numpy(s.gt);
                d["seed"] = s.seed;
                out.append(d);
            }
            return out;
        },
        py::arg("seed"), py::arg("count"), py::arg("size") = 64,
        "Render random line scenes; each dict has image (h, w), lines (n, 4) "
        "in normalized coordinates, and the per-scene seed.");

    m.def(
        "wireframe_parse",
        [](const std::string& text) {
            std::vector<std::string> warnings;
            py::list out;
            for (const dtlsd::WireframeRecord& r :
                 dtlsd::wireframe_parse(text, &warnings)) {
                py::dict d;
                d["filename"] = r.filename;
                d["width"] = r.width;
                d["height"] = r.height;
                d["lines"] = lines_to_numpy(r.gt);
                out.append(d);
            }
            return py::make_tuple(out, warnings);
        },
        py::arg("text"),
        "Parse annotation JSON; returns (records, warnings) with lines "
        "normalized, clamped, and canonicalized.");

    m.def(
        "write_dataset",
        [](const std::string& dir, std::uint64_t seed, std::size_t count,
           std::size_t size) {
            dtlsd::write_dataset(dir, dtlsd::synth_generate(seed, count, size));
        },
        py::arg("dir"), py::arg("seed"), py::arg("count"),
        py::arg("size") = 64, "Generate scenes and write them as a dataset directory.");

    // -- geometry and matching ----------------------------------------------

    m.def(
        "canonicalize",
        [](double x1, double y1, double x2, double y2) {
            const LineSegment l = dtlsd::canonicalize(LineSegment(x1, y1, x2, y2));
            return py::make_tuple(l.x1, l.y1, l.x2, l.y2);
        },
        "Endpoints sorted lexicographically (x first, then y).");

    m.def(
        "min_sq_endpoint_dist",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& b,
           double scale) {
            const auto la = lines_from_numpy(a);
            const auto lb = lines_from_numpy(b);
            if (la.size() != 1 || lb.size() != 1) {
                throw std::invalid_argument("expects two (1, 4) arrays");
            }
            return dtlsd::min_sq_endpoint_dist(la[0], lb[0], scale);
        },
        py::arg("a"), py::arg("b"), py::arg("scale") = 128.0,
        "Structural distance between two segments at the given grid scale.");

    m.def(
        "hungarian",
        [](const py::array_t<double, py::array::c_style |
                                         py::array::forcecast>& cost) {
            if (cost.ndim() != 2) {
                throw std::invalid_argument("cost must be a 2D array");
            }
            Tensor t({static_cast<std::size_t>(cost.shape(0)),
                      static_cast<std::size_t>(cost.shape(1))});
            std::copy(cost.data(), cost.data() + t.size(), t.data());
            const dtlsd::Assignment a = dtlsd::hungarian_assign(t);
            py::dict d;
            d["gt_for_pred"] = a.gt_for_pred;
            d["pred_for_gt"] = a.pred_for_gt;
            d["total_cost"] = a.total_cost;
            return d;
        },
        py::arg("cost"),
        "Minimum-cost injective assignment covering every column.");

    m.def("focal_loss", &dtlsd::focal_loss, py::arg("p"), py::arg("is_line"),
          "Class loss of one prediction.");

    m.def(
        "line_l1",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& pred,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& gt,
           bool matched) {
            const auto lp = lines_from_numpy(pred);
            const auto lg = lines_from_numpy(gt);
            if (lp.size() != 1 || lg.size() != 1) {
                throw std::invalid_argument("expects two (1, 4) arrays");
            }
            return dtlsd::line_l1_loss(lp[0], lg[0], matched);
        },
        py::arg("pred"), py::arg("gt"), py::arg("matched") = true,
        "Endpoint regression loss (zero when unmatched).");

    // -- denoising queries ---------------------------------------------------

    m.def(
        "denoising_batch",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& gt,
           std::uint64_t seed, std::size_t dn_number, double label_noise_ratio,
           double line_scale, double line_rotation_deg, std::size_t n_match) {
            dtlsd::DenoisingConfig cfg;
            cfg.dn_number = dn_number;
            cfg.label_noise_ratio = label_noise_ratio;
            cfg.line_scale = line_scale;
            cfg.line_rotation_deg = line_rotation_deg;
            cfg.validate();
            dtlsd::Rng rng(seed);
            const dtlsd::DenoisingBatch batch = dtlsd::apply_label_noise(
                dtlsd::generate_denoising_batch(lines_from_numpy(gt), cfg,
                                                n_match, rng),
                cfg.label_noise_ratio, rng);

            std::vector<LineSegment> anchors;
            py::list records;
            for (std::size_t i = 0; i < batch.queries.size(); ++i) {
                anchors.push_back(batch.queries[i].anchor);
                const dtlsd::DenoisingRecord& r = batch.records[i];
                py::dict rec;
                rec["gt_index"] = r.gt_index;
                rec["positive"] = r.is_positive;
                rec["scale_factor"] = r.scale_factor;
                rec["rotation"] = r.rotation;
                rec["label_is_line"] = r.label_is_line;
                rec["label_flipped"] = r.label_flipped;
                records.append(rec);
            }
            const std::size_t total = batch.mask.total;
            py::array_t<std::uint8_t> mask({total, total});
            std::copy(batch.mask.blocked.begin(), batch.mask.blocked.end(),
                      mask.mutable_data());
            py::dict d;
            d["anchors"] = lines_to_numpy(anchors);
            d["records"] = records;
            d["group_count"] = batch.group_count;
            d["group_size"] = batch.group_size;
            d["mask"] = mask;
            return d;
        },
        py::arg("gt"), py::arg("seed") = 0, py::arg("dn_number") = 100,
        py::arg("label_noise_ratio") = 0.5, py::arg("line_scale") = 1.0,
        py::arg("line_rotation_deg") = 7.0, py::arg("n_match") = 50,
        "Contrastive denoising queries for one image, with the group mask "
        "covering dn_total + n_match rows.");

    // -- metrics --------------------------------------------------------------

    m.def(
        "structural_ap",
        [](const std::vector<EvalPair>& images, double tau, double scale) {
            return dtlsd::structural_ap(evals_from_pairs(images), tau, scale);
        },
        py::arg("images"), py::arg("tau"), py::arg("scale") = 128.0,
        "sAP over (detections (n, 5), gt (m, 4)) pairs.");

    m.def(
        "evaluate",
        [](const std::vector<EvalPair>& images, const std::vector<int>& taus,
           std::size_t raster) {
            return report_to_dict(
                dtlsd::evaluate_dataset(evals_from_pairs(images), taus, raster));
        },
        py::arg("images"), py::arg("taus") = std::vector<int>{5, 10, 15},
        py::arg("raster") = 128,
        "Full metric report over (detections, gt) pairs.");

    // -- training, inference, checkpoints -------------------------------------

    m.def(
        "train",
        [](const std::string& config_json, const std::string& data_dir,
           const std::string& out_ckpt, std::size_t steps) {
            const dtlsd::TrainConfig cfg =
                dtlsd::train_config_from_json(config_json);
            const auto data = dtlsd::load_dataset(data_dir);
            const dtlsd::TrainResult result =
                dtlsd::train_loop(cfg, data, nullptr, steps);
            dtlsd::save_checkpoint(result.checkpoint, out_ckpt);
            return log_to_list(result.log);
        },
        py::arg("config_json"), py::arg("data_dir"), py::arg("out_ckpt"),
        py::arg("steps") = 0,
        "Train on a dataset directory, write the checkpoint, return the loss "
        "log.");

    m.def(
        "evaluate_checkpoint",
        [](const std::string& ckpt_path, const std::string& data_dir,
           const std::vector<int>& taus) {
            return report_to_dict(dtlsd::evaluate_model(
                dtlsd::load_checkpoint(ckpt_path), dtlsd::load_dataset(data_dir),
                taus));
        },
        py::arg("ckpt_path"), py::arg("data_dir"),
        py::arg("taus") = std::vector<int>{5, 10, 15},
        "Score a saved checkpoint against a dataset directory.");

    m.def(
        "infer",
        [](const std::string& ckpt_path,
           const py::array_t<double, py::array::c_style | py::array::forcecast>&
               image) {
            const auto model =
                dtlsd::detector_from_checkpoint(dtlsd::load_checkpoint(ckpt_path));
            const auto dets =
                dtlsd::infer_image(*model, image_from_numpy(image));
            py::array_t<double> out({dets.size(), std::size_t{5}});
            double* p = out.mutable_data();
            for (const dtlsd::Detection& d : dets) {
                *p++ = d.line.x1;
                *p++ = d.line.y1;
                *p++ = d.line.x2;
                *p++ = d.line.y2;
                *p++ = d.confidence;
            }
            return out;
        },
        py::arg("ckpt_path"), py::arg("image"),
        "Detections of one grayscale image as (n, 5) rows "
        "[x1, y1, x2, y2, confidence].");

    m.def(
        "checkpoint_meta",
        [](const std::string& path) {
            const dtlsd::Checkpoint ck = dtlsd::load_checkpoint(path);
            py::list tensors;
            for (const auto& [name, tensor] : ck.tensors) {
                tensors.append(py::make_tuple(name, tensor.shape()));
            }
            py::dict d;
            d["step"] = ck.step;
            d["config"] = ck.config_json;
            d["tensors"] = tensors;
            return d;
        },
        py::arg("path"), "Step, config JSON, and tensor names/shapes.");

    m.def("default_config", [] { return dtlsd::train_config_to_json(dtlsd::TrainConfig()); },
          "Full-scale training configuration as JSON.");
    m.def("toy_config", [] { return dtlsd::train_config_to_json(dtlsd::TrainConfig::toy()); },
          "Desk-scale training configuration as JSON.");

    // -- complexity probe ------------------------------------------------------

    m.def(
        "complexity_slopes",
        [](const std::vector<std::size_t>& tokens, std::size_t d, int repeats,
           std::uint64_t seed) {
            dtlsd::Rng rng(seed);
            py::dict out;
            for (const char* mechanism : {"global", "deformable"}) {
                out[mechanism] =
                    dtlsd::complexity_probe(mechanism, tokens, d, repeats, rng)
                        .slope;
            }
            return out;
        },
        py::arg("tokens") = std::vector<std::size_t>{256, 1024, 4096},
        py::arg("d") = 32, py::arg("repeats") = 5, py::arg("seed") = 0,
        "Log-log runtime scaling slope per attention mechanism.");
}

// Command-line front end for the line-segment detection pipeline.
//
// Subcommands:
//   synth-gen   write a synthetic dataset of line-segment scenes
//   train       fit a model on a dataset directory
//   eval        score a checkpoint against a dataset split
//   lcdn-dump   emit denoising groups for one scene as JSON
//   bench-attn  attention complexity probe; writes a CSV of timings
//   ablate      train/eval matrix driver; one metric report per cell

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dtlsd/attention.hpp"
#include "dtlsd/harness.hpp"
#include "dtlsd/lcdn.hpp"
#include "dtlsd/metrics.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return buf.str();
}

void spit(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os << text;
    if (!os) throw std::runtime_error("write failed: " + path);
}

/// "S1-S5" -> {1, 2, 3, 4, 5}. Stages must satisfy 0 <= first <= last <= 5.
std::vector<int> parse_level_range(const std::string& text) {
    const auto fail = [&text]() -> std::vector<int> {
        throw std::runtime_error("--levels expects a range like S2-S5, got \"" +
                                 text + "\"");
    };
    if (text.size() != 5 || text[0] != 'S' || text[2] != '-' || text[3] != 'S' ||
        !std::isdigit(static_cast<unsigned char>(text[1])) ||
        !std::isdigit(static_cast<unsigned char>(text[4]))) {
        return fail();
    }
    const int lo = text[1] - '0';
    const int hi = text[4] - '0';
    if (lo > hi || hi > 5) return fail();
    std::vector<int> levels;
    for (int l = lo; l <= hi; ++l) levels.push_back(l);
    return levels;
}

int run_synth_gen(std::uint64_t seed, std::size_t count, std::size_t size,
                  const std::string& out_dir) {
    const auto scenes = dtlsd::synth_generate(seed, count, size);
    dtlsd::write_dataset(out_dir, scenes);
    std::size_t total_lines = 0;
    for (const auto& s : scenes) total_lines += s.gt.size();
    std::cerr << "wrote " << scenes.size() << " scenes (" << total_lines
              << " lines) to " << out_dir << "\n";
    return 0;
}

int run_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_path, bool no_lcdn,
              const std::string& levels, std::size_t steps,
              const std::string& log_path) {
    dtlsd::TrainConfig cfg = dtlsd::train_config_from_json(slurp(config_path));
    if (no_lcdn) cfg.lcdn_enabled = false;
    if (!levels.empty()) cfg.model.levels = parse_level_range(levels);
    cfg.validate();

    const auto data = dtlsd::load_dataset(data_dir);
    std::cerr << "training on " << data.size() << " scenes\n";

    std::ofstream log_file;
    std::ostream* log = &std::cout;
    if (!log_path.empty()) {
        log_file.open(log_path, std::ios::trunc);
        if (!log_file) throw std::runtime_error("cannot open log file: " + log_path);
        log = &log_file;
    }
    const dtlsd::TrainResult result = dtlsd::train_loop(cfg, data, log, steps);
    dtlsd::save_checkpoint(result.checkpoint, out_path);
    std::cerr << "saved checkpoint after " << result.checkpoint.step
              << " steps to " << out_path << " (final loss "
              << result.log.back().loss << ")\n";
    return 0;
}

int run_eval(const std::string& ckpt_path, const std::string& data_dir,
             const std::vector<int>& thresholds, const std::string& report_path,
             const std::string& pr_csv_path) {
    const dtlsd::Checkpoint ck = dtlsd::load_checkpoint(ckpt_path);
    const auto data = dtlsd::load_dataset(data_dir);
    const dtlsd::MetricReport report =
        dtlsd::evaluate_model(ck, data, thresholds);
    const std::string json = dtlsd::report_to_json(report);
    if (!report_path.empty()) spit(report_path, json + "\n");
    std::cout << json << "\n";

    if (!pr_csv_path.empty()) {
        const auto model = dtlsd::detector_from_checkpoint(ck);
        std::vector<dtlsd::ImageEval> evals;
        evals.reserve(data.size());
        for (const auto& scene : data) {
            evals.push_back({dtlsd::infer_image(*model, scene.image), scene.gt});
        }
        std::ostringstream csv;
        csv << "tau,threshold,precision,recall\n";
        for (int tau : thresholds) {
            const dtlsd::PRCurve curve =
                dtlsd::structural_pr(evals, static_cast<double>(tau));
            for (const dtlsd::PRPoint& pt : curve.points) {
                csv << tau << "," << pt.threshold << "," << pt.precision << ","
                    << pt.recall << "\n";
            }
        }
        spit(pr_csv_path, csv.str());
        std::cerr << "wrote PR points to " << pr_csv_path << "\n";
    }
    return 0;
}

int run_lcdn_dump(std::uint64_t seed, const std::string& gt_path,
                  const std::string& out_path, const dtlsd::DenoisingConfig& dn,
                  std::size_t n_match) {
    const auto records = dtlsd::wireframe_ingest(gt_path);
    if (records.empty()) throw std::runtime_error("no records in " + gt_path);
    const std::vector<dtlsd::LineSegment>& gt = records.front().gt;

    dtlsd::Rng rng(seed);
    const dtlsd::DenoisingBatch batch = dtlsd::apply_label_noise(
        dtlsd::generate_denoising_batch(gt, dn, n_match, rng),
        dn.label_noise_ratio, rng);

    ordered_json out;
    out["seed"] = seed;
    out["source"] = records.front().filename;
    out["gt_count"] = gt.size();
    ordered_json cfg;
    cfg["dn_number"] = dn.dn_number;
    cfg["label_noise_ratio"] = dn.label_noise_ratio;
    cfg["line_scale"] = dn.line_scale;
    cfg["line_rotation_deg"] = dn.line_rotation_deg;
    out["config"] = cfg;
    out["group_count"] = batch.group_count;
    out["group_size"] = batch.group_size;

    ordered_json queries = ordered_json::array();
    for (std::size_t i = 0; i < batch.queries.size(); ++i) {
        const dtlsd::DenoisingRecord& rec = batch.records[i];
        const dtlsd::LineSegment& a = batch.queries[i].anchor;
        ordered_json q;
        q["index"] = i;
        q["gt_index"] = rec.gt_index;
        q["role"] = rec.is_positive ? "positive" : "negative";
        q["scale_factor"] = rec.scale_factor;
        q["rotation_rad"] = rec.rotation;
        q["rotation_deg"] = rec.rotation * 180.0 / std::numbers::pi;
        q["label"] = rec.label_is_line ? "line" : "no-line";
        q["label_flipped"] = rec.label_flipped;
        q["anchor"] = {a.x1, a.y1, a.x2, a.y2};
        queries.push_back(q);
    }
    out["queries"] = queries;

    ordered_json mask;
    mask["total"] = batch.mask.total;
    mask["dn_total"] = batch.mask.dn_total;
    mask["group_size"] = batch.mask.group_size;
    ordered_json rows = ordered_json::array();
    for (std::size_t r = 0; r < batch.mask.total; ++r) {
        std::string row(batch.mask.total, '0');
        for (std::size_t c = 0; c < batch.mask.total; ++c) {
            if (batch.mask.is_blocked(r, c)) row[c] = '1';
        }
        rows.push_back(row);
    }
    mask["rows"] = rows;
    out["mask"] = mask;

    spit(out_path, out.dump(2) + "\n");
    std::cerr << "wrote " << batch.queries.size() << " denoising queries in "
              << batch.group_count << " groups to " << out_path << "\n";
    return 0;
}

int run_bench_attn(const std::vector<std::size_t>& tokens, std::size_t d,
                   int repeats, std::uint64_t seed,
                   const std::string& report_path) {
    dtlsd::Rng rng(seed);
    std::vector<dtlsd::ProbeResult> results;
    for (const char* mechanism : {"global", "deformable"}) {
        std::cerr << "probing " << mechanism << " attention...\n";
        results.push_back(
            dtlsd::complexity_probe(mechanism, tokens, d, repeats, rng));
        std::cout << mechanism << " log-log slope: " << results.back().slope
                  << "\n";
    }
    std::ofstream os(report_path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for writing: " + report_path);
    dtlsd::write_probe_csv(os, results);
    std::cerr << "wrote timing CSV to " << report_path << "\n";
    return 0;
}

int run_ablate(const std::string& matrix_path, const std::string& out_dir) {
    const dtlsd::AblationMatrix matrix =
        dtlsd::ablation_matrix_from_json(slurp(matrix_path));
    const auto outcomes = dtlsd::run_ablation(matrix, &std::cerr);

    fs::create_directories(out_dir);
    ordered_json summary = ordered_json::array();
    for (const dtlsd::AblationOutcome& o : outcomes) {
        std::string stem = o.name;
        for (char& c : stem) {
            if (c == '/' || c == '\\' || c == ' ') c = '_';
        }
        const std::string report = dtlsd::report_to_json(o.report);
        spit(out_dir + "/" + stem + ".json", report + "\n");
        ordered_json entry;
        entry["name"] = o.name;
        entry["report"] = ordered_json::parse(report);
        summary.push_back(entry);
        std::cout << o.name << ": " << report << "\n";
    }
    spit(out_dir + "/summary.json", summary.dump(2) + "\n");
    std::cerr << "wrote " << outcomes.size() << " cell reports to " << out_dir
              << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"line segment detection: synthesis, training, evaluation"};
    app.require_subcommand(1);
    int rc = 0;

    // synth-gen
    auto* synth = app.add_subcommand("synth-gen", "generate a synthetic dataset");
    std::uint64_t sg_seed = 0;
    std::size_t sg_count = 16, sg_size = 64;
    std::string sg_out;
    synth->add_option("--seed", sg_seed, "stream seed");
    synth->add_option("--count", sg_count, "number of scenes");
    synth->add_option("--size", sg_size, "image side (multiple of 64)");
    synth->add_option("--out", sg_out, "output directory")->required();
    synth->callback([&] { rc = run_synth_gen(sg_seed, sg_count, sg_size, sg_out); });

    // train
    auto* train = app.add_subcommand("train", "train a model");
    std::string tr_config, tr_data, tr_out, tr_levels, tr_log;
    bool tr_no_lcdn = false;
    std::size_t tr_steps = 0;
    train->add_option("--config", tr_config, "TrainConfig JSON file")->required();
    train->add_option("--data", tr_data, "dataset directory")->required();
    train->add_option("--out", tr_out, "checkpoint output path")->required();
    train->add_flag("--no-lcdn", tr_no_lcdn, "disable the denoising branch");
    train->add_option("--levels", tr_levels,
                      "pyramid stage range, e.g. S1-S5 or S2-S5");
    train->add_option("--steps", tr_steps, "stop after N steps (0 = all epochs)");
    train->add_option("--log", tr_log, "loss log file (default: stdout)");
    train->callback([&] {
        rc = run_train(tr_config, tr_data, tr_out, tr_no_lcdn, tr_levels,
                       tr_steps, tr_log);
    });

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string ev_ckpt, ev_data, ev_report, ev_pr_csv;
    std::vector<int> ev_thresholds = {5, 10, 15};
    eval->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
    eval->add_option("--data", ev_data, "dataset directory")->required();
    eval->add_option("--thresholds", ev_thresholds, "sAP thresholds")
        ->delimiter(',');
    eval->add_option("--report", ev_report, "metric report JSON output");
    eval->add_option("--pr-csv", ev_pr_csv, "PR curve points CSV output");
    eval->callback([&] {
        rc = run_eval(ev_ckpt, ev_data, ev_thresholds, ev_report, ev_pr_csv);
    });

    // lcdn-dump
    auto* dump = app.add_subcommand("lcdn-dump", "dump denoising groups as JSON");
    std::uint64_t ld_seed = 0;
    std::string ld_gt, ld_out;
    dtlsd::DenoisingConfig ld_dn;
    ld_dn.dn_number = 100;  // desk-scale default; --dn-number restores 300
    std::size_t ld_queries = 50;
    dump->add_option("--seed", ld_seed, "noise stream seed");
    dump->add_option("--gt", ld_gt, "annotation JSON (first record is used)")
        ->required();
    dump->add_option("--out", ld_out, "output JSON path")->required();
    dump->add_option("--dn-number", ld_dn.dn_number, "denoising query budget");
    dump->add_option("--label-noise", ld_dn.label_noise_ratio,
                     "label flip probability");
    dump->add_option("--line-scale", ld_dn.line_scale, "length-factor window s");
    dump->add_option("--rotation", ld_dn.line_rotation_deg,
                     "rotation window tau in degrees");
    dump->add_option("--queries", ld_queries,
                     "matching queries covered by the mask");
    dump->callback(
        [&] { rc = run_lcdn_dump(ld_seed, ld_gt, ld_out, ld_dn, ld_queries); });

    // bench-attn
    auto* bench = app.add_subcommand("bench-attn", "attention timing sweep");
    std::vector<std::size_t> ba_tokens = {256, 1024, 4096};
    std::size_t ba_d = 32;
    int ba_repeats = 20;
    std::uint64_t ba_seed = 0;
    std::string ba_report;
    bench->add_option("--tokens", ba_tokens, "token counts")->delimiter(',');
    bench->add_option("--d", ba_d, "feature dimension");
    bench->add_option("--repeats", ba_repeats, "repeats per point (median)");
    bench->add_option("--seed", ba_seed, "input seed");
    bench->add_option("--report", ba_report, "timing CSV output")->required();
    bench->callback([&] {
        rc = run_bench_attn(ba_tokens, ba_d, ba_repeats, ba_seed, ba_report);
    });

    // ablate
    auto* ablate = app.add_subcommand("ablate", "config-matrix train/eval driver");
    std::string ab_matrix, ab_out;
    ablate->add_option("--matrix", ab_matrix, "matrix JSON file")->required();
    ablate->add_option("--out", ab_out, "report output directory")->required();
    ablate->callback([&] { rc = run_ablate(ab_matrix, ab_out); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return rc;
}

#include "pcda/experiments.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>

#include "pcda/errors.hpp"

namespace pcda {

namespace fs = std::filesystem;
using nlohmann::json;

void prepare_run_dir(const fs::path& dir, const ExperimentConfig& cfg) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create run directory " + dir.string() + ": " + ec.message());
    }
    const fs::path snap = dir / "config.json";
    const json j = cfg.to_json();
    if (fs::exists(snap)) {
        std::ifstream in(snap);
        json old;
        try {
            old = json::parse(in);
        } catch (const json::exception& e) {
            throw FormatError(snap.string() + ": " + e.what());
        }
        if (old != j) {
            throw ConfigError("run directory " + dir.string() +
                              " holds a different config snapshot; use a fresh directory");
        }
        return;
    }
    std::ofstream out(snap);
    if (!out) {
        throw IoError("cannot write " + snap.string());
    }
    out << j.dump(2) << '\n';
}

namespace {

Manifest load_required(const fs::path& p, const char* what) {
    if (p.empty()) {
        throw ConfigError(std::string("config: ") + what + " manifest path is not set");
    }
    Manifest m = load_manifest(p);
    m.validate(true);
    return m;
}

} // namespace

TrainResult run_phase1(const ExperimentConfig& cfg, const fs::path& dir) {
    prepare_run_dir(dir, cfg);
    const Manifest source = load_required(cfg.source_manifest, "source");
    TrainingLog log(dir / "train_log.jsonl");
    TrainResult res = train_phase1(cfg, source, &log);
    save_checkpoint(dir / "checkpoint.ckpt", res.best);
    return res;
}

TrainResult run_phase2(const ExperimentConfig& cfg, const Checkpoint& init, const fs::path& dir) {
    prepare_run_dir(dir, cfg);
    const Manifest source = load_required(cfg.source_manifest, "source");
    const Manifest target = load_required(cfg.target_manifest, "target");
    TrainingLog log(dir / "train_log.jsonl");
    TrainResult res = train_phase2(cfg, init, source, &target, &log);
    save_checkpoint(dir / "checkpoint.ckpt", res.best);
    return res;
}

MatrixResult run_matrix(const ExperimentConfig& base, const fs::path& run_dir,
                        const std::vector<std::string>& methods) {
    MatrixResult out;
    const fs::path p1 = run_dir / "phase1";
    ExperimentConfig phase1_cfg = base;
    phase1_cfg.name = "phase1";
    phase1_cfg.use_pc = phase1_cfg.use_adv = phase1_cfg.use_aug = phase1_cfg.use_mt = false;
    if (fs::exists(p1 / "checkpoint.ckpt")) {
        prepare_run_dir(p1, phase1_cfg);
        out.phase1 = load_checkpoint(p1 / "checkpoint.ckpt");
        std::cerr << "phase 1: reusing " << (p1 / "checkpoint.ckpt").string() << '\n';
    } else {
        std::cerr << "phase 1: training\n";
        out.phase1 = run_phase1(phase1_cfg, p1).best;
    }
    const Manifest source = load_required(base.source_manifest, "source");
    const Manifest target = load_required(base.target_manifest, "target");
    EvaluationOptions eo;
    eo.slice_size = base.slice_size;
    eo.threshold = base.threshold;
    eo.batch_size = base.batch_size;

    std::vector<MetricsTable> tables;
    for (const auto& cfg : method_matrix(base)) {
        if (!methods.empty() && std::find(methods.begin(), methods.end(), cfg.name) == methods.end()) {
            continue;
        }
        std::cerr << "phase 2: " << cfg.name << '\n';
        const fs::path dir = run_dir / cfg.name;
        TrainResult r = run_phase2(cfg, out.phase1, dir);
        Segmenter model = segmenter_from_checkpoint(r.best);
        MetricsTable t = evaluate_pairs(model, cfg.name, target, &source, eo);
        save_table(dir / "metrics.tsv", t);
        tables.push_back(std::move(t));
        out.adapted.emplace(cfg.name, std::move(r.best));
    }
    if (tables.empty()) {
        throw ConfigError("run-matrix: no method selected");
    }
    out.table = merge_tables(tables);
    save_table(run_dir / "metrics.tsv", out.table);
    out.ranking = decathlon_rank(out.table);
    const auto rows = build_report(out.table, out.ranking);
    std::ofstream(run_dir / "report.md") << render_markdown(rows);
    std::ofstream(run_dir / "report.json") << render_json(rows).dump(2) << '\n';
    return out;
}

} // namespace pcda

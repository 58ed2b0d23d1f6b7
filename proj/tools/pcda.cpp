// Command-line driver: synth, train, adapt, evaluate, rank, report and
// experiments run-matrix. Exit codes: 0 ok, 1 usage, 2 data/config, 3 runtime.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "pcda/errors.hpp"
#include "pcda/evaluation.hpp"
#include "pcda/experiments.hpp"
#include "pcda/synthdata.hpp"
#include "pcda/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kUsage = 1;
constexpr int kData = 2;
constexpr int kRuntime = 3;

json read_json(const fs::path& p) {
    std::ifstream in(p);
    if (!in) {
        throw pcda::IoError("cannot open " + p.string());
    }
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw pcda::FormatError(p.string() + ": " + e.what());
    }
}

/// Loads an experiment config; manifest paths are taken relative to the config file.
pcda::ExperimentConfig load_experiment(const fs::path& path, std::optional<std::uint64_t> seed) {
    json j = read_json(path);
    if (seed) {
        j["seed"] = *seed;
    }
    auto cfg = pcda::ExperimentConfig::from_json(j);
    const fs::path base = fs::absolute(path).parent_path();
    for (auto* p : {&cfg.source_manifest, &cfg.target_manifest}) {
        if (!p->empty() && p->is_relative()) {
            *p = (base / *p).lexically_normal();
        }
    }
    return cfg;
}

void write_text(const fs::path& p, const std::string& s) {
    std::ofstream out(p);
    if (!out) {
        throw pcda::IoError("cannot write " + p.string());
    }
    out << s;
}

void emit_report(const pcda::MetricsTable& table, const fs::path& out_prefix) {
    const auto ranking = pcda::decathlon_rank(table);
    const auto rows = pcda::build_report(table, ranking);
    const std::string md = pcda::render_markdown(rows);
    write_text(out_prefix.string() + ".md", md);
    write_text(out_prefix.string() + ".json", pcda::render_json(rows).dump(2) + "\n");
    std::cout << md;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Paired-consistency domain adaptation for lesion segmentation"};
    app.require_subcommand(1);

    fs::path config;
    fs::path out;
    fs::path run_dir;
    fs::path init;
    fs::path checkpoint;
    fs::path manifest;
    fs::path source_manifest;
    fs::path table_path;
    std::string method = "model";
    std::string split = "test";
    std::vector<fs::path> tables;
    std::vector<std::string> methods;
    std::optional<std::uint64_t> seed;

    auto* synth = app.add_subcommand("synth", "Generate the synthetic three-domain dataset");
    synth->add_option("--config", config, "Synthetic-data config (JSON)")->check(CLI::ExistingFile);
    synth->add_option("--out", out, "Output directory")->required();
    synth->add_option("--seed", seed, "Override the config seed");

    auto* train = app.add_subcommand("train", "Supervised training on the source domain");
    train->add_option("--config", config, "Experiment config (JSON)")->required();
    train->add_option("--run-dir", run_dir, "Run directory")->required();
    train->add_option("--seed", seed, "Override the config seed");

    auto* adapt = app.add_subcommand("adapt", "Adaptation from a trained checkpoint");
    adapt->add_option("--config", config, "Experiment config (JSON)")->required();
    adapt->add_option("--run-dir", run_dir, "Run directory")->required();
    adapt->add_option("--init", init, "Checkpoint from `train`");
    adapt->add_option("--seed", seed, "Override the config seed");

    auto* evaluate = app.add_subcommand("evaluate", "Per-subject metrics table for one model");
    evaluate->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
    evaluate->add_option("--manifest", manifest, "Paired target manifest")->required();
    evaluate->add_option("--source-manifest", source_manifest, "Labeled source manifest");
    evaluate->add_option("--method", method, "Method name written to the table");
    evaluate->add_option("--split", split, "Split to evaluate (train, val, test)");
    evaluate->add_option("--out", out, "Output TSV")->required();

    auto* rank = app.add_subcommand("rank", "Merge tables, rank methods and emit the report");
    rank->add_option("--tables", tables, "Metrics tables (one or more methods each)")->required();
    rank->add_option("--out", out, "Output prefix for .tsv/.md/.json")->required();

    auto* report = app.add_subcommand("report", "Render the report of a merged table");
    report->add_option("--table", table_path, "Merged metrics table")->required();
    report->add_option("--out", out, "Output prefix for .md/.json")->required();

    auto* experiments = app.add_subcommand("experiments", "Experiment drivers");
    experiments->require_subcommand(1);
    auto* matrix = experiments->add_subcommand("run-matrix", "Phase 1 once, then all eight methods");
    matrix->add_option("--config", config, "Experiment config (JSON)")->required();
    matrix->add_option("--run-dir", run_dir, "Run directory")->required();
    matrix->add_option("--methods", methods, "Subset of method names");
    matrix->add_option("--seed", seed, "Override the config seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kUsage;
    }

    try {
        if (*synth) {
            pcda::SynthConfig cfg;
            if (!config.empty()) {
                cfg = pcda::SynthConfig::from_json(read_json(config));
            }
            if (seed) {
                cfg.seed = *seed;
            }
            const auto ds = pcda::generate_dataset(cfg, out);
            std::cout << "wrote " << ds.source.entries.size() << " source subjects and "
                      << ds.target.entries.size() << " target pairs to " << out.string() << '\n';
        } else if (*train) {
            const auto cfg = load_experiment(config, seed);
            const auto res = pcda::run_phase1(cfg, run_dir);
            std::cout << "best epoch " << res.best.epoch << ", val Dice " << res.best.val_score
                      << '\n';
        } else if (*adapt) {
            if (init.empty()) {
                std::cerr << "adapt: --init <checkpoint> is required; adaptation starts from a "
                             "trained source model\n";
                return kUsage;
            }
            const auto cfg = load_experiment(config, seed);
            const auto res = pcda::run_phase2(cfg, pcda::load_checkpoint(init), run_dir);
            std::cout << "best epoch " << res.best.epoch << ", val score " << res.best.val_score
                      << '\n';
        } else if (*evaluate) {
            const auto ckpt = pcda::load_checkpoint(checkpoint);
            auto model = pcda::segmenter_from_checkpoint(ckpt);
            const auto target = pcda::load_manifest(manifest);
            std::optional<pcda::Manifest> source;
            if (!source_manifest.empty()) {
                source = pcda::load_manifest(source_manifest);
            }
            pcda::EvaluationOptions eo;
            eo.split = pcda::split_from_string(split);
            if (const auto& m = ckpt.metadata; m.contains("slice_size")) {
                const auto s = m.at("slice_size").get<std::array<int, 2>>();
                eo.slice_size = {s[0], s[1]};
            }
            const auto table = pcda::evaluate_pairs(model, method, target,
                                                    source ? &*source : nullptr, eo);
            pcda::save_table(out, table);
            std::cout << "wrote " << table.rows.size() << " rows to " << out.string() << '\n';
        } else if (*rank) {
            std::vector<pcda::MetricsTable> loaded;
            for (const auto& t : tables) {
                loaded.push_back(pcda::load_table(t));
            }
            const auto merged = pcda::merge_tables(loaded);
            pcda::save_table(out.string() + ".tsv", merged);
            emit_report(merged, out);
        } else if (*report) {
            emit_report(pcda::load_table(table_path), out);
        } else if (*matrix) {
            const auto cfg = load_experiment(config, seed);
            const auto res = pcda::run_matrix(cfg, run_dir, methods);
            std::cout << pcda::render_markdown(pcda::build_report(res.table, res.ranking));
        }
    } catch (const pcda::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kData;
    } catch (const pcda::ValidationError& e) {
        std::cerr << "validation error: " << e.what() << '\n';
        return kData;
    } catch (const pcda::FormatError& e) {
        std::cerr << "format error: " << e.what() << '\n';
        return kData;
    } catch (const pcda::IoError& e) {
        std::cerr << "I/O error: " << e.what() << '\n';
        return kData;
    } catch (const pcda::ShapeError& e) {
        std::cerr << "shape error: " << e.what() << '\n';
        return kData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kRuntime;
    }
    return 0;
}

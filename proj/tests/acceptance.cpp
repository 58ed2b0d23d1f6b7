// End-to-end acceptance run: one PASS/FAIL line per criterion, then a summary.
//
// The process exits 0 once every criterion has been evaluated, so failures
// are reported rather than aborting ctest; set PCDA_ACCEPTANCE_STRICT=1 to
// turn any FAIL into a non-zero exit. Working files go to
// PCDA_ACCEPTANCE_DIR (default: <tmp>/pcda_acceptance).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "pcda/errors.hpp"
#include "pcda/evaluation.hpp"
#include "pcda/experiments.hpp"
#include "pcda/losses.hpp"
#include "pcda/networks.hpp"
#include "pcda/synthdata.hpp"
#include "pcda/training.hpp"

using namespace pcda;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

int g_passed = 0;
int g_failed = 0;

void report(const std::string& name, const Outcome& o) {
    std::printf("[%s] %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    (o.pass ? g_passed : g_failed) += 1;
}

void run_criterion(const std::string& name, const std::function<Outcome()>& body) {
    try {
        report(name, body());
    } catch (const std::exception& e) {
        report(name, {false, std::string("exception: ") + e.what()});
    }
}

bool close_rel(double a, double b, double rel) {
    return std::fabs(a - b) <= rel * std::max({std::fabs(a), std::fabs(b), 1e-8});
}

std::vector<double> random_probs(std::size_t n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> d(0.05, 0.95);
    std::vector<double> v(n);
    for (auto& x : v) {
        x = d(rng);
    }
    return v;
}

template <typename F>
double central_difference(std::vector<double> x, std::size_t i, F&& f, double h = 1e-5) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double up = f(x);
    x[i] = x0 - h;
    const double down = f(x);
    return (up - down) / (2.0 * h);
}

// ---------------------------------------------------------------- oracles

Mask3D random_mask(int nx, int ny, int nz, double p, std::mt19937_64& rng) {
    std::bernoulli_distribution d(p);
    Mask3D m(nx, ny, nz);
    for (auto& v : m.values) {
        v = d(rng) ? 1 : 0;
    }
    return m;
}

bool on_surface(const Mask3D& m, int x, int y, int z) {
    if (m.at(x, y, z) == 0) {
        return false;
    }
    const int ext[3] = {m.nx, m.ny, m.nz};
    const int p[3] = {x, y, z};
    for (int axis = 0; axis < 3; ++axis) {
        if (ext[axis] == 1) {
            continue;
        }
        for (int step = -1; step <= 1; step += 2) {
            int q[3] = {p[0], p[1], p[2]};
            q[axis] += step;
            if (q[axis] < 0 || q[axis] >= ext[axis] || m.at(q[0], q[1], q[2]) == 0) {
                return true;
            }
        }
    }
    return false;
}

// all-pairs nearest surface distance from every surface voxel of a to b
std::vector<double> all_pairs_directed(const Mask3D& a, const Mask3D& b, const Spacing& s) {
    std::vector<std::array<int, 3>> sb;
    for (int z = 0; z < b.nz; ++z) {
        for (int y = 0; y < b.ny; ++y) {
            for (int x = 0; x < b.nx; ++x) {
                if (on_surface(b, x, y, z)) {
                    sb.push_back({x, y, z});
                }
            }
        }
    }
    std::vector<double> out;
    for (int z = 0; z < a.nz; ++z) {
        for (int y = 0; y < a.ny; ++y) {
            for (int x = 0; x < a.nx; ++x) {
                if (!on_surface(a, x, y, z)) {
                    continue;
                }
                double best = std::numeric_limits<double>::infinity();
                for (const auto& q : sb) {
                    const double dx = (x - q[0]) * s[0];
                    const double dy = (y - q[1]) * s[1];
                    const double dz = (z - q[2]) * s[2];
                    best = std::min(best, dx * dx + dy * dy + dz * dz);
                }
                out.push_back(std::sqrt(best));
            }
        }
    }
    return out;
}

double p95(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const double pos = static_cast<double>(v.size() - 1) * 95.0 / 100.0;
    const auto lo = static_cast<std::size_t>(pos);
    const double frac = pos - static_cast<double>(lo);
    return frac == 0.0 ? v[lo] : v[lo] + (v[lo + 1] - v[lo]) * frac;
}

// exact one-sided tails by enumerating all 2^n sign assignments
std::pair<double, double> sign_enumeration(const std::vector<double>& x,
                                           const std::vector<double>& y) {
    std::vector<double> d;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] != y[i]) {
            d.push_back(x[i] - y[i]);
        }
    }
    const std::size_t n = d.size();
    std::vector<long> r2(n);
    for (std::size_t i = 0; i < n; ++i) {
        long less = 0;
        long equal = 0;
        for (std::size_t j = 0; j < n; ++j) {
            less += std::fabs(d[j]) < std::fabs(d[i]);
            equal += std::fabs(d[j]) == std::fabs(d[i]);
        }
        r2[i] = 2 * less + equal + 1;
    }
    long observed = 0;
    for (std::size_t i = 0; i < n; ++i) {
        observed += d[i] > 0 ? r2[i] : 0;
    }
    long ge = 0;
    long le = 0;
    for (unsigned long mask = 0; mask < (1UL << n); ++mask) {
        long w = 0;
        for (std::size_t i = 0; i < n; ++i) {
            w += (mask >> i) & 1UL ? r2[i] : 0;
        }
        ge += w >= observed;
        le += w <= observed;
    }
    const double all = static_cast<double>(1UL << n);
    return {ge / all, le / all};
}

MetricsTable planted_table(const std::vector<std::string>& names, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 0.01);
    MetricsTable t;
    for (std::size_t m = 0; m < names.size(); ++m) {
        const double quality = 1.0 - 0.2 * static_cast<double>(m);
        for (int s = 0; s < 20; ++s) {
            const std::string subj = "s" + std::to_string(s);
            t.add(subj, names[m], "target_dice", 0.8 * quality + noise(rng));
            t.add(subj, names[m], "target_hd95", 10.0 * (2.0 - quality) + noise(rng));
            t.add(subj, names[m], "target_vd", 30.0 * (2.0 - quality) + noise(rng));
            t.add(subj, names[m], "target_recall", 0.9 * quality + noise(rng));
            t.add(subj, names[m], "source_dice", 0.9 * quality + noise(rng));
            t.add(subj, names[m], "source_hd95", 3.0 * (2.0 - quality) + noise(rng));
        }
    }
    return t;
}

// ---------------------------------------------------------------- criteria

Outcome loss_identities() {
    const auto t0 = Clock::now();
    double worst = 0.0;
    std::mt19937_64 rng(1);
    std::bernoulli_distribution bit(0.3);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> m(64);
        for (auto& v : m) {
            v = bit(rng) ? 1.0 : 0.0;
        }
        worst = std::max(worst, std::fabs(soft_dice_loss<double>(m, m)));
    }
    for (int n : {2, 3, 4, 5}) {
        const std::vector<double> logits(static_cast<std::size_t>(6 * n), -0.8);
        std::vector<int> labels(6);
        for (int i = 0; i < 6; ++i) {
            labels[i] = i % n;
        }
        worst = std::max(worst, std::fabs(adversarial_loss(logits, n, labels).value - std::log(n)));
    }
    worst = std::max(worst, std::fabs(total_loss(0.5, 0.3, 0.2) - 0.56));
    const double secs = seconds_since(t0);
    return {worst <= 1e-9 && secs < 1.0,
            "max deviation " + fmt("%.2e", worst) + ", " + fmt("%.3f", secs) + " s"};
}

Outcome gradient_suite() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(2);
    double worst_dice = 0.0;
    double worst_kl = 0.0;
    bool ok = true;
    for (int trial = 0; trial < 50; ++trial) {
        const auto p = random_probs(64, rng);
        const auto t = random_probs(64, rng);
        const auto g = soft_dice_loss_with_grad<double>(p, t);
        const auto k = kl_consistency_loss<double>(t, p);
        for (std::size_t i = 0; i < 64; ++i) {
            const double fd = central_difference(p, i, [&](const std::vector<double>& x) {
                return soft_dice_loss<double>(x, t);
            });
            const double fd_kl = central_difference(p, i, [&](const std::vector<double>& x) {
                return kl_consistency_loss<double>(t, x).value;
            });
            ok = ok && close_rel(g.grad_a[i], fd, 1e-3) && close_rel(k.grad_b[i], fd_kl, 1e-3);
            worst_dice = std::max(worst_dice, std::fabs(g.grad_a[i] - fd) / std::max(std::fabs(fd), 1e-8));
            worst_kl = std::max(worst_kl, std::fabs(k.grad_b[i] - fd_kl) / std::max(std::fabs(fd_kl), 1e-8));
        }
    }
    double worst_grl = 0.0;
    for (double beta : {0.0, 0.5, 1.0}) {
        Tensor up(2, 3, 8, 8);
        std::normal_distribution<float> d(0.0f, 1.0f);
        for (auto& v : up.data) {
            v = d(rng);
        }
        const Tensor back = GradientReversal(beta).backward(up);
        for (std::size_t i = 0; i < up.size(); ++i) {
            const double expected = -beta * up.data[i];
            ok = ok && close_rel(back.data[i], expected, 1e-4);
            worst_grl = std::max(worst_grl, std::fabs(back.data[i] - expected));
        }
    }
    const double secs = seconds_since(t0);
    return {ok && secs < 30.0, "dice rel " + fmt("%.1e", worst_dice) + ", KL rel " +
                                   fmt("%.1e", worst_kl) + ", GRL abs " + fmt("%.1e", worst_grl) +
                                   ", " + fmt("%.2f", secs) + " s"};
}

Outcome metric_oracles() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> dim(1, 20);
    std::uniform_int_distribution<int> depth(1, 5);
    std::uniform_real_distribution<double> density(0.05, 0.6);
    const Spacing spacings[] = {{1, 1, 1}, {1, 1, 3}, {0.9, 1.1, 2.5}};
    int hd_ok = 0;
    int tested = 0;
    while (tested < 100) {
        const int nx = dim(rng);
        const int ny = dim(rng);
        const int nz = depth(rng);
        const Mask3D a = random_mask(nx, ny, nz, density(rng), rng);
        const Mask3D b = random_mask(nx, ny, nz, density(rng), rng);
        const Spacing& s = spacings[tested % 3];
        const auto da = all_pairs_directed(a, b, s);
        const auto db = all_pairs_directed(b, a, s);
        if (da.empty() || db.empty()) {
            continue;
        }
        hd_ok += hd95(a, b, s) == std::max(p95(da), p95(db));
        ++tested;
    }

    int wil_cases = 0;
    int wil_ok = 0;
    std::normal_distribution<double> d(0.3, 1.0);
    for (int n = 1; n <= 12; ++n) {
        for (int rep = 0; rep < 4; ++rep) {
            std::vector<double> x(n);
            std::vector<double> y(n);
            for (int i = 0; i < n; ++i) {
                x[i] = std::round(d(rng) * 4.0) / 4.0;
                y[i] = std::round(d(rng) * 4.0) / 4.0 - 0.25 * (rep % 2);
            }
            const auto [greater, less] = sign_enumeration(x, y);
            const auto g = wilcoxon_signed_rank(x, y, Alternative::greater, WilcoxonMethod::exact);
            const auto l = wilcoxon_signed_rank(x, y, Alternative::less, WilcoxonMethod::exact);
            ++wil_cases;
            if (g.n == 0) {
                wil_ok += g.p_value == 1.0 && l.p_value == 1.0;
            } else {
                wil_ok += g.p_value == greater && l.p_value == less;
            }
        }
    }

    int count_cases = 0;
    int count_ok = 0;
    for (int t = 0; t < 100; ++t) {
        const Mask3D p = random_mask(7, 6, 3, 0.4, rng);
        Mask3D q = random_mask(7, 6, 3, 0.3, rng);
        q.values[0] = 1;
        std::size_t np = 0;
        std::size_t nq = 0;
        std::size_t both = 0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            np += p.values[i];
            nq += q.values[i];
            both += p.values[i] & q.values[i];
        }
        const Spacing s{1.0, 1.0, 2.0};
        const double vp = static_cast<double>(np) * 2.0;
        const double vq = static_cast<double>(nq) * 2.0;
        ++count_cases;
        count_ok += dice_score(p, q) == 2.0 * both / static_cast<double>(np + nq) &&
                    recall(p, q) == static_cast<double>(both) / static_cast<double>(nq) &&
                    volume_difference(p, q, s) == 100.0 * std::fabs(vp - vq) / vq;
    }
    const double secs = seconds_since(t0);
    const bool ok = hd_ok == tested && wil_ok == wil_cases && count_ok == count_cases && secs < 60.0;
    return {ok, "hd95 " + std::to_string(hd_ok) + "/" + std::to_string(tested) + ", wilcoxon " +
                    std::to_string(wil_ok) + "/" + std::to_string(wil_cases) + ", counts " +
                    std::to_string(count_ok) + "/" + std::to_string(count_cases) + ", " +
                    fmt("%.1f", secs) + " s"};
}

Outcome schedule() {
    const ExperimentConfig cfg;
    const double a = lr_at_epoch(299, cfg);
    const double b = lr_at_epoch(300, cfg);
    const double c = lr_at_epoch(350, cfg);
    std::ostringstream os;
    os.precision(17);
    os << "299 -> " << a << ", 300 -> " << b << ", 350 -> " << c;
    return {a == 1e-3 && b == 1e-4 && c == 1e-5, os.str()};
}

Outcome ranking() {
    const auto t0 = Clock::now();
    const MetricsTable t = planted_table({"M1", "M2", "M3"}, 11);
    const RankingResult r = decathlon_rank(t);
    bool ok = r.average_rank.at("M1") == 1.0 && r.average_rank.at("M2") == 2.0 &&
              r.average_rank.at("M3") == 3.0;

    MetricsTable shuffled;
    shuffled.rows = t.rows;
    std::mt19937_64 rng(12);
    std::shuffle(shuffled.rows.begin(), shuffled.rows.end(), rng);
    MetricsTable renamed = t;
    const std::map<std::string, std::string> alias{{"M1", "c"}, {"M2", "a"}, {"M3", "b"}};
    for (auto& row : renamed.rows) {
        row.method = alias.at(row.method);
    }
    const auto rs = decathlon_rank(shuffled);
    const auto rr = decathlon_rank(renamed);
    for (const auto& [m, rank] : r.average_rank) {
        ok = ok && rs.average_rank.at(m) == rank && rr.average_rank.at(alias.at(m)) == rank;
    }

    const std::string md = render_markdown(build_report(t, r));
    for (const char* h : {"Target Dice", "Target HD", "Target VD", "Target Recall", "Source Dice",
                          "Source HD", "Rank"}) {
        ok = ok && md.find(h) != std::string::npos;
    }
    const double secs = seconds_since(t0);
    return {ok && secs < 10.0, "ranks (" + fmt("%.1f", r.average_rank.at("M1")) + ", " +
                                   fmt("%.1f", r.average_rank.at("M2")) + ", " +
                                   fmt("%.1f", r.average_rank.at("M3")) +
                                   "), permutation/rename invariant, report columns present, " +
                                   fmt("%.2f", secs) + " s"};
}

Outcome effect_size() {
    const SynthConfig cfg;
    std::vector<CohortSubject> planted;
    const double voxel = cfg.spacing[0] * cfg.spacing[1] * cfg.spacing[2];
    for (int i = 0; i < 150; ++i) {
        const SynthSubject s = generate_subject(cfg, "c" + std::to_string(i), 90000 + i);
        const auto n = std::count(s.lesions.values.begin(), s.lesions.values.end(), 1);
        planted.push_back({s.age_years, static_cast<double>(n) * voxel, s.tiv_mm3});
    }
    const double fold = effect_size_per_decade(planted).fold_per_decade;

    std::vector<CohortSubject> exact;
    for (int i = 0; i < 30; ++i) {
        const double age = 45.0 + i;
        const double tiv = 1.4e6 + 1000.0 * (i % 7);
        exact.push_back({age, tiv * 0.002 * std::pow(1.4, age / 10.0), tiv});
    }
    const double exact_fold = effect_size_per_decade(exact).fold_per_decade;
    const bool ok = std::fabs(fold / 1.4 - 1.0) <= 0.05 && std::fabs(exact_fold - 1.4) <= 1e-9;
    return {ok, "planted cohort " + fmt("%.4f", fold) + " (within " +
                    fmt("%.2f", 100.0 * std::fabs(fold / 1.4 - 1.0)) + "%), constructed " +
                    fmt("%.12f", exact_fold)};
}

// ---------------------------------------------------------------- determinism

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) {
            std::ifstream is(e.path(), std::ios::binary);
            out[fs::relative(e.path(), root).string()] =
                std::string(std::istreambuf_iterator<char>(is), {});
        }
    }
    return out;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), {}};
}

int cli(const std::string& args) {
    const std::string cmd = "PCDA_DETERMINISTIC=1 \"" PCDA_CLI_PATH "\" " + args + " >/dev/null 2>&1";
    return std::system(cmd.c_str());
}

Outcome determinism(const fs::path& work) {
    const fs::path dir = work / "determinism";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::string small =
        R"({"seed": 5, "n_source_subjects": 10, "n_target_subjects": 6, "shape": [32, 32, 8]})";
    std::ofstream(dir / "synth.json") << small;
    for (const char* d : {"a", "b"}) {
        if (cli("synth --config \"" + (dir / "synth.json").string() + "\" --out \"" +
                (dir / d).string() + "\"") != 0) {
            return {false, "synth command failed"};
        }
    }
    const auto ta = tree_bytes(dir / "a");
    const bool same_data = !ta.empty() && ta == tree_bytes(dir / "b");

    const std::string exp = R"({"name": "det", "seed": 3, "phase1_epochs": 2, "batch_size": 4,
        "data": {"source_manifest": ")" + (dir / "a" / "source_manifest.json").string() +
                            R"(", "slice_size": [32, 32]}})";
    std::ofstream(dir / "exp.json") << exp;
    for (const char* r : {"run1", "run2"}) {
        if (cli("train --config \"" + (dir / "exp.json").string() + "\" --run-dir \"" +
                (dir / r).string() + "\"") != 0) {
            return {false, "train command failed"};
        }
    }
    const std::string la = slurp(dir / "run1" / "train_log.jsonl");
    const bool same_log = !la.empty() && la == slurp(dir / "run2" / "train_log.jsonl");
    return {same_data && same_log, std::to_string(ta.size()) + " dataset files " +
                                       (same_data ? "identical" : "differ") + ", loss logs " +
                                       (same_log ? "identical" : "differ")};
}

// ---------------------------------------------------------------- adaptation study

struct SeedRun {
    int seed = 0;
    double phase1_val = 0.0;
    double phase1_secs = 0.0;
    std::map<std::string, double> target_dice;  // mean pair Dice on test pairs
    std::map<std::string, double> source_dice;  // mean Dice on source test subjects
    std::map<std::string, int> flagged_epochs;
    double adaptation_secs = 0.0;
};

double mean_metric(const MetricsTable& t, const std::string& metric) {
    double sum = 0.0;
    int n = 0;
    for (const auto& row : t.rows) {
        if (row.metric == metric && row.value) {
            sum += *row.value;
            ++n;
        }
    }
    return n > 0 ? sum / n : std::nan("");
}

SeedRun run_seed(int seed, const fs::path& work) {
    SeedRun out;
    out.seed = seed;
    const fs::path root = work / ("seed" + std::to_string(seed));
    fs::remove_all(root);
    SynthConfig sc;
    sc.seed = static_cast<std::uint64_t>(seed);
    const SynthDataset ds = generate_dataset(sc, root / "data");

    ExperimentConfig base;
    base.seed = static_cast<std::uint64_t>(seed);
    base.phase1_epochs = 50;
    base.phase2_epochs = 10;
    base.source_manifest = ds.source_manifest;
    base.target_manifest = ds.target_manifest;

    auto t0 = Clock::now();
    ExperimentConfig p1 = base;
    p1.name = "phase1";
    const TrainResult phase1 = run_phase1(p1, root / "phase1");
    out.phase1_secs = seconds_since(t0);
    out.phase1_val = phase1.best.val_score;

    EvaluationOptions eo;
    eo.slice_size = base.slice_size;
    const auto evaluate = [&](const Checkpoint& ck, const std::string& name) {
        Segmenter model = segmenter_from_checkpoint(ck);
        const MetricsTable t = evaluate_pairs(model, name, ds.target, &ds.source, eo);
        save_table(root / (name + ".tsv"), t);
        out.target_dice[name] = mean_metric(t, "target_dice");
        out.source_dice[name] = mean_metric(t, "source_dice");
    };
    evaluate(phase1.best, "Baseline");

    t0 = Clock::now();
    struct Variant {
        const char* name;
        bool pc, adv, aug;
        double alpha;
    };
    const Variant variants[] = {
        {"PC", true, false, false, 0.2},
        {"PC+Adv+Aug", true, true, true, 0.2},
        {"PC+Aug alpha=5", true, false, true, 5.0},  // mis-weighted, no adversary
    };
    for (const auto& v : variants) {
        ExperimentConfig c = base;
        c.name = v.name;
        c.use_pc = v.pc;
        c.use_adv = v.adv;
        c.use_aug = v.aug;
        c.alpha = v.alpha;
        std::string dir = v.name;
        std::replace(dir.begin(), dir.end(), ' ', '_');
        const TrainResult r = run_phase2(c, phase1.best, root / dir);
        int flagged = 0;
        for (const auto& e : r.history) {
            flagged += e.collapse && e.collapse->flagged;
        }
        out.flagged_epochs[v.name] = flagged;
        if (v.alpha == 0.2) {
            evaluate(r.best, v.name);
        }
    }
    out.adaptation_secs = seconds_since(t0);

    std::printf("  seed %d: phase-1 val Dice %.3f in %.0f s; target pair-Dice Baseline %.3f, "
                "PC %.3f, PC+Adv+Aug %.3f; source Dice %.3f / %.3f / %.3f; flagged epochs "
                "PC %d, PC+Adv+Aug %d, alpha=5 %d; adaptation %.0f s\n",
                seed, out.phase1_val, out.phase1_secs, out.target_dice["Baseline"],
                out.target_dice["PC"], out.target_dice["PC+Adv+Aug"], out.source_dice["Baseline"],
                out.source_dice["PC"], out.source_dice["PC+Adv+Aug"], out.flagged_epochs["PC"],
                out.flagged_epochs["PC+Adv+Aug"], out.flagged_epochs["PC+Aug alpha=5"],
                out.adaptation_secs);
    std::fflush(stdout);
    return out;
}

} // namespace

int main() {
    const char* dir_env = std::getenv("PCDA_ACCEPTANCE_DIR");
    const fs::path work = dir_env != nullptr ? fs::path(dir_env)
                                             : fs::temp_directory_path() / "pcda_acceptance";
    fs::create_directories(work);

    run_criterion("loss identities", loss_identities);
    run_criterion("gradient suite", gradient_suite);
    run_criterion("metric oracles", metric_oracles);
    run_criterion("schedule", schedule);
    run_criterion("ranking", ranking);
    run_criterion("effect size", effect_size);
    run_criterion("determinism", [&] { return determinism(work); });

    std::vector<SeedRun> runs;
    std::string study_error;
    try {
        for (int seed : {1, 2, 3}) {
            runs.push_back(run_seed(seed, work));
        }
    } catch (const std::exception& e) {
        study_error = std::string("exception: ") + e.what();
    }
    const auto study = [&](const std::function<Outcome()>& body) {
        return [&, body] {
            if (!study_error.empty()) {
                return Outcome{false, study_error};
            }
            return body();
        };
    };

    run_criterion("phase-1 smoke", study([&] {
        bool ok = true;
        std::string d;
        for (const auto& r : runs) {
            ok = ok && r.phase1_val >= 0.90 && r.phase1_secs < 900.0;
            d += (d.empty() ? "" : ", ") + std::string("seed ") + std::to_string(r.seed) + " " +
                 fmt("%.3f", r.phase1_val) + " in " + fmt("%.0f", r.phase1_secs) + " s";
        }
        return Outcome{ok, "val Dice " + d};
    }));

    run_criterion("adaptation direction", study([&] {
        std::map<std::string, double> mean;
        double secs = 0.0;
        for (const auto& r : runs) {
            for (const auto& [m, v] : r.target_dice) {
                mean[m] += v / static_cast<double>(runs.size());
            }
            secs += r.adaptation_secs + r.phase1_secs;
        }
        const double b = mean["Baseline"];
        const double pc = mean["PC"];
        const double full = mean["PC+Adv+Aug"];
        const bool ok = full >= pc && pc >= b && 100.0 * (full - b) >= 5.0 && secs < 3600.0;
        return Outcome{ok, "seed-mean target pair-Dice Baseline " + fmt("%.1f", 100 * b) +
                               ", PC " + fmt("%.1f", 100 * pc) + ", PC+Adv+Aug " +
                               fmt("%.1f", 100 * full) + "; runtime " + fmt("%.0f", secs) + " s"};
    }));

    run_criterion("source retention", study([&] {
        bool ok = true;
        double worst = 0.0;
        for (const auto& r : runs) {
            const double base = r.source_dice.at("Baseline");
            for (const char* m : {"PC", "PC+Adv+Aug"}) {
                const double drop = 100.0 * (base - r.source_dice.at(m));
                worst = std::max(worst, drop);
                ok = ok && drop <= 3.0;
            }
        }
        return Outcome{ok, "largest source Dice drop " + fmt("%.2f", worst) + " points"};
    }));

    run_criterion("collapse detection", study([&] {
        int misweighted_seeds = 0;
        int full_flags = 0;
        for (const auto& r : runs) {
            misweighted_seeds += r.flagged_epochs.at("PC+Aug alpha=5") > 0;
            full_flags += r.flagged_epochs.at("PC+Adv+Aug");
        }
        const bool ok = misweighted_seeds >= 1 && full_flags == 0;
        return Outcome{ok, "alpha=5 without adversary flagged in " +
                               std::to_string(misweighted_seeds) + "/" +
                               std::to_string(runs.size()) + " seeds; PC+Adv+Aug flagged epochs " +
                               std::to_string(full_flags)};
    }));

    std::printf("%d/%d criteria passed\n", g_passed, g_passed + g_failed);
    const char* strict = std::getenv("PCDA_ACCEPTANCE_STRICT");
    return strict != nullptr && std::string(strict) == "1" && g_failed > 0 ? 1 : 0;
}

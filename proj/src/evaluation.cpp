#include "pcda/evaluation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "pcda/errors.hpp"
#include "pcda/networks.hpp"

namespace pcda {

namespace {

std::size_t count_ones(std::span<const std::uint8_t> m) {
    return static_cast<std::size_t>(std::count_if(m.begin(), m.end(), [](auto v) { return v != 0; }));
}

void check_same_shape(const Mask3D& a, const Mask3D& b, const char* what) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(what) + ": mask shapes differ");
    }
}

double squared_mm(const std::array<int, 3>& p, const std::array<int, 3>& q, const Spacing& s) {
    const double dx = (p[0] - q[0]) * s[0];
    const double dy = (p[1] - q[1]) * s[1];
    const double dz = (p[2] - q[2]) * s[2];
    return dx * dx + dy * dy + dz * dz;
}

double nearest(const std::array<int, 3>& p, const std::vector<std::array<int, 3>>& sites,
               const Spacing& s) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : sites) {
        best = std::min(best, squared_mm(p, q, s));
    }
    return std::sqrt(best);
}

} // namespace

double dice_score(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
    if (a.size() != b.size()) {
        throw ShapeError("dice_score: mask shapes differ");
    }
    std::size_t inter = 0;
    std::size_t na = 0;
    std::size_t nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool x = a[i] != 0;
        const bool y = b[i] != 0;
        na += x;
        nb += y;
        inter += x && y;
    }
    if (na + nb == 0) {
        return 1.0;
    }
    return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

double dice_score(const Mask3D& a, const Mask3D& b) {
    check_same_shape(a, b, "dice_score");
    return dice_score(std::span(a.values), std::span(b.values));
}

std::vector<std::array<int, 3>> boundary_voxels(const Mask3D& m) {
    std::vector<std::array<int, 3>> out;
    const std::array<int, 3> extent{m.nx, m.ny, m.nz};
    const auto inside = [&m](int x, int y, int z) {
        return x >= 0 && y >= 0 && z >= 0 && x < m.nx && y < m.ny && z < m.nz &&
               m.at(x, y, z) != 0;
    };
    for (int z = 0; z < m.nz; ++z) {
        for (int y = 0; y < m.ny; ++y) {
            for (int x = 0; x < m.nx; ++x) {
                if (m.at(x, y, z) == 0) {
                    continue;
                }
                bool edge = false;
                for (int axis = 0; axis < 3 && !edge; ++axis) {
                    if (extent[axis] == 1) {
                        continue;
                    }
                    for (int step : {-1, 1}) {
                        std::array<int, 3> q{x, y, z};
                        q[axis] += step;
                        if (!inside(q[0], q[1], q[2])) {
                            edge = true;
                            break;
                        }
                    }
                }
                if (edge) {
                    out.push_back({x, y, z});
                }
            }
        }
    }
    return out;
}

std::vector<double> directed_surface_distances(const Mask3D& from, const Mask3D& to,
                                               const Spacing& spacing) {
    check_same_shape(from, to, "surface distance");
    const auto src = boundary_voxels(from);
    const auto dst = boundary_voxels(to);
    std::vector<double> out(src.size());
    if (dst.empty()) {
        std::fill(out.begin(), out.end(), std::numeric_limits<double>::infinity());
        return out;
    }
    const auto n = static_cast<std::ptrdiff_t>(src.size());
#pragma omp parallel for schedule(dynamic, 64)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        out[i] = nearest(src[i], dst, spacing);
    }
    return out;
}

namespace serial {

std::vector<double> directed_surface_distances(const Mask3D& from, const Mask3D& to,
                                               const Spacing& spacing) {
    check_same_shape(from, to, "surface distance");
    const auto src = boundary_voxels(from);
    const auto dst = boundary_voxels(to);
    std::vector<double> out;
    out.reserve(src.size());
    for (const auto& p : src) {
        out.push_back(dst.empty() ? std::numeric_limits<double>::infinity()
                                  : nearest(p, dst, spacing));
    }
    return out;
}

} // namespace serial

double percentile(std::vector<double> values, double q) {
    if (values.empty()) {
        throw UndefinedMetric("percentile of an empty sample");
    }
    std::sort(values.begin(), values.end());
    const double pos = (static_cast<double>(values.size()) - 1.0) * q / 100.0;
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    if (frac == 0.0) {
        return values[lo];
    }
    return values[lo] + (values[hi] - values[lo]) * frac;
}

double hd95(const Mask3D& a, const Mask3D& b, const Spacing& spacing) {
    check_same_shape(a, b, "hd95");
    if (count_ones(a.values) == 0 || count_ones(b.values) == 0) {
        throw UndefinedMetric("hd95: empty mask");
    }
    return std::max(percentile(directed_surface_distances(a, b, spacing), 95.0),
                    percentile(directed_surface_distances(b, a, spacing), 95.0));
}

double volume_difference(const Mask3D& pred, const Mask3D& ref, const Spacing& spacing) {
    check_same_shape(pred, ref, "volume_difference");
    const double voxel = spacing[0] * spacing[1] * spacing[2];
    const double vr = static_cast<double>(count_ones(ref.values)) * voxel;
    if (vr == 0.0) {
        throw UndefinedMetric("volume_difference: empty reference");
    }
    const double vp = static_cast<double>(count_ones(pred.values)) * voxel;
    return 100.0 * std::fabs(vp - vr) / vr;
}

double recall(const Mask3D& pred, const Mask3D& ref) {
    check_same_shape(pred, ref, "recall");
    std::size_t hit = 0;
    std::size_t total = 0;
    for (std::size_t i = 0; i < ref.values.size(); ++i) {
        if (ref.values[i] != 0) {
            ++total;
            hit += pred.values[i] != 0;
        }
    }
    if (total == 0) {
        throw UndefinedMetric("recall: empty reference");
    }
    return static_cast<double>(hit) / static_cast<double>(total);
}

// ---------------------------------------------------------------- effect size

EffectSize effect_size_per_decade(std::span<const CohortSubject> subjects) {
    std::vector<double> xs;
    std::vector<double> ys;
    EffectSize out;
    for (const auto& s : subjects) {
        if (!(s.tiv_mm3 > 0.0)) {
            throw ValidationError("effect size: total intracranial volume must be positive");
        }
        if (!(s.lesion_mm3 > 0.0)) {
            ++out.n_excluded;
            continue;
        }
        xs.push_back(s.age_years);
        ys.push_back(std::log(s.lesion_mm3 / s.tiv_mm3));
    }
    if (xs.size() < 3) {
        throw ValidationError("effect size: need at least 3 subjects with positive lesion volume");
    }
    const double n = static_cast<double>(xs.size());
    const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
    const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
    double sxx = 0.0;
    double sxy = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sxx += (xs[i] - mx) * (xs[i] - mx);
        sxy += (xs[i] - mx) * (ys[i] - my);
    }
    if (sxx == 0.0) {
        throw ValidationError("effect size: degenerate regression (constant ages)");
    }
    out.slope = sxy / sxx;
    out.intercept = my - out.slope * mx;
    out.fold_per_decade = std::exp(10.0 * out.slope);
    out.n_used = static_cast<int>(xs.size());
    return out;
}

// ---------------------------------------------------------------- Wilcoxon

namespace {

double normal_cdf(double z) {
    return 0.5 * std::erfc(-z / std::sqrt(2.0));
}

} // namespace

WilcoxonResult wilcoxon_signed_rank(std::span<const double> x, std::span<const double> y,
                                    Alternative alt, WilcoxonMethod method) {
    if (x.size() != y.size()) {
        throw ShapeError("wilcoxon: samples differ in length");
    }
    if (x.empty()) {
        throw ValidationError("wilcoxon: empty sample");
    }
    std::vector<double> d;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!std::isfinite(x[i]) || !std::isfinite(y[i])) {
            throw ValidationError("wilcoxon: non-finite value");
        }
        const double diff = x[i] - y[i];
        if (diff != 0.0) {
            d.push_back(diff);
        }
    }
    WilcoxonResult r;
    r.n = static_cast<int>(d.size());
    if (d.empty()) {
        return r;
    }
    // doubled average ranks of |d| keep tied ranks integral
    std::vector<std::size_t> order(d.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&d](std::size_t i, std::size_t j) { return std::fabs(d[i]) < std::fabs(d[j]); });
    std::vector<long> rank2(d.size());
    double tie_term = 0.0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && std::fabs(d[order[j + 1]]) == std::fabs(d[order[i]])) {
            ++j;
        }
        const long doubled = static_cast<long>(i + 1 + j + 1);
        for (std::size_t k = i; k <= j; ++k) {
            rank2[order[k]] = doubled;
        }
        const double t = static_cast<double>(j - i + 1);
        tie_term += t * t * t - t;
        i = j + 1;
    }
    long w2 = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (d[i] > 0.0) {
            w2 += rank2[i];
        }
    }
    r.w_plus = static_cast<double>(w2) / 2.0;

    const bool exact = method == WilcoxonMethod::exact ||
                       (method == WilcoxonMethod::automatic && r.n <= kWilcoxonExactMaxN);
    r.exact = exact;
    double p_greater = 0.0;
    double p_less = 0.0;
    if (exact) {
        const long total = std::accumulate(rank2.begin(), rank2.end(), 0L);
        std::vector<double> ways(static_cast<std::size_t>(total) + 1, 0.0);
        ways[0] = 1.0;
        long reach = 0;
        for (long rk : rank2) {
            reach += rk;
            for (long s = reach; s >= rk; --s) {
                ways[s] += ways[s - rk];
            }
        }
        const double all = std::ldexp(1.0, r.n);
        double ge = 0.0;
        double le = 0.0;
        for (long s = 0; s <= total; ++s) {
            if (s >= w2) {
                ge += ways[s];
            }
            if (s <= w2) {
                le += ways[s];
            }
        }
        p_greater = ge / all;
        p_less = le / all;
    } else {
        const double n = r.n;
        const double mean = n * (n + 1.0) / 4.0;
        const double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
        if (var <= 0.0) {
            return r;
        }
        const double sd = std::sqrt(var);
        p_greater = 1.0 - normal_cdf((r.w_plus - mean - 0.5) / sd);
        p_less = normal_cdf((r.w_plus - mean + 0.5) / sd);
    }
    switch (alt) {
    case Alternative::greater:
        r.p_value = p_greater;
        break;
    case Alternative::less:
        r.p_value = p_less;
        break;
    case Alternative::two_sided:
        r.p_value = std::min(1.0, 2.0 * std::min(p_greater, p_less));
        break;
    }
    return r;
}

// ---------------------------------------------------------------- tables

Direction metric_direction(const std::string& metric) {
    std::string m = metric;
    std::transform(m.begin(), m.end(), m.begin(), [](unsigned char c) { return std::tolower(c); });
    const auto has = [&m](const char* s) { return m.find(s) != std::string::npos; };
    if (has("dice") || has("recall")) {
        return Direction::higher;
    }
    if (has("hd") || has("vd")) {
        return Direction::lower;
    }
    throw ValidationError("unknown metric '" + metric + "' (no improvement direction)");
}

void MetricsTable::add(std::string subject, std::string method, std::string metric,
                       std::optional<double> value) {
    if (value && !std::isfinite(*value)) {
        throw ValidationError("metrics table: non-finite value for " + method + "/" + metric);
    }
    rows.push_back({std::move(subject), std::move(method), std::move(metric), value});
}

namespace {

std::vector<std::string> unique_in_order(const std::vector<MetricRow>& rows,
                                         std::string MetricRow::*field) {
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (const auto& r : rows) {
        if (seen.insert(r.*field).second) {
            out.push_back(r.*field);
        }
    }
    return out;
}

} // namespace

std::vector<std::string> MetricsTable::methods() const {
    return unique_in_order(rows, &MetricRow::method);
}

std::vector<std::string> MetricsTable::metrics() const {
    return unique_in_order(rows, &MetricRow::metric);
}

std::map<std::string, std::optional<double>> MetricsTable::column(const std::string& method,
                                                                  const std::string& metric) const {
    std::map<std::string, std::optional<double>> out;
    for (const auto& r : rows) {
        if (r.method == method && r.metric == metric) {
            out[r.subject] = r.value;
        }
    }
    return out;
}

void MetricsTable::validate_complete() const {
    std::set<std::tuple<std::string, std::string, std::string>> keys;
    for (const auto& r : rows) {
        if (!keys.emplace(r.subject, r.method, r.metric).second) {
            throw ValidationError("metrics table: duplicate row " + r.subject + "/" + r.method +
                                  "/" + r.metric);
        }
    }
    const auto ms = methods();
    for (const auto& metric : metrics()) {
        std::set<std::string> subjects;
        for (const auto& r : rows) {
            if (r.metric == metric) {
                subjects.insert(r.subject);
            }
        }
        for (const auto& method : ms) {
            for (const auto& s : subjects) {
                if (!keys.contains({s, method, metric})) {
                    throw ValidationError("metrics table: missing " + metric + " for subject " + s +
                                          ", method " + method);
                }
            }
        }
    }
}

void save_table(const std::filesystem::path& path, const MetricsTable& t) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << "subject\tmethod\tmetric\tvalue\n";
    out << std::setprecision(17);
    for (const auto& r : t.rows) {
        out << r.subject << '\t' << r.method << '\t' << r.metric << '\t';
        if (r.value) {
            out << *r.value;
        } else {
            out << "NA";
        }
        out << '\n';
    }
    if (!out) {
        throw IoError("write failed for " + path.string());
    }
}

MetricsTable load_table(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read " + path.string());
    }
    std::string line;
    if (!std::getline(in, line) || line != "subject\tmethod\tmetric\tvalue") {
        throw FormatError(path.string() + ": expected header 'subject<TAB>method<TAB>metric<TAB>value'");
    }
    MetricsTable t;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, '\t')) {
            f.push_back(cell);
        }
        if (f.size() != 4) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 4 fields");
        }
        std::optional<double> v;
        if (f[3] != "NA") {
            try {
                std::size_t used = 0;
                v = std::stod(f[3], &used);
                if (used != f[3].size()) {
                    throw std::invalid_argument(f[3]);
                }
            } catch (const std::logic_error&) {
                throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad value '" +
                                  f[3] + "'");
            }
        }
        t.add(f[0], f[1], f[2], v);
    }
    return t;
}

MetricsTable merge_tables(std::span<const MetricsTable> tables) {
    MetricsTable out;
    std::set<std::string> seen;
    for (const auto& t : tables) {
        for (const auto& m : t.methods()) {
            if (!seen.insert(m).second) {
                throw ValidationError("method '" + m + "' appears in more than one table");
            }
        }
        out.rows.insert(out.rows.end(), t.rows.begin(), t.rows.end());
    }
    return out;
}

// ---------------------------------------------------------------- ranking

namespace {

/// Mean 1-based position under descending score.
std::vector<double> tied_ranks_descending(const std::vector<int>& score) {
    std::vector<double> rank(score.size());
    for (std::size_t i = 0; i < score.size(); ++i) {
        int better = 0;
        int equal = 0;
        for (int s : score) {
            better += s > score[i];
            equal += s == score[i];
        }
        rank[i] = better + (equal + 1) / 2.0;
    }
    return rank;
}

} // namespace

RankingResult decathlon_rank(const MetricsTable& table, double alpha_sig) {
    table.validate_complete();
    RankingResult res;
    auto methods = table.methods();
    std::sort(methods.begin(), methods.end());
    res.metrics = table.metrics();
    if (methods.empty()) {
        throw ValidationError("decathlon_rank: empty table");
    }
    for (const auto& metric : res.metrics) {
        const Direction dir = metric_direction(metric);
        std::vector<std::map<std::string, std::optional<double>>> cols;
        for (const auto& m : methods) {
            cols.push_back(table.column(m, metric));
        }
        std::vector<int> score(methods.size(), 0);
        for (std::size_t i = 0; i < methods.size(); ++i) {
            for (std::size_t j = 0; j < methods.size(); ++j) {
                if (i == j) {
                    continue;
                }
                std::vector<double> xi;
                std::vector<double> xj;
                for (const auto& [subject, v] : cols[i]) {
                    const auto& w = cols[j].at(subject);
                    if (v && w) {
                        xi.push_back(*v);
                        xj.push_back(*w);
                    }
                }
                if (xi.empty()) {
                    continue;
                }
                const auto alt = dir == Direction::higher ? Alternative::greater : Alternative::less;
                if (wilcoxon_signed_rank(xi, xj, alt).p_value < alpha_sig) {
                    ++score[i];
                }
            }
        }
        const auto ranks = tied_ranks_descending(score);
        for (std::size_t i = 0; i < methods.size(); ++i) {
            res.wins[methods[i]][metric] = score[i];
            res.metric_rank[methods[i]][metric] = ranks[i];
        }
    }
    for (const auto& m : methods) {
        double sum = 0.0;
        for (const auto& metric : res.metrics) {
            sum += res.metric_rank[m][metric];
        }
        res.average_rank[m] = res.metrics.empty() ? 1.0 : sum / static_cast<double>(res.metrics.size());
    }
    res.methods = methods;
    std::stable_sort(res.methods.begin(), res.methods.end(),
                     [&res](const std::string& a, const std::string& b) {
                         return res.average_rank.at(a) < res.average_rank.at(b);
                     });
    return res;
}

// ---------------------------------------------------------------- report

std::vector<ReportRow> build_report(const MetricsTable& table, const RankingResult& ranking) {
    std::vector<ReportRow> out;
    for (const auto& method : ranking.methods) {
        ReportRow row;
        row.method = method;
        row.rank = ranking.average_rank.at(method);
        for (const auto& metric : report_metrics()) {
            std::vector<double> vals;
            for (const auto& [subject, v] : table.column(method, metric)) {
                if (v) {
                    vals.push_back(*v);
                }
            }
            if (vals.empty()) {
                row.cells[metric] = std::nullopt;
                continue;
            }
            const bool fraction = metric.ends_with("dice") || metric.ends_with("recall");
            if (fraction) {
                for (auto& v : vals) {
                    v *= 100.0;
                }
            }
            SummaryCell c;
            c.median = percentile(vals, 50.0);
            c.q1 = percentile(vals, 25.0);
            c.q3 = percentile(vals, 75.0);
            c.n = static_cast<int>(vals.size());
            row.cells[metric] = c;
        }
        out.push_back(std::move(row));
    }
    return out;
}

namespace {

const std::vector<std::string>& report_headers() {
    static const std::vector<std::string> h{"Target Dice", "Target HD", "Target VD",
                                            "Target Recall", "Source Dice", "Source HD"};
    return h;
}

std::string fixed(double v, int digits) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

} // namespace

std::string render_markdown(const std::vector<ReportRow>& rows) {
    std::ostringstream os;
    os << "| Method |";
    for (const auto& h : report_headers()) {
        os << ' ' << h << " |";
    }
    os << " Rank |\n|---|";
    for (std::size_t i = 0; i < report_headers().size(); ++i) {
        os << "---|";
    }
    os << "---|\n";
    for (const auto& r : rows) {
        os << "| " << r.method << " |";
        for (const auto& metric : report_metrics()) {
            const auto& c = r.cells.at(metric);
            if (c) {
                os << ' ' << fixed(c->median, 1) << " (" << fixed(c->q3 - c->q1, 1) << ") |";
            } else {
                os << " NA |";
            }
        }
        os << ' ' << fixed(r.rank, 2) << " |\n";
    }
    return os.str();
}

nlohmann::json render_json(const std::vector<ReportRow>& rows) {
    nlohmann::json columns = nlohmann::json::array();
    for (std::size_t i = 0; i < report_metrics().size(); ++i) {
        columns.push_back({{"metric", report_metrics()[i]}, {"label", report_headers()[i]}});
    }
    nlohmann::json methods = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json cells = nlohmann::json::object();
        for (const auto& metric : report_metrics()) {
            const auto& c = r.cells.at(metric);
            if (c) {
                cells[metric] = {{"median", c->median}, {"q1", c->q1}, {"q3", c->q3},
                                 {"iqr", c->q3 - c->q1}, {"n", c->n}};
            } else {
                cells[metric] = nullptr;
            }
        }
        methods.push_back({{"method", r.method}, {"rank", r.rank}, {"cells", cells}});
    }
    return {{"columns", columns}, {"methods", methods}};
}

// ---------------------------------------------------------------- inference

Grid3<float> predict_volume(Segmenter& model, const Volume& v, SliceSize size, int batch_size) {
    if (batch_size < 1) {
        throw ConfigError("batch size must be positive");
    }
    const Volume norm = normalize_intensity(v);
    const auto slices = extract_slices(norm, size);
    std::vector<Image2D> out(slices.size(), Image2D(size.ny, size.nx));
    const std::size_t plane = static_cast<std::size_t>(size.ny) * size.nx;
    for (std::size_t first = 0; first < slices.size(); first += batch_size) {
        const int count = static_cast<int>(std::min<std::size_t>(batch_size, slices.size() - first));
        Tensor x(count, 1, size.ny, size.nx);
        for (int i = 0; i < count; ++i) {
            std::copy(slices[first + i].values.begin(), slices[first + i].values.end(),
                      x.data.begin() + static_cast<std::ptrdiff_t>(i * plane));
        }
        const auto y = model.forward(x, nn::Mode::inference);
        for (int i = 0; i < count; ++i) {
            std::copy_n(y.probabilities.data.begin() + static_cast<std::ptrdiff_t>(i * plane), plane,
                        out[first + i].values.begin());
        }
    }
    return assemble_grid(out, v.voxels.nx, v.voxels.ny, v.voxels.nz);
}

Mask3D threshold_mask(const Grid3<float>& prob, double threshold) {
    Mask3D m(prob.nx, prob.ny, prob.nz);
    for (std::size_t i = 0; i < prob.values.size(); ++i) {
        m.values[i] = prob.values[i] >= threshold ? 1 : 0;
    }
    return m;
}

PairMetrics pair_metrics(const Mask3D& a, const Mask3D& b, const Spacing& spacing) {
    PairMetrics pm;
    pm.dice = dice_score(a, b);
    const auto guarded = [](auto&& f) -> std::optional<double> {
        try {
            return f();
        } catch (const UndefinedMetric&) {
            return std::nullopt;
        }
    };
    pm.hd95 = guarded([&] { return hd95(a, b, spacing); });
    pm.vd = guarded([&] { return volume_difference(a, b, spacing); });
    pm.recall = guarded([&] { return recall(a, b); });
    return pm;
}

MetricsTable evaluate_pairs(Segmenter& model, const std::string& method, const Manifest& target,
                            const Manifest* source, const EvaluationOptions& opts) {
    MetricsTable t;
    const auto pairs = target.split(opts.split);
    if (pairs.empty()) {
        throw ValidationError("evaluate: target manifest has no " + to_string(opts.split) +
                              " subjects");
    }
    for (const auto* e : pairs) {
        const PairedSample p = load_pair(target, *e);
        const Mask3D ma = threshold_mask(predict_volume(model, p.image_a, opts.slice_size,
                                                        opts.batch_size), opts.threshold);
        const Mask3D mb = threshold_mask(predict_volume(model, p.image_b, opts.slice_size,
                                                        opts.batch_size), opts.threshold);
        const PairMetrics pm = pair_metrics(ma, mb, p.image_b.spacing);
        t.add(e->subject_id, method, "target_dice", pm.dice);
        t.add(e->subject_id, method, "target_hd95", pm.hd95);
        t.add(e->subject_id, method, "target_vd", pm.vd);
        t.add(e->subject_id, method, "target_recall", pm.recall);
    }
    if (source != nullptr) {
        for (const auto* e : source->split(opts.split)) {
            const LabeledSample s = load_labeled(*source, *e);
            const Mask3D m = threshold_mask(predict_volume(model, s.image, opts.slice_size,
                                                           opts.batch_size), opts.threshold);
            t.add(e->subject_id, method, "source_dice", dice_score(m, s.mask));
            std::optional<double> hd;
            try {
                hd = hd95(m, s.mask, s.image.spacing);
            } catch (const UndefinedMetric&) {
            }
            t.add(e->subject_id, method, "source_hd95", hd);
        }
    }
    return t;
}

} // namespace pcda

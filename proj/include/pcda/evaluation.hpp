#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pcda/volume.hpp"

namespace pcda {

class Segmenter;

// ---------------------------------------------------------------- metrics

/// 2|a ∩ b| / (|a| + |b|); 1.0 when both masks are empty.
double dice_score(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);
double dice_score(const Mask3D& a, const Mask3D& b);

/// Foreground voxels with at least one background (or out-of-grid) 6-neighbour.
/// Axes of extent 1 have no neighbours, so a single slice behaves as 2D.
std::vector<std::array<int, 3>> boundary_voxels(const Mask3D& m);

/// Distance from each boundary voxel of `from` to the nearest boundary voxel of `to`, in mm.
std::vector<double> directed_surface_distances(const Mask3D& from, const Mask3D& to,
                                               const Spacing& spacing);

/// Linear-interpolation percentile (q in [0, 100]) of an unsorted sample.
double percentile(std::vector<double> values, double q);

/// Symmetric 95th-percentile surface distance in mm; UndefinedMetric if either mask is empty.
double hd95(const Mask3D& a, const Mask3D& b, const Spacing& spacing);

/// 100 |V_pred - V_ref| / V_ref; UndefinedMetric when `ref` is empty.
double volume_difference(const Mask3D& pred, const Mask3D& ref, const Spacing& spacing);

/// |pred ∩ ref| / |ref|; UndefinedMetric when `ref` is empty.
double recall(const Mask3D& pred, const Mask3D& ref);

namespace serial {
std::vector<double> directed_surface_distances(const Mask3D& from, const Mask3D& to,
                                               const Spacing& spacing);
}

// ---------------------------------------------------------------- effect size

struct CohortSubject {
    double age_years = 0.0;
    double lesion_mm3 = 0.0;
    double tiv_mm3 = 0.0;
};

struct EffectSize {
    double fold_per_decade = 1.0;
    double slope = 0.0;
    double intercept = 0.0;
    int n_used = 0;
    int n_excluded = 0;  ///< subjects dropped for a non-positive lesion volume
};

/// OLS of ln(lesion / tiv) on age; fold = exp(10 * slope).
EffectSize effect_size_per_decade(std::span<const CohortSubject> subjects);

// ---------------------------------------------------------------- Wilcoxon

enum class Alternative { two_sided, greater, less };
enum class WilcoxonMethod { automatic, exact, normal };

inline constexpr int kWilcoxonExactMaxN = 25;

struct WilcoxonResult {
    double p_value = 1.0;
    double w_plus = 0.0;  ///< sum of ranks of positive differences
    int n = 0;            ///< non-zero differences
    bool exact = false;
};

/// Paired signed-rank test of x - y. Zero differences are dropped and ties get
/// average ranks. `automatic` uses the exact null for n <= 25.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> x, std::span<const double> y,
                                    Alternative alt = Alternative::two_sided,
                                    WilcoxonMethod method = WilcoxonMethod::automatic);

// ---------------------------------------------------------------- tables

enum class Direction { higher, lower };

/// Direction of improvement by metric name (dice / recall higher, hd / vd lower).
Direction metric_direction(const std::string& metric);

struct MetricRow {
    std::string subject;
    std::string method;
    std::string metric;
    std::optional<double> value;  ///< empty when the metric is undefined
};

/// Long-format results, persisted as TSV with header subject/method/metric/value
/// and "NA" for missing values.
struct MetricsTable {
    std::vector<MetricRow> rows;

    void add(std::string subject, std::string method, std::string metric,
             std::optional<double> value);
    /// Methods and metrics in first-appearance order.
    [[nodiscard]] std::vector<std::string> methods() const;
    [[nodiscard]] std::vector<std::string> metrics() const;
    /// subject -> value for one (method, metric).
    [[nodiscard]] std::map<std::string, std::optional<double>> column(
        const std::string& method, const std::string& metric) const;
    /// Each metric must cover the same subjects for every method, without duplicates.
    void validate_complete() const;
};

void save_table(const std::filesystem::path& path, const MetricsTable& t);
MetricsTable load_table(const std::filesystem::path& path);
/// Concatenates tables; a method present in more than one input is a ValidationError.
MetricsTable merge_tables(std::span<const MetricsTable> tables);

// ---------------------------------------------------------------- ranking

struct RankingResult {
    std::vector<std::string> methods;  ///< sorted by average rank, then name
    std::vector<std::string> metrics;
    std::map<std::string, std::map<std::string, int>> wins;           ///< method -> metric -> count
    std::map<std::string, std::map<std::string, double>> metric_rank;  ///< method -> metric -> rank
    std::map<std::string, double> average_rank;
};

/// Per metric, one-sided Wilcoxon tests for every ordered method pair in the
/// metric's better direction (subjects with a missing value in either method
/// are skipped); score = number of methods beaten at p < alpha_sig; ties share
/// the mean rank; final rank = mean over metrics.
RankingResult decathlon_rank(const MetricsTable& table, double alpha_sig = 0.05);

// ---------------------------------------------------------------- report

inline const std::vector<std::string>& report_metrics() {
    static const std::vector<std::string> names{"target_dice", "target_hd95", "target_vd",
                                                "target_recall", "source_dice", "source_hd95"};
    return names;
}

struct SummaryCell {
    double median = 0.0;
    double q1 = 0.0;
    double q3 = 0.0;
    int n = 0;
};

struct ReportRow {
    std::string method;
    std::map<std::string, std::optional<SummaryCell>> cells;  ///< display units
    double rank = 0.0;
};

/// Median (IQR) per method and metric, Dice and recall scaled to percent, sorted by rank.
std::vector<ReportRow> build_report(const MetricsTable& table, const RankingResult& ranking);
std::string render_markdown(const std::vector<ReportRow>& rows);
nlohmann::json render_json(const std::vector<ReportRow>& rows);

// ---------------------------------------------------------------- inference

/// Normalizes `v`, segments every axial slice (`size` window) and reassembles
/// the foreground probability volume on `v`'s grid.
Grid3<float> predict_volume(Segmenter& model, const Volume& v, SliceSize size, int batch_size = 8);
Mask3D threshold_mask(const Grid3<float>& prob, double threshold = 0.5);

struct PairMetrics {
    double dice = 1.0;
    std::optional<double> hd95;
    std::optional<double> vd;
    std::optional<double> recall;
};

/// Pair agreement with the volumetric-like member `b` as reference.
PairMetrics pair_metrics(const Mask3D& a, const Mask3D& b, const Spacing& spacing);

struct EvaluationOptions {
    SliceSize slice_size{64, 64};
    double threshold = 0.5;
    int batch_size = 8;
    Split split = Split::test;
};

/// Rows target_dice/hd95/vd/recall per pair subject and, when `source` is
/// given, source_dice/hd95 against ground truth, all under `method`.
MetricsTable evaluate_pairs(Segmenter& model, const std::string& method,
                            const Manifest& target, const Manifest* source,
                            const EvaluationOptions& opts = {});

} // namespace pcda

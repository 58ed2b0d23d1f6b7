#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pcda/augment.hpp"
#include "pcda/losses.hpp"
#include "pcda/networks.hpp"
#include "pcda/volume.hpp"

namespace pcda {

/// Discriminator settings that do not depend on the data; the input shape
/// comes from the segmenter features and the slice size.
struct DiscriminatorSettings {
    int n_domains = 0;  ///< 0: number of distinct domain ids in the manifests
    int conv_layers = 4;
    int start_channels = 4;
    std::vector<int> hidden_sizes{64, 32};
    double dropout_p = 0.5;
    double negative_slope = 0.2;
};

struct ExperimentConfig {
    std::string name = "experiment";
    std::uint64_t seed = 7;

    bool use_pc = false;
    bool use_adv = false;
    bool use_aug = false;
    bool use_mt = false;

    double alpha = 0.2;
    double beta = 1.0;
    bool pc_stop_gradient = false;
    double ema_decay = 0.99;

    double lr0 = 1e-3;
    double gamma = 0.1;
    std::vector<int> decay_epochs{300, 350};
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    int phase1_epochs = 400;
    int phase2_epochs = 100;
    int batch_size = 8;
    bool phase1_aug = false;

    std::filesystem::path source_manifest;
    std::filesystem::path target_manifest;
    SliceSize slice_size{64, 64};

    SegmenterConfig segmenter{4, 8, 64, 1, 1, FeatureTap::decoder};
    DiscriminatorSettings discriminator;
    PairAugPolicy augmentation;

    double threshold = 0.5;
    double collapse_threshold = 0.25;
    bool deterministic = false;

    /// Throws ConfigError on negative alpha/beta/gamma, non-increasing decays,
    /// both use_pc and use_mt, or invalid sizes.
    void validate() const;
    [[nodiscard]] bool needs_target() const { return use_pc || use_adv || use_mt; }
    [[nodiscard]] nlohmann::json to_json() const;
    /// Missing keys keep their defaults; the result is validated.
    static ExperimentConfig from_json(const nlohmann::json& j);
    /// FNV-1a 64 of the canonical JSON, as 16 hex digits.
    [[nodiscard]] std::string hash() const;
};

/// lr0 * gamma^(number of decay epochs <= epoch).
double lr_at_epoch(int epoch, const ExperimentConfig& cfg);

/// The eight compared methods derived from `base` (names Baseline, Baseline+Aug,
/// Adv, Adv+Aug, PC, PC+Aug, PC+Adv+Aug, MT).
std::vector<ExperimentConfig> method_matrix(const ExperimentConfig& base);

// ---------------------------------------------------------------- optimization

/// Adam over the trainable entries of a parameter list.
class Adam {
public:
    Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
    void step(const nn::ParamList& params, double lr);
    [[nodiscard]] long steps() const { return t_; }

private:
    double beta1_;
    double beta2_;
    double eps_;
    long t_ = 0;
    std::vector<std::vector<float>> m_;
    std::vector<std::vector<float>> v_;
};

/// teacher <- decay * teacher + (1 - decay) * student for every array,
/// buffers included. Mismatched names or shapes raise ConfigError.
void ema_update(const nn::ParamList& teacher, const nn::ParamList& student, double decay);

// ---------------------------------------------------------------- batches

struct LabeledBatch {
    Tensor x;  ///< (B, 1, H, W) normalized images
    Tensor y;  ///< (B, 1, H, W) binary labels
};

/// x_u and x_u_hat from the two members of coregistered pairs, with the
/// discriminator class of each member.
struct PairBatch {
    Tensor u;
    Tensor u_hat;
    int class_u = 1;
    int class_u_hat = 2;
};

/// Segmenter, optional discriminator and teacher, and their optimizers.
/// One call to `step` performs one optimization step of the configured method.
class TrainingState {
public:
    TrainingState(const ExperimentConfig& cfg, Segmenter model, int n_domains,
                  int source_class = 0);

    /// Without `pairs` only L_S is optimized. With pairs: PC adds alpha * L_PC;
    /// Adv adds the reversed discriminator gradient; MT uses the teacher.
    LossBundle step(const LabeledBatch& labeled, const PairBatch* pairs, double lr);

    Segmenter& segmenter() { return model_; }
    Discriminator* discriminator() { return disc_ ? disc_.get() : nullptr; }
    Segmenter* teacher() { return teacher_ ? teacher_.get() : nullptr; }

private:
    ExperimentConfig cfg_;
    Segmenter model_;
    Adam opt_;
    std::unique_ptr<Discriminator> disc_;
    std::optional<Adam> disc_opt_;
    std::unique_ptr<Segmenter> teacher_;
    int n_domains_;
    int source_class_;
};

/// Mean-teacher update for one paired batch: consistency = soft dice between
/// teacher(x_u) (constant) and student(x_u_hat), weighted by alpha; after the
/// student step the teacher follows by EMA.
LossBundle train_mean_teacher_step(TrainingState& state, const LabeledBatch& labeled,
                                   const PairBatch& pairs, double lr);

// ---------------------------------------------------------------- diagnostics

struct CollapseRecord {
    std::vector<double> fractions;  ///< predicted lesion voxels / foreground voxels
    double median_fraction = 0.0;
    double median_lesion_voxels = 0.0;
    bool collapsed = false;     ///< median fraction above the threshold
    bool empty_output = false;  ///< median prediction has no lesion voxels
    bool flagged = false;

    [[nodiscard]] nlohmann::json to_json() const;
};

/// One entry per predicted volume; `foregrounds` gives the head mask of each.
CollapseRecord collapse_monitor(std::span<const Mask3D> predictions,
                                std::span<const Mask3D> foregrounds, double threshold = 0.25);

/// Line-delimited JSON records, kept in memory and optionally appended to a file.
class TrainingLog {
public:
    TrainingLog() = default;
    explicit TrainingLog(const std::filesystem::path& path);

    void write(const nlohmann::json& record);
    [[nodiscard]] const std::vector<nlohmann::json>& records() const { return records_; }

private:
    std::vector<nlohmann::json> records_;
    std::unique_ptr<std::ofstream> out_;
};

// ---------------------------------------------------------------- data

struct SliceSample {
    Image2D image;       ///< raw intensities
    Mask2D foreground;   ///< nonzero voxels
    Mask2D label;        ///< empty for unlabeled slices
    IntensityStats stats;  ///< of the whole volume
};

struct PairSliceSample {
    SliceSample a;
    SliceSample b;
};

/// Slices with any foreground, from every `split` subject of a labeled manifest.
std::vector<SliceSample> load_labeled_slices(const Manifest& m, Split split, SliceSize size);
std::vector<PairSliceSample> load_pair_slices(const Manifest& m, Split split, SliceSize size);

LabeledBatch make_labeled_batch(std::span<const SliceSample* const> samples,
                                const PairAugPolicy* aug, std::uint64_t seed);
PairBatch make_pair_batch(std::span<const PairSliceSample* const> samples,
                          const PairAugPolicy* aug, std::uint64_t seed, int class_u,
                          int class_u_hat);

// ---------------------------------------------------------------- protocol

struct EpochRecord {
    int epoch = 0;
    double lr = 0.0;
    LossBundle mean_loss;
    double val_score = 0.0;
    std::optional<CollapseRecord> collapse;
};

struct TrainResult {
    Checkpoint best;
    std::vector<EpochRecord> history;
};

/// Supervised training on source slices; returns the epoch with the highest
/// mean per-subject validation Dice (epoch 0 = initialization).
TrainResult train_phase1(const ExperimentConfig& cfg, const Manifest& source,
                         TrainingLog* log = nullptr);

/// Adaptation from `init`. Validation score = mean pair Dice on target val
/// pairs, zeroed when the collapse monitor flags; epochs 1..E are candidates
/// (the initialization only when E = 0). `target` may be null only when the
/// method uses no target data.
TrainResult train_phase2(const ExperimentConfig& cfg, const Checkpoint& init,
                         const Manifest& source, const Manifest* target,
                         TrainingLog* log = nullptr);

/// Mean per-subject 3D Dice on a labeled split.
double labeled_dice(Segmenter& model, const Manifest& m, Split split, SliceSize size,
                    double threshold = 0.5);

struct PairValidation {
    double mean_pair_dice = 0.0;
    CollapseRecord collapse;
};

PairValidation validate_pairs(Segmenter& model, const Manifest& target, Split split,
                              SliceSize size, double threshold, double collapse_threshold);

} // namespace pcda

#include "pcda/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <set>

#include "pcda/errors.hpp"
#include "pcda/evaluation.hpp"
#include "pcda/kernels.hpp"
#include "pcda/random.hpp"

namespace pcda {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

void ExperimentConfig::validate() const {
    if (!(alpha >= 0.0) || !(beta >= 0.0) || !(gamma >= 0.0)) {
        throw ConfigError("config: alpha, beta and gamma must be non-negative");
    }
    if (!(lr0 > 0.0)) {
        throw ConfigError("config: lr0 must be positive");
    }
    for (std::size_t i = 1; i < decay_epochs.size(); ++i) {
        if (decay_epochs[i] <= decay_epochs[i - 1]) {
            throw ConfigError("config: decay_epochs must be strictly increasing");
        }
    }
    if (use_pc && use_mt) {
        throw ConfigError("config: use_pc and use_mt cannot both drive the consistency term");
    }
    if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) {
        throw ConfigError("config: ema_decay must lie in [0, 1]");
    }
    if (phase1_epochs < 0 || phase2_epochs < 0) {
        throw ConfigError("config: epoch counts must be non-negative");
    }
    if (batch_size < 1) {
        throw ConfigError("config: batch_size must be positive");
    }
    if (slice_size.ny < 1 || slice_size.nx < 1) {
        throw ConfigError("config: slice_size must be positive");
    }
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0) ||
        !(adam_eps > 0.0)) {
        throw ConfigError("config: invalid Adam hyperparameters");
    }
    if (!(threshold > 0.0 && threshold < 1.0) || !(collapse_threshold > 0.0)) {
        throw ConfigError("config: thresholds must lie in (0, 1)");
    }
    if (discriminator.n_domains == 1 || discriminator.n_domains < 0) {
        throw ConfigError("config: discriminator n_domains must be 0 (auto) or >= 2");
    }
    segmenter.validate();
    augmentation.validate();
}

json ExperimentConfig::to_json() const {
    const auto& a = augmentation;
    return {
        {"name", name},
        {"seed", seed},
        {"method", {{"use_pc", use_pc}, {"use_adv", use_adv}, {"use_aug", use_aug}, {"use_mt", use_mt}}},
        {"alpha", alpha},
        {"beta", beta},
        {"pc_stop_gradient", pc_stop_gradient},
        {"ema_decay", ema_decay},
        {"optimizer",
         {{"lr0", lr0}, {"gamma", gamma}, {"decay_epochs", decay_epochs},
          {"adam_beta1", adam_beta1}, {"adam_beta2", adam_beta2}, {"adam_eps", adam_eps}}},
        {"phase1_epochs", phase1_epochs},
        {"phase2_epochs", phase2_epochs},
        {"batch_size", batch_size},
        {"phase1_aug", phase1_aug},
        {"data",
         {{"source_manifest", source_manifest.generic_string()},
          {"target_manifest", target_manifest.generic_string()},
          {"slice_size", {slice_size.ny, slice_size.nx}}}},
        {"segmenter", segmenter.to_json()},
        {"discriminator",
         {{"n_domains", discriminator.n_domains}, {"conv_layers", discriminator.conv_layers},
          {"start_channels", discriminator.start_channels},
          {"hidden_sizes", discriminator.hidden_sizes}, {"dropout_p", discriminator.dropout_p},
          {"negative_slope", discriminator.negative_slope}}},
        {"augmentation",
         {{"affine", a.affine},
          {"bias_field", a.bias_field},
          {"motion", a.motion},
          {"geometric_shared", a.geometric_shared},
          {"nongeometric_on_b_only", a.nongeometric_on_b_only},
          {"rotation_deg", a.affine_ranges.max_rotation_deg},
          {"shear", a.affine_ranges.max_shear},
          {"scale", {a.affine_ranges.min_scale, a.affine_ranges.max_scale}},
          {"bias_order", a.bias.polynomial_order},
          {"bias_coeff_range", a.bias.coeff_range},
          {"max_movements", a.max_movements},
          {"motion_rotation_deg", a.motion_max_rotation_deg},
          {"motion_translation_px", a.motion_max_translation_px}}},
        {"threshold", threshold},
        {"collapse_threshold", collapse_threshold},
        {"deterministic", deterministic},
    };
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    ExperimentConfig c;
    try {
        c.name = j.value("name", c.name);
        c.seed = j.value("seed", c.seed);
        if (j.contains("method")) {
            const auto& m = j.at("method");
            c.use_pc = m.value("use_pc", c.use_pc);
            c.use_adv = m.value("use_adv", c.use_adv);
            c.use_aug = m.value("use_aug", c.use_aug);
            c.use_mt = m.value("use_mt", c.use_mt);
        }
        c.alpha = j.value("alpha", c.alpha);
        c.beta = j.value("beta", c.beta);
        c.pc_stop_gradient = j.value("pc_stop_gradient", c.pc_stop_gradient);
        c.ema_decay = j.value("ema_decay", c.ema_decay);
        if (j.contains("optimizer")) {
            const auto& o = j.at("optimizer");
            c.lr0 = o.value("lr0", c.lr0);
            c.gamma = o.value("gamma", c.gamma);
            c.decay_epochs = o.value("decay_epochs", c.decay_epochs);
            c.adam_beta1 = o.value("adam_beta1", c.adam_beta1);
            c.adam_beta2 = o.value("adam_beta2", c.adam_beta2);
            c.adam_eps = o.value("adam_eps", c.adam_eps);
        }
        c.phase1_epochs = j.value("phase1_epochs", c.phase1_epochs);
        c.phase2_epochs = j.value("phase2_epochs", c.phase2_epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.phase1_aug = j.value("phase1_aug", c.phase1_aug);
        if (j.contains("data")) {
            const auto& d = j.at("data");
            c.source_manifest = d.value("source_manifest", std::string{});
            c.target_manifest = d.value("target_manifest", std::string{});
            if (d.contains("slice_size")) {
                const auto s = d.at("slice_size").get<std::array<int, 2>>();
                c.slice_size = {s[0], s[1]};
            }
        }
        if (j.contains("segmenter")) {
            json merged = c.segmenter.to_json();
            merged.update(j.at("segmenter"));
            c.segmenter = SegmenterConfig::from_json(merged);
        }
        if (j.contains("discriminator")) {
            const auto& d = j.at("discriminator");
            auto& s = c.discriminator;
            s.n_domains = d.value("n_domains", s.n_domains);
            s.conv_layers = d.value("conv_layers", s.conv_layers);
            s.start_channels = d.value("start_channels", s.start_channels);
            s.hidden_sizes = d.value("hidden_sizes", s.hidden_sizes);
            s.dropout_p = d.value("dropout_p", s.dropout_p);
            s.negative_slope = d.value("negative_slope", s.negative_slope);
        }
        if (j.contains("augmentation")) {
            const auto& d = j.at("augmentation");
            auto& a = c.augmentation;
            a.affine = d.value("affine", a.affine);
            a.bias_field = d.value("bias_field", a.bias_field);
            a.motion = d.value("motion", a.motion);
            a.geometric_shared = d.value("geometric_shared", a.geometric_shared);
            a.nongeometric_on_b_only = d.value("nongeometric_on_b_only", a.nongeometric_on_b_only);
            a.affine_ranges.max_rotation_deg = d.value("rotation_deg", a.affine_ranges.max_rotation_deg);
            a.affine_ranges.max_shear = d.value("shear", a.affine_ranges.max_shear);
            if (d.contains("scale")) {
                const auto s = d.at("scale").get<std::array<double, 2>>();
                a.affine_ranges.min_scale = s[0];
                a.affine_ranges.max_scale = s[1];
            }
            a.bias.polynomial_order = d.value("bias_order", a.bias.polynomial_order);
            a.bias.coeff_range = d.value("bias_coeff_range", a.bias.coeff_range);
            a.max_movements = d.value("max_movements", a.max_movements);
            a.motion_max_rotation_deg = d.value("motion_rotation_deg", a.motion_max_rotation_deg);
            a.motion_max_translation_px =
                d.value("motion_translation_px", a.motion_max_translation_px);
        }
        c.threshold = j.value("threshold", c.threshold);
        c.collapse_threshold = j.value("collapse_threshold", c.collapse_threshold);
        c.deterministic = j.value("deterministic", c.deterministic);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

std::string ExperimentConfig::hash() const {
    const std::string text = to_json().dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

double lr_at_epoch(int epoch, const ExperimentConfig& cfg) {
    if (epoch < 0) {
        throw ConfigError("lr_at_epoch: epoch must be non-negative");
    }
    // one multiplication per milestone, as a step scheduler would apply it
    double lr = cfg.lr0;
    for (int d : cfg.decay_epochs) {
        if (d <= epoch) {
            lr *= cfg.gamma;
        }
    }
    return lr;
}

std::vector<ExperimentConfig> method_matrix(const ExperimentConfig& base) {
    struct Flags {
        const char* name;
        bool pc, adv, aug, mt;
    };
    static constexpr Flags kMethods[] = {
        {"Baseline", false, false, false, false},  {"Baseline+Aug", false, false, true, false},
        {"Adv", false, true, false, false},        {"Adv+Aug", false, true, true, false},
        {"PC", true, false, false, false},         {"PC+Aug", true, false, true, false},
        {"PC+Adv+Aug", true, true, true, false},   {"MT", false, false, false, true},
    };
    std::vector<ExperimentConfig> out;
    for (const auto& f : kMethods) {
        ExperimentConfig c = base;
        c.name = f.name;
        c.use_pc = f.pc;
        c.use_adv = f.adv;
        c.use_aug = f.aug;
        c.use_mt = f.mt;
        out.push_back(std::move(c));
    }
    return out;
}

// ---------------------------------------------------------------- optimization

Adam::Adam(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(const nn::ParamList& params, double lr) {
    if (m_.empty()) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (params[i].second->trainable) {
                m_[i].assign(params[i].second->size(), 0.0f);
                v_[i].assign(params[i].second->size(), 0.0f);
            }
        }
    }
    if (m_.size() != params.size()) {
        throw TrainingError("Adam: parameter list changed between steps");
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const auto b1 = static_cast<float>(beta1_);
    const auto b2 = static_cast<float>(beta2_);
    for (std::size_t i = 0; i < params.size(); ++i) {
        nn::Param& p = *params[i].second;
        if (!p.trainable) {
            continue;
        }
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
            const float g = p.grad[k];
            m[k] = b1 * m[k] + (1.0f - b1) * g;
            v[k] = b2 * v[k] + (1.0f - b2) * g * g;
            const double mh = m[k] / c1;
            const double vh = v[k] / c2;
            p.value[k] -= static_cast<float>(lr * mh / (std::sqrt(vh) + eps_));
        }
    }
}

void ema_update(const nn::ParamList& teacher, const nn::ParamList& student, double decay) {
    if (teacher.size() != student.size()) {
        throw ConfigError("EMA: teacher and student differ in structure");
    }
    for (std::size_t i = 0; i < teacher.size(); ++i) {
        auto& t = *teacher[i].second;
        const auto& s = *student[i].second;
        if (teacher[i].first != student[i].first || t.shape != s.shape) {
            throw ConfigError("EMA: mismatch at " + teacher[i].first);
        }
        for (std::size_t k = 0; k < t.size(); ++k) {
            t.value[k] = static_cast<float>(decay * t.value[k] + (1.0 - decay) * s.value[k]);
        }
    }
}

// ---------------------------------------------------------------- steps

namespace {

DiscriminatorConfig discriminator_config(const ExperimentConfig& cfg, int n_domains) {
    DiscriminatorConfig d;
    d.in_channels = cfg.segmenter.feature_channels();
    const int down = cfg.segmenter.tap == FeatureTap::bottleneck ? 1 << (cfg.segmenter.depth - 1) : 1;
    d.in_h = (cfg.slice_size.ny + down - 1) / down;
    d.in_w = (cfg.slice_size.nx + down - 1) / down;
    d.conv_layers = cfg.discriminator.conv_layers;
    d.start_channels = cfg.discriminator.start_channels;
    d.hidden_sizes = cfg.discriminator.hidden_sizes;
    d.n_domains = n_domains;
    d.dropout_p = cfg.discriminator.dropout_p;
    d.negative_slope = cfg.discriminator.negative_slope;
    return d;
}

void require_finite(const LossBundle& l) {
    if (!std::isfinite(l.l_s) || !std::isfinite(l.l_pc) || !std::isfinite(l.l_adv) ||
        !std::isfinite(l.l_tot)) {
        throw TrainingError("non-finite loss (L_S=" + std::to_string(l.l_s) +
                            ", L_PC=" + std::to_string(l.l_pc) +
                            ", L_adv=" + std::to_string(l.l_adv) + ")");
    }
}

std::span<const float> batch_span(const Tensor& t, int first, int count) {
    const std::size_t per = t.sample_size();
    return {t.data.data() + static_cast<std::size_t>(first) * per,
            static_cast<std::size_t>(count) * per};
}

void add_to(Tensor& g, int first, std::span<const float> src, double scale) {
    float* dst = g.data.data() + static_cast<std::size_t>(first) * g.sample_size();
    for (std::size_t i = 0; i < src.size(); ++i) {
        dst[i] += static_cast<float>(scale * src[i]);
    }
}

} // namespace

TrainingState::TrainingState(const ExperimentConfig& cfg, Segmenter model, int n_domains,
                             int source_class)
    : cfg_(cfg),
      model_(std::move(model)),
      opt_(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
      n_domains_(n_domains),
      source_class_(source_class) {
    cfg_.validate();
    if (cfg_.use_adv) {
        disc_ = std::make_unique<Discriminator>(discriminator_config(cfg_, n_domains_),
                                                derive_seed(cfg_.seed, 0xd15c));
        disc_opt_.emplace(cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_eps);
    }
    if (cfg_.use_mt) {
        teacher_ = std::make_unique<Segmenter>(model_);
    }
}

LossBundle TrainingState::step(const LabeledBatch& labeled, const PairBatch* pairs, double lr) {
    if (!labeled.x.same_shape(labeled.y)) {
        throw ShapeError("labeled batch: image and label shapes differ");
    }
    const bool with_pairs = pairs != nullptr && cfg_.needs_target();
    if (cfg_.needs_target() && pairs == nullptr) {
        throw ConfigError("step: the configured method needs a paired batch");
    }
    if (with_pairs && !pairs->u.same_shape(pairs->u_hat)) {
        throw ShapeError("pair batch: members differ in shape");
    }
    LossBundle loss;
    loss.alpha = (cfg_.use_pc || cfg_.use_mt) ? cfg_.alpha : 0.0;
    loss.beta = cfg_.use_adv ? cfg_.beta : 0.0;

    const int nl = labeled.x.n;
    const int np = with_pairs ? pairs->u.n : 0;

    // student batch: [labeled; x_u (unless MT); x_u_hat]
    std::vector<Tensor> parts{labeled.x};
    int u_first = -1;
    int uh_first = -1;
    if (with_pairs) {
        if (!cfg_.use_mt) {
            u_first = nl;
            parts.push_back(pairs->u);
        }
        uh_first = nl + (cfg_.use_mt ? 0 : np);
        parts.push_back(pairs->u_hat);
    }
    const Tensor x = parts.size() == 1 ? labeled.x : concat_batch(parts);

    Tensor teacher_probs;
    if (cfg_.use_mt && with_pairs) {
        teacher_probs = teacher_->forward(pairs->u, nn::Mode::inference).probabilities;
    }

    auto params = model_.parameters();
    nn::zero_grad(params);
    SegmenterOutput out = model_.forward(x, nn::Mode::train);
    Tensor grad_p(out.probabilities.n, out.probabilities.c, out.probabilities.h,
                  out.probabilities.w);

    const auto ls = soft_dice_loss_with_grad(batch_span(out.probabilities, 0, nl),
                                             std::span<const float>(labeled.y.data));
    loss.l_s = ls.value;
    add_to(grad_p, 0, ls.grad_a, 1.0);

    if (with_pairs && cfg_.use_pc) {
        const auto pc = pc_loss(batch_span(out.probabilities, u_first, np),
                                batch_span(out.probabilities, uh_first, np), cfg_.pc_stop_gradient);
        loss.l_pc = pc.value;
        add_to(grad_p, u_first, pc.grad_a, cfg_.alpha);
        add_to(grad_p, uh_first, pc.grad_b, cfg_.alpha);
    }
    if (with_pairs && cfg_.use_mt) {
        const auto mt = pc_loss(std::span<const float>(teacher_probs.data),
                                batch_span(out.probabilities, uh_first, np), true);
        loss.l_pc = mt.value;
        add_to(grad_p, uh_first, mt.grad_b, cfg_.alpha);
    }

    Tensor grad_h;
    if (with_pairs && cfg_.use_adv) {
        auto dparams = disc_->parameters();
        nn::zero_grad(dparams);
        const Tensor logits = disc_->forward(out.features, nn::Mode::train);
        std::vector<int> labels(static_cast<std::size_t>(x.n), source_class_);
        for (int i = 0; i < np; ++i) {
            if (u_first >= 0) {
                labels[u_first + i] = pairs->class_u;
            }
            labels[uh_first + i] = pairs->class_u_hat;
        }
        const std::vector<double> logit_values(logits.data.begin(), logits.data.end());
        const CrossEntropy ce = adversarial_loss(logit_values, n_domains_, labels);
        loss.l_adv = ce.value;
        Tensor grad_logits(logits.n, logits.c, 1, 1);
        std::transform(ce.grad_logits.begin(), ce.grad_logits.end(), grad_logits.data.begin(),
                       [](double g) { return static_cast<float>(g); });
        const Tensor dh = disc_->backward(grad_logits);
        grad_h = GradientReversal(cfg_.beta).backward(dh);
        disc_opt_->step(dparams, lr);
    }

    loss.l_tot = total_loss(loss.l_s, loss.l_pc, loss.alpha);
    require_finite(loss);
    model_.backward(grad_p, grad_h.size() > 0 ? &grad_h : nullptr);
    opt_.step(params, lr);

    if (cfg_.use_mt && with_pairs) {
        ema_update(teacher_->parameters(), model_.parameters(), cfg_.ema_decay);
    }
    return loss;
}

LossBundle train_mean_teacher_step(TrainingState& state, const LabeledBatch& labeled,
                                   const PairBatch& pairs, double lr) {
    if (state.teacher() == nullptr) {
        throw ConfigError("mean-teacher step requires use_mt");
    }
    return state.step(labeled, &pairs, lr);
}

// ---------------------------------------------------------------- diagnostics

json CollapseRecord::to_json() const {
    return {{"median_fraction", median_fraction},
            {"median_lesion_voxels", median_lesion_voxels},
            {"collapsed", collapsed},
            {"empty_output", empty_output},
            {"flagged", flagged},
            {"fractions", fractions}};
}

CollapseRecord collapse_monitor(std::span<const Mask3D> predictions,
                                std::span<const Mask3D> foregrounds, double threshold) {
    if (predictions.empty() || predictions.size() != foregrounds.size()) {
        throw ValidationError("collapse monitor: need one foreground mask per prediction");
    }
    CollapseRecord r;
    std::vector<double> lesion;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const auto& p = predictions[i];
        const auto& f = foregrounds[i];
        if (!p.same_shape(f)) {
            throw ShapeError("collapse monitor: prediction and foreground shapes differ");
        }
        std::size_t inside = 0;
        std::size_t fg = 0;
        std::size_t total = 0;
        for (std::size_t k = 0; k < p.values.size(); ++k) {
            fg += f.values[k] != 0;
            total += p.values[k] != 0;
            inside += p.values[k] != 0 && f.values[k] != 0;
        }
        r.fractions.push_back(fg == 0 ? 0.0 : static_cast<double>(inside) / static_cast<double>(fg));
        lesion.push_back(static_cast<double>(total));
    }
    r.median_fraction = percentile(r.fractions, 50.0);
    r.median_lesion_voxels = percentile(lesion, 50.0);
    r.collapsed = r.median_fraction > threshold;
    r.empty_output = r.median_lesion_voxels == 0.0;
    r.flagged = r.collapsed || r.empty_output;
    return r;
}

TrainingLog::TrainingLog(const fs::path& path)
    : out_(std::make_unique<std::ofstream>(path, std::ios::trunc)) {
    if (!*out_) {
        throw IoError("cannot write training log " + path.string());
    }
}

void TrainingLog::write(const json& record) {
    records_.push_back(record);
    if (out_) {
        *out_ << record.dump() << '\n';
        out_->flush();
    }
}

// ---------------------------------------------------------------- data

namespace {

std::vector<SliceSample> slices_of(const Volume& v, const Mask3D* label, SliceSize size) {
    const IntensityStats stats = foreground_stats(v.voxels.values);
    const auto images = extract_slices(v, size);
    const auto fgs = extract_slices(nonzero_mask(v), size);
    std::vector<Mask2D> labels;
    if (label != nullptr) {
        labels = extract_slices(*label, size);
    }
    std::vector<SliceSample> out;
    for (std::size_t z = 0; z < images.size(); ++z) {
        SliceSample s;
        s.image = images[z];
        s.foreground = fgs[z];
        s.label = label != nullptr ? labels[z] : Mask2D(size.ny, size.nx);
        s.stats = stats;
        out.push_back(std::move(s));
    }
    return out;
}

bool has_foreground(const SliceSample& s) {
    return std::any_of(s.foreground.values.begin(), s.foreground.values.end(),
                       [](auto v) { return v != 0; });
}

void normalized_into(const SliceSample& s, const SliceTransform* t, float* image, float* label) {
    Image2D img = s.image;
    Mask2D fg = s.foreground;
    IntensityStats stats = s.stats;
    if (t != nullptr) {
        // the volume statistics describe the unaugmented intensities, so the
        // mean gain the augmentation adds on the foreground is divided out
        const Image2D geometric = t->affine ? apply_affine(s.image, *t->affine) : s.image;
        img = apply_transform(s.image, *t);
        fg = apply_geometric(s.foreground, *t);
        double before = 0.0;
        double after = 0.0;
        for (std::size_t i = 0; i < img.size(); ++i) {
            if (fg.values[i] != 0) {
                before += geometric.values[i];
                after += img.values[i];
            }
        }
        if (before > 0.0 && after > 0.0) {
            stats.mean *= after / before;
            stats.stddev *= after / before;
        }
    }
    normalize_slice(img, fg, stats);
    std::copy(img.values.begin(), img.values.end(), image);
    if (label != nullptr) {
        const Mask2D lab = t != nullptr ? apply_geometric(s.label, *t) : s.label;
        std::transform(lab.values.begin(), lab.values.end(), label,
                       [](std::uint8_t v) { return static_cast<float>(v); });
    }
}

} // namespace

std::vector<SliceSample> load_labeled_slices(const Manifest& m, Split split, SliceSize size) {
    std::vector<SliceSample> out;
    for (const auto* e : m.split(split)) {
        const LabeledSample s = load_labeled(m, *e);
        for (auto& sl : slices_of(s.image, &s.mask, size)) {
            if (has_foreground(sl)) {
                out.push_back(std::move(sl));
            }
        }
    }
    return out;
}

std::vector<PairSliceSample> load_pair_slices(const Manifest& m, Split split, SliceSize size) {
    std::vector<PairSliceSample> out;
    for (const auto* e : m.split(split)) {
        const PairedSample p = load_pair(m, *e);
        auto a = slices_of(p.image_a, nullptr, size);
        auto b = slices_of(p.image_b, nullptr, size);
        for (std::size_t z = 0; z < a.size(); ++z) {
            if (has_foreground(a[z]) || has_foreground(b[z])) {
                out.push_back({std::move(a[z]), std::move(b[z])});
            }
        }
    }
    return out;
}

LabeledBatch make_labeled_batch(std::span<const SliceSample* const> samples,
                                const PairAugPolicy* aug, std::uint64_t seed) {
    if (samples.empty()) {
        throw ValidationError("empty labeled batch");
    }
    const int ny = samples[0]->image.ny;
    const int nx = samples[0]->image.nx;
    const int n = static_cast<int>(samples.size());
    LabeledBatch b{Tensor(n, 1, ny, nx), Tensor(n, 1, ny, nx)};
    const std::size_t plane = static_cast<std::size_t>(ny) * nx;
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
        std::optional<SliceTransform> t;
        if (aug != nullptr && aug->any_enabled()) {
            t = sample_slice_transform(*aug, ny, nx, true, derive_seed(seed, i));
        }
        normalized_into(*samples[i], t ? &*t : nullptr, b.x.data.data() + i * plane,
                        b.y.data.data() + i * plane);
    }
    return b;
}

PairBatch make_pair_batch(std::span<const PairSliceSample* const> samples,
                          const PairAugPolicy* aug, std::uint64_t seed, int class_u,
                          int class_u_hat) {
    if (samples.empty()) {
        throw ValidationError("empty pair batch");
    }
    const int ny = samples[0]->a.image.ny;
    const int nx = samples[0]->a.image.nx;
    const int n = static_cast<int>(samples.size());
    PairBatch b{Tensor(n, 1, ny, nx), Tensor(n, 1, ny, nx), class_u, class_u_hat};
    const std::size_t plane = static_cast<std::size_t>(ny) * nx;
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
        std::optional<PairTransform> t;
        if (aug != nullptr && aug->any_enabled()) {
            t = sample_pair_transform(*aug, ny, nx, derive_seed(seed, i));
        }
        normalized_into(samples[i]->a, t ? &t->a : nullptr, b.u.data.data() + i * plane, nullptr);
        normalized_into(samples[i]->b, t ? &t->b : nullptr, b.u_hat.data.data() + i * plane,
                        nullptr);
    }
    return b;
}

// ---------------------------------------------------------------- validation

double labeled_dice(Segmenter& model, const Manifest& m, Split split, SliceSize size,
                    double threshold) {
    const auto entries = m.split(split);
    if (entries.empty()) {
        throw ValidationError("manifest " + m.name + " has no " + to_string(split) + " subjects");
    }
    double sum = 0.0;
    for (const auto* e : entries) {
        const LabeledSample s = load_labeled(m, *e);
        sum += dice_score(threshold_mask(predict_volume(model, s.image, size), threshold), s.mask);
    }
    return sum / static_cast<double>(entries.size());
}

PairValidation validate_pairs(Segmenter& model, const Manifest& target, Split split,
                              SliceSize size, double threshold, double collapse_threshold) {
    const auto entries = target.split(split);
    if (entries.empty()) {
        throw ValidationError("manifest " + target.name + " has no " + to_string(split) + " pairs");
    }
    std::vector<Mask3D> preds;
    std::vector<Mask3D> fgs;
    double sum = 0.0;
    for (const auto* e : entries) {
        const PairedSample p = load_pair(target, *e);
        Mask3D a = threshold_mask(predict_volume(model, p.image_a, size), threshold);
        Mask3D b = threshold_mask(predict_volume(model, p.image_b, size), threshold);
        sum += dice_score(a, b);
        preds.push_back(std::move(a));
        preds.push_back(std::move(b));
        fgs.push_back(nonzero_mask(p.image_a));
        fgs.push_back(nonzero_mask(p.image_b));
    }
    PairValidation v;
    v.mean_pair_dice = sum / static_cast<double>(entries.size());
    v.collapse = collapse_monitor(preds, fgs, collapse_threshold);
    return v;
}

// ---------------------------------------------------------------- protocol

namespace {

void prepare_threads(const ExperimentConfig& cfg) {
    if (cfg.deterministic || kernels::deterministic_mode_requested()) {
        kernels::force_single_thread();
    }
}

json loss_json(const LossBundle& l) {
    return {{"l_s", l.l_s}, {"l_pc", l.l_pc}, {"l_adv", l.l_adv}, {"l_tot", l.l_tot}};
}

void accumulate(LossBundle& sum, const LossBundle& l) {
    sum.l_s += l.l_s;
    sum.l_pc += l.l_pc;
    sum.l_adv += l.l_adv;
    sum.l_tot += l.l_tot;
    sum.alpha = l.alpha;
    sum.beta = l.beta;
}

LossBundle mean_of(LossBundle sum, int steps) {
    if (steps > 0) {
        sum.l_s /= steps;
        sum.l_pc /= steps;
        sum.l_adv /= steps;
        sum.l_tot /= steps;
    }
    return sum;
}

/// Cycles through a shuffled index order, reshuffling on each wrap.
class Sampler {
public:
    Sampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
        std::iota(order_.begin(), order_.end(), 0);
        std::shuffle(order_.begin(), order_.end(), rng_);
    }

    std::vector<std::size_t> next(int count) {
        std::vector<std::size_t> out;
        for (int i = 0; i < count; ++i) {
            if (pos_ == order_.size()) {
                std::shuffle(order_.begin(), order_.end(), rng_);
                pos_ = 0;
            }
            out.push_back(order_[pos_++]);
        }
        return out;
    }

private:
    std::vector<std::size_t> order_;
    std::mt19937_64 rng_;
    std::size_t pos_ = 0;
};

struct DomainClasses {
    int n_domains = 2;
    int source = 0;
    int a = 1;
    int b = 1;
};

DomainClasses domain_classes(const ExperimentConfig& cfg, const Manifest& source,
                             const Manifest* target) {
    std::set<int> ids;
    for (int id : source.domain_ids()) {
        ids.insert(id);
    }
    int id_a = -1;
    int id_b = -1;
    if (target != nullptr) {
        for (int id : target->domain_ids()) {
            ids.insert(id);
        }
        const auto train = target->split(Split::train);
        if (!train.empty()) {
            id_a = train.front()->volumes.at(0).domain_id;
            id_b = train.front()->volumes.at(1).domain_id;
        }
    }
    const std::vector<int> sorted(ids.begin(), ids.end());
    const auto index_of = [&sorted](int id) {
        return static_cast<int>(std::find(sorted.begin(), sorted.end(), id) - sorted.begin());
    };
    DomainClasses d;
    const int detected = static_cast<int>(sorted.size());
    d.n_domains = cfg.discriminator.n_domains > 0 ? cfg.discriminator.n_domains : std::max(2, detected);
    const int src_id = source.domain_ids().empty() ? 0 : source.domain_ids().front();
    if (d.n_domains >= detected) {
        d.source = index_of(src_id);
        d.a = id_a >= 0 ? index_of(id_a) : 1;
        d.b = id_b >= 0 ? index_of(id_b) : 1;
    } else {
        // fewer classes than domains: source vs. target
        d.source = 0;
        d.a = 1;
        d.b = 1;
    }
    return d;
}

} // namespace

TrainResult train_phase1(const ExperimentConfig& cfg, const Manifest& source, TrainingLog* log) {
    cfg.validate();
    prepare_threads(cfg);
    if (source.entries.empty()) {
        throw ConfigError("phase 1: source manifest is empty");
    }
    const auto train = load_labeled_slices(source, Split::train, cfg.slice_size);
    if (train.empty()) {
        throw ConfigError("phase 1: source manifest has no training slices");
    }
    const bool has_val = !source.split(Split::val).empty();

    TrainingState state(cfg, Segmenter(cfg.segmenter, derive_seed(cfg.seed, 0x5e9)), 2);
    const std::string hash = cfg.hash();
    TrainResult res;
    const auto val_dice = [&] {
        return has_val ? labeled_dice(state.segmenter(), source, Split::val, cfg.slice_size,
                                      cfg.threshold)
                       : 0.0;
    };
    const auto snapshot = [&](int epoch, double score) {
        res.best = make_checkpoint(state.segmenter(), epoch, score, hash);
        res.best.metadata["phase"] = 1;
        res.best.metadata["method"] = cfg.name;
        res.best.metadata["slice_size"] = {cfg.slice_size.ny, cfg.slice_size.nx};
    };
    double best = val_dice();
    snapshot(0, best);
    if (log != nullptr) {
        log->write({{"record", "init"}, {"phase", 1}, {"config_hash", hash}, {"val_dice", best},
                    {"train_slices", train.size()}});
    }

    const int steps = static_cast<int>((train.size() + cfg.batch_size - 1) / cfg.batch_size);
    Sampler sampler(train.size(), derive_seed(cfg.seed, 0x0d1));
    const PairAugPolicy* aug = cfg.phase1_aug ? &cfg.augmentation : nullptr;
    for (int epoch = 1; epoch <= cfg.phase1_epochs; ++epoch) {
        const double lr = lr_at_epoch(epoch - 1, cfg);
        LossBundle sum;
        for (int s = 0; s < steps; ++s) {
            std::vector<const SliceSample*> batch;
            for (auto i : sampler.next(cfg.batch_size)) {
                batch.push_back(&train[i]);
            }
            const auto lb = make_labeled_batch(batch, aug, derive_seed(cfg.seed, 0xa1, epoch * 100003L + s));
            accumulate(sum, state.step(lb, nullptr, lr));
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = lr;
        rec.mean_loss = mean_of(sum, steps);
        rec.val_score = val_dice();
        if (rec.val_score >= best) {  // ties go to the later, longer-trained epoch
            best = rec.val_score;
            snapshot(epoch, best);
        }
        if (log != nullptr) {
            json j{{"record", "epoch"}, {"phase", 1}, {"epoch", epoch}, {"lr", lr},
                   {"steps", steps}, {"val_dice", rec.val_score}};
            j.update(loss_json(rec.mean_loss));
            log->write(j);
        }
        res.history.push_back(rec);
    }
    if (log != nullptr) {
        log->write({{"record", "best"}, {"phase", 1}, {"epoch", res.best.epoch},
                    {"val_dice", res.best.val_score}});
    }
    return res;
}

TrainResult train_phase2(const ExperimentConfig& cfg, const Checkpoint& init,
                         const Manifest& source, const Manifest* target, TrainingLog* log) {
    cfg.validate();
    prepare_threads(cfg);
    if (source.entries.empty()) {
        throw ConfigError("phase 2: source manifest is empty");
    }
    if (target == nullptr || target->entries.empty()) {
        throw ConfigError("phase 2: a paired target manifest is required for evaluation");
    }
    const auto train = load_labeled_slices(source, Split::train, cfg.slice_size);
    if (train.empty()) {
        throw ConfigError("phase 2: source manifest has no training slices");
    }
    std::vector<PairSliceSample> pairs;
    if (cfg.needs_target()) {
        pairs = load_pair_slices(*target, Split::train, cfg.slice_size);
        if (pairs.empty()) {
            throw ConfigError("phase 2: target manifest has no training pairs");
        }
    }
    const DomainClasses classes = domain_classes(cfg, source, target);
    TrainingState state(cfg, segmenter_from_checkpoint(init), classes.n_domains, classes.source);
    const std::string hash = cfg.hash();

    const auto validate = [&] {
        return validate_pairs(state.segmenter(), *target, Split::val, cfg.slice_size,
                              cfg.threshold, cfg.collapse_threshold);
    };
    const auto score_of = [](const PairValidation& v) {
        return v.collapse.flagged ? 0.0 : v.mean_pair_dice;
    };

    TrainResult res;
    const auto checkpoint = [&](int epoch, double score) {
        Checkpoint c = make_checkpoint(state.segmenter(), epoch, score, hash);
        c.metadata["phase"] = 2;
        c.metadata["method"] = cfg.name;
        c.metadata["slice_size"] = {cfg.slice_size.ny, cfg.slice_size.nx};
        c.metadata["init_config_hash"] = init.config_hash;
        return c;
    };
    double best = -1.0;
    if (cfg.phase2_epochs == 0) {
        const auto v = validate();
        best = score_of(v);
        res.best = checkpoint(0, best);
        if (log != nullptr) {
            log->write({{"record", "collapse"}, {"phase", 2}, {"epoch", 0},
                        {"pair_dice", v.mean_pair_dice}, {"collapse", v.collapse.to_json()}});
        }
    }
    if (log != nullptr) {
        log->write({{"record", "init"}, {"phase", 2}, {"config_hash", hash},
                    {"method", cfg.name}, {"n_domains", classes.n_domains},
                    {"train_slices", train.size()}, {"train_pairs", pairs.size()}});
    }

    const std::size_t driver = cfg.needs_target() ? pairs.size() : train.size();
    const int steps = static_cast<int>((driver + cfg.batch_size - 1) / cfg.batch_size);
    Sampler src_sampler(train.size(), derive_seed(cfg.seed, 0x0d2));
    Sampler pair_sampler(std::max<std::size_t>(pairs.size(), 1), derive_seed(cfg.seed, 0x0d3));
    const PairAugPolicy* aug = cfg.use_aug ? &cfg.augmentation : nullptr;
    // with paired data the augmentation goes to the pairs; only methods without
    // a target augment the labeled source slices
    const PairAugPolicy* labeled_aug = cfg.needs_target() ? nullptr : aug;
    for (int epoch = 1; epoch <= cfg.phase2_epochs; ++epoch) {
        const double lr = lr_at_epoch(epoch - 1, cfg);
        LossBundle sum;
        for (int s = 0; s < steps; ++s) {
            const long tag = epoch * 100003L + s;
            std::vector<const SliceSample*> lbatch;
            for (auto i : src_sampler.next(cfg.batch_size)) {
                lbatch.push_back(&train[i]);
            }
            const auto lb = make_labeled_batch(lbatch, labeled_aug, derive_seed(cfg.seed, 0xa2, tag));
            if (cfg.needs_target()) {
                std::vector<const PairSliceSample*> pbatch;
                for (auto i : pair_sampler.next(cfg.batch_size)) {
                    pbatch.push_back(&pairs[i]);
                }
                const auto pb = make_pair_batch(pbatch, aug, derive_seed(cfg.seed, 0xa3, tag),
                                                classes.a, classes.b);
                accumulate(sum, state.step(lb, &pb, lr));
            } else {
                accumulate(sum, state.step(lb, nullptr, lr));
            }
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = lr;
        rec.mean_loss = mean_of(sum, steps);
        const auto v = validate();
        rec.val_score = score_of(v);
        rec.collapse = v.collapse;
        if (rec.val_score >= best) {  // ties go to the later, longer-trained epoch
            best = rec.val_score;
            res.best = checkpoint(epoch, best);
        }
        if (log != nullptr) {
            json j{{"record", "epoch"}, {"phase", 2}, {"epoch", epoch}, {"lr", lr},
                   {"steps", steps}, {"pair_dice", v.mean_pair_dice}, {"val_score", rec.val_score}};
            j.update(loss_json(rec.mean_loss));
            log->write(j);
            log->write({{"record", "collapse"}, {"phase", 2}, {"epoch", epoch},
                        {"collapse", v.collapse.to_json()}});
        }
        res.history.push_back(rec);
    }
    if (log != nullptr) {
        log->write({{"record", "best"}, {"phase", 2}, {"epoch", res.best.epoch},
                    {"val_score", res.best.val_score}});
    }
    return res;
}

} // namespace pcda

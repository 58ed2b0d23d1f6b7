#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "pcda/random.hpp"
#include "pcda/synthdata.hpp"
#include "pcda/training.hpp"

using namespace pcda;
namespace fs = std::filesystem;

namespace {

Tensor random_tensor(int n, int c, int h, int w, std::uint64_t seed, float lo = -1.0f,
                     float hi = 1.0f) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> d(lo, hi);
    Tensor t(n, c, h, w);
    for (auto& v : t.data) {
        v = d(rng);
    }
    return t;
}

LabeledBatch toy_labeled(std::uint64_t seed) {
    LabeledBatch b{random_tensor(4, 1, 16, 16, seed), Tensor(4, 1, 16, 16)};
    for (std::size_t i = 0; i < b.y.size(); ++i) {
        b.y.data[i] = b.x.data[i] > 0.6f ? 1.0f : 0.0f;
    }
    return b;
}

PairBatch toy_pairs(std::uint64_t seed) {
    PairBatch p;
    p.u = random_tensor(4, 1, 16, 16, seed);
    p.u_hat = random_tensor(4, 1, 16, 16, seed + 1);
    return p;
}

ExperimentConfig toy_config() {
    ExperimentConfig c;
    c.segmenter = {2, 4, 8, 1, 1, FeatureTap::decoder};
    c.slice_size = {32, 32};
    c.batch_size = 4;
    c.deterministic = true;
    return c;
}

struct ToyData {
    SynthDataset ds;
    fs::path root;
};

const ToyData& toy_data() {
    static const ToyData data = [] {
        SynthConfig s;
        s.n_source_subjects = 6;
        s.n_target_subjects = 6;
        s.nx = 32;
        s.ny = 32;
        s.nz = 6;
        const fs::path root = fs::temp_directory_path() / "pcda_training_toy";
        fs::remove_all(root);
        return ToyData{generate_dataset(s, root), root};
    }();
    return data;
}

std::vector<float> flatten(const nn::ParamList& params) {
    std::vector<float> out;
    for (const auto& [name, p] : params) {
        out.insert(out.end(), p->value.begin(), p->value.end());
    }
    return out;
}

} // namespace

TEST_CASE("learning rate schedule") {
    const ExperimentConfig c;
    CHECK(lr_at_epoch(0, c) == 1e-3);
    CHECK(lr_at_epoch(299, c) == 1e-3);
    CHECK(lr_at_epoch(300, c) == 1e-4);
    CHECK(lr_at_epoch(349, c) == 1e-4);
    CHECK(lr_at_epoch(350, c) == 1e-5);
    CHECK_THROWS_AS(lr_at_epoch(-1, c), ConfigError);
    double prev = 1.0;
    for (int e = 0; e < 400; ++e) {
        REQUIRE(lr_at_epoch(e, c) <= prev);
        prev = lr_at_epoch(e, c);
    }
}

TEST_CASE("config validation, json round trip and method matrix") {
    ExperimentConfig c;
    c.alpha = -1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    ExperimentConfig both;
    both.use_pc = true;
    both.use_mt = true;
    CHECK_THROWS_AS(both.validate(), ConfigError);
    ExperimentConfig decays;
    decays.decay_epochs = {350, 300};
    CHECK_THROWS_AS(decays.validate(), ConfigError);

    ExperimentConfig d = toy_config();
    d.use_pc = true;
    d.alpha = 0.7;
    d.augmentation.max_movements = 2;
    const ExperimentConfig back = ExperimentConfig::from_json(d.to_json());
    CHECK(back.to_json() == d.to_json());
    CHECK(back.hash() == d.hash());
    CHECK(back.hash() != ExperimentConfig{}.hash());

    const auto matrix = method_matrix(ExperimentConfig{});
    REQUIRE(matrix.size() == 8);
    std::vector<std::string> names;
    for (const auto& m : matrix) {
        names.push_back(m.name);
    }
    CHECK(names == std::vector<std::string>{"Baseline", "Baseline+Aug", "Adv", "Adv+Aug", "PC",
                                            "PC+Aug", "PC+Adv+Aug", "MT"});
    CHECK(matrix[6].use_pc);
    CHECK(matrix[6].use_adv);
    CHECK(matrix[6].use_aug);
    CHECK(matrix[7].use_mt);
    CHECK_FALSE(matrix[0].needs_target());
}

TEST_CASE("baseline step optimizes the supervised loss only") {
    ExperimentConfig c = toy_config();
    TrainingState st(c, Segmenter(c.segmenter, 1), 3);
    const PairBatch pairs = toy_pairs(3);
    const LossBundle l = st.step(toy_labeled(2), &pairs, 1e-3);
    CHECK(l.l_tot == l.l_s);
    CHECK(l.l_pc == 0.0);
    CHECK(l.l_adv == 0.0);
}

TEST_CASE("paired consistency enters the total loss with weight alpha") {
    CHECK(std::fabs(total_loss(0.5, 0.3, 0.2) - 0.56) < 1e-9);
    ExperimentConfig c = toy_config();
    c.use_pc = true;
    TrainingState st(c, Segmenter(c.segmenter, 1), 3);
    const PairBatch pairs = toy_pairs(5);
    const LossBundle l = st.step(toy_labeled(4), &pairs, 1e-3);
    CHECK(l.l_pc > 0.0);
    CHECK(l.alpha == 0.2);
    CHECK(l.l_tot == total_loss(l.l_s, l.l_pc, 0.2));
    CHECK_THROWS_AS(st.step(toy_labeled(4), nullptr, 1e-3), ConfigError);

    c.alpha = 0.0;
    TrainingState zero(c, Segmenter(c.segmenter, 1), 3);
    const LossBundle z = zero.step(toy_labeled(4), &pairs, 1e-3);
    CHECK(z.l_tot == z.l_s);
}

TEST_CASE("EMA update arithmetic") {
    nn::Param t = nn::Param::zeros({2});
    nn::Param s = nn::Param::zeros({2});
    const auto reset = [&] {
        t.value = {1.0f, 1.0f};
        s.value = {0.0f, 2.0f};
    };
    const nn::ParamList tl{{"w", &t}};
    const nn::ParamList sl{{"w", &s}};
    reset();
    ema_update(tl, sl, 0.99);
    CHECK(t.value[0] == doctest::Approx(0.99).epsilon(1e-6));
    CHECK(t.value[1] == doctest::Approx(1.01).epsilon(1e-6));
    reset();
    ema_update(tl, sl, 1.0);
    CHECK(t.value == std::vector<float>{1.0f, 1.0f});
    reset();
    ema_update(tl, sl, 0.0);
    CHECK(t.value == s.value);

    nn::Param other = nn::Param::zeros({3});
    const nn::ParamList ol{{"w", &other}};
    CHECK_THROWS_AS(ema_update(tl, ol, 0.5), ConfigError);
}

TEST_CASE("EMA update is a contraction towards the student") {
    Segmenter teacher({2, 4, 8, 1, 1, FeatureTap::decoder}, 1);
    Segmenter student({2, 4, 8, 1, 1, FeatureTap::decoder}, 2);
    const auto before = flatten(teacher.parameters());
    const auto st = flatten(student.parameters());
    ema_update(teacher.parameters(), student.parameters(), 0.9);
    const auto after = flatten(teacher.parameters());
    double d0 = 0.0;
    double d1 = 0.0;
    for (std::size_t i = 0; i < st.size(); ++i) {
        d0 += std::pow(static_cast<double>(before[i]) - st[i], 2);
        d1 += std::pow(static_cast<double>(after[i]) - st[i], 2);
    }
    CHECK(std::sqrt(d1) == doctest::Approx(0.9 * std::sqrt(d0)).epsilon(1e-5));
}

TEST_CASE("mean teacher step moves the teacher by EMA") {
    ExperimentConfig c = toy_config();
    c.use_mt = true;
    c.ema_decay = 0.5;
    TrainingState st(c, Segmenter(c.segmenter, 1), 3);
    REQUIRE(st.teacher() != nullptr);
    const auto t0 = flatten(st.teacher()->parameters());
    const LossBundle l = train_mean_teacher_step(st, toy_labeled(1), toy_pairs(2), 1e-2);
    CHECK(l.l_pc > 0.0);
    const auto t1 = flatten(st.teacher()->parameters());
    const auto s1 = flatten(st.segmenter().parameters());
    for (std::size_t i = 0; i < t0.size(); ++i) {
        REQUIRE(t1[i] == doctest::Approx(0.5 * t0[i] + 0.5 * s1[i]).epsilon(1e-5));
    }
    ExperimentConfig plain = toy_config();
    TrainingState no_teacher(plain, Segmenter(plain.segmenter, 1), 3);
    CHECK_THROWS_AS(train_mean_teacher_step(no_teacher, toy_labeled(1), toy_pairs(2), 1e-2),
                    ConfigError);
}

TEST_CASE("reversed discriminator gradient opposes the discriminator's descent direction") {
    Segmenter seg({2, 4, 8, 1, 1, FeatureTap::decoder}, 3);
    DiscriminatorConfig dc;
    dc.in_channels = 4;
    dc.in_h = 16;
    dc.in_w = 16;
    dc.n_domains = 3;
    dc.dropout_p = 0.0;
    Discriminator disc(dc, 4);
    const Tensor x = random_tensor(6, 1, 16, 16, 5);
    const std::vector<int> labels{0, 0, 1, 1, 2, 2};

    const auto segmenter_grad = [&](double beta, bool reversed) {
        auto params = seg.parameters();
        nn::zero_grad(params);
        Segmenter probe = seg;
        const auto out = probe.forward(x, nn::Mode::train);
        Discriminator d = disc;
        const Tensor logits = d.forward(out.features, nn::Mode::train);
        const std::vector<double> lv(logits.data.begin(), logits.data.end());
        const auto ce = adversarial_loss(lv, 3, labels);
        Tensor gl(logits.n, logits.c, 1, 1);
        for (std::size_t i = 0; i < gl.size(); ++i) {
            gl.data[i] = static_cast<float>(ce.grad_logits[i]);
        }
        Tensor dh = d.backward(gl);
        if (reversed) {
            dh = GradientReversal(beta).backward(dh);
        }
        auto pp = probe.parameters();
        nn::zero_grad(pp);
        probe.backward(Tensor(6, 1, 16, 16), &dh);
        std::vector<double> g;
        for (const auto& [name, p] : pp) {
            if (p->trainable) {
                g.insert(g.end(), p->grad.begin(), p->grad.end());
            }
        }
        return g;
    };
    const auto descent = segmenter_grad(1.0, false);
    const auto reversed = segmenter_grad(1.0, true);
    double dot = 0.0;
    double norm = 0.0;
    for (std::size_t i = 0; i < descent.size(); ++i) {
        dot += descent[i] * reversed[i];
        norm += descent[i] * descent[i];
    }
    CHECK(norm > 0.0);
    CHECK(dot < 0.0);
    CHECK(dot == doctest::Approx(-norm).epsilon(1e-4));
}

TEST_CASE("adversarial step reports the discriminator loss") {
    ExperimentConfig c = toy_config();
    c.use_adv = true;
    c.slice_size = {16, 16};
    TrainingState st(c, Segmenter(c.segmenter, 1), 3);
    REQUIRE(st.discriminator() != nullptr);
    const PairBatch pairs = toy_pairs(7);
    const LossBundle l = st.step(toy_labeled(6), &pairs, 1e-3);
    CHECK(l.l_adv > 0.0);
    CHECK(l.l_tot == l.l_s);
}

TEST_CASE("collapse monitor") {
    Mask3D fg(10, 10, 2);
    for (int y = 1; y < 9; ++y) {
        for (int x = 1; x < 9; ++x) {
            fg.at(x, y, 0) = 1;
            fg.at(x, y, 1) = 1;
        }
    }
    const std::vector<Mask3D> fgs(3, fg);
    const auto full = collapse_monitor(std::vector<Mask3D>(3, fg), fgs);
    CHECK(full.flagged);
    CHECK(full.collapsed);
    CHECK(full.median_fraction == 1.0);

    const auto empty = collapse_monitor(std::vector<Mask3D>(3, Mask3D(10, 10, 2)), fgs);
    CHECK(empty.flagged);
    CHECK(empty.empty_output);
    CHECK_FALSE(empty.collapsed);

    // 3 of 128 foreground voxels is about 2%
    Mask3D plausible(10, 10, 2);
    plausible.at(3, 3, 0) = 1;
    plausible.at(4, 3, 0) = 1;
    plausible.at(3, 4, 1) = 1;
    const auto ok = collapse_monitor(std::vector<Mask3D>(3, plausible), fgs);
    CHECK_FALSE(ok.flagged);
    CHECK(ok.median_fraction == doctest::Approx(3.0 / 128.0));
    CHECK_THROWS_AS(collapse_monitor(std::vector<Mask3D>(2, fg), fgs), ValidationError);
}

TEST_CASE("phase 1 with zero epochs returns the initialization") {
    ExperimentConfig c = toy_config();
    c.phase1_epochs = 0;
    const TrainResult r = train_phase1(c, toy_data().ds.source);
    CHECK(r.best.epoch == 0);
    CHECK(r.history.empty());
    const Segmenter fresh(c.segmenter, derive_seed(c.seed, 0x5e9));
    Segmenter restored = segmenter_from_checkpoint(r.best);
    Segmenter f = fresh;
    const Tensor x = random_tensor(1, 1, 32, 32, 1);
    CHECK(restored.forward(x, nn::Mode::inference).probabilities.data ==
          f.forward(x, nn::Mode::inference).probabilities.data);
}

TEST_CASE("phase 1 returns the best validation epoch and is reproducible") {
    ExperimentConfig c = toy_config();
    c.phase1_epochs = 3;
    TrainingLog log1;
    TrainingLog log2;
    const TrainResult r1 = train_phase1(c, toy_data().ds.source, &log1);
    const TrainResult r2 = train_phase1(c, toy_data().ds.source, &log2);
    double best = log1.records().front().at("val_dice").get<double>();
    int best_epoch = 0;
    int epochs = 0;
    for (const auto& rec : log1.records()) {
        if (rec.at("record") == "epoch") {
            // ties resolve to the later epoch
            if (rec.at("val_dice").get<double>() >= best) {
                best = rec.at("val_dice").get<double>();
                best_epoch = rec.at("epoch").get<int>();
            }
            ++epochs;
        }
    }
    CHECK(epochs == 3);
    CHECK(r1.best.val_score == best);
    CHECK(r1.best.epoch == best_epoch);
    CHECK(log1.records() == log2.records());
    CHECK(r1.best.arrays == r2.best.arrays);
}

TEST_CASE("phase 2 with paired consistency logs collapse records and keeps the best epoch") {
    ExperimentConfig c1 = toy_config();
    c1.phase1_epochs = 1;
    const TrainResult p1 = train_phase1(c1, toy_data().ds.source);

    ExperimentConfig c = toy_config();
    c.use_pc = true;
    c.use_adv = true;
    c.use_aug = true;
    c.phase2_epochs = 2;
    TrainingLog log;
    const TrainResult r = train_phase2(c, p1.best, toy_data().ds.source, &toy_data().ds.target, &log);
    int collapse_records = 0;
    double best = -1.0;
    for (const auto& rec : log.records()) {
        if (rec.at("record") == "collapse") {
            ++collapse_records;
            CHECK(rec.at("collapse").contains("flagged"));
        }
        if (rec.at("record") == "epoch") {
            CHECK(rec.at("l_tot").get<double>() ==
                  doctest::Approx(rec.at("l_s").get<double>() + 0.2 * rec.at("l_pc").get<double>()));
            best = std::max(best, rec.at("val_score").get<double>());
        }
    }
    CHECK(collapse_records == 2);
    CHECK(r.best.val_score == best);
    CHECK(r.best.epoch >= 1);
    CHECK(r.best.metadata.at("phase") == 2);

    CHECK_THROWS_AS(train_phase2(c, p1.best, toy_data().ds.source, nullptr), ConfigError);
}

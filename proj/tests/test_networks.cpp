#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "pcda/networks.hpp"

using namespace pcda;
namespace fs = std::filesystem;

namespace {

Tensor random_tensor(int n, int c, int h, int w, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> d(0.0f, 1.0f);
    Tensor t(n, c, h, w);
    for (auto& v : t.data) {
        v = d(rng);
    }
    return t;
}

double weighted_sum(const Tensor& t, const Tensor& w) {
    double s = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
        s += static_cast<double>(t.data[i]) * w.data[i];
    }
    return s;
}

fs::path temp_path(const std::string& name) {
    return fs::temp_directory_path() / ("pcda_test_" + name);
}

} // namespace

TEST_CASE("segmenter config defaults and validation") {
    SegmenterConfig c;
    CHECK(c.depth == 4);
    CHECK(c.max_filters == 256);
    CHECK(c.widths() == std::vector<int>{32, 64, 128, 256});
    CHECK_NOTHROW(c.validate());
    c.base_filters = 16;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    SegmenterConfig zero;
    zero.depth = 0;
    CHECK_THROWS_AS(zero.validate(), ConfigError);
    const SegmenterConfig back = SegmenterConfig::from_json(SegmenterConfig{}.to_json());
    CHECK(back.widths() == SegmenterConfig{}.widths());
}

TEST_CASE("segmenter output shape, range and padding of odd sizes") {
    Segmenter s({3, 4, 16, 1, 1, FeatureTap::decoder}, 1);
    for (auto [h, w] : {std::pair{16, 16}, std::pair{30, 22}, std::pair{5, 9}}) {
        const Tensor x = random_tensor(2, 1, h, w, 3);
        const auto out = s.forward(x, nn::Mode::inference);
        CHECK(out.probabilities.n == 2);
        CHECK(out.probabilities.h == h);
        CHECK(out.probabilities.w == w);
        CHECK(out.features.c == 4);
        CHECK(out.features.h == h);
        for (float p : out.probabilities.data) {
            REQUIRE(p > 0.0f);
            REQUIRE(p < 1.0f);
        }
    }
}

TEST_CASE("segmenter rejects non-finite input and wrong channel counts") {
    Segmenter s({2, 2, 4, 1, 1, FeatureTap::decoder}, 1);
    Tensor x(1, 1, 8, 8);
    x.data[5] = std::nanf("");
    CHECK_THROWS_AS(s.forward(x, nn::Mode::inference), ValidationError);
    CHECK_THROWS_AS(s.forward(Tensor(1, 2, 8, 8), nn::Mode::inference), ShapeError);
}

TEST_CASE("segmenter parameter names are unique and the count matches the widths") {
    Segmenter s({4, 8, 64, 1, 1, FeatureTap::decoder}, 1);
    std::set<std::string> names;
    for (const auto& [name, p] : s.parameters()) {
        CHECK(names.insert(name).second);
    }
    // encoder double convs + decoder (1x1 reduce + double conv) + head, conv weights and biases
    // plus batch-norm scale/shift
    const std::vector<int> w{8, 16, 32, 64};
    std::size_t expected = 0;
    auto dc = [](int in, int out) {
        return static_cast<std::size_t>(in * out * 9 + out + out * out * 9 + out + 4 * out);
    };
    int prev = 1;
    for (int c : w) {
        expected += dc(prev, c);
        prev = c;
    }
    for (int i = 2; i >= 0; --i) {
        expected += static_cast<std::size_t>(w[i + 1] * w[i] + w[i]) + dc(2 * w[i], w[i]);
    }
    expected += static_cast<std::size_t>(w[0] + 1);
    CHECK(s.parameter_count() == expected);
}

TEST_CASE("segmenter backward matches finite differences along random directions") {
    Segmenter s({2, 2, 4, 1, 1, FeatureTap::decoder}, 21);
    const Tensor x = random_tensor(3, 1, 8, 8, 4);
    const Tensor wp = random_tensor(3, 1, 8, 8, 5);
    const Tensor wf = random_tensor(3, 2, 8, 8, 6);
    const auto objective = [&](Segmenter model, const Tensor& input) {
        const auto out = model.forward(input, nn::Mode::train);
        return weighted_sum(out.probabilities, wp) + weighted_sum(out.features, wf);
    };

    auto params = s.parameters();
    nn::zero_grad(params);
    s.forward(x, nn::Mode::train);
    const Tensor dx = s.backward(wp, &wf);

    std::mt19937_64 rng(9);
    std::normal_distribution<double> d(0.0, 1.0);
    const double h = 1e-3;
    for (int trial = 0; trial < 3; ++trial) {
        std::vector<std::vector<double>> dir;
        double norm = 0.0;
        for (const auto& [name, p] : params) {
            std::vector<double> v(p->size(), 0.0);
            if (p->trainable) {
                for (auto& e : v) {
                    e = d(rng);
                    norm += e * e;
                }
            }
            dir.push_back(std::move(v));
        }
        norm = std::sqrt(norm);
        double analytic = 0.0;
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!params[i].second->trainable) {
                continue;
            }
            for (std::size_t k = 0; k < dir[i].size(); ++k) {
                dir[i][k] /= norm;
                analytic += dir[i][k] * params[i].second->grad[k];
            }
        }
        const auto eval_shifted = [&](double step) {
            Segmenter m = s;
            auto mp = m.parameters();
            for (std::size_t i = 0; i < mp.size(); ++i) {
                for (std::size_t k = 0; k < dir[i].size(); ++k) {
                    mp[i].second->value[k] += static_cast<float>(step * dir[i][k]);
                }
            }
            return objective(m, x);
        };
        const double fd = (eval_shifted(h) - eval_shifted(-h)) / (2.0 * h);
        CHECK(fd == doctest::Approx(analytic).epsilon(2e-2));
    }

    Tensor v = random_tensor(3, 1, 8, 8, 10);
    double norm = 0.0;
    for (float e : v.data) {
        norm += static_cast<double>(e) * e;
    }
    double analytic = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        v.data[i] = static_cast<float>(v.data[i] / std::sqrt(norm));
        analytic += static_cast<double>(v.data[i]) * dx.data[i];
    }
    const auto eval_input = [&](double step) {
        Tensor xs = x;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            xs.data[i] += static_cast<float>(step * v.data[i]);
        }
        return objective(s, xs);
    };
    const double fd = (eval_input(h) - eval_input(-h)) / (2.0 * h);
    CHECK(fd == doctest::Approx(analytic).epsilon(2e-2));
}

TEST_CASE("gradient reversal is the identity forward and -beta backward") {
    const Tensor h = random_tensor(2, 3, 4, 4, 1);
    const Tensor g = random_tensor(2, 3, 4, 4, 2);
    for (double beta : {0.0, 0.5, 1.0}) {
        GradientReversal grl(beta);
        CHECK(grl.forward(h).data == h.data);
        const Tensor back = grl.backward(g);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double expected = -beta * g.data[i];
            REQUIRE(std::fabs(back.data[i] - expected) <= 1e-4 * std::max(1e-6, std::fabs(expected)));
        }
        const std::vector<double> up{1.0, -2.0, 0.5};
        const auto r = grl_backward<double>(up, beta);
        CHECK(r[1] == doctest::Approx(2.0 * beta));
        CHECK(grl_forward<double>(up, beta) == up);
    }
    CHECK_THROWS_AS(GradientReversal(-0.1), ConfigError);
}

TEST_CASE("discriminator architecture and shape checks") {
    DiscriminatorConfig c;
    c.in_channels = 8;
    c.in_h = 64;
    c.in_w = 64;
    c.n_domains = 3;
    CHECK(c.channel_sequence() == std::vector<int>{4, 8, 16, 32});
    Discriminator d(c, 1);
    const auto logits = d.forward(random_tensor(5, 8, 64, 64, 2), nn::Mode::inference);
    CHECK(logits.n == 5);
    CHECK(logits.c == 3);
    CHECK(logits.h == 1);
    CHECK(logits.w == 1);

    DiscriminatorConfig small = c;
    small.in_h = 8;
    small.in_w = 8;
    CHECK_THROWS_AS(Discriminator(small, 1), ShapeError);
    DiscriminatorConfig one = c;
    one.n_domains = 1;
    CHECK_THROWS_AS(Discriminator(one, 1), ConfigError);
    CHECK_THROWS_AS(d.forward(random_tensor(2, 8, 32, 32, 3), nn::Mode::inference), ShapeError);
}

TEST_CASE("discriminator backward matches finite differences on its input") {
    DiscriminatorConfig c;
    c.in_channels = 2;
    c.in_h = 16;
    c.in_w = 16;
    c.n_domains = 3;
    c.dropout_p = 0.0;
    Discriminator d(c, 4);
    const Tensor h = random_tensor(4, 2, 16, 16, 5);
    const Tensor w = random_tensor(4, 3, 1, 1, 6);
    d.forward(h, nn::Mode::train);
    auto params = d.parameters();
    nn::zero_grad(params);
    const Tensor dh = d.backward(w);
    Tensor v = random_tensor(4, 2, 16, 16, 7);
    double norm = 0.0;
    for (float e : v.data) {
        norm += static_cast<double>(e) * e;
    }
    double analytic = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        v.data[i] = static_cast<float>(v.data[i] / std::sqrt(norm));
        analytic += static_cast<double>(v.data[i]) * dh.data[i];
    }
    const auto eval = [&](double step) {
        Discriminator m = d;
        Tensor x = h;
        for (std::size_t i = 0; i < x.size(); ++i) {
            x.data[i] += static_cast<float>(step * v.data[i]);
        }
        return weighted_sum(m.forward(x, nn::Mode::train), w);
    };
    const double fd = (eval(1e-3) - eval(-1e-3)) / 2e-3;
    CHECK(fd == doctest::Approx(analytic).epsilon(2e-2));
}

TEST_CASE("checkpoint round trip reproduces inference bit-exactly") {
    Segmenter s({3, 4, 16, 1, 1, FeatureTap::decoder}, 8);
    const Tensor x = random_tensor(2, 1, 16, 16, 1);
    // move the batch-norm running statistics away from their initial values
    for (int i = 0; i < 3; ++i) {
        s.forward(random_tensor(4, 1, 16, 16, 100 + i), nn::Mode::train);
    }
    const auto before = s.forward(x, nn::Mode::inference);
    const fs::path path = temp_path("roundtrip.ckpt");
    save_checkpoint(path, make_checkpoint(s, 12, 0.75, "abc"));
    const Checkpoint loaded = load_checkpoint(path);
    CHECK(loaded.epoch == 12);
    CHECK(loaded.val_score == 0.75);
    CHECK(loaded.config_hash == "abc");
    Segmenter restored = segmenter_from_checkpoint(loaded);
    const auto after = restored.forward(x, nn::Mode::inference);
    CHECK(after.probabilities.data == before.probabilities.data);
    CHECK(after.features.data == before.features.data);
    fs::remove(path);
}

TEST_CASE("checkpoint loading reports missing and corrupt files") {
    CHECK_THROWS_AS(load_checkpoint(temp_path("does_not_exist.ckpt")), IoError);
    const fs::path bad = temp_path("bad.ckpt");
    std::ofstream(bad) << "NOTACKPT and some bytes";
    CHECK_THROWS_AS(load_checkpoint(bad), FormatError);
    fs::remove(bad);

    Segmenter small({2, 2, 4, 1, 1, FeatureTap::decoder}, 1);
    Checkpoint c = make_checkpoint(small, 0, 0.0, "");
    c.arrays.erase(c.arrays.begin());
    Segmenter other({2, 2, 4, 1, 1, FeatureTap::decoder}, 2);
    CHECK_THROWS_AS(load_parameters(c, "segmenter", other.parameters()), FormatError);
}

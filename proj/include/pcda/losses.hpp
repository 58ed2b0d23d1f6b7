#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <span>
#include <vector>

#include "pcda/errors.hpp"

namespace pcda {

/// Components of one training step's objective. The adversarial term enters
/// the segmenter through gradient reversal, so it is not part of `l_tot`.
struct LossBundle {
    double l_s = 0.0;
    double l_pc = 0.0;
    double l_adv = 0.0;
    double l_tot = 0.0;
    double alpha = 0.0;
    double beta = 0.0;
};

/// Loss value plus gradients with respect to both arguments.
template <std::floating_point T>
struct PairLoss {
    double value = 0.0;
    std::vector<T> grad_a;
    std::vector<T> grad_b;
};

inline constexpr double kDiceSmoothing = 1.0;
inline constexpr double kProbabilityClamp = 1e-7;

namespace detail {

template <std::floating_point T>
void check_unit_interval(std::span<const T> a, std::span<const T> b, const char* what) {
    if (a.size() != b.size()) {
        throw ShapeError(std::string(what) + ": shape mismatch (" + std::to_string(a.size()) +
                         " vs " + std::to_string(b.size()) + ")");
    }
    const auto bad = [](T v) { return !(v >= T(0) && v <= T(1)); };
    if (std::any_of(a.begin(), a.end(), bad) || std::any_of(b.begin(), b.end(), bad)) {
        throw ValidationError(std::string(what) + ": values must lie in [0, 1]");
    }
}

} // namespace detail

/// 1 - (2 sum(p t) + eps) / (sum p + sum t + eps), eps = 1, with gradients
/// for both arguments (the expression is symmetric).
template <std::floating_point T>
PairLoss<T> soft_dice_loss_with_grad(std::span<const T> pred, std::span<const T> target) {
    detail::check_unit_interval(pred, target, "soft_dice_loss");
    double inter = 0.0;
    double sum_p = 0.0;
    double sum_t = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        inter += static_cast<double>(pred[i]) * target[i];
        sum_p += pred[i];
        sum_t += target[i];
    }
    const double num = 2.0 * inter + kDiceSmoothing;
    const double den = sum_p + sum_t + kDiceSmoothing;
    PairLoss<T> out;
    out.value = 1.0 - num / den;
    out.grad_a.resize(pred.size());
    out.grad_b.resize(pred.size());
    const double den2 = den * den;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        out.grad_a[i] = static_cast<T>(-(2.0 * target[i] * den - num) / den2);
        out.grad_b[i] = static_cast<T>(-(2.0 * pred[i] * den - num) / den2);
    }
    return out;
}

template <std::floating_point T>
double soft_dice_loss(std::span<const T> pred, std::span<const T> target) {
    detail::check_unit_interval(pred, target, "soft_dice_loss");
    double inter = 0.0;
    double sum_p = 0.0;
    double sum_t = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        inter += static_cast<double>(pred[i]) * target[i];
        sum_p += pred[i];
        sum_t += target[i];
    }
    return 1.0 - (2.0 * inter + kDiceSmoothing) / (sum_p + sum_t + kDiceSmoothing);
}

/// Paired-consistency loss: soft dice between predictions on the two members
/// of a pair. With `stop_gradient_first`, `pred_u` is a constant (zero gradient).
template <std::floating_point T>
PairLoss<T> pc_loss(std::span<const T> pred_u, std::span<const T> pred_u_hat,
                    bool stop_gradient_first = false) {
    auto out = soft_dice_loss_with_grad(pred_u, pred_u_hat);
    if (stop_gradient_first) {
        std::fill(out.grad_a.begin(), out.grad_a.end(), T(0));
    }
    return out;
}

/// Mean per-pixel Bernoulli KL(p || q); p is held fixed, so grad_a is zero.
template <std::floating_point T>
PairLoss<T> kl_consistency_loss(std::span<const T> p, std::span<const T> q) {
    detail::check_unit_interval(p, q, "kl_consistency_loss");
    PairLoss<T> out;
    out.grad_a.assign(p.size(), T(0));
    out.grad_b.resize(q.size());
    if (p.empty()) {
        return out;
    }
    const double n = static_cast<double>(p.size());
    const double lo = kProbabilityClamp;
    const double hi = 1.0 - kProbabilityClamp;
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double pi = std::clamp(static_cast<double>(p[i]), lo, hi);
        const double qi = std::clamp(static_cast<double>(q[i]), lo, hi);
        total += pi * std::log(pi / qi) + (1.0 - pi) * std::log((1.0 - pi) / (1.0 - qi));
        const bool clamped = q[i] < lo || q[i] > hi;
        out.grad_b[i] = clamped ? T(0) : static_cast<T>((-pi / qi + (1.0 - pi) / (1.0 - qi)) / n);
    }
    out.value = total / n;
    return out;
}

/// Mean multi-class cross-entropy of `logits` (batch x n_domains, row-major)
/// against integer domain labels.
struct CrossEntropy {
    double value = 0.0;
    std::vector<double> grad_logits;
};

CrossEntropy adversarial_loss(std::span<const double> logits, int n_domains,
                              std::span<const int> labels);

/// One-hot label rows (batch x n_domains) instead of indices.
CrossEntropy adversarial_loss_one_hot(std::span<const double> logits, int n_domains,
                                      std::span<const double> one_hot);

double total_loss(double l_s, double l_pc, double alpha);

} // namespace pcda

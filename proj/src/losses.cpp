#include "pcda/losses.hpp"

#include <limits>
#include <string>

namespace pcda {

CrossEntropy adversarial_loss(std::span<const double> logits, int n_domains,
                              std::span<const int> labels) {
    if (n_domains < 2) {
        throw ValidationError("adversarial_loss: n_domains must be >= 2");
    }
    if (logits.size() != labels.size() * static_cast<std::size_t>(n_domains)) {
        throw ShapeError("adversarial_loss: logits do not match batch x n_domains");
    }
    CrossEntropy out;
    out.grad_logits.resize(logits.size());
    if (labels.empty()) {
        return out;
    }
    const double inv_batch = 1.0 / static_cast<double>(labels.size());
    for (std::size_t b = 0; b < labels.size(); ++b) {
        const int label = labels[b];
        if (label < 0 || label >= n_domains) {
            throw ValidationError("adversarial_loss: label " + std::to_string(label) +
                                  " outside [0, " + std::to_string(n_domains) + ")");
        }
        const auto row = logits.subspan(b * n_domains, n_domains);
        double peak = -std::numeric_limits<double>::infinity();
        for (double v : row) {
            peak = std::max(peak, v);
        }
        double z = 0.0;
        for (double v : row) {
            z += std::exp(v - peak);
        }
        const double log_z = peak + std::log(z);
        out.value += (log_z - row[label]) * inv_batch;
        for (int k = 0; k < n_domains; ++k) {
            const double softmax = std::exp(row[k] - log_z);
            out.grad_logits[b * n_domains + k] =
                (softmax - (k == label ? 1.0 : 0.0)) * inv_batch;
        }
    }
    return out;
}

CrossEntropy adversarial_loss_one_hot(std::span<const double> logits, int n_domains,
                                      std::span<const double> one_hot) {
    if (n_domains < 2 || one_hot.size() % static_cast<std::size_t>(n_domains) != 0) {
        throw ValidationError("adversarial_loss: one-hot rows do not match n_domains");
    }
    std::vector<int> labels(one_hot.size() / n_domains);
    for (std::size_t b = 0; b < labels.size(); ++b) {
        int hot = -1;
        for (int k = 0; k < n_domains; ++k) {
            const double v = one_hot[b * n_domains + k];
            if (v == 1.0 && hot < 0) {
                hot = k;
            } else if (v != 0.0) {
                throw ValidationError("adversarial_loss: label row is not one-hot");
            }
        }
        if (hot < 0) {
            throw ValidationError("adversarial_loss: label row is not one-hot");
        }
        labels[b] = hot;
    }
    return adversarial_loss(logits, n_domains, labels);
}

double total_loss(double l_s, double l_pc, double alpha) {
    if (!(alpha >= 0.0)) {
        throw ConfigError("total_loss: alpha must be non-negative");
    }
    return l_s + alpha * l_pc;
}

} // namespace pcda

#pragma once

// Ordinal labels, the rank-consistent (shared weight, ordered bias) output
// head, and the importance-weighted binary cross-entropy over the extended
// binary tasks "is rank > k".

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "tremorank/error.hpp"

namespace tremorank {

/// Ordinal scale with `levels` ranks 0..levels-1. Rank r maps to the clinical
/// score r * score_step (default 9 levels, 0 to 4 in half points).
struct RankScale {
    int levels = 9;
    double score_step = 0.5;

    RankScale() = default;
    explicit RankScale(int levels_, double step = 0.5);

    int tasks() const noexcept { return levels - 1; }
    double score_of_rank(int rank) const;
    bool contains(int rank) const noexcept { return rank >= 0 && rank < levels; }
};

/// Rank plus its extended binary vector: extended[k] == 1 iff k < rank.
struct OrdinalLabel {
    int rank = 0;
    std::vector<std::uint8_t> extended;
};

OrdinalLabel encode_label(int rank, const RankScale& scale);

/// Number of probabilities strictly above `threshold`.
int decode_rank(std::span<const double> probabilities, double threshold = 0.5);

/// Per-task importance weights, normalized so the largest is 1.
struct TaskWeights {
    std::vector<double> lambda;

    static TaskWeights uniform(int tasks) { return {std::vector<double>(static_cast<std::size_t>(tasks), 1.0)}; }
};

/// lambda_k = sqrt(N_k) / max_j sqrt(N_j), N_k = max(1, #samples with rank > k).
TaskWeights task_weights_from_counts(std::span<const double> label_histogram);

inline double sigmoid(double z) {
    if (z >= 0.0) {
        return 1.0 / (1.0 + std::exp(-z));
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
}

inline double softplus(double x) {
    return x > 30.0 ? x : std::log1p(std::exp(x));
}

inline double inverse_softplus(double y) {
    return y > 30.0 ? y : std::log(std::expm1(y));
}

/// Output head: one projection shared by every binary task plus ordered
/// biases b_0 = bias_base, b_k = b_{k-1} - softplus(decrement_params[k-1]).
/// The softplus keeps each decrement positive, so sigmoid(z + b_k) is
/// non-increasing in k for every shared logit z.
template <typename T>
struct CoralHead {
    std::vector<T> projection;
    T bias_base{0};
    std::vector<T> decrement_params;

    CoralHead() = default;
    CoralHead(std::size_t feature_dim, int levels, double initial_decrement = 0.1)
        : projection(feature_dim, T{0}),
          decrement_params(static_cast<std::size_t>(levels > 2 ? levels - 2 : 0),
                           static_cast<T>(inverse_softplus(initial_decrement))) {}

    int tasks() const noexcept { return static_cast<int>(decrement_params.size()) + 1; }

    std::vector<double> decrements() const {
        std::vector<double> d(decrement_params.size());
        for (std::size_t k = 0; k < d.size(); ++k) {
            d[k] = softplus(static_cast<double>(decrement_params[k]));
        }
        return d;
    }

    std::vector<double> biases() const {
        std::vector<double> b(static_cast<std::size_t>(tasks()));
        b[0] = static_cast<double>(bias_base);
        const auto d = decrements();
        for (std::size_t k = 1; k < b.size(); ++k) {
            b[k] = b[k - 1] - d[k - 1];
        }
        return b;
    }
};

/// Shared scalar projection of `feature`, accumulated in double.
template <typename T>
double shared_logit(std::span<const T> feature, const CoralHead<T>& head) {
    if (feature.size() != head.projection.size()) {
        throw ShapeError("head_logits: feature length " + std::to_string(feature.size()) +
                         " != projection length " + std::to_string(head.projection.size()));
    }
    double z = 0.0;
    for (std::size_t i = 0; i < feature.size(); ++i) {
        z += static_cast<double>(head.projection[i]) * static_cast<double>(feature[i]);
    }
    return z;
}

/// logit_k = dot(projection, feature) + b_k.
template <typename T>
std::vector<double> head_logits(std::span<const T> feature, const CoralHead<T>& head) {
    const double z = shared_logit(feature, head);
    auto logits = head.biases();
    for (auto& l : logits) {
        l += z;
    }
    return logits;
}

template <typename T>
std::vector<double> head_logits(const std::vector<T>& feature, const CoralHead<T>& head) {
    return head_logits(std::span<const T>(feature), head);
}

/// Probabilities are clamped to [kProbabilityClamp, 1 - kProbabilityClamp]
/// inside the loss.
inline constexpr double kProbabilityClamp = 1e-7;

double coral_loss(std::span<const double> logits, const OrdinalLabel& label, const TaskWeights& weights);

/// d coral_loss / d logits. Zero for a task whose probability sits on a clamp.
std::vector<double> coral_loss_gradient(std::span<const double> logits, const OrdinalLabel& label,
                                        const TaskWeights& weights);

std::vector<double> task_probabilities(std::span<const double> logits);

}  // namespace tremorank

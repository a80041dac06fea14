#include "tremorank/ordinal.hpp"

#include <algorithm>

namespace tremorank {

RankScale::RankScale(int levels_, double step) : levels(levels_), score_step(step) {
    if (levels < 2) {
        throw DomainError("RankScale: need at least 2 levels, got " + std::to_string(levels));
    }
    if (!(score_step > 0.0)) {
        throw DomainError("RankScale: score step must be positive");
    }
}

double RankScale::score_of_rank(int rank) const {
    if (!contains(rank)) {
        throw DomainError("rank " + std::to_string(rank) + " outside 0.." + std::to_string(levels - 1));
    }
    return rank * score_step;
}

OrdinalLabel encode_label(int rank, const RankScale& scale) {
    if (!scale.contains(rank)) {
        throw DomainError("encode_label: rank " + std::to_string(rank) + " outside 0.." +
                          std::to_string(scale.levels - 1));
    }
    OrdinalLabel label;
    label.rank = rank;
    label.extended.assign(static_cast<std::size_t>(scale.tasks()), 0);
    std::fill_n(label.extended.begin(), rank, std::uint8_t{1});
    return label;
}

int decode_rank(std::span<const double> probabilities, double threshold) {
    int rank = 0;
    for (const double p : probabilities) {
        if (!(p >= 0.0 && p <= 1.0)) {
            throw DomainError("decode_rank: probability " + std::to_string(p) + " outside [0,1]");
        }
        if (p > threshold) {
            ++rank;
        }
    }
    return rank;
}

TaskWeights task_weights_from_counts(std::span<const double> label_histogram) {
    if (label_histogram.size() < 2) {
        throw DomainError("task_weights_from_counts: histogram needs at least 2 levels");
    }
    double total = 0.0;
    for (const double n : label_histogram) {
        if (!(n >= 0.0)) {
            throw DomainError("task_weights_from_counts: negative count");
        }
        total += n;
    }
    if (total <= 0.0) {
        throw DomainError("task_weights_from_counts: histogram is empty");
    }

    const std::size_t tasks = label_histogram.size() - 1;
    std::vector<double> root(tasks);
    // Suffix sums: samples whose rank exceeds k.
    double above = 0.0;
    for (std::size_t k = tasks; k-- > 0;) {
        above += label_histogram[k + 1];
        root[k] = std::sqrt(std::max(above, 1.0));
    }
    const double top = *std::max_element(root.begin(), root.end());
    TaskWeights w;
    w.lambda.resize(tasks);
    std::transform(root.begin(), root.end(), w.lambda.begin(), [top](double r) { return r / top; });
    return w;
}

namespace {

void check_lengths(std::span<const double> logits, const OrdinalLabel& label, const TaskWeights& weights) {
    if (logits.size() != label.extended.size() || logits.size() != weights.lambda.size()) {
        throw ShapeError("coral_loss: logits " + std::to_string(logits.size()) + ", label " +
                         std::to_string(label.extended.size()) + ", weights " +
                         std::to_string(weights.lambda.size()));
    }
}

double clamp_probability(double p) {
    return std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp);
}

}  // namespace

double coral_loss(std::span<const double> logits, const OrdinalLabel& label, const TaskWeights& weights) {
    check_lengths(logits, label, weights);
    double loss = 0.0;
    for (std::size_t k = 0; k < logits.size(); ++k) {
        const double p = clamp_probability(sigmoid(logits[k]));
        const double bce = label.extended[k] ? -std::log(p) : -std::log1p(-p);
        loss += weights.lambda[k] * bce;
    }
    return loss;
}

std::vector<double> coral_loss_gradient(std::span<const double> logits, const OrdinalLabel& label,
                                        const TaskWeights& weights) {
    check_lengths(logits, label, weights);
    std::vector<double> grad(logits.size());
    for (std::size_t k = 0; k < logits.size(); ++k) {
        const double p = sigmoid(logits[k]);
        if (p < kProbabilityClamp || p > 1.0 - kProbabilityClamp) {
            grad[k] = 0.0;
            continue;
        }
        grad[k] = weights.lambda[k] * (p - static_cast<double>(label.extended[k]));
    }
    return grad;
}

std::vector<double> task_probabilities(std::span<const double> logits) {
    std::vector<double> p(logits.size());
    std::transform(logits.begin(), logits.end(), p.begin(), sigmoid);
    return p;
}

}  // namespace tremorank

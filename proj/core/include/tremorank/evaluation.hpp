#pragma once

#include <span>
#include <string>
#include <vector>

#include "tremorank/dataset.hpp"
#include "tremorank/network.hpp"
#include "tremorank/synth.hpp"

namespace tremorank {

struct ClipPrediction {
    std::string clip;
    int subject = 0;
    int true_rank = 0;
    int predicted_rank = 0;
    std::vector<double> probabilities;
    /// Mean of the per-task probabilities.
    double tremor_probability = 0.0;
};

/// Infer-mode predictions for every clip of `manifest`, in manifest order.
std::vector<ClipPrediction> predict(const BackboneParams<float>& params, const CorpusManifest& manifest,
                                    TensorProvider& provider, std::size_t batch_size = 8);

struct CorrelationRow {
    int rank = 0;
    double mean_probability = 0.0;
    int n = 0;
    /// Groups with a single clip are reported but left out of the trend.
    bool single = false;
};

struct EvalReport {
    int levels = 9;
    double score_step = 0.5;
    int n_clips = 0;
    double mae_rank = 0.0;
    double mae_score = 0.0;
    double accuracy = 0.0;
    /// Share of errors with |predicted - true| == 1; 1 when there are no errors.
    double adjacent_error_fraction = 1.0;
    /// confusion[true][predicted]
    std::vector<std::vector<int>> confusion;
    std::vector<int> per_rank_counts;
    std::vector<CorrelationRow> correlation;
    /// Spearman correlation of rank against group mean over groups with n >= 2.
    double correlation_spearman = 0.0;

    std::string to_json() const;
    std::string to_text() const;
};

EvalReport evaluate_predictions(const std::vector<ClipPrediction>& predictions, const RankScale& scale);
EvalReport evaluate(const BackboneParams<float>& params, const CorpusManifest& manifest, TensorProvider& provider);

/// Rank -> (mean tremor probability, count) for the ranks present.
std::vector<CorrelationRow> correlation_curve(const std::vector<ClipPrediction>& predictions);
std::string correlation_csv(const std::vector<CorrelationRow>& rows);
/// Over rows with n >= 2; NaN if fewer than two such rows.
double curve_spearman(const std::vector<CorrelationRow>& rows);

/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

/// Mean decoded rank times the score step, rounded to the nearest score
/// step with ties going up.
double overall_score(std::span<const int> ranks, const RankScale& scale);
double overall_score(const std::vector<ClipPrediction>& group, const RankScale& scale);

}  // namespace tremorank

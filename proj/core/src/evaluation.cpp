#include "tremorank/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "tremorank/error.hpp"

namespace tremorank {

std::vector<ClipPrediction> predict(const BackboneParams<float>& params, const CorpusManifest& manifest,
                                    TensorProvider& provider, std::size_t batch_size) {
    if (batch_size == 0) batch_size = 1;
    std::vector<ClipPrediction> out;
    out.reserve(manifest.clips.size());
    for (std::size_t start = 0; start < manifest.clips.size(); start += batch_size) {
        const std::size_t end = std::min(manifest.clips.size(), start + batch_size);
        std::vector<std::vector<float>> inputs;
        for (std::size_t i = start; i < end; ++i) {
            inputs.push_back(tensor_input(*provider.get(manifest, manifest.clips[i])));
        }
        const auto cache = forward(params, inputs, Mode::infer);
        for (std::size_t i = start; i < end; ++i) {
            const auto& c = manifest.clips[i];
            ClipPrediction p;
            p.clip = c.path;
            p.subject = c.subject_id;
            p.true_rank = c.rank;
            p.probabilities = task_probabilities(cache.logits[i - start]);
            p.predicted_rank = decode_rank(p.probabilities);
            double s = 0.0;
            for (const double q : p.probabilities) s += q;
            p.tremor_probability = s / static_cast<double>(p.probabilities.size());
            out.push_back(std::move(p));
        }
    }
    return out;
}

std::vector<CorrelationRow> correlation_curve(const std::vector<ClipPrediction>& predictions) {
    if (predictions.empty()) throw DomainError("correlation_curve: no predictions");
    int max_rank = 0;
    for (const auto& p : predictions) max_rank = std::max(max_rank, p.true_rank);
    std::vector<double> sum(static_cast<std::size_t>(max_rank) + 1, 0.0);
    std::vector<int> count(sum.size(), 0);
    for (const auto& p : predictions) {
        sum[static_cast<std::size_t>(p.true_rank)] += p.tremor_probability;
        ++count[static_cast<std::size_t>(p.true_rank)];
    }
    std::vector<CorrelationRow> rows;
    for (std::size_t r = 0; r < sum.size(); ++r) {
        if (count[r] == 0) continue;
        rows.push_back({static_cast<int>(r), sum[r] / count[r], count[r], count[r] == 1});
    }
    return rows;
}

std::string correlation_csv(const std::vector<CorrelationRow>& rows) {
    std::string s = "rank,mean_tremor_probability,n,single\n";
    char buf[96];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%d,%.17g,%d,%d\n", r.rank, r.mean_probability, r.n, r.single ? 1 : 0);
        s += buf;
    }
    return s;
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw ShapeError("spearman: length mismatch");
    if (x.size() < 2) return std::numeric_limits<double>::quiet_NaN();
    const auto rx = average_ranks(x);
    const auto ry = average_ranks(y);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return std::numeric_limits<double>::quiet_NaN();
    return sxy / std::sqrt(sxx * syy);
}

double curve_spearman(const std::vector<CorrelationRow>& rows) {
    std::vector<double> r, m;
    for (const auto& row : rows) {
        if (row.n < 2) continue;
        r.push_back(row.rank);
        m.push_back(row.mean_probability);
    }
    return spearman(r, m);
}

EvalReport evaluate_predictions(const std::vector<ClipPrediction>& predictions, const RankScale& scale) {
    if (predictions.empty()) throw DomainError("evaluate: empty manifest");
    EvalReport rep;
    rep.levels = scale.levels;
    rep.score_step = scale.score_step;
    rep.n_clips = static_cast<int>(predictions.size());
    const auto m = static_cast<std::size_t>(scale.levels);
    rep.confusion.assign(m, std::vector<int>(m, 0));
    rep.per_rank_counts.assign(m, 0);
    long abs_sum = 0;
    int correct = 0, errors = 0, adjacent = 0;
    for (const auto& p : predictions) {
        if (!scale.contains(p.true_rank) || !scale.contains(p.predicted_rank)) {
            throw DomainError("evaluate: rank outside 0.." + std::to_string(scale.levels - 1) + " for clip " +
                              p.clip);
        }
        ++rep.confusion[static_cast<std::size_t>(p.true_rank)][static_cast<std::size_t>(p.predicted_rank)];
        ++rep.per_rank_counts[static_cast<std::size_t>(p.true_rank)];
        const int d = std::abs(p.predicted_rank - p.true_rank);
        abs_sum += d;
        if (d == 0) {
            ++correct;
        } else {
            ++errors;
            if (d == 1) ++adjacent;
        }
    }
    const double n = static_cast<double>(predictions.size());
    rep.mae_rank = static_cast<double>(abs_sum) / n;
    rep.mae_score = rep.mae_rank * scale.score_step;
    rep.accuracy = correct / n;
    rep.adjacent_error_fraction = errors == 0 ? 1.0 : static_cast<double>(adjacent) / errors;
    rep.correlation = correlation_curve(predictions);
    rep.correlation_spearman = curve_spearman(rep.correlation);
    return rep;
}

EvalReport evaluate(const BackboneParams<float>& params, const CorpusManifest& manifest, TensorProvider& provider) {
    if (manifest.clips.empty()) throw DomainError("evaluate: empty manifest");
    return evaluate_predictions(predict(params, manifest, provider),
                                RankScale(params.config.levels, params.config.score_step));
}

std::string EvalReport::to_json() const {
    nlohmann::ordered_json j;
    j["levels"] = levels;
    j["score_step"] = score_step;
    j["n_clips"] = n_clips;
    j["mae_rank"] = mae_rank;
    j["mae_score"] = mae_score;
    j["accuracy"] = accuracy;
    j["adjacent_error_fraction"] = adjacent_error_fraction;
    j["confusion"] = confusion;
    j["per_rank_counts"] = per_rank_counts;
    auto rows = nlohmann::ordered_json::array();
    for (const auto& r : correlation) {
        rows.push_back({{"rank", r.rank}, {"mean_tremor_probability", r.mean_probability}, {"n", r.n},
                        {"single", r.single}});
    }
    j["correlation"] = rows;
    if (std::isfinite(correlation_spearman)) {
        j["correlation_spearman"] = correlation_spearman;
    } else {
        j["correlation_spearman"] = nullptr;
    }
    return j.dump(2) + "\n";
}

std::string EvalReport::to_text() const {
    std::string s;
    char buf[160];
    std::snprintf(buf, sizeof buf,
                  "clips %d\nMAE %.4f ranks (%.4f score points)\naccuracy %.4f\nadjacent errors %.4f of errors\n"
                  "spearman (groups n>=2) %.4f\n\n",
                  n_clips, mae_rank, mae_score, accuracy, adjacent_error_fraction, correlation_spearman);
    s += buf;
    s += "confusion (rows true, columns predicted)\n     ";
    for (int c = 0; c < levels; ++c) {
        std::snprintf(buf, sizeof buf, "%5d", c);
        s += buf;
    }
    s += "\n";
    for (int r = 0; r < levels; ++r) {
        std::snprintf(buf, sizeof buf, "%5d", r);
        s += buf;
        for (int c = 0; c < levels; ++c) {
            std::snprintf(buf, sizeof buf, "%5d", confusion[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)]);
            s += buf;
        }
        s += "\n";
    }
    s += "\nrank  n  mean tremor probability\n";
    for (const auto& row : correlation) {
        std::snprintf(buf, sizeof buf, "%4d %3d  %.4f%s\n", row.rank, row.n, row.mean_probability,
                      row.single ? "  (single clip)" : "");
        s += buf;
    }
    return s;
}

double overall_score(std::span<const int> ranks, const RankScale& scale) {
    if (ranks.empty()) throw DomainError("overall_score: empty group");
    long sum = 0;
    for (const int r : ranks) {
        if (!scale.contains(r)) throw DomainError("overall_score: rank " + std::to_string(r) + " out of range");
        sum += r;
    }
    // The mean of integers is exact whenever it ends in .5, so floor(x + 0.5) rounds ties up.
    const double mean = static_cast<double>(sum) / static_cast<double>(ranks.size());
    return std::floor(mean + 0.5) * scale.score_step;
}

double overall_score(const std::vector<ClipPrediction>& group, const RankScale& scale) {
    std::vector<int> ranks;
    ranks.reserve(group.size());
    for (const auto& p : group) ranks.push_back(p.predicted_rank);
    return overall_score(ranks, scale);
}

}  // namespace tremorank

#include "tremorank/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <set>

#include <json.hpp>

#include "tremorank/error.hpp"
#include "tremorank/evaluation.hpp"

namespace tremorank {

void TrainConfig::validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
        throw DomainError("train: learning rate must be a finite value >= 0");
    }
    if (epochs < 1) throw DomainError("train: epochs must be >= 1, got " + std::to_string(epochs));
    if (batch_size < 1) throw DomainError("train: batch size must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw DomainError("train: Adam betas must lie in [0, 1)");
    }
    if (!(epsilon > 0.0)) throw DomainError("train: Adam epsilon must be > 0");
    if (!(weight_decay >= 0.0)) throw DomainError("train: weight decay must be >= 0");
    if (log_every < 1) throw DomainError("train: log cadence must be >= 1");
    net.validate();
}

Adam::Adam(double learning_rate, double beta1, double beta2, double epsilon, double weight_decay)
    : lr_(learning_rate), b1_(beta1), b2_(beta2), eps_(epsilon), wd_(weight_decay) {}

void Adam::step(std::vector<std::span<float>> params, const std::vector<std::vector<float>>& grads,
                const std::vector<bool>& active) {
    if (params.size() != grads.size() || params.size() != active.size()) {
        throw ShapeError("adam: parameter, gradient and mask lists differ in length");
    }
    if (m_.empty()) {
        for (const auto& p : params) {
            m_.emplace_back(p.size(), 0.0);
            v_.emplace_back(p.size(), 0.0);
        }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!active[i]) continue;
        auto p = params[i];
        const auto& g = grads[i];
        if (g.size() != p.size() || m_[i].size() != p.size()) {
            throw ShapeError("adam: tensor " + std::to_string(i) + " changed size");
        }
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double gj = static_cast<double>(g[j]) + wd_ * static_cast<double>(p[j]);
            m_[i][j] = b1_ * m_[i][j] + (1.0 - b1_) * gj;
            v_[i][j] = b2_ * v_[i][j] + (1.0 - b2_) * gj * gj;
            const double upd = lr_ * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_);
            p[j] = static_cast<float>(static_cast<double>(p[j]) - upd);
        }
    }
}

namespace {

std::string g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double mse_of(const std::vector<ClipPrediction>& preds) {
    double s = 0.0;
    for (const auto& p : preds) {
        const double d = p.predicted_rank - p.true_rank;
        s += d * d;
    }
    return s / static_cast<double>(preds.size());
}

std::vector<std::vector<float>> batch_inputs(const Batch& b) {
    std::vector<std::vector<float>> in;
    in.reserve(b.size());
    for (const auto& t : b.tensors) in.push_back(tensor_input(*t));
    return in;
}

struct ViewSet {
    std::vector<std::span<float>> spans;
    std::vector<bool> active;
};

ViewSet trainable(BackboneParams<float>& params) {
    ViewSet vs;
    for (auto& v : parameter_views(params)) {
        vs.spans.push_back(v.values);
        vs.active.push_back(v.block < 0 || !params.blocks[static_cast<std::size_t>(v.block)].frozen);
    }
    return vs;
}

Checkpoint checkpoint_with(const BackboneParams<float>& params, std::map<std::string, std::string> extra) {
    auto ck = to_checkpoint(params);
    for (auto& [k, v] : extra) ck.metadata[k] = std::move(v);
    return ck;
}

}  // namespace

double parameter_norm(const BackboneParams<float>& params) {
    double s = 0.0;
    for (const auto& v : parameter_views(params)) {
        for (const float x : v.values) s += static_cast<double>(x) * static_cast<double>(x);
    }
    return std::sqrt(s);
}

TaskWeights train_task_weights(const CorpusManifest& train, int levels) {
    std::vector<double> hist(static_cast<std::size_t>(levels), 0.0);
    for (const auto& c : train.clips) {
        if (c.rank < 0 || c.rank >= levels) {
            throw DomainError("clip " + c.path + " has rank " + std::to_string(c.rank) + " outside the scale");
        }
        hist[static_cast<std::size_t>(c.rank)] += 1.0;
    }
    return task_weights_from_counts(hist);
}

std::string TrainLog::to_csv() const {
    std::string s = "epoch,train_loss,train_mse,train_mse_score,test_mse,test_mse_score,param_norm\n";
    for (const auto& r : records) {
        s += std::to_string(r.epoch) + "," + g17(r.train_loss) + "," + g17(r.train_mse) + "," +
             g17(r.train_mse_score) + "," + g17(r.test_mse) + "," + g17(r.test_mse_score) + "," + g17(r.param_norm) +
             "\n";
    }
    return s;
}

std::string TrainLog::to_json() const {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& r : records) {
        arr.push_back({{"epoch", r.epoch},
                       {"train_loss", r.train_loss},
                       {"train_mse", r.train_mse},
                       {"train_mse_score", r.train_mse_score},
                       {"test_mse", r.test_mse},
                       {"test_mse_score", r.test_mse_score},
                       {"param_norm", r.param_norm}});
    }
    return nlohmann::ordered_json{{"epochs", arr}}.dump(2) + "\n";
}

std::string TrainLog::timing_csv() const {
    std::string s = "epoch,seconds\n";
    char buf[64];
    for (const auto& r : records) {
        std::snprintf(buf, sizeof buf, "%d,%.3f\n", r.epoch, r.seconds);
        s += buf;
    }
    return s;
}

Checkpoint TrainResult::final_checkpoint() const {
    std::string w;
    for (std::size_t i = 0; i < weights.lambda.size(); ++i) w += (i ? "," : "") + g17(weights.lambda[i]);
    return checkpoint_with(final_params, {{"train.step", std::to_string(steps)},
                                          {"train.epoch", std::to_string(log.records.empty() ? 0 : log.records.back().epoch)},
                                          {"train.task_weights", w},
                                          {"train.role", "final"}});
}

Checkpoint TrainResult::best_checkpoint() const {
    return checkpoint_with(best_params, {{"train.epoch", std::to_string(best_epoch)},
                                         {"train.test_mse", g17(best_test_mse)},
                                         {"train.role", "best"}});
}

TrainResult train_ordinal(const CorpusManifest& train, const CorpusManifest& test, const TrainConfig& config,
                          std::shared_ptr<TensorProvider> provider, const Checkpoint* pretrained,
                          const ProgressFn& progress) {
    config.validate();
    require_disjoint(train, test);
    if (train.clips.empty() || test.clips.empty()) {
        throw DomainError("train: both the training and the test split need clips");
    }
    const RankScale scale(config.net.levels, config.net.score_step);
    if (train.levels != scale.levels || test.levels != scale.levels) {
        throw DomainError("train: manifests have " + std::to_string(train.levels) + "/" +
                          std::to_string(test.levels) + " levels, network expects " + std::to_string(scale.levels));
    }

    TrainResult res;
    res.weights = config.task_weighting ? train_task_weights(train, scale.levels) : TaskWeights::uniform(scale.tasks());
    if (config.transfer == TransferPolicy::none) {
        res.final_params = BackboneParams<float>::initialized(config.net, config.seed);
    } else {
        if (pretrained == nullptr) {
            throw DomainError("train: transfer policy " + to_string(config.transfer) + " needs a pretrained checkpoint");
        }
        TransferReport rep;
        res.final_params = load_pretrained(*pretrained, config.transfer, config.net, config.seed, &rep);
        res.transfer = std::move(rep);
    }
    auto& params = res.final_params;

    BatchStream stream(train, config.batch_size, config.seed ^ 0x5bd1e995ull, scale, provider);
    Adam adam(config.learning_rate, config.beta1, config.beta2, config.epsilon, config.weight_decay);
    double best = std::numeric_limits<double>::infinity();
    res.best_params = params;

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        double loss_sum = 0.0;
        for (const auto& batch : stream.epoch(epoch)) {
            const auto cache = forward(params, batch_inputs(batch), Mode::train);
            const double inv_n = 1.0 / static_cast<double>(batch.size());
            std::vector<std::vector<double>> dlogits(batch.size());
            for (std::size_t n = 0; n < batch.size(); ++n) {
                loss_sum += coral_loss(cache.logits[n], batch.labels[n], res.weights);
                dlogits[n] = coral_loss_gradient(cache.logits[n], batch.labels[n], res.weights);
                for (auto& g : dlogits[n]) g *= inv_n;
            }
            const auto grads = backward(params, cache, dlogits);
            update_running_stats(params, cache);
            auto vs = trainable(params);
            adam.step(vs.spans, grads.values, vs.active);
        }
        if (epoch % config.log_every != 0 && epoch != config.epochs) continue;

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(train.clips.size());
        rec.train_mse = mse_of(predict(params, train, *provider));
        rec.test_mse = mse_of(predict(params, test, *provider));
        const double s2 = scale.score_step * scale.score_step;
        rec.train_mse_score = rec.train_mse * s2;
        rec.test_mse_score = rec.test_mse * s2;
        rec.param_norm = parameter_norm(params);
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (rec.test_mse < best) {
            best = rec.test_mse;
            res.best_epoch = epoch;
            res.best_test_mse = rec.test_mse;
            res.best_params = params;
        }
        res.log.records.push_back(rec);
        if (progress) progress(rec);
    }
    res.steps = adam.steps();
    return res;
}

namespace {

CorpusManifest moving_clips(const CorpusManifest& m) {
    CorpusManifest out = m;
    out.clips.clear();
    for (const auto& c : m.clips) {
        if (c.rank > 0) out.clips.push_back(c);
    }
    return out;
}

struct PoolHead {
    int bins = 0;
    int channels = 0;
    std::vector<float> weight;  // bins x channels
    std::vector<float> bias;
};

// Global average pool, then affine map to bin logits.
std::vector<double> pool_logits(const PoolHead& h, const std::vector<float>& act, std::size_t spatial,
                                std::vector<double>* pooled_out) {
    std::vector<double> pooled(static_cast<std::size_t>(h.channels), 0.0);
    for (std::size_t c = 0; c < pooled.size(); ++c) {
        double s = 0.0;
        for (std::size_t i = 0; i < spatial; ++i) s += static_cast<double>(act[c * spatial + i]);
        pooled[c] = s / static_cast<double>(spatial);
    }
    std::vector<double> z(static_cast<std::size_t>(h.bins));
    for (std::size_t k = 0; k < z.size(); ++k) {
        double s = static_cast<double>(h.bias[k]);
        for (std::size_t c = 0; c < pooled.size(); ++c) {
            s += static_cast<double>(h.weight[k * pooled.size() + c]) * pooled[c];
        }
        z[k] = s;
    }
    if (pooled_out) *pooled_out = std::move(pooled);
    return z;
}

std::vector<double> softmax(const std::vector<double>& z) {
    const double mx = *std::max_element(z.begin(), z.end());
    std::vector<double> p(z.size());
    double s = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) s += (p[k] = std::exp(z[k] - mx));
    for (auto& x : p) x /= s;
    return p;
}

}  // namespace

PretrainResult pretrain_frequency(const CorpusManifest& train, const CorpusManifest& heldout,
                                  const TrainConfig& config, int bins, std::shared_ptr<TensorProvider> provider,
                                  const std::function<void(int, double)>& progress) {
    config.validate();
    if (bins < 2) throw DomainError("pretrain: need at least 2 frequency bins");
    require_disjoint(train, heldout);
    const CorpusManifest tr = moving_clips(train);
    const CorpusManifest ho = moving_clips(heldout);
    if (tr.clips.empty() || ho.clips.empty()) {
        throw DomainError("pretrain: no oscillating clips in the training or held-out split");
    }
    auto label = [bins](const ClipRecord& c) { return frequency_bin(c.spec.frequency, bins); };
    std::set<int> seen;
    for (const auto& c : tr.clips) seen.insert(label(c));
    if (seen.size() < 2) {
        throw DomainError("pretrain: training clips fall into a single frequency bin");
    }

    auto params = BackboneParams<float>::initialized(config.net, config.seed);
    const int enc = config.net.block_count() - 1;
    const Shape4 enc_shape = config.net.block_shapes()[static_cast<std::size_t>(enc - 1)];
    const std::size_t S = enc_shape.spatial();
    PoolHead head;
    head.bins = bins;
    head.channels = enc_shape.channels;
    head.weight.resize(static_cast<std::size_t>(bins) * head.channels);
    head.bias.assign(static_cast<std::size_t>(bins), 0.0f);
    std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ull);
    const double hb = 1.0 / std::sqrt(static_cast<double>(head.channels));
    std::uniform_real_distribution<double> hd(-hb, hb);
    for (auto& w : head.weight) w = static_cast<float>(hd(rng));

    BatchStream stream(tr, config.batch_size, config.seed ^ 0x27d4eb2full, RankScale(tr.levels), provider);
    Adam adam(config.learning_rate, config.beta1, config.beta2, config.epsilon, config.weight_decay);
    PretrainResult res;

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto order = stream.epoch_order(epoch);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            const std::size_t N = end - start;
            std::vector<std::vector<float>> inputs;
            std::vector<int> labels;
            for (std::size_t i = start; i < end; ++i) {
                const auto& c = tr.clips[order[i]];
                inputs.push_back(tensor_input(*provider->get(tr, c)));
                labels.push_back(label(c));
            }
            const auto cache = forward_blocks(params, inputs, Mode::train, enc);
            std::vector<double> dw(head.weight.size(), 0.0), db(head.bias.size(), 0.0);
            std::vector<std::vector<float>> dact(N, std::vector<float>(enc_shape.size()));
            for (std::size_t n = 0; n < N; ++n) {
                std::vector<double> pooled;
                const auto p = softmax(pool_logits(head, cache.activations.back()[n], S, &pooled));
                const auto y = static_cast<std::size_t>(labels[n]);
                loss_sum += -std::log(std::max(p[y], 1e-300));
                for (std::size_t c = 0; c < pooled.size(); ++c) {
                    double dpool = 0.0;
                    for (std::size_t k = 0; k < p.size(); ++k) {
                        const double g = (p[k] - (k == y ? 1.0 : 0.0)) / static_cast<double>(N);
                        if (c == 0) db[k] += g;
                        dw[k * pooled.size() + c] += g * pooled[c];
                        dpool += g * static_cast<double>(head.weight[k * pooled.size() + c]);
                    }
                    const auto v = static_cast<float>(dpool / static_cast<double>(S));
                    std::fill_n(dact[n].begin() + static_cast<long>(c * S), S, v);
                }
            }
            auto grads = Gradients<float>::zeros_like(params);
            backward_blocks(params, cache, std::move(dact), grads);
            update_running_stats(params, cache);

            auto vs = trainable(params);
            const auto views = parameter_views(params);
            for (std::size_t i = 0; i < vs.active.size(); ++i) {
                vs.active[i] = views[i].block >= 0 && views[i].block < enc;
            }
            vs.spans.push_back(head.weight);
            vs.spans.push_back(head.bias);
            vs.active.push_back(true);
            vs.active.push_back(true);
            grads.values.emplace_back(dw.begin(), dw.end());
            grads.values.emplace_back(db.begin(), db.end());
            adam.step(vs.spans, grads.values, vs.active);
        }
        res.train_loss.push_back(loss_sum / static_cast<double>(tr.clips.size()));
        if (progress) progress(epoch, res.train_loss.back());
    }

    int correct = 0;
    for (std::size_t start = 0; start < ho.clips.size(); start += config.batch_size) {
        const std::size_t end = std::min(ho.clips.size(), start + config.batch_size);
        std::vector<std::vector<float>> inputs;
        for (std::size_t i = start; i < end; ++i) inputs.push_back(tensor_input(*provider->get(ho, ho.clips[i])));
        const auto cache = forward_blocks(params, inputs, Mode::infer, enc);
        for (std::size_t i = start; i < end; ++i) {
            const auto z = pool_logits(head, cache.activations.back()[i - start], S, nullptr);
            const auto pred = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
            if (pred == label(ho.clips[i])) ++correct;
        }
    }
    res.heldout_accuracy = static_cast<double>(correct) / static_cast<double>(ho.clips.size());
    res.encoder = encoder_checkpoint(params);
    res.encoder.metadata["pretrain.bins"] = std::to_string(bins);
    res.encoder.metadata["pretrain.epochs"] = std::to_string(config.epochs);
    res.encoder.metadata["pretrain.seed"] = std::to_string(config.seed);
    res.encoder.metadata["pretrain.heldout_accuracy"] = g17(res.heldout_accuracy);
    return res;
}

}  // namespace tremorank

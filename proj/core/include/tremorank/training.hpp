#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tremorank/checkpoint.hpp"
#include "tremorank/dataset.hpp"
#include "tremorank/network.hpp"
#include "tremorank/synth.hpp"

namespace tremorank {

struct TrainConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    /// L2 penalty added to the gradient of every trainable tensor.
    double weight_decay = 0.0;
    std::size_t batch_size = 8;
    int epochs = 100;
    std::uint64_t seed = 0;
    TransferPolicy transfer = TransferPolicy::none;
    /// Evaluate train/test MSE every `log_every` epochs (and always on the last).
    int log_every = 1;
    bool task_weighting = true;
    NetConfig net = NetConfig::full();

    void validate() const;
};

/// Adam with bias correction; moments kept in double.
class Adam {
public:
    Adam(double learning_rate, double beta1, double beta2, double epsilon, double weight_decay = 0.0);

    /// Updates params[i] -= step(grads[i]) for every i with active[i] set.
    void step(std::vector<std::span<float>> params, const std::vector<std::vector<float>>& grads,
              const std::vector<bool>& active);
    long steps() const noexcept { return t_; }

private:
    double lr_, b1_, b2_, eps_, wd_;
    long t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    /// Mean squared error of decoded ranks (rank units); the score-unit
    /// values are these times score_step^2.
    double train_mse = 0.0;
    double test_mse = 0.0;
    double train_mse_score = 0.0;
    double test_mse_score = 0.0;
    double param_norm = 0.0;
    /// Wall time is kept out of the CSV/JSON so logs stay byte-reproducible;
    /// see timing_csv.
    double seconds = 0.0;
};

struct TrainLog {
    std::vector<EpochRecord> records;

    std::string to_csv() const;
    std::string to_json() const;
    std::string timing_csv() const;
};

using ProgressFn = std::function<void(const EpochRecord&)>;

struct TrainResult {
    BackboneParams<float> final_params;
    BackboneParams<float> best_params;
    int best_epoch = 0;
    double best_test_mse = 0.0;
    long steps = 0;
    TaskWeights weights;
    TrainLog log;
    std::optional<TransferReport> transfer;

    Checkpoint final_checkpoint() const;
    Checkpoint best_checkpoint() const;
};

/// Task weights from the rank histogram of `train` alone.
TaskWeights train_task_weights(const CorpusManifest& train, int levels);

/// Ordinal training. Throws ProtocolError if the splits share a subject.
/// `pretrained` is required for freeze/finetune policies.
TrainResult train_ordinal(const CorpusManifest& train, const CorpusManifest& test, const TrainConfig& config,
                          std::shared_ptr<TensorProvider> provider, const Checkpoint* pretrained = nullptr,
                          const ProgressFn& progress = {});

struct PretrainResult {
    Checkpoint encoder;
    double heldout_accuracy = 0.0;
    std::vector<double> train_loss;
};

/// Surrogate source task: classify the oscillation frequency into `bins`
/// equal-width bins over the tremor band with a temporary softmax head on
/// globally pooled encoder features. Rank-0 clips carry no motion and are
/// skipped. Returns the encoder blocks only.
PretrainResult pretrain_frequency(const CorpusManifest& train, const CorpusManifest& heldout,
                                  const TrainConfig& config, int bins, std::shared_ptr<TensorProvider> provider,
                                  const std::function<void(int, double)>& progress = {});

/// Euclidean norm of all trainable tensors, accumulated in double.
double parameter_norm(const BackboneParams<float>& params);

}  // namespace tremorank

#pragma once

// 3D convolutional backbone: stride-2 conv blocks with batch norm and ReLU,
// a final stride-1 conv down to a 1x1x1 feature volume, then the ordinal head.
// Tensors are stored per sample as channels x depth x height x width,
// row-major. Templated on the scalar so gradients can be checked in double.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tremorank/checkpoint.hpp"
#include "tremorank/optical_flow.hpp"
#include "tremorank/ordinal.hpp"

namespace tremorank {

inline constexpr int kKernel = 4;
inline constexpr int kKernelVolume = kKernel * kKernel * kKernel;

struct Shape4 {
    int channels = 0;
    int depth = 0;
    int height = 0;
    int width = 0;

    std::size_t size() const noexcept {
        return static_cast<std::size_t>(channels) * depth * height * width;
    }
    std::size_t spatial() const noexcept { return static_cast<std::size_t>(depth) * height * width; }
    std::string str() const;
    bool operator==(const Shape4&) const = default;
};

struct NetConfig {
    int input_channels = 2;
    int input_extent = 64;
    /// Output channels of the stride-2 blocks (batch norm + ReLU).
    std::vector<int> widths{64, 128, 256, 512};
    /// Output channels of the final stride-1 block; also the head's input length.
    int feature_dim = 32;
    int final_padding = 0;
    int levels = 9;
    double score_step = 0.5;
    double bn_epsilon = 1e-5;
    double bn_momentum = 0.1;

    /// The published layer table: 2x64^3 input, 64-128-256-512-32 channels.
    static NetConfig full(int levels = 9);
    /// Same topology on a 32^3 input with widths w, 2w, 4w, 8w. The final
    /// block pads by 1 so 2^3 still reduces to 1^3.
    static NetConfig reduced(int width = 8, int levels = 9);

    int block_count() const noexcept { return static_cast<int>(widths.size()) + 1; }
    Shape4 input_shape() const;
    /// Output shape of every block, in order.
    std::vector<Shape4> block_shapes() const;
    /// Throws DomainError if the plan does not end in feature_dim x 1 x 1 x 1.
    void validate() const;

    std::map<std::string, std::string> to_metadata() const;
    static NetConfig from_metadata(const std::map<std::string, std::string>& metadata);
};

template <typename T>
struct Conv3dBlock {
    int in_channels = 0;
    int out_channels = 0;
    int stride = 2;
    int padding = 1;
    bool batch_norm = true;
    double epsilon = 1e-5;
    std::vector<T> weight;  // out x in x 4 x 4 x 4
    std::vector<T> bias;
    std::vector<T> bn_scale;
    std::vector<T> bn_shift;
    std::vector<T> running_mean;
    std::vector<T> running_var;
    /// Frozen blocks get no gradient and normalize with running statistics
    /// even in train mode.
    bool frozen = false;

    std::size_t parameter_count() const noexcept {
        return weight.size() + bias.size() + bn_scale.size() + bn_shift.size();
    }
};

template <typename T>
struct BackboneParams {
    NetConfig config;
    std::vector<Conv3dBlock<T>> blocks;
    CoralHead<T> head;

    /// He-uniform conv weights, zero conv bias, unit BN scale, zero shift,
    /// unit running variance; head projection uniform in +-1/sqrt(fan_in).
    static BackboneParams initialized(const NetConfig& config, std::uint64_t seed);

    template <typename U>
    BackboneParams<U> cast() const;
};

/// Named view of one trainable tensor; `block` is -1 for the head.
template <typename T>
struct ParamView {
    std::string name;
    std::span<T> values;
    std::vector<std::uint32_t> dims;
    int block = -1;
};

/// Trainable tensors in a fixed order: per block weight, bias, bn_scale,
/// bn_shift; then head.projection, head.bias_base, head.decrement_params.
template <typename T>
std::vector<ParamView<T>> parameter_views(BackboneParams<T>& params);
template <typename T>
std::vector<ParamView<const T>> parameter_views(const BackboneParams<T>& params);

enum class Mode { train, infer };

template <typename T>
struct BlockTrace {
    /// Conv output before batch norm, per sample (only for BN blocks).
    std::vector<std::vector<T>> pre;
    std::vector<double> mean;
    std::vector<double> inv_std;
    /// Unbiased batch variance, for the running-statistics update.
    std::vector<double> batch_var;
    bool batch_stats = false;
};

template <typename T>
struct ForwardCache {
    Mode mode = Mode::infer;
    std::size_t batch = 0;
    /// activations[0] is the input, activations[b + 1] the output of block b.
    std::vector<std::vector<std::vector<T>>> activations;
    std::vector<Shape4> shapes;
    std::vector<BlockTrace<T>> traces;
    /// Per-sample head logits; empty when only the encoder ran.
    std::vector<std::vector<double>> logits;

    const std::vector<T>& features(std::size_t sample) const { return activations.back()[sample]; }
};

/// Runs the first `blocks` conv blocks (all when negative). Does not touch
/// running statistics; see update_running_stats.
template <typename T>
ForwardCache<T> forward_blocks(const BackboneParams<T>& params, const std::vector<std::vector<T>>& inputs, Mode mode,
                               int blocks = -1);

/// Full network: conv blocks, flatten, shared projection, ordered biases.
template <typename T>
ForwardCache<T> forward(const BackboneParams<T>& params, const std::vector<std::vector<T>>& inputs, Mode mode);

/// Exponential running-average update (momentum from the config, unbiased
/// variance) from the batch statistics of a train-mode forward. Frozen
/// blocks are left alone.
template <typename T>
void update_running_stats(BackboneParams<T>& params, const ForwardCache<T>& cache);

template <typename T>
struct Gradients {
    /// Aligned with parameter_views order.
    std::vector<std::vector<T>> values;
    /// d loss / d input per sample; filled only when requested.
    std::vector<std::vector<T>> input;

    static Gradients zeros_like(const BackboneParams<T>& params);
};

/// Back-propagates d loss / d (last block output) through the blocks that ran.
/// Stops below the lowest trainable block unless `input_grad` is set.
template <typename T>
void backward_blocks(const BackboneParams<T>& params, const ForwardCache<T>& cache,
                     std::vector<std::vector<T>> d_output, Gradients<T>& grads, bool input_grad = false);

/// Reverse pass from per-sample d loss / d logits. Throws StateError for an
/// infer-mode cache.
template <typename T>
Gradients<T> backward(const BackboneParams<T>& params, const ForwardCache<T>& cache,
                      const std::vector<std::vector<double>>& d_logits, bool input_grad = false);

std::vector<float> tensor_input(const FlowClipTensor& tensor);

// Checkpoint conversion. Keys: blockN.{weight,bias,bn_scale,bn_shift,
// running_mean,running_var} (N from 1) and head.{projection,bias_base,
// decrement_params}; the architecture goes into metadata.
Checkpoint to_checkpoint(const BackboneParams<float>& params);
BackboneParams<float> from_checkpoint(const Checkpoint& checkpoint);

void save_params(const BackboneParams<float>& params, const std::filesystem::path& path,
                 const std::map<std::string, std::string>& extra_metadata = {});
BackboneParams<float> load_params(const std::filesystem::path& path);

/// Encoder checkpoint: only the stride-2 blocks (everything below the final conv).
Checkpoint encoder_checkpoint(const BackboneParams<float>& params);

enum class TransferPolicy { none, freeze, finetune };
TransferPolicy parse_transfer_policy(const std::string& text);
std::string to_string(TransferPolicy policy);

struct TransferReport {
    std::vector<std::string> transferred;
    std::vector<std::string> reinitialized;
    TransferPolicy policy = TransferPolicy::none;

    std::string str() const;
};

/// Copies the encoder blocks from `checkpoint` into a fresh network built
/// from `config` and `seed`. Throws FormatError naming the first key whose
/// presence or shape does not match.
BackboneParams<float> load_pretrained(const Checkpoint& checkpoint, TransferPolicy policy, const NetConfig& config,
                                      std::uint64_t seed, TransferReport* report = nullptr);

}  // namespace tremorank

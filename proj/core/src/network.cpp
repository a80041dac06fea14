#include "tremorank/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include <Eigen/Core>

#include "tremorank/error.hpp"
#include "tremorank/parallel.hpp"

namespace tremorank {

std::string Shape4::str() const {
    return std::to_string(channels) + "x" + std::to_string(depth) + "x" + std::to_string(height) + "x" +
           std::to_string(width);
}

namespace {

int conv_out(int in, int stride, int pad) {
    const int span = in + 2 * pad - kKernel;
    return span < 0 ? 0 : span / stride + 1;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

const std::string& meta_at(const std::map<std::string, std::string>& m, const std::string& key) {
    const auto it = m.find(key);
    if (it == m.end()) {
        throw FormatError(FormatError::Kind::malformed, "checkpoint metadata lacks '" + key + "'");
    }
    return it->second;
}

int meta_int(const std::map<std::string, std::string>& m, const std::string& key) {
    try {
        return std::stoi(meta_at(m, key));
    } catch (const std::invalid_argument&) {
        throw FormatError(FormatError::Kind::malformed, "checkpoint metadata '" + key + "' is not an integer");
    }
}

double meta_double(const std::map<std::string, std::string>& m, const std::string& key) {
    try {
        return std::stod(meta_at(m, key));
    } catch (const std::invalid_argument&) {
        throw FormatError(FormatError::Kind::malformed, "checkpoint metadata '" + key + "' is not a number");
    }
}

}  // namespace

NetConfig NetConfig::full(int levels) {
    NetConfig c;
    c.levels = levels;
    return c;
}

NetConfig NetConfig::reduced(int width, int levels) {
    NetConfig c;
    c.input_extent = 32;
    c.widths = {width, 2 * width, 4 * width, 8 * width};
    c.final_padding = 1;
    c.levels = levels;
    return c;
}

Shape4 NetConfig::input_shape() const {
    return {input_channels, input_extent, input_extent, input_extent};
}

std::vector<Shape4> NetConfig::block_shapes() const {
    std::vector<Shape4> out;
    int s = input_extent;
    for (const int w : widths) {
        s = conv_out(s, 2, 1);
        out.push_back({w, s, s, s});
    }
    s = conv_out(s, 1, final_padding);
    out.push_back({feature_dim, s, s, s});
    return out;
}

void NetConfig::validate() const {
    if (levels < 2) throw DomainError("network: levels must be >= 2, got " + std::to_string(levels));
    if (input_channels < 1 || input_extent < 1 || feature_dim < 1) {
        throw DomainError("network: channel counts and extent must be positive");
    }
    if (!(bn_epsilon > 0.0)) throw DomainError("network: batch-norm epsilon must be > 0");
    for (const int w : widths) {
        if (w < 1) throw DomainError("network: block widths must be positive");
    }
    const auto shapes = block_shapes();
    for (std::size_t b = 0; b < shapes.size(); ++b) {
        if (shapes[b].depth < 1) {
            throw DomainError("network: block " + std::to_string(b + 1) + " output is empty for input extent " +
                              std::to_string(input_extent));
        }
    }
    if (shapes.back().depth != 1) {
        throw DomainError("network: final block output is " + shapes.back().str() + ", expected " +
                          std::to_string(feature_dim) + "x1x1x1");
    }
}

std::map<std::string, std::string> NetConfig::to_metadata() const {
    std::string w;
    for (std::size_t i = 0; i < widths.size(); ++i) {
        w += (i ? "," : "") + std::to_string(widths[i]);
    }
    return {
        {"arch.input_channels", std::to_string(input_channels)},
        {"arch.input_extent", std::to_string(input_extent)},
        {"arch.widths", w},
        {"arch.feature_dim", std::to_string(feature_dim)},
        {"arch.final_padding", std::to_string(final_padding)},
        {"arch.levels", std::to_string(levels)},
        {"arch.score_step", fmt_double(score_step)},
        {"arch.bn_epsilon", fmt_double(bn_epsilon)},
        {"arch.bn_momentum", fmt_double(bn_momentum)},
    };
}

NetConfig NetConfig::from_metadata(const std::map<std::string, std::string>& m) {
    NetConfig c;
    c.input_channels = meta_int(m, "arch.input_channels");
    c.input_extent = meta_int(m, "arch.input_extent");
    c.widths.clear();
    std::istringstream ws(meta_at(m, "arch.widths"));
    std::string item;
    while (std::getline(ws, item, ',')) {
        try {
            c.widths.push_back(std::stoi(item));
        } catch (const std::exception&) {
            throw FormatError(FormatError::Kind::malformed, "checkpoint metadata 'arch.widths' is malformed");
        }
    }
    c.feature_dim = meta_int(m, "arch.feature_dim");
    c.final_padding = meta_int(m, "arch.final_padding");
    c.levels = meta_int(m, "arch.levels");
    c.score_step = meta_double(m, "arch.score_step");
    c.bn_epsilon = meta_double(m, "arch.bn_epsilon");
    c.bn_momentum = meta_double(m, "arch.bn_momentum");
    try {
        c.validate();
    } catch (const DomainError& e) {
        throw FormatError(FormatError::Kind::malformed, std::string("checkpoint architecture invalid: ") + e.what());
    }
    return c;
}

template <typename T>
BackboneParams<T> BackboneParams<T>::initialized(const NetConfig& config, std::uint64_t seed) {
    config.validate();
    BackboneParams<T> p;
    p.config = config;
    std::mt19937_64 rng(seed);
    int in = config.input_channels;
    const int n = config.block_count();
    for (int b = 0; b < n; ++b) {
        const bool last = b == n - 1;
        Conv3dBlock<T> blk;
        blk.in_channels = in;
        blk.out_channels = last ? config.feature_dim : config.widths[static_cast<std::size_t>(b)];
        blk.stride = last ? 1 : 2;
        blk.padding = last ? config.final_padding : 1;
        blk.batch_norm = !last;
        blk.epsilon = config.bn_epsilon;
        const std::size_t fan_in = static_cast<std::size_t>(in) * kKernelVolume;
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        blk.weight.resize(static_cast<std::size_t>(blk.out_channels) * fan_in);
        for (auto& w : blk.weight) w = static_cast<T>(dist(rng));
        const auto oc = static_cast<std::size_t>(blk.out_channels);
        blk.bias.assign(oc, T{0});
        if (blk.batch_norm) {
            blk.bn_scale.assign(oc, T{1});
            blk.bn_shift.assign(oc, T{0});
            blk.running_mean.assign(oc, T{0});
            blk.running_var.assign(oc, T{1});
        }
        p.blocks.push_back(std::move(blk));
        in = p.blocks.back().out_channels;
    }
    p.head = CoralHead<T>(static_cast<std::size_t>(config.feature_dim), config.levels);
    const double hb = 1.0 / std::sqrt(static_cast<double>(config.feature_dim));
    std::uniform_real_distribution<double> hd(-hb, hb);
    for (auto& w : p.head.projection) w = static_cast<T>(hd(rng));
    return p;
}

namespace {

template <typename U, typename T>
std::vector<U> convert(const std::vector<T>& v) {
    return std::vector<U>(v.begin(), v.end());
}

}  // namespace

template <typename T>
template <typename U>
BackboneParams<U> BackboneParams<T>::cast() const {
    BackboneParams<U> out;
    out.config = config;
    for (const auto& b : blocks) {
        Conv3dBlock<U> c;
        c.in_channels = b.in_channels;
        c.out_channels = b.out_channels;
        c.stride = b.stride;
        c.padding = b.padding;
        c.batch_norm = b.batch_norm;
        c.epsilon = b.epsilon;
        c.weight = convert<U>(b.weight);
        c.bias = convert<U>(b.bias);
        c.bn_scale = convert<U>(b.bn_scale);
        c.bn_shift = convert<U>(b.bn_shift);
        c.running_mean = convert<U>(b.running_mean);
        c.running_var = convert<U>(b.running_var);
        c.frozen = b.frozen;
        out.blocks.push_back(std::move(c));
    }
    out.head.projection = convert<U>(head.projection);
    out.head.bias_base = static_cast<U>(head.bias_base);
    out.head.decrement_params = convert<U>(head.decrement_params);
    return out;
}

namespace {

template <typename P, typename B>
void add_block_views(std::vector<P>& out, B& blk, int b) {
    const auto oc = static_cast<std::uint32_t>(blk.out_channels);
    const auto ic = static_cast<std::uint32_t>(blk.in_channels);
    const std::string prefix = "block" + std::to_string(b + 1) + ".";
    out.push_back({prefix + "weight", std::span(blk.weight), {oc, ic, kKernel, kKernel, kKernel}, b});
    out.push_back({prefix + "bias", std::span(blk.bias), {oc}, b});
    if (blk.batch_norm) {
        out.push_back({prefix + "bn_scale", std::span(blk.bn_scale), {oc}, b});
        out.push_back({prefix + "bn_shift", std::span(blk.bn_shift), {oc}, b});
    }
}

template <typename P, typename Params>
std::vector<P> make_views(Params& params) {
    std::vector<P> out;
    for (std::size_t b = 0; b < params.blocks.size(); ++b) {
        add_block_views(out, params.blocks[b], static_cast<int>(b));
    }
    auto& h = params.head;
    out.push_back({"head.projection", std::span(h.projection), {static_cast<std::uint32_t>(h.projection.size())}, -1});
    out.push_back({"head.bias_base", std::span(&h.bias_base, 1), {1}, -1});
    out.push_back({"head.decrement_params", std::span(h.decrement_params),
                   {static_cast<std::uint32_t>(h.decrement_params.size())}, -1});
    return out;
}

/// Index of block b's weight in parameter_views order.
template <typename T>
std::size_t block_param_offset(const BackboneParams<T>& params, std::size_t b) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < b; ++i) off += params.blocks[i].batch_norm ? 4 : 2;
    return off;
}

}  // namespace

template <typename T>
std::vector<ParamView<T>> parameter_views(BackboneParams<T>& params) {
    return make_views<ParamView<T>>(params);
}

template <typename T>
std::vector<ParamView<const T>> parameter_views(const BackboneParams<T>& params) {
    return make_views<ParamView<const T>>(params);
}

template <typename T>
Gradients<T> Gradients<T>::zeros_like(const BackboneParams<T>& params) {
    Gradients<T> g;
    for (const auto& v : parameter_views(params)) g.values.emplace_back(v.values.size(), T{0});
    return g;
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
void im2col(const T* x, const Shape4& in, const Shape4& out, int stride, int pad, T* col) {
    const std::size_t P = out.spatial();
    for (int ci = 0; ci < in.channels; ++ci) {
        const T* xc = x + static_cast<std::size_t>(ci) * in.spatial();
        for (int kd = 0; kd < kKernel; ++kd) {
            for (int kh = 0; kh < kKernel; ++kh) {
                for (int kw = 0; kw < kKernel; ++kw) {
                    const std::size_t row = ((static_cast<std::size_t>(ci) * kKernel + kd) * kKernel + kh) * kKernel + kw;
                    T* dst = col + row * P;
                    for (int od = 0; od < out.depth; ++od) {
                        const int id = od * stride - pad + kd;
                        for (int oh = 0; oh < out.height; ++oh) {
                            const int ih = oh * stride - pad + kh;
                            T* d = dst + (static_cast<std::size_t>(od) * out.height + oh) * out.width;
                            if (id < 0 || id >= in.depth || ih < 0 || ih >= in.height) {
                                std::fill(d, d + out.width, T{0});
                                continue;
                            }
                            const T* srow = xc + (static_cast<std::size_t>(id) * in.height + ih) * in.width;
                            for (int ow = 0; ow < out.width; ++ow) {
                                const int iw = ow * stride - pad + kw;
                                d[ow] = (iw >= 0 && iw < in.width) ? srow[iw] : T{0};
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const T* col, const Shape4& in, const Shape4& out, int stride, int pad, T* dx) {
    const std::size_t P = out.spatial();
    for (int ci = 0; ci < in.channels; ++ci) {
        T* xc = dx + static_cast<std::size_t>(ci) * in.spatial();
        for (int kd = 0; kd < kKernel; ++kd) {
            for (int kh = 0; kh < kKernel; ++kh) {
                for (int kw = 0; kw < kKernel; ++kw) {
                    const std::size_t row = ((static_cast<std::size_t>(ci) * kKernel + kd) * kKernel + kh) * kKernel + kw;
                    const T* src = col + row * P;
                    for (int od = 0; od < out.depth; ++od) {
                        const int id = od * stride - pad + kd;
                        if (id < 0 || id >= in.depth) continue;
                        for (int oh = 0; oh < out.height; ++oh) {
                            const int ih = oh * stride - pad + kh;
                            if (ih < 0 || ih >= in.height) continue;
                            const T* s = src + (static_cast<std::size_t>(od) * out.height + oh) * out.width;
                            T* drow = xc + (static_cast<std::size_t>(id) * in.height + ih) * in.width;
                            for (int ow = 0; ow < out.width; ++ow) {
                                const int iw = ow * stride - pad + kw;
                                if (iw >= 0 && iw < in.width) drow[iw] += s[ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void check_block(const Conv3dBlock<T>& blk, std::size_t b, const Shape4& in, const Shape4& expected_out) {
    const auto label = "block " + std::to_string(b + 1);
    if (blk.in_channels != in.channels || blk.out_channels != expected_out.channels) {
        throw ShapeError(label + ": expected " + std::to_string(in.channels) + " -> " +
                         std::to_string(expected_out.channels) + " channels, parameters have " +
                         std::to_string(blk.in_channels) + " -> " + std::to_string(blk.out_channels));
    }
    const Shape4 got{blk.out_channels, conv_out(in.depth, blk.stride, blk.padding),
                     conv_out(in.height, blk.stride, blk.padding), conv_out(in.width, blk.stride, blk.padding)};
    if (got != expected_out) {
        throw ShapeError(label + ": input " + in.str() + " gives output " + got.str() + ", expected " +
                         expected_out.str());
    }
    const std::size_t wsize = static_cast<std::size_t>(blk.out_channels) * blk.in_channels * kKernelVolume;
    if (blk.weight.size() != wsize || blk.bias.size() != static_cast<std::size_t>(blk.out_channels)) {
        throw ShapeError(label + ": weight has " + std::to_string(blk.weight.size()) + " values, expected " +
                         std::to_string(wsize));
    }
    if (blk.batch_norm && (blk.bn_scale.size() != blk.bias.size() || blk.bn_shift.size() != blk.bias.size() ||
                           blk.running_mean.size() != blk.bias.size() || blk.running_var.size() != blk.bias.size())) {
        throw ShapeError(label + ": batch-norm vectors do not match " + std::to_string(blk.out_channels) +
                         " channels");
    }
}

template <typename T>
void conv_forward(const Conv3dBlock<T>& blk, const Shape4& in, const Shape4& out, const T* x, T* z) {
    const auto K = static_cast<Eigen::Index>(in.channels) * kKernelVolume;
    const auto P = static_cast<Eigen::Index>(out.spatial());
    std::vector<T> col(static_cast<std::size_t>(K * P));
    im2col(x, in, out, blk.stride, blk.padding, col.data());
    Eigen::Map<const RowMat<T>> W(blk.weight.data(), out.channels, K);
    Eigen::Map<const RowMat<T>> C(col.data(), K, P);
    Eigen::Map<RowMat<T>> Z(z, out.channels, P);
    Z.noalias() = W * C;
    for (int c = 0; c < out.channels; ++c) Z.row(c).array() += blk.bias[static_cast<std::size_t>(c)];
}

}  // namespace

template <typename T>
ForwardCache<T> forward_blocks(const BackboneParams<T>& params, const std::vector<std::vector<T>>& inputs, Mode mode,
                               int blocks) {
    const auto& cfg = params.config;
    const int total = static_cast<int>(params.blocks.size());
    if (total != cfg.block_count()) {
        throw ShapeError("network: parameters have " + std::to_string(total) + " blocks, config expects " +
                         std::to_string(cfg.block_count()));
    }
    const int run = blocks < 0 ? total : std::min(blocks, total);
    if (inputs.empty()) throw DomainError("forward: empty batch");
    const Shape4 in_shape = cfg.input_shape();
    for (std::size_t n = 0; n < inputs.size(); ++n) {
        if (inputs[n].size() != in_shape.size()) {
            throw ShapeError("layer 0 (input): expected " + in_shape.str() + " (" + std::to_string(in_shape.size()) +
                             " values), sample " + std::to_string(n) + " has " + std::to_string(inputs[n].size()));
        }
    }

    ForwardCache<T> cache;
    cache.mode = mode;
    cache.batch = inputs.size();
    const std::size_t N = inputs.size();
    const auto expected = cfg.block_shapes();
    cache.shapes.push_back(in_shape);
    cache.activations.push_back(inputs);
    cache.traces.resize(static_cast<std::size_t>(run));

    for (int b = 0; b < run; ++b) {
        const auto& blk = params.blocks[static_cast<std::size_t>(b)];
        const Shape4 in = cache.shapes.back();
        const Shape4 out = expected[static_cast<std::size_t>(b)];
        check_block(blk, static_cast<std::size_t>(b), in, out);
        const auto& x = cache.activations.back();
        std::vector<std::vector<T>> z(N, std::vector<T>(out.size()));
        parallel_for(N, [&](std::size_t n) { conv_forward(blk, in, out, x[n].data(), z[n].data()); });

        auto& tr = cache.traces[static_cast<std::size_t>(b)];
        if (!blk.batch_norm) {
            cache.activations.push_back(std::move(z));
            cache.shapes.push_back(out);
            continue;
        }
        const auto C = static_cast<std::size_t>(out.channels);
        const std::size_t S = out.spatial();
        tr.mean.assign(C, 0.0);
        tr.inv_std.assign(C, 0.0);
        tr.batch_var.assign(C, 0.0);
        tr.batch_stats = mode == Mode::train && !blk.frozen;
        if (tr.batch_stats) {
            const double M = static_cast<double>(N * S);
            parallel_for(C, [&](std::size_t c) {
                double sum = 0.0;
                for (std::size_t n = 0; n < N; ++n) {
                    const T* zc = z[n].data() + c * S;
                    for (std::size_t i = 0; i < S; ++i) sum += static_cast<double>(zc[i]);
                }
                const double mean = sum / M;
                double ss = 0.0;
                for (std::size_t n = 0; n < N; ++n) {
                    const T* zc = z[n].data() + c * S;
                    for (std::size_t i = 0; i < S; ++i) {
                        const double d = static_cast<double>(zc[i]) - mean;
                        ss += d * d;
                    }
                }
                const double var = ss / M;
                tr.mean[c] = mean;
                tr.inv_std[c] = 1.0 / std::sqrt(var + blk.epsilon);
                tr.batch_var[c] = M > 1.0 ? ss / (M - 1.0) : 0.0;
            });
        } else {
            for (std::size_t c = 0; c < C; ++c) {
                tr.mean[c] = static_cast<double>(blk.running_mean[c]);
                tr.inv_std[c] = 1.0 / std::sqrt(static_cast<double>(blk.running_var[c]) + blk.epsilon);
            }
        }
        std::vector<std::vector<T>> a(N, std::vector<T>(out.size()));
        parallel_for(N, [&](std::size_t n) {
            for (std::size_t c = 0; c < C; ++c) {
                const double scale = static_cast<double>(blk.bn_scale[c]) * tr.inv_std[c];
                const double shift = static_cast<double>(blk.bn_shift[c]) - tr.mean[c] * scale;
                const T* zc = z[n].data() + c * S;
                T* ac = a[n].data() + c * S;
                for (std::size_t i = 0; i < S; ++i) {
                    const double y = scale * static_cast<double>(zc[i]) + shift;
                    ac[i] = y > 0.0 ? static_cast<T>(y) : T{0};
                }
            }
        });
        tr.pre = std::move(z);
        cache.activations.push_back(std::move(a));
        cache.shapes.push_back(out);
    }
    return cache;
}

template <typename T>
ForwardCache<T> forward(const BackboneParams<T>& params, const std::vector<std::vector<T>>& inputs, Mode mode) {
    auto cache = forward_blocks(params, inputs, mode, -1);
    cache.logits.resize(cache.batch);
    for (std::size_t n = 0; n < cache.batch; ++n) {
        cache.logits[n] = head_logits(std::span<const T>(cache.features(n)), params.head);
    }
    return cache;
}

template <typename T>
void update_running_stats(BackboneParams<T>& params, const ForwardCache<T>& cache) {
    if (cache.mode != Mode::train) {
        throw StateError("update_running_stats: cache comes from an infer-mode forward");
    }
    const double m = params.config.bn_momentum;
    for (std::size_t b = 0; b < cache.traces.size(); ++b) {
        const auto& tr = cache.traces[b];
        auto& blk = params.blocks[b];
        if (!blk.batch_norm || !tr.batch_stats || blk.frozen) continue;
        for (std::size_t c = 0; c < tr.mean.size(); ++c) {
            blk.running_mean[c] =
                static_cast<T>((1.0 - m) * static_cast<double>(blk.running_mean[c]) + m * tr.mean[c]);
            blk.running_var[c] =
                static_cast<T>((1.0 - m) * static_cast<double>(blk.running_var[c]) + m * tr.batch_var[c]);
        }
    }
}

template <typename T>
void backward_blocks(const BackboneParams<T>& params, const ForwardCache<T>& cache,
                     std::vector<std::vector<T>> d_output, Gradients<T>& grads, bool input_grad) {
    if (cache.mode != Mode::train) {
        throw StateError("backward: cache comes from an infer-mode forward");
    }
    const std::size_t N = cache.batch;
    const int run = static_cast<int>(cache.traces.size());
    if (d_output.size() != N) {
        throw ShapeError("backward: gradient batch " + std::to_string(d_output.size()) + " != forward batch " +
                         std::to_string(N));
    }
    for (const auto& d : d_output) {
        if (d.size() != cache.shapes.back().size()) {
            throw ShapeError("backward: output gradient has " + std::to_string(d.size()) + " values, expected " +
                             std::to_string(cache.shapes.back().size()));
        }
    }
    if (grads.values.empty()) grads = Gradients<T>::zeros_like(params);

    int lowest = run;
    for (int b = 0; b < run; ++b) {
        if (!params.blocks[static_cast<std::size_t>(b)].frozen) {
            lowest = b;
            break;
        }
    }
    if (input_grad) lowest = 0;

    auto dcur = std::move(d_output);
    for (int b = run - 1; b >= lowest; --b) {
        const auto bi = static_cast<std::size_t>(b);
        const auto& blk = params.blocks[bi];
        const auto& tr = cache.traces[bi];
        const Shape4 in = cache.shapes[bi];
        const Shape4 out = cache.shapes[bi + 1];
        const auto C = static_cast<std::size_t>(out.channels);
        const std::size_t S = out.spatial();
        const std::size_t off = block_param_offset(params, bi);

        if (blk.batch_norm) {
            const auto& act = cache.activations[bi + 1];
            // dy = da * relu'(y); then through the normalization.
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t i = 0; i < out.size(); ++i) {
                    if (!(act[n][i] > T{0})) dcur[n][i] = T{0};
                }
            }
            std::vector<double> sdy(C, 0.0), sdyx(C, 0.0);
            parallel_for(C, [&](std::size_t c) {
                double a = 0.0, bsum = 0.0;
                for (std::size_t n = 0; n < N; ++n) {
                    const T* dy = dcur[n].data() + c * S;
                    const T* z = tr.pre[n].data() + c * S;
                    for (std::size_t i = 0; i < S; ++i) {
                        const double xhat = (static_cast<double>(z[i]) - tr.mean[c]) * tr.inv_std[c];
                        a += static_cast<double>(dy[i]);
                        bsum += static_cast<double>(dy[i]) * xhat;
                    }
                }
                sdy[c] = a;
                sdyx[c] = bsum;
            });
            if (!blk.frozen) {
                for (std::size_t c = 0; c < C; ++c) {
                    grads.values[off + 2][c] += static_cast<T>(sdyx[c]);
                    grads.values[off + 3][c] += static_cast<T>(sdy[c]);
                }
            }
            const double M = static_cast<double>(N * S);
            parallel_for(N, [&](std::size_t n) {
                for (std::size_t c = 0; c < C; ++c) {
                    const double g = static_cast<double>(blk.bn_scale[c]) * tr.inv_std[c];
                    T* dy = dcur[n].data() + c * S;
                    const T* z = tr.pre[n].data() + c * S;
                    for (std::size_t i = 0; i < S; ++i) {
                        if (tr.batch_stats) {
                            const double xhat = (static_cast<double>(z[i]) - tr.mean[c]) * tr.inv_std[c];
                            dy[i] = static_cast<T>(g * (static_cast<double>(dy[i]) - sdy[c] / M - xhat * sdyx[c] / M));
                        } else {
                            dy[i] = static_cast<T>(g * static_cast<double>(dy[i]));
                        }
                    }
                }
            });
        }
        // dcur now holds d loss / d conv output.
        const auto K = static_cast<Eigen::Index>(in.channels) * kKernelVolume;
        const auto P = static_cast<Eigen::Index>(S);
        const bool need_dx = b > lowest || input_grad;
        std::vector<std::vector<T>> dw(blk.frozen ? 0 : N);
        std::vector<std::vector<T>> dx(need_dx ? N : 0);
        const auto& x = cache.activations[bi];
        parallel_for(N, [&](std::size_t n) {
            Eigen::Map<const RowMat<T>> D(dcur[n].data(), out.channels, P);
            if (!blk.frozen) {
                std::vector<T> col(static_cast<std::size_t>(K * P));
                im2col(x[n].data(), in, out, blk.stride, blk.padding, col.data());
                Eigen::Map<const RowMat<T>> Cm(col.data(), K, P);
                dw[n].resize(static_cast<std::size_t>(out.channels * K));
                Eigen::Map<RowMat<T>> DW(dw[n].data(), out.channels, K);
                DW.noalias() = D * Cm.transpose();
            }
            if (need_dx) {
                Eigen::Map<const RowMat<T>> W(blk.weight.data(), out.channels, K);
                RowMat<T> dcol = W.transpose() * D;
                dx[n].assign(in.size(), T{0});
                col2im(dcol.data(), in, out, blk.stride, blk.padding, dx[n].data());
            }
        });
        if (!blk.frozen) {
            auto& gw = grads.values[off];
            parallel_for(gw.size(), [&](std::size_t j) {
                double s = static_cast<double>(gw[j]);
                for (std::size_t n = 0; n < N; ++n) s += static_cast<double>(dw[n][j]);
                gw[j] = static_cast<T>(s);
            });
            auto& gb = grads.values[off + 1];
            for (std::size_t c = 0; c < C; ++c) {
                double s = static_cast<double>(gb[c]);
                for (std::size_t n = 0; n < N; ++n) {
                    const T* d = dcur[n].data() + c * S;
                    for (std::size_t i = 0; i < S; ++i) s += static_cast<double>(d[i]);
                }
                gb[c] = static_cast<T>(s);
            }
        }
        if (need_dx) dcur = std::move(dx);
    }
    if (input_grad) grads.input = std::move(dcur);
}

template <typename T>
Gradients<T> backward(const BackboneParams<T>& params, const ForwardCache<T>& cache,
                      const std::vector<std::vector<double>>& d_logits, bool input_grad) {
    if (cache.mode != Mode::train) {
        throw StateError("backward: cache comes from an infer-mode forward");
    }
    if (cache.logits.size() != cache.batch) {
        throw StateError("backward: cache has no head output (encoder-only forward)");
    }
    if (d_logits.size() != cache.batch) {
        throw ShapeError("backward: " + std::to_string(d_logits.size()) + " logit gradients for a batch of " +
                         std::to_string(cache.batch));
    }
    const auto& head = params.head;
    const std::size_t tasks = static_cast<std::size_t>(head.tasks());
    const std::size_t F = head.projection.size();
    auto grads = Gradients<T>::zeros_like(params);
    const std::size_t hp = grads.values.size() - 3;

    std::vector<double> dproj(F, 0.0), ddec(head.decrement_params.size(), 0.0);
    double dbase = 0.0;
    std::vector<std::vector<T>> dfeat(cache.batch, std::vector<T>(F));
    for (std::size_t n = 0; n < cache.batch; ++n) {
        const auto& g = d_logits[n];
        if (g.size() != tasks) {
            throw ShapeError("backward: logit gradient length " + std::to_string(g.size()) + ", expected " +
                             std::to_string(tasks));
        }
        double gsum = 0.0;
        for (const double v : g) gsum += v;
        const auto& f = cache.features(n);
        for (std::size_t i = 0; i < F; ++i) {
            dproj[i] += gsum * static_cast<double>(f[i]);
            dfeat[n][i] = static_cast<T>(gsum * static_cast<double>(head.projection[i]));
        }
        dbase += gsum;
        // b_k = base - sum_{j<k} softplus(r_j), so d b_k / d r_j = -sigmoid(r_j) for k > j.
        double tail = 0.0;
        for (std::size_t k = tasks; k-- > 1;) {
            tail += g[k];
            ddec[k - 1] -= sigmoid(static_cast<double>(head.decrement_params[k - 1])) * tail;
        }
    }
    for (std::size_t i = 0; i < F; ++i) grads.values[hp][i] = static_cast<T>(dproj[i]);
    grads.values[hp + 1][0] = static_cast<T>(dbase);
    for (std::size_t j = 0; j < ddec.size(); ++j) grads.values[hp + 2][j] = static_cast<T>(ddec[j]);

    backward_blocks(params, cache, std::move(dfeat), grads, input_grad);
    return grads;
}

std::vector<float> tensor_input(const FlowClipTensor& tensor) {
    return tensor.values;
}

namespace {

NamedTensor named(const std::string& name, std::vector<std::uint32_t> dims, const std::vector<float>& data) {
    return {name, std::move(dims), data};
}

void add_block_tensors(Checkpoint& ck, const Conv3dBlock<float>& blk, std::size_t b) {
    const auto oc = static_cast<std::uint32_t>(blk.out_channels);
    const auto ic = static_cast<std::uint32_t>(blk.in_channels);
    const std::string p = "block" + std::to_string(b + 1) + ".";
    ck.tensors.push_back(named(p + "weight", {oc, ic, kKernel, kKernel, kKernel}, blk.weight));
    ck.tensors.push_back(named(p + "bias", {oc}, blk.bias));
    if (blk.batch_norm) {
        ck.tensors.push_back(named(p + "bn_scale", {oc}, blk.bn_scale));
        ck.tensors.push_back(named(p + "bn_shift", {oc}, blk.bn_shift));
        ck.tensors.push_back(named(p + "running_mean", {oc}, blk.running_mean));
        ck.tensors.push_back(named(p + "running_var", {oc}, blk.running_var));
    }
}

std::string dims_str(const std::vector<std::uint32_t>& d) {
    std::string s;
    for (std::size_t i = 0; i < d.size(); ++i) s += (i ? "x" : "") + std::to_string(d[i]);
    return s.empty() ? "scalar" : s;
}

void copy_tensor(const Checkpoint& ck, const std::string& name, const std::vector<std::uint32_t>& dims,
                 std::vector<float>& dst) {
    const NamedTensor* t = ck.find(name);
    if (t == nullptr) {
        throw FormatError(FormatError::Kind::malformed, "architecture mismatch at '" + name + "': missing");
    }
    if (t->dims != dims) {
        throw FormatError(FormatError::Kind::malformed, "architecture mismatch at '" + name + "': checkpoint has " +
                                                            dims_str(t->dims) + ", expected " + dims_str(dims));
    }
    dst = t->data;
}

void copy_block(const Checkpoint& ck, Conv3dBlock<float>& blk, std::size_t b, std::vector<std::string>* names) {
    const auto oc = static_cast<std::uint32_t>(blk.out_channels);
    const auto ic = static_cast<std::uint32_t>(blk.in_channels);
    const std::string p = "block" + std::to_string(b + 1) + ".";
    std::vector<std::pair<std::string, std::vector<float>*>> items{{p + "weight", &blk.weight},
                                                                    {p + "bias", &blk.bias}};
    if (blk.batch_norm) {
        items.push_back({p + "bn_scale", &blk.bn_scale});
        items.push_back({p + "bn_shift", &blk.bn_shift});
        items.push_back({p + "running_mean", &blk.running_mean});
        items.push_back({p + "running_var", &blk.running_var});
    }
    for (auto& [name, dst] : items) {
        const std::vector<std::uint32_t> dims =
            name == p + "weight" ? std::vector<std::uint32_t>{oc, ic, kKernel, kKernel, kKernel}
                                 : std::vector<std::uint32_t>{oc};
        copy_tensor(ck, name, dims, *dst);
        if (names) names->push_back(name);
    }
}

}  // namespace

Checkpoint to_checkpoint(const BackboneParams<float>& params) {
    Checkpoint ck;
    ck.metadata = params.config.to_metadata();
    ck.metadata["kind"] = "backbone";
    for (std::size_t b = 0; b < params.blocks.size(); ++b) add_block_tensors(ck, params.blocks[b], b);
    const auto& h = params.head;
    ck.tensors.push_back(named("head.projection", {static_cast<std::uint32_t>(h.projection.size())}, h.projection));
    ck.tensors.push_back(named("head.bias_base", {1}, {h.bias_base}));
    ck.tensors.push_back(named("head.decrement_params", {static_cast<std::uint32_t>(h.decrement_params.size())},
                               h.decrement_params));
    return ck;
}

BackboneParams<float> from_checkpoint(const Checkpoint& ck) {
    const NetConfig cfg = NetConfig::from_metadata(ck.metadata);
    auto p = BackboneParams<float>::initialized(cfg, 0);
    for (std::size_t b = 0; b < p.blocks.size(); ++b) copy_block(ck, p.blocks[b], b, nullptr);
    auto& h = p.head;
    copy_tensor(ck, "head.projection", {static_cast<std::uint32_t>(h.projection.size())}, h.projection);
    std::vector<float> base;
    copy_tensor(ck, "head.bias_base", {1}, base);
    h.bias_base = base[0];
    copy_tensor(ck, "head.decrement_params", {static_cast<std::uint32_t>(h.decrement_params.size())},
                h.decrement_params);
    return p;
}

void save_params(const BackboneParams<float>& params, const std::filesystem::path& path,
                 const std::map<std::string, std::string>& extra_metadata) {
    auto ck = to_checkpoint(params);
    for (const auto& [k, v] : extra_metadata) ck.metadata[k] = v;
    save_checkpoint(ck, path);
}

BackboneParams<float> load_params(const std::filesystem::path& path) {
    return from_checkpoint(load_checkpoint(path));
}

Checkpoint encoder_checkpoint(const BackboneParams<float>& params) {
    Checkpoint ck;
    ck.metadata = params.config.to_metadata();
    ck.metadata["kind"] = "encoder";
    for (std::size_t b = 0; b + 1 < params.blocks.size(); ++b) add_block_tensors(ck, params.blocks[b], b);
    return ck;
}

TransferPolicy parse_transfer_policy(const std::string& text) {
    if (text == "none") return TransferPolicy::none;
    if (text == "freeze") return TransferPolicy::freeze;
    if (text == "finetune") return TransferPolicy::finetune;
    throw DomainError("unknown transfer policy '" + text + "' (expected none, freeze or finetune)");
}

std::string to_string(TransferPolicy policy) {
    switch (policy) {
        case TransferPolicy::none: return "none";
        case TransferPolicy::freeze: return "freeze";
        case TransferPolicy::finetune: return "finetune";
    }
    return "none";
}

std::string TransferReport::str() const {
    std::string s = "transfer policy: " + to_string(policy) + "\ntransferred:";
    for (const auto& n : transferred) s += " " + n;
    s += "\nreinitialized:";
    for (const auto& n : reinitialized) s += " " + n;
    return s + "\n";
}

BackboneParams<float> load_pretrained(const Checkpoint& checkpoint, TransferPolicy policy, const NetConfig& config,
                                      std::uint64_t seed, TransferReport* report) {
    if (policy == TransferPolicy::none) {
        throw DomainError("load_pretrained: policy 'none' loads nothing; use freeze or finetune");
    }
    auto p = BackboneParams<float>::initialized(config, seed);
    TransferReport rep;
    rep.policy = policy;
    for (std::size_t b = 0; b + 1 < p.blocks.size(); ++b) {
        copy_block(checkpoint, p.blocks[b], b, &rep.transferred);
        p.blocks[b].frozen = policy == TransferPolicy::freeze;
    }
    const auto all = to_checkpoint(p).names();
    for (const auto& n : all) {
        if (std::find(rep.transferred.begin(), rep.transferred.end(), n) == rep.transferred.end()) {
            rep.reinitialized.push_back(n);
        }
    }
    if (report) *report = std::move(rep);
    return p;
}

#define TREMORANK_INSTANTIATE(T)                                                                                    \
    template struct BackboneParams<T>;                                                                              \
    template std::vector<ParamView<T>> parameter_views(BackboneParams<T>&);                                         \
    template std::vector<ParamView<const T>> parameter_views(const BackboneParams<T>&);                             \
    template struct Gradients<T>;                                                                                   \
    template ForwardCache<T> forward_blocks(const BackboneParams<T>&, const std::vector<std::vector<T>>&, Mode, int); \
    template ForwardCache<T> forward(const BackboneParams<T>&, const std::vector<std::vector<T>>&, Mode);           \
    template void update_running_stats(BackboneParams<T>&, const ForwardCache<T>&);                                 \
    template void backward_blocks(const BackboneParams<T>&, const ForwardCache<T>&, std::vector<std::vector<T>>,    \
                                  Gradients<T>&, bool);                                                             \
    template Gradients<T> backward(const BackboneParams<T>&, const ForwardCache<T>&,                                \
                                   const std::vector<std::vector<double>>&, bool);

TREMORANK_INSTANTIATE(float)
TREMORANK_INSTANTIATE(double)
#undef TREMORANK_INSTANTIATE

template BackboneParams<double> BackboneParams<float>::cast<double>() const;
template BackboneParams<float> BackboneParams<float>::cast<float>() const;
template BackboneParams<float> BackboneParams<double>::cast<float>() const;
template BackboneParams<double> BackboneParams<double>::cast<double>() const;

}  // namespace tremorank

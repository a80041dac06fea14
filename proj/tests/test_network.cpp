#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "tremorank/error.hpp"
#include "tremorank/network.hpp"
#include "tremorank/parallel.hpp"
#include "test_util.hpp"

using namespace tremorank;

namespace {

// 8^3 input, one stride-2 block, then the final block: the reduced net for gradient checks.
NetConfig tiny_config() {
    NetConfig c;
    c.input_extent = 8;
    c.widths = {3};
    c.feature_dim = 4;
    c.levels = 5;
    return c;
}

template <typename T>
void randomize_bn(BackboneParams<T>& p, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    for (auto& b : p.blocks) {
        for (auto& x : b.bias) x = static_cast<T>(0.1 * nd(rng));
        for (auto& x : b.bn_scale) x = static_cast<T>(1 + 0.3 * nd(rng));
        for (auto& x : b.bn_shift) x = static_cast<T>(0.2 * nd(rng));
        for (auto& x : b.running_mean) x = static_cast<T>(0.1 * nd(rng));
        for (auto& x : b.running_var) x = static_cast<T>(1 + 0.5 * std::abs(nd(rng)));
    }
    p.head.bias_base = static_cast<T>(nd(rng));
    for (auto& d : p.head.decrement_params) d = static_cast<T>(nd(rng));
}

template <typename T>
std::vector<std::vector<T>> random_inputs(const NetConfig& c, std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    std::vector<std::vector<T>> in(n, std::vector<T>(c.input_shape().size()));
    for (auto& v : in) {
        for (auto& x : v) x = static_cast<T>(nd(rng));
    }
    return in;
}

struct LossSetup {
    std::vector<OrdinalLabel> labels;
    TaskWeights weights;

    double loss(const ForwardCache<double>& c) const {
        double s = 0;
        for (std::size_t n = 0; n < c.batch; ++n) s += coral_loss(c.logits[n], labels[n], weights);
        return s / static_cast<double>(c.batch);
    }
    std::vector<std::vector<double>> grad(const ForwardCache<double>& c) const {
        std::vector<std::vector<double>> g(c.batch);
        for (std::size_t n = 0; n < c.batch; ++n) {
            g[n] = coral_loss_gradient(c.logits[n], labels[n], weights);
            for (auto& x : g[n]) x /= static_cast<double>(c.batch);
        }
        return g;
    }
};

double rel_err(double fd, double an) {
    // Floor guards entries whose true gradient is essentially zero.
    return std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-4});
}

// Direct 7-loop convolution followed by affine batch norm and ReLU.
std::vector<double> direct_block(const Conv3dBlock<double>& b, const std::vector<double>& x, const Shape4& in,
                                 const Shape4& out) {
    std::vector<double> y(out.size());
    for (int co = 0; co < out.channels; ++co) {
        for (int od = 0; od < out.depth; ++od) {
            for (int oh = 0; oh < out.height; ++oh) {
                for (int ow = 0; ow < out.width; ++ow) {
                    double s = b.bias[co];
                    for (int ci = 0; ci < in.channels; ++ci) {
                        for (int kd = 0; kd < 4; ++kd) {
                            for (int kh = 0; kh < 4; ++kh) {
                                for (int kw = 0; kw < 4; ++kw) {
                                    const int id = od * b.stride - b.padding + kd;
                                    const int ih = oh * b.stride - b.padding + kh;
                                    const int iw = ow * b.stride - b.padding + kw;
                                    if (id < 0 || ih < 0 || iw < 0 || id >= in.depth || ih >= in.height ||
                                        iw >= in.width)
                                        continue;
                                    s += b.weight[(((co * in.channels + ci) * 4 + kd) * 4 + kh) * 4 + kw] *
                                         x[((ci * in.depth + id) * in.height + ih) * in.width + iw];
                                }
                            }
                        }
                    }
                    if (b.batch_norm) {
                        s = b.bn_scale[co] * (s - b.running_mean[co]) / std::sqrt(b.running_var[co] + b.epsilon) +
                            b.bn_shift[co];
                        s = std::max(s, 0.0);
                    }
                    y[((co * out.depth + od) * out.height + oh) * out.width + ow] = s;
                }
            }
        }
    }
    return y;
}

}  // namespace

TEST(NetConfig, FullShapes) {
    const auto c = NetConfig::full();
    const auto s = c.block_shapes();
    ASSERT_EQ(s.size(), 5u);
    EXPECT_EQ(s[0], (Shape4{64, 32, 32, 32}));
    EXPECT_EQ(s[1], (Shape4{128, 16, 16, 16}));
    EXPECT_EQ(s[2], (Shape4{256, 8, 8, 8}));
    EXPECT_EQ(s[3], (Shape4{512, 4, 4, 4}));
    EXPECT_EQ(s[4], (Shape4{32, 1, 1, 1}));
    EXPECT_NO_THROW(NetConfig::reduced(8).validate());
    EXPECT_EQ(NetConfig::reduced(8).block_shapes().back(), (Shape4{32, 1, 1, 1}));
    NetConfig bad = c;
    bad.final_padding = 1;
    EXPECT_THROW(bad.validate(), DomainError);
}

TEST(Network, FullForwardShapesAndLogits) {
    const auto cfg = NetConfig::full();
    const auto p = BackboneParams<float>::initialized(cfg, 1);
    EXPECT_EQ(p.blocks[0].parameter_count(), 8256u - 0u + 2u * 64u);  // conv 8256 plus BN scale/shift
    EXPECT_EQ(p.blocks[0].weight.size() + p.blocks[0].bias.size(), 8256u);
    const auto cache = forward(p, random_inputs<float>(cfg, 1, 2), Mode::infer);
    ASSERT_EQ(cache.shapes.size(), 6u);
    EXPECT_EQ(cache.shapes[0], (Shape4{2, 64, 64, 64}));
    EXPECT_EQ(cache.shapes[5], (Shape4{32, 1, 1, 1}));
    EXPECT_EQ(cache.logits[0].size(), 8u);
}

TEST(Network, ZeroInputGivesHeadBiases) {
    const auto cfg = NetConfig::reduced(4);
    const auto p = BackboneParams<float>::initialized(cfg, 3);
    std::vector<std::vector<float>> zeros(2, std::vector<float>(cfg.input_shape().size(), 0.0f));
    for (Mode m : {Mode::train, Mode::infer}) {
        const auto cache = forward(p, zeros, m);
        const auto b = p.head.biases();
        for (std::size_t k = 0; k < b.size(); ++k) EXPECT_DOUBLE_EQ(cache.logits[0][k], b[k]);
    }
}

TEST(Network, WrongInputShapeNamesLayer) {
    const auto cfg = NetConfig::reduced(4);
    const auto p = BackboneParams<float>::initialized(cfg, 3);
    try {
        forward(p, {std::vector<float>(10)}, Mode::infer);
        FAIL();
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("layer 0"), std::string::npos);
        EXPECT_NE(msg.find("2x32x32x32"), std::string::npos);
    }
    auto broken = p;
    broken.blocks[2].weight.pop_back();
    EXPECT_THROW(forward(broken, random_inputs<float>(cfg, 1, 1), Mode::infer), ShapeError);
}

TEST(Network, ConvMatchesDirectOracle) {
    const auto cfg = tiny_config();
    auto p = BackboneParams<double>::initialized(cfg, 4);
    randomize_bn(p, 5);
    const auto in = random_inputs<double>(cfg, 2, 6);
    const auto cache = forward(p, in, Mode::infer);
    for (std::size_t n = 0; n < 2; ++n) {
        const auto h1 = direct_block(p.blocks[0], in[n], cache.shapes[0], cache.shapes[1]);
        const auto h2 = direct_block(p.blocks[1], h1, cache.shapes[1], cache.shapes[2]);
        for (std::size_t i = 0; i < h1.size(); ++i) ASSERT_NEAR(cache.activations[1][n][i], h1[i], 1e-12);
        for (std::size_t i = 0; i < h2.size(); ++i) ASSERT_NEAR(cache.features(n)[i], h2[i], 1e-12);
    }
}

TEST(Network, GradientsMatchFiniteDifferences) {
    const auto cfg = tiny_config();
    auto p = BackboneParams<double>::initialized(cfg, 7);
    randomize_bn(p, 8);
    auto in = random_inputs<double>(cfg, 3, 9);
    LossSetup ls;
    for (int r : {1, 3, 4}) ls.labels.push_back(encode_label(r, RankScale(5)));
    ls.weights = TaskWeights{{1.0, 0.8, 0.6, 0.3}};

    const auto cache = forward(p, in, Mode::train);
    const auto grads = backward(p, cache, ls.grad(cache), true);
    auto loss_at = [&] { return ls.loss(forward(p, in, Mode::train)); };

    std::mt19937_64 rng(10);
    auto views = parameter_views(p);
    const double h = 1e-5;
    int checked = 0;
    for (std::size_t v = 0; v < views.size(); ++v) {
        // The bias feeding batch norm is cancelled by the mean subtraction.
        if (views[v].name == "block1.bias") {
            for (double g : grads.values[v]) EXPECT_NEAR(g, 0.0, 1e-12);
            continue;
        }
        const std::size_t n = views[v].values.size();
        std::uniform_int_distribution<std::size_t> pick(0, n - 1);
        const std::size_t samples = std::min<std::size_t>(n, 60);
        for (std::size_t s = 0; s < samples; ++s) {
            const std::size_t j = n <= 60 ? s : pick(rng);
            const double orig = views[v].values[j];
            views[v].values[j] = orig + h;
            const double lp = loss_at();
            views[v].values[j] = orig - h;
            const double lm = loss_at();
            views[v].values[j] = orig;
            const double fd = (lp - lm) / (2 * h);
            EXPECT_LT(rel_err(fd, grads.values[v][j]), 1e-6) << views[v].name << "[" << j << "]";
            ++checked;
        }
    }
    std::uniform_int_distribution<std::size_t> pick(0, in[0].size() - 1);
    for (int s = 0; s < 60; ++s) {
        const std::size_t n = static_cast<std::size_t>(s % 3), j = pick(rng);
        const double orig = in[n][j];
        in[n][j] = orig + h;
        const double lp = loss_at();
        in[n][j] = orig - h;
        const double lm = loss_at();
        in[n][j] = orig;
        EXPECT_LT(rel_err((lp - lm) / (2 * h), grads.input[n][j]), 1e-6) << "input " << n << "," << j;
    }
    EXPECT_GT(checked, 130);
}

TEST(Network, ReluBlocksGradientAtNegativePreactivation) {
    const auto cfg = tiny_config();
    auto p = BackboneParams<double>::initialized(cfg, 7);
    for (auto& s : p.blocks[0].bn_shift) s = -100.0;  // every ReLU input negative
    const auto in = random_inputs<double>(cfg, 2, 3);
    const auto cache = forward(p, in, Mode::train);
    const auto g = backward(p, cache, {std::vector<double>(4, 1.0), std::vector<double>(4, -0.5)}, true);
    for (std::size_t v = 0; v < 4; ++v) {
        for (double x : g.values[v]) EXPECT_EQ(x, 0.0);
    }
    for (const auto& s : g.input) {
        for (double x : s) EXPECT_EQ(x, 0.0);
    }
}

TEST(Network, ZeroUpstreamGradientGivesZeroGradients) {
    const auto cfg = tiny_config();
    auto p = BackboneParams<double>::initialized(cfg, 7);
    randomize_bn(p, 1);
    const auto cache = forward(p, random_inputs<double>(cfg, 2, 3), Mode::train);
    const auto g = backward(p, cache, {std::vector<double>(4, 0.0), std::vector<double>(4, 0.0)});
    for (const auto& v : g.values) {
        for (double x : v) EXPECT_EQ(x, 0.0);
    }
}

TEST(Network, BackwardOnInferCacheIsStateError) {
    const auto cfg = tiny_config();
    const auto p = BackboneParams<double>::initialized(cfg, 7);
    const auto cache = forward(p, random_inputs<double>(cfg, 1, 3), Mode::infer);
    EXPECT_THROW(backward(p, cache, {std::vector<double>(4, 1.0)}), StateError);
}

TEST(Network, InferModeIgnoresBatchComposition) {
    const auto cfg = NetConfig::reduced(4);
    auto p = BackboneParams<float>::initialized(cfg, 3);
    randomize_bn(p, 2);
    const auto x = random_inputs<float>(cfg, 2, 4);
    const auto one = forward(p, {x[0]}, Mode::infer);
    const auto dup = forward(p, {x[0], x[0]}, Mode::infer);
    const auto mixed = forward(p, {x[1], x[0]}, Mode::infer);
    EXPECT_EQ(one.logits[0], dup.logits[0]);
    EXPECT_EQ(one.logits[0], dup.logits[1]);
    EXPECT_EQ(one.logits[0], mixed.logits[1]);
}

TEST(Network, ResultsIndependentOfThreadCount) {
    const auto cfg = NetConfig::reduced(4);
    auto p = BackboneParams<float>::initialized(cfg, 3);
    const auto x = random_inputs<float>(cfg, 3, 4);
    std::vector<std::vector<double>> up(3, std::vector<double>(8, 0.25));
    const auto before = thread_count();
    set_thread_count(1);
    const auto c1 = forward(p, x, Mode::train);
    const auto g1 = backward(p, c1, up);
    set_thread_count(4);
    const auto c4 = forward(p, x, Mode::train);
    const auto g4 = backward(p, c4, up);
    set_thread_count(before);
    EXPECT_EQ(c1.logits, c4.logits);
    EXPECT_EQ(g1.values, g4.values);
}

TEST(Network, RunningStatsMomentumUpdate) {
    const auto cfg = tiny_config();
    auto p = BackboneParams<double>::initialized(cfg, 7);
    const auto cache = forward(p, random_inputs<double>(cfg, 2, 3), Mode::train);
    update_running_stats(p, cache);
    const auto& tr = cache.traces[0];
    for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_NEAR(p.blocks[0].running_mean[c], 0.1 * tr.mean[c], 1e-15);
        EXPECT_NEAR(p.blocks[0].running_var[c], 0.9 + 0.1 * tr.batch_var[c], 1e-15);
    }
    // Unbiased variance over N * spatial values, computed directly.
    const std::size_t S = 64;
    double s = 0, q = 0;
    for (std::size_t n = 0; n < 2; ++n) {
        for (std::size_t i = 0; i < S; ++i) s += tr.pre[n][i];
    }
    const double mean = s / (2 * S);
    for (std::size_t n = 0; n < 2; ++n) {
        for (std::size_t i = 0; i < S; ++i) q += (tr.pre[n][i] - mean) * (tr.pre[n][i] - mean);
    }
    EXPECT_NEAR(tr.batch_var[0], q / (2 * S - 1), 1e-12);
}

TEST(Network, CheckpointRoundTrip) {
    TempDir dir("net");
    const auto cfg = NetConfig::reduced(4);
    auto p = BackboneParams<float>::initialized(cfg, 11);
    randomize_bn(p, 12);
    save_params(p, dir.path() / "a.trnk", {{"train.seed", "11"}});
    const auto q = load_params(dir.path() / "a.trnk");
    save_params(q, dir.path() / "b.trnk", {{"train.seed", "11"}});
    EXPECT_EQ(read_file_bytes(dir.path() / "a.trnk"), read_file_bytes(dir.path() / "b.trnk"));
    const auto x = random_inputs<float>(cfg, 2, 1);
    EXPECT_EQ(forward(p, x, Mode::infer).logits, forward(q, x, Mode::infer).logits);
    const auto ck = load_checkpoint(dir.path() / "a.trnk");
    EXPECT_EQ(ck.metadata.at("arch.widths"), "4,8,16,32");
    EXPECT_EQ(ck.metadata.at("arch.levels"), "9");
    EXPECT_EQ(ck.metadata.at("train.seed"), "11");
}

TEST(Network, TruncatedCheckpointIsChecksumError) {
    const auto p = BackboneParams<float>::initialized(NetConfig::reduced(4), 1);
    auto bytes = encode_checkpoint(to_checkpoint(p));
    bytes.resize(bytes.size() - 100);
    try {
        from_checkpoint(decode_checkpoint(bytes));
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.kind(), FormatError::Kind::checksum);
    }
}

TEST(Transfer, EncoderBlocksCopiedBitExactly) {
    const auto cfg = NetConfig::reduced(4);
    auto src = BackboneParams<float>::initialized(cfg, 21);
    randomize_bn(src, 22);
    const auto enc = encoder_checkpoint(src);
    for (const auto& n : enc.names()) EXPECT_EQ(n.rfind("block5", 0), std::string::npos) << n;
    EXPECT_EQ(enc.tensors.size(), 4u * 6u);

    TransferReport rep;
    const auto dst = load_pretrained(enc, TransferPolicy::freeze, cfg, 99, &rep);
    for (int b = 0; b < 4; ++b) {
        EXPECT_EQ(dst.blocks[b].weight, src.blocks[b].weight);
        EXPECT_EQ(dst.blocks[b].running_var, src.blocks[b].running_var);
        EXPECT_TRUE(dst.blocks[b].frozen);
    }
    EXPECT_FALSE(dst.blocks[4].frozen);
    EXPECT_NE(dst.blocks[4].weight, src.blocks[4].weight);
    EXPECT_EQ(rep.transferred.size(), 24u);
    EXPECT_EQ(rep.reinitialized.size(), 5u);
    EXPECT_EQ(rep.reinitialized.front(), "block5.weight");

    const auto fin = load_pretrained(enc, TransferPolicy::finetune, cfg, 99);
    EXPECT_FALSE(fin.blocks[0].frozen);
}

TEST(Transfer, MismatchNamesFirstKey) {
    const auto enc = encoder_checkpoint(BackboneParams<float>::initialized(NetConfig::reduced(4), 1));
    try {
        load_pretrained(enc, TransferPolicy::freeze, NetConfig::reduced(8), 1);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("block1.weight"), std::string::npos);
    }
    auto partial = enc;
    partial.tensors.erase(partial.tensors.begin() + 8);  // block2.bn_scale
    try {
        load_pretrained(partial, TransferPolicy::freeze, NetConfig::reduced(4), 1);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("block2.bn_scale"), std::string::npos);
    }
}

TEST(Transfer, FrozenBlocksGetNoGradientAndUseRunningStats) {
    const auto cfg = tiny_config();
    auto p = BackboneParams<double>::initialized(cfg, 7);
    randomize_bn(p, 3);
    p.blocks[0].frozen = true;
    const auto in = random_inputs<double>(cfg, 2, 3);
    const auto cache = forward(p, in, Mode::train);
    EXPECT_FALSE(cache.traces[0].batch_stats);
    const auto infer = forward(p, in, Mode::infer);
    EXPECT_EQ(cache.activations[1], infer.activations[1]);
    const auto g = backward(p, cache, {std::vector<double>(4, 1.0), std::vector<double>(4, 0.3)});
    for (std::size_t v = 0; v < 4; ++v) {
        for (double x : g.values[v]) EXPECT_EQ(x, 0.0);
    }
    auto before = p.blocks[0];
    update_running_stats(p, cache);
    EXPECT_EQ(before.running_mean, p.blocks[0].running_mean);
}

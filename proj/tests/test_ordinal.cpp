#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "tremorank/ordinal.hpp"

using namespace tremorank;

namespace {

std::vector<double> probs_from_label(const OrdinalLabel& l) {
    return {l.extended.begin(), l.extended.end()};
}

// Plain BCE sum written out independently of the library.
double bce_oracle(const std::vector<double>& logits, const std::vector<std::uint8_t>& target,
                  const std::vector<double>& lambda) {
    double s = 0.0;
    for (std::size_t k = 0; k < logits.size(); ++k) {
        double p = 1.0 / (1.0 + std::exp(-logits[k]));
        p = std::min(std::max(p, 1e-7), 1.0 - 1e-7);
        s += lambda[k] * -(target[k] * std::log(p) + (1 - target[k]) * std::log(1 - p));
    }
    return s;
}

}  // namespace

TEST(EncodeLabel, Examples) {
    EXPECT_EQ(encode_label(0, RankScale(9)).extended, std::vector<std::uint8_t>(8, 0));
    EXPECT_EQ(encode_label(8, RankScale(9)).extended, std::vector<std::uint8_t>(8, 1));
    EXPECT_EQ(encode_label(3, RankScale(5)).extended, (std::vector<std::uint8_t>{1, 1, 1, 0}));
}

TEST(EncodeLabel, OutOfRangeNamesValue) {
    try {
        encode_label(9, RankScale(9));
        FAIL();
    } catch (const DomainError& e) {
        EXPECT_NE(std::string(e.what()).find("9"), std::string::npos);
    }
    EXPECT_THROW(encode_label(-1, RankScale(9)), DomainError);
}

TEST(DecodeRank, Examples) {
    EXPECT_EQ(decode_rank(std::vector<double>(8, 0.9)), 8);
    EXPECT_EQ(decode_rank(std::vector<double>{0.2, 0.1, 0.05, 0.04, 0.03, 0.02, 0.01, 0.0}), 0);
    EXPECT_EQ(decode_rank(std::vector<double>{0.95, 0.8, 0.6, 0.4, 0.3, 0.2, 0.1, 0.05}), 3);
}

TEST(DecodeRank, TiesDoNotCount) {
    EXPECT_EQ(decode_rank(std::vector<double>{0.5, 0.5}), 0);
}

TEST(DecodeRank, RejectsBadProbabilities) {
    EXPECT_THROW(decode_rank(std::vector<double>{0.5, 1.5}), DomainError);
    EXPECT_THROW(decode_rank(std::vector<double>{-0.1}), DomainError);
    EXPECT_THROW(decode_rank(std::vector<double>{std::nan("")}), DomainError);
}

TEST(EncodeDecode, RoundTripAllRanks) {
    for (int m : {2, 5, 9}) {
        const RankScale s(m);
        for (int r = 0; r < m; ++r) {
            const auto l = encode_label(r, s);
            int sum = 0;
            for (auto b : l.extended) sum += b;
            EXPECT_EQ(sum, r);
            EXPECT_EQ(decode_rank(probs_from_label(l)), r);
        }
    }
}

TEST(RankScale, ScoreMap) {
    RankScale s;
    EXPECT_EQ(s.levels, 9);
    EXPECT_DOUBLE_EQ(s.score_of_rank(8), 4.0);
    EXPECT_DOUBLE_EQ(s.score_of_rank(3), 1.5);
    EXPECT_THROW(RankScale(1), DomainError);
}

TEST(HeadLogits, ZeroFeature) {
    CoralHead<double> h(32, 9, 0.1);
    h.bias_base = 0.0;
    for (auto& d : h.decrement_params) d = -1e3;  // softplus -> 0
    const auto l = head_logits(std::vector<double>(32, 0.0), h);
    ASSERT_EQ(l.size(), 8u);
    for (double v : l) EXPECT_NEAR(v, 0.0, 1e-300);
}

TEST(HeadLogits, BiasesPassThrough) {
    CoralHead<double> h(32, 9, 0.5);
    h.bias_base = 1.0;
    const auto l = head_logits(std::vector<double>(32, 0.0), h);
    for (std::size_t k = 0; k < l.size(); ++k) EXPECT_NEAR(l[k], 1.0 - 0.5 * k, 1e-12);
}

TEST(HeadLogits, MatchesRecomputation) {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> nd;
    CoralHead<double> h(32, 9);
    for (auto& w : h.projection) w = nd(rng);
    h.bias_base = nd(rng);
    for (auto& d : h.decrement_params) d = nd(rng);
    std::vector<double> f(32);
    for (auto& x : f) x = nd(rng);
    double z = 0.0;
    for (int i = 0; i < 32; ++i) z += h.projection[i] * f[i];
    double b = h.bias_base;
    const auto l = head_logits(f, h);
    for (int k = 0; k < 8; ++k) {
        EXPECT_NEAR(l[k], z + b, 1e-12);
        if (k < 7) b -= std::log1p(std::exp(h.decrement_params[k]));
    }
}

TEST(HeadLogits, ShapeErrorNamesBothLengths) {
    CoralHead<double> h(32, 9);
    try {
        head_logits(std::vector<double>(31, 0.0), h);
        FAIL();
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("31"), std::string::npos);
        EXPECT_NE(msg.find("32"), std::string::npos);
    }
}

TEST(HeadLogits, RankConsistencyRandomized) {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> nd(0.0, 3.0);
    for (int trial = 0; trial < 10000; ++trial) {
        CoralHead<double> h(32, 9);
        for (auto& w : h.projection) w = nd(rng);
        h.bias_base = nd(rng);
        for (auto& d : h.decrement_params) d = nd(rng);
        std::vector<double> f(32);
        for (auto& x : f) x = nd(rng);
        const auto p = task_probabilities(head_logits(f, h));
        for (std::size_t k = 1; k < p.size(); ++k) ASSERT_LE(p[k], p[k - 1]);
    }
}

TEST(CoralLoss, AllZeroLogits) {
    const auto w = TaskWeights::uniform(8);
    for (int r = 0; r < 9; ++r) {
        EXPECT_NEAR(coral_loss(std::vector<double>(8, 0.0), encode_label(r, RankScale(9)), w), 8 * std::log(2.0), 1e-12);
    }
}

TEST(CoralLoss, ConfidentCorrectNearZero) {
    const auto w = TaskWeights::uniform(8);
    for (int r = 0; r < 9; ++r) {
        std::vector<double> l(8);
        for (int k = 0; k < 8; ++k) l[k] = k < r ? 20.0 : -20.0;
        // Every task sits on the probability clamp.
        EXPECT_NEAR(coral_loss(l, encode_label(r, RankScale(9)), w), -8 * std::log1p(-1e-7), 1e-15);
    }
}

TEST(CoralLoss, MatchesOracleAndStaysFinite) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd(0.0, 10.0);
    std::uniform_real_distribution<double> ud(0.1, 1.0);
    for (int t = 0; t < 500; ++t) {
        std::vector<double> l(8), lam(8);
        for (auto& x : l) x = nd(rng);
        for (auto& x : lam) x = ud(rng);
        const auto lab = encode_label(t % 9, RankScale(9));
        const double v = coral_loss(l, lab, TaskWeights{lam});
        EXPECT_TRUE(std::isfinite(v));
        EXPECT_GE(v, 0.0);
        EXPECT_NEAR(v, bce_oracle(l, lab.extended, lam), 1e-9 * std::max(1.0, v));
    }
    std::vector<double> huge{1e6, -1e6, 800, -800, 0, 0, 0, 0};
    EXPECT_TRUE(std::isfinite(coral_loss(huge, encode_label(4, RankScale(9)), TaskWeights::uniform(8))));
}

TEST(CoralLoss, OrderingExhaustive) {
    // Confident prediction at rank r_i: +L below r_i, -L from r_i on.
    const RankScale s(9);
    const auto w = TaskWeights::uniform(8);
    for (int rc = 0; rc < 9; ++rc) {
        const auto lab = encode_label(rc, s);
        for (int ri = 0; ri < 9; ++ri) {
            for (int rj = 0; rj < 9; ++rj) {
                if (std::abs(ri - rc) >= std::abs(rj - rc)) continue;
                auto conf = [](int r) {
                    std::vector<double> l(8);
                    for (int k = 0; k < 8; ++k) l[k] = k < r ? 5.0 : -5.0;
                    return l;
                };
                EXPECT_LT(coral_loss(conf(ri), lab, w), coral_loss(conf(rj), lab, w))
                    << "rc=" << rc << " ri=" << ri << " rj=" << rj;
            }
        }
    }
}

TEST(CoralLoss, ExampleRanksThreeAndSix) {
    auto conf = [](int r) {
        std::vector<double> l(8);
        for (int k = 0; k < 8; ++k) l[k] = k < r ? 4.0 : -4.0;
        return l;
    };
    const auto lab = encode_label(4, RankScale(9));
    const auto w = TaskWeights::uniform(8);
    EXPECT_LT(coral_loss(conf(3), lab, w), coral_loss(conf(6), lab, w));
}

TEST(CoralLoss, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> nd(0.0, 2.0);
    std::uniform_real_distribution<double> ud(0.1, 1.0);
    const double h = 1e-4;
    for (int t = 0; t < 200; ++t) {
        std::vector<double> l(8), lam(8);
        for (auto& x : l) x = nd(rng);
        for (auto& x : lam) x = ud(rng);
        const auto lab = encode_label(t % 9, RankScale(9));
        const auto g = coral_loss_gradient(l, lab, TaskWeights{lam});
        for (int k = 0; k < 8; ++k) {
            auto lp = l, lm = l;
            lp[k] += h;
            lm[k] -= h;
            const double fd = (coral_loss(lp, lab, TaskWeights{lam}) - coral_loss(lm, lab, TaskWeights{lam})) / (2 * h);
            EXPECT_LT(std::abs(fd - g[k]) / std::max(std::abs(fd), 1e-3), 1e-6);
        }
    }
}

TEST(TaskWeights, UniformHistogramFollowsCountFormula) {
    // With all ranks equally frequent, N_k = (m-1-k) * c, so lambda_k = sqrt((m-1-k)/(m-1)).
    const auto w = task_weights_from_counts(std::vector<double>(9, 10.0));
    ASSERT_EQ(w.lambda.size(), 8u);
    for (int k = 0; k < 8; ++k) EXPECT_NEAR(w.lambda[k], std::sqrt((8.0 - k) / 8.0), 1e-12);
}

TEST(TaskWeights, RankZeroOnly) {
    std::vector<double> h(9, 0.0);
    h[0] = 10;
    const auto w = task_weights_from_counts(h);
    for (double l : w.lambda) EXPECT_DOUBLE_EQ(l, 1.0);  // every N_k floors at 1
}

TEST(TaskWeights, CountingOracle) {
    const std::vector<double> h{2, 5, 9, 20, 25, 14, 6, 2, 1};
    std::vector<double> n(8);
    for (int k = 0; k < 8; ++k) {
        double c = 0;
        for (int r = 0; r < 9; ++r) {
            const auto lab = encode_label(r, RankScale(9));
            if (lab.extended[k]) c += h[r];
        }
        n[k] = std::sqrt(std::max(c, 1.0));
    }
    const double top = *std::max_element(n.begin(), n.end());
    const auto w = task_weights_from_counts(h);
    bool has_one = false;
    for (int k = 0; k < 8; ++k) {
        EXPECT_NEAR(w.lambda[k], n[k] / top, 1e-12);
        EXPECT_GT(w.lambda[k], 0.0);
        EXPECT_LE(w.lambda[k], 1.0);
        has_one |= w.lambda[k] == 1.0;
        if (k > 0) EXPECT_LE(w.lambda[k], w.lambda[k - 1]);
    }
    EXPECT_TRUE(has_one);
}

TEST(TaskWeights, EmptyHistogramRejected) {
    EXPECT_THROW(task_weights_from_counts(std::vector<double>(9, 0.0)), DomainError);
}

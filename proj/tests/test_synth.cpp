#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <filesystem>
#include <numbers>
#include <set>

#include "tremorank/error.hpp"
#include "tremorank/synth.hpp"
#include "test_util.hpp"

using namespace tremorank;

namespace {

SyntheticClipSpec base_spec() {
    SyntheticClipSpec s;
    s.canvas = 64;
    s.base_x = s.base_y = 32;
    s.sigma_x = 5;
    s.sigma_y = 7;
    s.frequency = 6.25;  // an exact DFT bin for 96 frames at 30 fps
    s.seed = 17;
    return s;
}

std::pair<double, double> centroid(const FrameGray& f, double background) {
    double sx = 0, sy = 0, s = 0;
    for (int y = 0; y < f.height; ++y) {
        for (int x = 0; x < f.width; ++x) {
            const double w = f.at(x, y) - background;
            sx += w * x;
            sy += w * y;
            s += w;
        }
    }
    return {sx / s, sy / s};
}

// Amplitude of the dominant non-DC DFT component of a trajectory.
double fft_peak_amplitude(const std::vector<double>& x) {
    const std::size_t n = x.size();
    double best = 0.0;
    for (std::size_t k = 1; k <= n / 2; ++k) {
        std::complex<double> acc = 0.0;
        for (std::size_t t = 0; t < n; ++t) {
            acc += x[t] * std::polar(1.0, -2.0 * std::numbers::pi * double(k * t) / double(n));
        }
        best = std::max(best, 2.0 * std::abs(acc) / double(n));
    }
    return best;
}

}  // namespace

TEST(RenderClip, RankZeroFramesIdentical) {
    auto s = base_spec();
    s.rank = 0;
    s.amplitude = 0;
    const auto frames = render_clip(s, 65);
    ASSERT_EQ(frames.size(), 65u);
    for (const auto& f : frames) EXPECT_EQ(f.intensities, frames[0].intensities);
}

TEST(RenderClip, Deterministic) {
    auto s = base_spec();
    s.amplitude = 3;
    s.noise_sigma = 0.05;
    const auto a = render_clip(s, 10);
    const auto b = render_clip(s, 10);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].intensities, b[i].intensities);
    for (const auto& f : a) {
        for (double v : f.intensities) {
            ASSERT_GE(v, 0.0);
            ASSERT_LE(v, 1.0);
        }
    }
}

TEST(RenderClip, NyquistViolationRejected) {
    auto s = base_spec();
    s.fps = 10;
    s.frequency = 6;
    EXPECT_THROW(render_clip(s, 65), DomainError);
    s = base_spec();
    s.frequency = 13;
    EXPECT_THROW(render_clip(s, 65), DomainError);
}

TEST(RenderClip, AmplitudeRecoveredAndOrdered) {
    const AmplitudeMap amp;
    double prev = -1.0;
    for (int r = 0; r <= 6; ++r) {
        auto s = base_spec();
        s.rank = r;
        s.amplitude = amp(r);
        s.axis_angle = 0.3;
        const auto frames = render_clip(s, 96);
        std::vector<double> along;
        for (const auto& f : frames) {
            const auto [cx, cy] = centroid(f, s.background);
            along.push_back((cx - s.base_x) * std::cos(s.axis_angle) + (cy - s.base_y) * std::sin(s.axis_angle));
        }
        const double measured = fft_peak_amplitude(along);
        if (r > 0) EXPECT_NEAR(measured, s.amplitude, 0.05 * s.amplitude) << "rank " << r;
        EXPECT_GT(measured, prev);
        prev = measured;
    }
}

TEST(AmplitudeMap, MonotoneFromZero) {
    const AmplitudeMap a;
    EXPECT_EQ(a(0), 0.0);
    EXPECT_EQ(a(8), 12.0);
    for (int r = 1; r < 9; ++r) EXPECT_GT(a(r), a(r - 1));
}

TEST(CorpusSpecs, PerSubjectStyleAndSize) {
    CorpusOptions o;
    o.master_seed = 7;
    const auto specs = draw_corpus_specs(o);
    ASSERT_EQ(specs.size(), 288u);
    for (const auto& s : specs) {
        const auto& first = specs[static_cast<std::size_t>(s.subject_id) * 8];
        EXPECT_EQ(s.frequency, first.frequency);
        EXPECT_EQ(s.axis_angle, first.axis_angle);
        EXPECT_EQ(s.sigma_x, first.sigma_x);
        EXPECT_GE(s.frequency, 4.0);
        EXPECT_LE(s.frequency, 12.0);
        EXPECT_EQ(s.amplitude, 1.5 * s.rank);
    }
}

TEST(CorpusSpecs, UniformProfileWithinThreeSigma) {
    CorpusOptions o;
    o.profile = HistogramProfile::uniform;
    o.n_subjects = 400;
    o.clips_per_subject = 10;
    o.master_seed = 3;
    const auto specs = draw_corpus_specs(o);
    std::vector<int> h(9, 0);
    for (const auto& s : specs) ++h[static_cast<std::size_t>(s.rank)];
    const double n = static_cast<double>(specs.size()), p = 1.0 / 9.0;
    const double sd = std::sqrt(n * p * (1 - p));
    for (int c : h) EXPECT_LT(std::abs(c - n * p), 3 * sd);
}

TEST(CorpusSpecs, ImbalancedConcentratesOnMiddleRanks) {
    const auto p = profile_probabilities(HistogramProfile::imbalanced, 9);
    EXPECT_GT(p[3] + p[4], p[0] + p[8]);
    EXPECT_LT(p[8], p[3]);
    for (double x : p) EXPECT_GT(x, 0.0);
}

TEST(Corpus, GenerateWriteReadAndVerify) {
    TempDir dir("synth");
    CorpusOptions o;
    o.n_subjects = 3;
    o.clips_per_subject = 2;
    o.frames_per_clip = 6;
    o.canvas = 24;
    o.master_seed = 5;
    const auto m = generate_corpus(o, dir.path());
    ASSERT_EQ(m.clips.size(), 6u);
    const auto back = read_manifest(dir.path() / "manifest.jsonl");
    ASSERT_EQ(back.clips.size(), 6u);
    EXPECT_EQ(back.histogram(), m.histogram());
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_EQ(back.clips[i].path, m.clips[i].path);
        EXPECT_EQ(back.clips[i].spec_hash, m.clips[i].spec_hash);
        EXPECT_EQ(back.clips[i].spec.hash(), m.clips[i].spec_hash);
    }
    EXPECT_TRUE(verify_manifest(back, true).empty());

    TempDir dir2("synth2");
    generate_corpus(o, dir2.path());
    EXPECT_EQ(file_hash(dir.path() / "manifest.jsonl"), file_hash(dir2.path() / "manifest.jsonl"));
    EXPECT_EQ(file_hash(dir.path() / m.clips[3].path), file_hash(dir2.path() / m.clips[3].path));

    std::filesystem::remove(dir.path() / m.clips[0].path);
    EXPECT_FALSE(verify_manifest(back).empty());
}

TEST(Split, ThirtySixSubjectsGiveTwentyFourTwelve) {
    CorpusManifest m;
    for (const auto& s : draw_corpus_specs(CorpusOptions{})) m.clips.push_back({"x", s.subject_id, s.rank, 0, 0, s});
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const auto [tr, te] = split_by_subject(m, 2.0 / 3.0, seed);
        EXPECT_EQ(tr.subjects().size(), 24u);
        EXPECT_EQ(te.subjects().size(), 12u);
        EXPECT_TRUE(shared_subjects(tr, te).empty());
        EXPECT_EQ(tr.clips.size() + te.clips.size(), m.clips.size());
        EXPECT_NO_THROW(require_disjoint(tr, te));
    }
}

TEST(Split, Errors) {
    CorpusManifest m;
    m.clips.push_back({"a", 1, 0, 0, 0, {}});
    EXPECT_THROW(split_by_subject(m, 0.5, 0), DomainError);
    CorpusManifest a = m, b = m;
    b.clips.push_back({"b", 2, 0, 0, 0, {}});
    try {
        require_disjoint(a, b);
        FAIL();
    } catch (const ProtocolError& e) {
        EXPECT_NE(std::string(e.what()).find("1"), std::string::npos);
    }
}

TEST(FrequencyBin, EqualWidth) {
    EXPECT_EQ(frequency_bin(4.0, 4), 0);
    EXPECT_EQ(frequency_bin(5.99, 4), 0);
    EXPECT_EQ(frequency_bin(6.0, 4), 1);
    EXPECT_EQ(frequency_bin(11.9, 4), 3);
    EXPECT_EQ(frequency_bin(12.0, 4), 3);
}

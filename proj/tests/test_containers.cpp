#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>
#include <set>

#include "tremorank/checkpoint.hpp"
#include "tremorank/dataset.hpp"
#include "tremorank/error.hpp"
#include "test_util.hpp"

using namespace tremorank;

namespace {

std::vector<FrameGray> random_frames(int n, int w, int h, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> d(0, 255);
    std::vector<FrameGray> frames;
    for (int t = 0; t < n; ++t) {
        FrameGray f(w, h);
        for (auto& x : f.intensities) x = d(rng) / 255.0;
        frames.push_back(std::move(f));
    }
    return frames;
}

FormatError::Kind decode_kind(const std::vector<std::uint8_t>& bytes) {
    try {
        decode_clip(bytes);
    } catch (const FormatError& e) {
        return e.kind();
    }
    ADD_FAILURE() << "no error";
    return FormatError::Kind::malformed;
}

FormatError::Kind checkpoint_kind(const std::vector<std::uint8_t>& bytes) {
    try {
        decode_checkpoint(bytes);
    } catch (const FormatError& e) {
        return e.kind();
    }
    ADD_FAILURE() << "no error";
    return FormatError::Kind::malformed;
}

Checkpoint sample_checkpoint() {
    Checkpoint ck;
    ck.metadata["levels"] = "9";
    ck.metadata["note"] = "a b=c";
    ck.tensors.push_back({"w", {2, 3}, {1, 2, 3, 4, 5, -0.0f}});
    ck.tensors.push_back({"b", {1}, {std::nanf("")}});
    ck.tensors.push_back({"empty", {0}, {}});
    return ck;
}

CorpusManifest fake_manifest(int n) {
    CorpusManifest m;
    for (int i = 0; i < n; ++i) {
        ClipRecord r;
        r.path = "clip" + std::to_string(i);
        r.subject_id = i % 7;
        r.rank = i % 9;
        m.clips.push_back(r);
    }
    return m;
}

}  // namespace

TEST(ClipContainer, RoundTripLossless) {
    TempDir dir("clip");
    const auto frames = random_frames(5, 7, 4, 1);
    write_clip(dir.path() / "a.trcl", frames, 29.97);
    const auto clip = read_clip(dir.path() / "a.trcl");
    EXPECT_EQ(clip.width, 7);
    EXPECT_EQ(clip.height, 4);
    EXPECT_EQ(clip.fps, 29.97);
    ASSERT_EQ(clip.frames.size(), 5u);
    for (std::size_t t = 0; t < 5; ++t) EXPECT_EQ(clip.frames[t].intensities, frames[t].intensities);
    const auto bytes = encode_clip(frames, 29.97);
    EXPECT_EQ(bytes.size(), kClipHeaderBytes + 5 * 7 * 4 + 4);
}

TEST(ClipContainer, DistinctErrors) {
    const auto good = encode_clip(random_frames(3, 5, 5, 2), 30);
    auto bad_magic = good;
    bad_magic[0] = 'X';
    EXPECT_EQ(decode_kind(bad_magic), FormatError::Kind::bad_magic);
    auto version = good;
    version[4] = 9;
    EXPECT_EQ(decode_kind(version), FormatError::Kind::version);
    auto payload = good;
    payload[kClipHeaderBytes + 3] ^= 0x10;
    EXPECT_EQ(decode_kind(payload), FormatError::Kind::checksum);
    auto frames_field = good;
    frames_field[16] = 4;  // n_frames 3 -> 4
    EXPECT_EQ(decode_kind(frames_field), FormatError::Kind::truncated);
    auto cut = good;
    cut.resize(cut.size() - 10);
    EXPECT_EQ(decode_kind(cut), FormatError::Kind::truncated);
}

TEST(ClipContainer, EverySingleBitFlipRejected) {
    const auto good = encode_clip(random_frames(2, 4, 3, 3), 30);
    for (std::size_t byte = 0; byte < good.size(); ++byte) {
        for (int bit = 0; bit < 8; ++bit) {
            auto b = good;
            b[byte] ^= static_cast<std::uint8_t>(1u << bit);
            EXPECT_THROW(decode_clip(b), FormatError) << "byte " << byte << " bit " << bit;
        }
    }
}

TEST(ClipContainer, MissingFileIsIoErrorWithPath) {
    try {
        read_clip("/nonexistent/dir/x.trcl");
        FAIL();
    } catch (const FormatError&) {
        FAIL() << "missing file reported as format error";
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/x.trcl"), std::string::npos);
    }
}

TEST(Checkpoint, RoundTripBitExact) {
    TempDir dir("ck");
    const auto ck = sample_checkpoint();
    save_checkpoint(ck, dir.path() / "a.trnk");
    const auto back = load_checkpoint(dir.path() / "a.trnk");
    EXPECT_TRUE(back.bit_equal(ck));
    EXPECT_EQ(back.metadata, ck.metadata);
    EXPECT_EQ(back.names(), ck.names());
    save_checkpoint(back, dir.path() / "b.trnk");
    EXPECT_EQ(read_file_bytes(dir.path() / "a.trnk"), read_file_bytes(dir.path() / "b.trnk"));
}

TEST(Checkpoint, DistinctErrors) {
    const auto good = encode_checkpoint(sample_checkpoint());
    auto magic = good;
    magic[1] = 'X';
    EXPECT_EQ(checkpoint_kind(magic), FormatError::Kind::bad_magic);
    auto cut = good;
    cut.resize(cut.size() / 2);
    EXPECT_EQ(checkpoint_kind(cut), FormatError::Kind::checksum);
    auto flip = good;
    flip[good.size() - 8] ^= 1;
    EXPECT_EQ(checkpoint_kind(flip), FormatError::Kind::checksum);

    // A well-formed file from a future version: fix up the CRC so only the version differs.
    auto future = good;
    future[4] = 2;
    const std::uint32_t crc = crc32_of(future.data(), future.size() - 4);
    std::memcpy(future.data() + future.size() - 4, &crc, 4);
    EXPECT_EQ(checkpoint_kind(future), FormatError::Kind::version);
}

TEST(Checkpoint, RejectsBadMetadataAndShapes) {
    Checkpoint ck;
    ck.metadata["a=b"] = "x";
    EXPECT_THROW(encode_checkpoint(ck), DomainError);
    Checkpoint bad;
    bad.tensors.push_back({"x", {2, 2}, {1, 2, 3}});
    EXPECT_THROW(encode_checkpoint(bad), ShapeError);
}

TEST(BatchStream, CeilingBatchesLastShort) {
    auto m = fake_manifest(90);
    auto provider = std::make_shared<TensorProvider>(FlowOptions{});
    BatchStream s(m, 8, 1, RankScale(9), provider);
    EXPECT_EQ(s.batches_per_epoch(), 12u);
    const auto order = s.epoch_order(0);
    EXPECT_EQ(order.size() - 11 * 8, 2u);
}

TEST(BatchStream, SeededPermutation) {
    auto m = fake_manifest(40);
    auto provider = std::make_shared<TensorProvider>(FlowOptions{});
    BatchStream a(m, 1, 5, RankScale(9), provider), b(m, 1, 5, RankScale(9), provider), c(m, 1, 6, RankScale(9), provider);
    EXPECT_EQ(a.epoch_order(3), b.epoch_order(3));
    EXPECT_NE(a.epoch_order(3), a.epoch_order(4));
    EXPECT_NE(a.epoch_order(3), c.epoch_order(3));
    auto o = a.epoch_order(2);
    std::set<std::size_t> uniq(o.begin(), o.end());
    EXPECT_EQ(uniq.size(), 40u);
}

TEST(BatchStream, Errors) {
    auto provider = std::make_shared<TensorProvider>(FlowOptions{});
    auto m = fake_manifest(5);
    EXPECT_THROW(BatchStream(m, 0, 1, RankScale(9), provider), DomainError);
    m.clips[2].rank = 9;
    EXPECT_THROW(BatchStream(m, 2, 1, RankScale(9), provider), DomainError);
}

TEST(BatchStream, TensorsAndLabelsStayBound) {
    TempDir dir("batches");
    CorpusOptions o;
    o.n_subjects = 2;
    o.clips_per_subject = 3;
    o.frames_per_clip = 5;
    o.canvas = 16;
    o.master_seed = 2;
    const auto m = generate_corpus(o, dir.path());
    FlowOptions fo;
    fo.extent = 4;
    fo.iterations = 5;
    auto provider = std::make_shared<TensorProvider>(fo, dir.path() / "cache");
    BatchStream s(m, 4, 9, RankScale(9), provider);
    const auto batches = s.epoch(1);
    ASSERT_EQ(batches.size(), 2u);
    EXPECT_EQ(batches[1].size(), 2u);
    const auto order = s.epoch_order(1);
    std::size_t i = 0;
    for (const auto& b : batches) {
        for (std::size_t j = 0; j < b.size(); ++j, ++i) {
            const auto& rec = m.clips[order[i]];
            EXPECT_EQ(b.clip_ids[j], rec.path);
            EXPECT_EQ(b.labels[j].rank, rec.rank);
            EXPECT_EQ(b.subjects[j], rec.subject_id);
            const auto frames = read_clip(m.clip_path(rec)).frames;
            EXPECT_EQ(b.tensors[j]->values, clip_to_tensor(frames, fo).values);
        }
    }
    // A second provider reads the disk cache and returns identical tensors.
    TensorProvider again(fo, dir.path() / "cache");
    for (const auto& c : m.clips) EXPECT_EQ(again.get(m, c)->values, provider->get(m, c)->values);
}

TEST(BatchStream, MissingClipReportsPath) {
    TempDir dir("missing");
    CorpusManifest m;
    m.root = dir.path();
    ClipRecord r;
    r.path = "nope.trcl";
    m.clips.push_back(r);
    TensorProvider p(FlowOptions{});
    try {
        p.get(m, m.clips[0]);
        FAIL();
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find("nope.trcl"), std::string::npos);
    }
}

#pragma once

// Raw clip container and the batch stream that feeds flow tensors to the
// trainer.
//
// TRCL layout (little-endian):
//   magic "TRCL" | u32 version | u32 width | u32 height | u32 n_frames
//   | f64 fps | u32 bit_depth (8) | payload (n_frames * height * width u8,
//   row-major frames back to back) | u32 CRC32 of everything before it

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "tremorank/optical_flow.hpp"
#include "tremorank/ordinal.hpp"
#include "tremorank/synth.hpp"

namespace tremorank {

inline constexpr std::uint32_t kClipFormatVersion = 1;
inline constexpr std::size_t kClipHeaderBytes = 32;

struct RawClip {
    int width = 0;
    int height = 0;
    double fps = 30.0;
    std::vector<FrameGray> frames;
};

/// Quantizes intensities to u8 (round(x * 255)) and writes a TRCL file.
void write_clip(const std::filesystem::path& path, const std::vector<FrameGray>& frames, double fps);
std::vector<std::uint8_t> encode_clip(const std::vector<FrameGray>& frames, double fps);

/// Throws FormatError (bad_magic, version, truncated, checksum) or IoError.
RawClip read_clip(const std::filesystem::path& path);
RawClip decode_clip(const std::vector<std::uint8_t>& bytes);

/// Supplies flow tensors for manifest clips, memoized in memory and
/// optionally persisted under a cache directory keyed by
/// (clip spec hash, flow parameters).
class TensorProvider {
public:
    TensorProvider(FlowOptions options, std::optional<std::filesystem::path> cache_dir = std::nullopt,
                   bool memoize = true);

    std::shared_ptr<const FlowClipTensor> get(const CorpusManifest& manifest, const ClipRecord& clip);
    const FlowOptions& options() const noexcept { return options_; }
    std::string cache_key(const ClipRecord& clip) const;

private:
    FlowOptions options_;
    std::optional<std::filesystem::path> cache_dir_;
    bool memoize_;
    std::mutex mutex_;
    std::map<std::string, std::shared_ptr<const FlowClipTensor>> memo_;
};

struct Batch {
    std::vector<std::shared_ptr<const FlowClipTensor>> tensors;
    std::vector<OrdinalLabel> labels;
    std::vector<std::string> clip_ids;
    std::vector<int> subjects;

    std::size_t size() const noexcept { return labels.size(); }
};

/// Seeded epoch permutation of the manifest; the last short batch is kept.
class BatchStream {
public:
    BatchStream(const CorpusManifest& manifest, std::size_t batch_size, std::uint64_t seed, RankScale scale,
                std::shared_ptr<TensorProvider> provider);

    std::size_t batches_per_epoch() const noexcept;
    /// Clip indices in the order epoch `epoch` visits them.
    std::vector<std::size_t> epoch_order(int epoch) const;
    std::vector<Batch> epoch(int epoch) const;
    Batch make_batch(const std::vector<std::size_t>& indices) const;

private:
    const CorpusManifest& manifest_;
    std::size_t batch_size_;
    std::uint64_t seed_;
    RankScale scale_;
    std::shared_ptr<TensorProvider> provider_;
};

std::uint32_t crc32_of(const void* data, std::size_t size);

}  // namespace tremorank

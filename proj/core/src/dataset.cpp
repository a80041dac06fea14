#include "tremorank/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>
#include <random>

#include <zlib.h>

#include "tremorank/checkpoint.hpp"
#include "tremorank/error.hpp"
#include "tremorank/parallel.hpp"

namespace tremorank {

std::uint32_t crc32_of(const void* data, std::size_t size) {
    uLong crc = crc32(0L, Z_NULL, 0);
    const auto* p = static_cast<const Bytef*>(data);
    while (size > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
        crc = crc32(crc, p, chunk);
        p += chunk;
        size -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

namespace {

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
    const auto* b = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), b, b + sizeof v);
}

template <typename T>
T get(const std::vector<std::uint8_t>& in, std::size_t offset) {
    T v;
    std::memcpy(&v, in.data() + offset, sizeof v);
    return v;
}

}  // namespace

std::vector<std::uint8_t> encode_clip(const std::vector<FrameGray>& frames, double fps) {
    if (frames.empty()) {
        throw DomainError("write_clip: no frames");
    }
    const int w = frames[0].width;
    const int h = frames[0].height;
    const std::size_t plane = static_cast<std::size_t>(w) * h;
    std::vector<std::uint8_t> out;
    out.reserve(kClipHeaderBytes + plane * frames.size() + 4);
    out.insert(out.end(), {'T', 'R', 'C', 'L'});
    put<std::uint32_t>(out, kClipFormatVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(w));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(h));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(frames.size()));
    put<double>(out, fps);
    put<std::uint32_t>(out, 8);
    for (const auto& f : frames) {
        if (f.width != w || f.height != h) {
            throw ShapeError("write_clip: frames differ in size");
        }
        for (const double x : f.intensities) {
            out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(x, 0.0, 1.0) * 255.0)));
        }
    }
    put<std::uint32_t>(out, crc32_of(out.data(), out.size()));
    return out;
}

void write_clip(const std::filesystem::path& path, const std::vector<FrameGray>& frames, double fps) {
    write_file_bytes(path, encode_clip(frames, fps));
}

RawClip decode_clip(const std::vector<std::uint8_t>& bytes) {
    using Kind = FormatError::Kind;
    if (bytes.size() < 4 || std::memcmp(bytes.data(), "TRCL", 4) != 0) {
        throw FormatError(Kind::bad_magic, "not a TRCL clip (bad magic)", 0);
    }
    if (bytes.size() < kClipHeaderBytes + 4) {
        throw FormatError(Kind::truncated, "clip truncated inside header", bytes.size());
    }
    const auto version = get<std::uint32_t>(bytes, 4);
    if (version != kClipFormatVersion) {
        throw FormatError(Kind::version, "clip version " + std::to_string(version) + " unsupported", 4);
    }
    RawClip clip;
    const auto w = get<std::uint32_t>(bytes, 8);
    const auto h = get<std::uint32_t>(bytes, 12);
    const auto n = get<std::uint32_t>(bytes, 16);
    clip.fps = get<double>(bytes, 20);
    const auto depth = get<std::uint32_t>(bytes, 28);
    if (depth != 8) {
        throw FormatError(Kind::version, "clip bit depth " + std::to_string(depth) + " unsupported", 28);
    }
    if (w == 0 || h == 0 || n == 0) {
        throw FormatError(Kind::malformed, "clip header has a zero dimension", 8);
    }
    const std::uint64_t payload = static_cast<std::uint64_t>(w) * h * n;
    const std::uint64_t expected = kClipHeaderBytes + payload + 4;
    if (bytes.size() != expected) {
        throw FormatError(Kind::truncated,
                          "clip size " + std::to_string(bytes.size()) + " bytes, header implies " +
                              std::to_string(expected),
                          std::min<std::uint64_t>(bytes.size(), expected));
    }
    const std::size_t body = bytes.size() - 4;
    if (crc32_of(bytes.data(), body) != get<std::uint32_t>(bytes, body)) {
        throw FormatError(Kind::checksum, "clip CRC mismatch", body);
    }
    clip.width = static_cast<int>(w);
    clip.height = static_cast<int>(h);
    const std::size_t plane = static_cast<std::size_t>(w) * h;
    clip.frames.reserve(n);
    for (std::uint32_t t = 0; t < n; ++t) {
        FrameGray f(clip.width, clip.height);
        const std::uint8_t* src = bytes.data() + kClipHeaderBytes + t * plane;
        for (std::size_t i = 0; i < plane; ++i) {
            f.intensities[i] = src[i] / 255.0;
        }
        clip.frames.push_back(std::move(f));
    }
    return clip;
}

RawClip read_clip(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) {
        throw IoError("clip not found: " + path.string());
    }
    try {
        return decode_clip(read_file_bytes(path));
    } catch (const FormatError& e) {
        throw FormatError(e.kind(), path.string() + ": " + e.what(), e.offset());
    }
}

TensorProvider::TensorProvider(FlowOptions options, std::optional<std::filesystem::path> cache_dir, bool memoize)
    : options_(options), cache_dir_(std::move(cache_dir)), memoize_(memoize) {
    if (cache_dir_) {
        std::error_code ec;
        std::filesystem::create_directories(*cache_dir_, ec);
        if (ec) {
            throw IoError("cannot create tensor cache " + cache_dir_->string() + ": " + ec.message());
        }
    }
}

std::string TensorProvider::cache_key(const ClipRecord& clip) const {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%016llx_a%.6g_i%d_e%d_n%d_s%.6g", static_cast<unsigned long long>(clip.spec_hash),
                  options_.alpha, options_.iterations, options_.extent, static_cast<int>(options_.normalization),
                  options_.scale);
    return buf;
}

std::shared_ptr<const FlowClipTensor> TensorProvider::get(const CorpusManifest& manifest, const ClipRecord& clip) {
    const std::string key = cache_key(clip);
    if (memoize_) {
        std::lock_guard lock(mutex_);
        if (auto it = memo_.find(key); it != memo_.end()) return it->second;
    }

    std::shared_ptr<const FlowClipTensor> tensor;
    const auto disk = cache_dir_ ? std::optional(*cache_dir_ / (key + ".trnk")) : std::nullopt;
    if (disk && std::filesystem::exists(*disk)) {
        const Checkpoint ck = load_checkpoint(*disk);
        const auto& t = ck.at("flow");
        if (t.dims.size() != 4 || t.dims[0] != 2 || static_cast<int>(t.dims[1]) != options_.extent) {
            throw FormatError(FormatError::Kind::malformed, "cached tensor " + disk->string() + " has wrong shape");
        }
        FlowClipTensor ft(options_.extent);
        ft.values = t.data;
        tensor = std::make_shared<const FlowClipTensor>(std::move(ft));
    } else {
        const RawClip raw = read_clip(manifest.clip_path(clip));
        tensor = std::make_shared<const FlowClipTensor>(clip_to_tensor(raw.frames, options_));
        if (disk) {
            Checkpoint ck;
            ck.metadata["kind"] = "flow_tensor";
            ck.metadata["clip"] = clip.path;
            const auto e = static_cast<std::uint32_t>(options_.extent);
            ck.tensors.push_back({"flow", {2, e, e, e}, tensor->values});
            save_checkpoint(ck, *disk);
        }
    }
    if (memoize_) {
        std::lock_guard lock(mutex_);
        memo_.emplace(key, tensor);
    }
    return tensor;
}

BatchStream::BatchStream(const CorpusManifest& manifest, std::size_t batch_size, std::uint64_t seed,
                         RankScale scale, std::shared_ptr<TensorProvider> provider)
    : manifest_(manifest), batch_size_(batch_size), seed_(seed), scale_(scale), provider_(std::move(provider)) {
    if (batch_size_ < 1) {
        throw DomainError("batches: batch size must be >= 1");
    }
    for (const auto& c : manifest_.clips) {
        if (!scale_.contains(c.rank)) {
            throw DomainError("manifest clip " + c.path + " has rank " + std::to_string(c.rank) + " outside 0.." +
                              std::to_string(scale_.levels - 1));
        }
    }
}

std::size_t BatchStream::batches_per_epoch() const noexcept {
    return (manifest_.clips.size() + batch_size_ - 1) / batch_size_;
}

std::vector<std::size_t> BatchStream::epoch_order(int epoch) const {
    std::vector<std::size_t> order(manifest_.clips.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                      static_cast<std::uint32_t>(epoch)};
    std::mt19937_64 rng(seq);
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

Batch BatchStream::make_batch(const std::vector<std::size_t>& indices) const {
    Batch b;
    b.tensors.resize(indices.size());
    parallel_for(indices.size(), [&](std::size_t i) {
        b.tensors[i] = provider_->get(manifest_, manifest_.clips[indices[i]]);
    });
    for (const auto idx : indices) {
        const auto& c = manifest_.clips[idx];
        b.labels.push_back(encode_label(c.rank, scale_));
        b.clip_ids.push_back(c.path);
        b.subjects.push_back(c.subject_id);
    }
    return b;
}

std::vector<Batch> BatchStream::epoch(int epoch) const {
    const auto order = epoch_order(epoch);
    std::vector<Batch> out;
    out.reserve(batches_per_epoch());
    for (std::size_t start = 0; start < order.size(); start += batch_size_) {
        const std::size_t end = std::min(order.size(), start + batch_size_);
        out.push_back(make_batch({order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(end)}));
    }
    return out;
}

}  // namespace tremorank

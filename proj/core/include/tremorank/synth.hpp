#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "tremorank/optical_flow.hpp"

namespace tremorank {

/// Everything needed to render one synthetic tremor clip: an anisotropic
/// Gaussian blob whose centre follows
///   base + drift * t + amplitude * sin(2 pi frequency t / fps) * (cos axis, sin axis)
/// plus clipped Gaussian pixel noise.
struct SyntheticClipSpec {
    int subject_id = 0;
    int rank = 0;
    double amplitude = 0.0;  ///< pixels on the render canvas
    double frequency = 6.0;  ///< Hz
    double fps = 30.0;
    double axis_angle = 0.0;  ///< radians
    double sigma_x = 12.0;
    double sigma_y = 12.0;
    double base_x = 64.0;
    double base_y = 64.0;
    double drift_x = 0.0;  ///< pixels per frame
    double drift_y = 0.0;
    double noise_sigma = 0.0;
    double background = 0.1;
    double peak = 0.8;
    int canvas = 128;
    std::uint64_t seed = 0;

    /// Throws DomainError when an invariant is violated (Nyquist, frequency band, ...).
    void validate() const;
    /// Stable textual form; the spec hash is computed over it.
    std::string canonical() const;
    std::uint64_t hash() const;
};

/// Rank to pixel amplitude on the render canvas.
struct AmplitudeMap {
    double pixels_per_rank = 1.5;
    double operator()(int rank) const { return pixels_per_rank * rank; }
};

inline constexpr double kMinTremorHz = 4.0;
inline constexpr double kMaxTremorHz = 12.0;

std::vector<FrameGray> render_clip(const SyntheticClipSpec& spec, int n_frames);

enum class HistogramProfile { uniform, imbalanced };

HistogramProfile parse_profile(const std::string& name);
std::string to_string(HistogramProfile profile);

/// Rank probabilities of a profile. The imbalanced profile is a triangular
/// bump centred between ranks 3 and 4 with a floor of 0.01.
std::vector<double> profile_probabilities(HistogramProfile profile, int levels);

struct CorpusOptions {
    int n_subjects = 36;
    int clips_per_subject = 8;
    HistogramProfile profile = HistogramProfile::imbalanced;
    std::uint64_t master_seed = 0;
    int levels = 9;
    int frames_per_clip = 96;
    double fps = 30.0;
    int canvas = 128;
    AmplitudeMap amplitude{};
    double noise_sigma = 0.01;
    /// Per-subject base drift is drawn uniformly in [-max_drift, max_drift].
    double max_drift = 0.0;
    double min_sigma = 10.0;
    double max_sigma = 14.0;
    /// Ranks are drawn from 1..levels-1 only, so every clip oscillates.
    bool exclude_rank_zero = false;
};

struct ClipRecord {
    std::string path;  ///< relative to the manifest directory
    int subject_id = 0;
    int rank = 0;
    std::uint64_t seed = 0;
    std::uint64_t spec_hash = 0;
    SyntheticClipSpec spec;
};

struct CorpusManifest {
    int generator_version = 1;
    std::uint64_t master_seed = 0;
    int levels = 9;
    int frames_per_clip = 96;
    std::filesystem::path root;  ///< directory that clip paths are relative to
    std::vector<ClipRecord> clips;

    std::vector<int> histogram() const;
    std::vector<int> subjects() const;
    std::filesystem::path clip_path(const ClipRecord& r) const { return root / r.path; }
};

/// Specs for a corpus; style (blob shape, axis, frequency, base position) is
/// drawn once per subject, ranks per clip. Pure function of the options.
std::vector<SyntheticClipSpec> draw_corpus_specs(const CorpusOptions& options);

/// Renders every clip into `out_dir` and writes `out_dir/manifest.jsonl`.
CorpusManifest generate_corpus(const CorpusOptions& options, const std::filesystem::path& out_dir);

void write_manifest(const CorpusManifest& manifest, const std::filesystem::path& path);
CorpusManifest read_manifest(const std::filesystem::path& path);

/// FNV-1a over the manifest file bytes.
std::uint64_t file_hash(const std::filesystem::path& path);
std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed = 14695981039346656037ull);

/// Checks every clip exists, validates its container and matches the
/// recorded spec hash; with `rerender` the pixels are compared against a
/// fresh rendering. Returns a list of problems (empty when consistent).
std::vector<std::string> verify_manifest(const CorpusManifest& manifest, bool rerender = false);

/// Subject-disjoint split; round(n_subjects * train_fraction) subjects go to
/// training, clamped so both sides are non-empty.
std::pair<CorpusManifest, CorpusManifest> split_by_subject(const CorpusManifest& manifest,
                                                           double train_fraction, std::uint64_t seed);

/// Throws ProtocolError naming the shared subjects if the splits overlap.
void require_disjoint(const CorpusManifest& train, const CorpusManifest& test);
std::vector<int> shared_subjects(const CorpusManifest& a, const CorpusManifest& b);

/// Equal-width frequency bin over [kMinTremorHz, kMaxTremorHz].
int frequency_bin(double frequency, int bins);

}  // namespace tremorank

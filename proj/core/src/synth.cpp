#include "tremorank/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "tremorank/dataset.hpp"
#include "tremorank/error.hpp"
#include "tremorank/parallel.hpp"

namespace tremorank {

using nlohmann::json;

void SyntheticClipSpec::validate() const {
    auto fail = [](const std::string& what) { throw DomainError("SyntheticClipSpec: " + what); };
    if (rank < 0) fail("negative rank");
    if (!(amplitude >= 0.0)) fail("amplitude must be non-negative");
    if (!(frequency >= kMinTremorHz && frequency <= kMaxTremorHz)) {
        fail("frequency " + std::to_string(frequency) + " Hz outside [4, 12]");
    }
    if (!(fps > 2.0 * frequency)) {
        fail("fps " + std::to_string(fps) + " violates Nyquist for " + std::to_string(frequency) + " Hz");
    }
    if (!(sigma_x > 0.0 && sigma_y > 0.0)) fail("blob sigmas must be positive");
    if (!(noise_sigma >= 0.0)) fail("noise sigma must be non-negative");
    if (canvas < 2) fail("canvas must be at least 2 pixels");
}

std::string SyntheticClipSpec::canonical() const {
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "subject=%d;rank=%d;amplitude=%.17g;frequency=%.17g;fps=%.17g;axis=%.17g;sigma=%.17g,%.17g;"
                  "base=%.17g,%.17g;drift=%.17g,%.17g;noise=%.17g;levels=%.17g,%.17g;canvas=%d;seed=%llu",
                  subject_id, rank, amplitude, frequency, fps, axis_angle, sigma_x, sigma_y, base_x, base_y,
                  drift_x, drift_y, noise_sigma, background, peak, canvas,
                  static_cast<unsigned long long>(seed));
    return buf;
}

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

std::uint64_t SyntheticClipSpec::hash() const {
    const std::string s = canonical();
    return fnv1a(s.data(), s.size());
}

std::vector<FrameGray> render_clip(const SyntheticClipSpec& spec, int n_frames) {
    spec.validate();
    if (n_frames < 1) {
        throw DomainError("render_clip: n_frames must be positive");
    }
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> noise(0.0, spec.noise_sigma > 0.0 ? spec.noise_sigma : 1.0);
    const double c = std::cos(spec.axis_angle);
    const double s = std::sin(spec.axis_angle);
    const double ix = 1.0 / spec.sigma_x;
    const double iy = 1.0 / spec.sigma_y;

    std::vector<FrameGray> frames;
    frames.reserve(static_cast<std::size_t>(n_frames));
    std::vector<double> gx(static_cast<std::size_t>(spec.canvas));
    for (int t = 0; t < n_frames; ++t) {
        const double swing = spec.amplitude * std::sin(2.0 * std::numbers::pi * spec.frequency * t / spec.fps);
        const double cx = spec.base_x + spec.drift_x * t + swing * c;
        const double cy = spec.base_y + spec.drift_y * t + swing * s;
        FrameGray f(spec.canvas, spec.canvas);
        for (int x = 0; x < spec.canvas; ++x) {
            const double dx = (x - cx) * ix;
            gx[static_cast<std::size_t>(x)] = dx * dx;
        }
        for (int y = 0; y < spec.canvas; ++y) {
            const double dy = (y - cy) * iy;
            const double dy2 = dy * dy;
            for (int x = 0; x < spec.canvas; ++x) {
                double value = spec.background + spec.peak * std::exp(-0.5 * (gx[static_cast<std::size_t>(x)] + dy2));
                if (spec.noise_sigma > 0.0) {
                    value += noise(rng);
                }
                f.at(x, y) = std::clamp(value, 0.0, 1.0);
            }
        }
        frames.push_back(std::move(f));
    }
    return frames;
}

HistogramProfile parse_profile(const std::string& name) {
    if (name == "uniform") return HistogramProfile::uniform;
    if (name == "imbalanced") return HistogramProfile::imbalanced;
    throw DomainError("unknown histogram profile '" + name + "' (expected uniform or imbalanced)");
}

std::string to_string(HistogramProfile profile) {
    return profile == HistogramProfile::uniform ? "uniform" : "imbalanced";
}

std::vector<double> profile_probabilities(HistogramProfile profile, int levels) {
    std::vector<double> p(static_cast<std::size_t>(levels), 1.0);
    if (profile == HistogramProfile::imbalanced) {
        // Peak at 3.5 for 9 levels; scales with the number of levels.
        const double centre = 3.5 * (levels - 1) / 8.0;
        const double half_width = 4.5 * (levels - 1) / 8.0;
        for (int r = 0; r < levels; ++r) {
            p[static_cast<std::size_t>(r)] = std::max(0.01, 1.0 - std::abs(r - centre) / half_width);
        }
    }
    double total = 0.0;
    for (const double x : p) total += x;
    for (auto& x : p) x /= total;
    return p;
}

std::vector<SyntheticClipSpec> draw_corpus_specs(const CorpusOptions& o) {
    if (o.n_subjects <= 0 || o.clips_per_subject <= 0) {
        throw DomainError("generate_corpus: subject and clip counts must be positive");
    }
    if (o.levels < 2) {
        throw DomainError("generate_corpus: need at least 2 levels");
    }
    std::mt19937_64 rng(o.master_seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

    auto probs = profile_probabilities(o.profile, o.levels);
    if (o.exclude_rank_zero) {
        probs[0] = 0.0;
    }
    std::discrete_distribution<int> rank_dist(probs.begin(), probs.end());

    const double centre = 0.5 * o.canvas;
    const double jitter = o.canvas / 16.0;
    std::vector<SyntheticClipSpec> specs;
    specs.reserve(static_cast<std::size_t>(o.n_subjects) * o.clips_per_subject);
    for (int subject = 0; subject < o.n_subjects; ++subject) {
        SyntheticClipSpec style;
        style.subject_id = subject;
        style.fps = o.fps;
        style.canvas = o.canvas;
        style.noise_sigma = o.noise_sigma;
        style.frequency = uniform(kMinTremorHz, kMaxTremorHz);
        style.axis_angle = uniform(-std::numbers::pi, std::numbers::pi);
        style.sigma_x = uniform(o.min_sigma, o.max_sigma);
        style.sigma_y = uniform(o.min_sigma, o.max_sigma);
        style.base_x = centre + uniform(-jitter, jitter);
        style.base_y = centre + uniform(-jitter, jitter);
        style.drift_x = uniform(-o.max_drift, o.max_drift);
        style.drift_y = uniform(-o.max_drift, o.max_drift);
        for (int clip = 0; clip < o.clips_per_subject; ++clip) {
            SyntheticClipSpec spec = style;
            spec.rank = rank_dist(rng);
            spec.amplitude = o.amplitude(spec.rank);
            spec.seed = rng();
            spec.validate();
            specs.push_back(spec);
        }
    }
    return specs;
}

std::vector<int> CorpusManifest::histogram() const {
    std::vector<int> h(static_cast<std::size_t>(levels), 0);
    for (const auto& c : clips) {
        if (c.rank < 0 || c.rank >= levels) {
            throw DomainError("manifest: rank " + std::to_string(c.rank) + " outside 0.." +
                              std::to_string(levels - 1) + " for " + c.path);
        }
        ++h[static_cast<std::size_t>(c.rank)];
    }
    return h;
}

std::vector<int> CorpusManifest::subjects() const {
    std::set<int> s;
    for (const auto& c : clips) s.insert(c.subject_id);
    return {s.begin(), s.end()};
}

CorpusManifest generate_corpus(const CorpusOptions& options, const std::filesystem::path& out_dir) {
    const auto specs = draw_corpus_specs(options);
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "clips", ec);
    if (ec) {
        throw IoError("cannot create " + (out_dir / "clips").string() + ": " + ec.message());
    }

    CorpusManifest manifest;
    manifest.master_seed = options.master_seed;
    manifest.levels = options.levels;
    manifest.frames_per_clip = options.frames_per_clip;
    manifest.root = out_dir;
    manifest.clips.resize(specs.size());
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const auto& spec = specs[i];
        char name[64];
        std::snprintf(name, sizeof name, "clips/s%03d_c%02d.trcl", spec.subject_id,
                      static_cast<int>(i % static_cast<std::size_t>(options.clips_per_subject)));
        manifest.clips[i] = ClipRecord{name, spec.subject_id, spec.rank, spec.seed, spec.hash(), spec};
    }
    parallel_for(specs.size(), [&](std::size_t i) {
        write_clip(manifest.clip_path(manifest.clips[i]), render_clip(specs[i], options.frames_per_clip),
                   specs[i].fps);
    });
    write_manifest(manifest, out_dir / "manifest.jsonl");
    return manifest;
}

namespace {

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::uint64_t parse_hex64(const std::string& s) {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used, 16);
    if (used != s.size()) {
        throw DomainError("bad hex value '" + s + "'");
    }
    return v;
}

json spec_to_json(const SyntheticClipSpec& s) {
    return json{{"amplitude", s.amplitude},   {"frequency", s.frequency}, {"fps", s.fps},
                {"axis_angle", s.axis_angle}, {"sigma_x", s.sigma_x},     {"sigma_y", s.sigma_y},
                {"base_x", s.base_x},         {"base_y", s.base_y},       {"drift_x", s.drift_x},
                {"drift_y", s.drift_y},       {"noise_sigma", s.noise_sigma}, {"background", s.background},
                {"peak", s.peak},             {"canvas", s.canvas}};
}

SyntheticClipSpec spec_from_json(const json& j, int subject, int rank, std::uint64_t seed) {
    SyntheticClipSpec s;
    s.subject_id = subject;
    s.rank = rank;
    s.seed = seed;
    s.amplitude = j.at("amplitude").get<double>();
    s.frequency = j.at("frequency").get<double>();
    s.fps = j.at("fps").get<double>();
    s.axis_angle = j.at("axis_angle").get<double>();
    s.sigma_x = j.at("sigma_x").get<double>();
    s.sigma_y = j.at("sigma_y").get<double>();
    s.base_x = j.at("base_x").get<double>();
    s.base_y = j.at("base_y").get<double>();
    s.drift_x = j.at("drift_x").get<double>();
    s.drift_y = j.at("drift_y").get<double>();
    s.noise_sigma = j.at("noise_sigma").get<double>();
    s.background = j.at("background").get<double>();
    s.peak = j.at("peak").get<double>();
    s.canvas = j.at("canvas").get<int>();
    return s;
}

}  // namespace

void write_manifest(const CorpusManifest& manifest, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    json header{{"type", "header"},
                {"generator_version", manifest.generator_version},
                {"master_seed", manifest.master_seed},
                {"levels", manifest.levels},
                {"frames_per_clip", manifest.frames_per_clip},
                {"n_clips", manifest.clips.size()},
                {"n_subjects", manifest.subjects().size()},
                {"histogram", manifest.histogram()}};
    out << header.dump() << '\n';
    for (const auto& c : manifest.clips) {
        json rec{{"type", "clip"},
                 {"path", c.path},
                 {"subject", c.subject_id},
                 {"rank", c.rank},
                 {"seed", c.seed},
                 {"spec_hash", hex64(c.spec_hash)},
                 {"spec", spec_to_json(c.spec)}};
        out << rec.dump() << '\n';
    }
    if (!out) {
        throw IoError("failed writing " + path.string());
    }
}

CorpusManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open manifest " + path.string());
    }
    CorpusManifest m;
    m.root = path.parent_path();
    std::string line;
    int line_no = 0;
    bool have_header = false;
    std::vector<int> recorded_histogram;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw IoError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
        try {
            const auto type = j.at("type").get<std::string>();
            if (type == "header") {
                m.generator_version = j.at("generator_version").get<int>();
                m.master_seed = j.at("master_seed").get<std::uint64_t>();
                m.levels = j.at("levels").get<int>();
                m.frames_per_clip = j.at("frames_per_clip").get<int>();
                recorded_histogram = j.at("histogram").get<std::vector<int>>();
                have_header = true;
            } else if (type == "clip") {
                ClipRecord r;
                r.path = j.at("path").get<std::string>();
                r.subject_id = j.at("subject").get<int>();
                r.rank = j.at("rank").get<int>();
                r.seed = j.at("seed").get<std::uint64_t>();
                r.spec_hash = parse_hex64(j.at("spec_hash").get<std::string>());
                r.spec = spec_from_json(j.at("spec"), r.subject_id, r.rank, r.seed);
                m.clips.push_back(std::move(r));
            } else {
                throw IoError("unknown record type '" + type + "'");
            }
        } catch (const json::exception& e) {
            throw IoError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (!have_header) {
        throw IoError("manifest " + path.string() + " has no header record");
    }
    if (recorded_histogram != m.histogram()) {
        throw DomainError("manifest " + path.string() + ": header histogram does not match clip records");
    }
    return m;
}

std::uint64_t file_hash(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return fnv1a(bytes.data(), bytes.size());
}

std::vector<std::string> verify_manifest(const CorpusManifest& manifest, bool rerender) {
    std::vector<std::string> problems;
    for (const auto& c : manifest.clips) {
        const auto path = manifest.clip_path(c);
        if (c.spec.hash() != c.spec_hash) {
            problems.push_back(c.path + ": spec hash mismatch");
        }
        if (!std::filesystem::exists(path)) {
            problems.push_back(c.path + ": missing");
            continue;
        }
        try {
            const RawClip clip = read_clip(path);
            if (static_cast<int>(clip.frames.size()) != manifest.frames_per_clip) {
                problems.push_back(c.path + ": frame count " + std::to_string(clip.frames.size()));
            }
            if (rerender) {
                const auto expected = encode_clip(render_clip(c.spec, manifest.frames_per_clip), c.spec.fps);
                const auto actual = encode_clip(clip.frames, clip.fps);
                if (expected != actual) {
                    problems.push_back(c.path + ": pixels differ from spec rendering");
                }
            }
        } catch (const Error& e) {
            problems.push_back(c.path + ": " + e.what());
        }
    }
    return problems;
}

std::pair<CorpusManifest, CorpusManifest> split_by_subject(const CorpusManifest& manifest,
                                                           double train_fraction, std::uint64_t seed) {
    auto subjects = manifest.subjects();
    if (subjects.size() < 2) {
        throw DomainError("split_by_subject: need at least 2 subjects, got " + std::to_string(subjects.size()));
    }
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
        throw DomainError("split_by_subject: train fraction must lie in (0, 1)");
    }
    std::mt19937_64 rng(seed);
    std::shuffle(subjects.begin(), subjects.end(), rng);
    const auto n = static_cast<long>(subjects.size());
    const long n_train = std::clamp(std::lround(static_cast<double>(n) * train_fraction), 1L, n - 1);
    const std::set<int> train_subjects(subjects.begin(), subjects.begin() + n_train);

    CorpusManifest train = manifest;
    CorpusManifest test = manifest;
    train.clips.clear();
    test.clips.clear();
    for (const auto& c : manifest.clips) {
        (train_subjects.count(c.subject_id) ? train : test).clips.push_back(c);
    }
    return {std::move(train), std::move(test)};
}

std::vector<int> shared_subjects(const CorpusManifest& a, const CorpusManifest& b) {
    const auto sa = a.subjects();
    const auto sb = b.subjects();
    std::vector<int> both;
    std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(both));
    return both;
}

void require_disjoint(const CorpusManifest& train, const CorpusManifest& test) {
    const auto both = shared_subjects(train, test);
    if (!both.empty()) {
        std::ostringstream msg;
        msg << "subjects present in both splits:";
        for (const int s : both) msg << ' ' << s;
        throw ProtocolError(msg.str());
    }
}

int frequency_bin(double frequency, int bins) {
    if (bins < 1) {
        throw DomainError("frequency_bin: bins must be positive");
    }
    const double width = (kMaxTremorHz - kMinTremorHz) / bins;
    const int b = static_cast<int>(std::floor((frequency - kMinTremorHz) / width));
    return std::clamp(b, 0, bins - 1);
}

}  // namespace tremorank

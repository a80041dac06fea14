#include "tremorank/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "tremorank/dataset.hpp"
#include "tremorank/error.hpp"

namespace tremorank {

static_assert(std::endian::native == std::endian::little, "containers are written in native little-endian order");

std::size_t NamedTensor::element_count() const {
    std::size_t n = 1;
    for (const auto d : dims) n *= d;
    return n;
}

const NamedTensor* Checkpoint::find(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return &t;
    }
    return nullptr;
}

const NamedTensor& Checkpoint::at(const std::string& name) const {
    if (const auto* t = find(name)) return *t;
    throw FormatError(FormatError::Kind::malformed, "checkpoint has no tensor '" + name + "'");
}

std::vector<std::string> Checkpoint::names() const {
    std::vector<std::string> out;
    out.reserve(tensors.size());
    for (const auto& t : tensors) out.push_back(t.name);
    return out;
}

bool Checkpoint::bit_equal(const Checkpoint& other) const {
    return encode_checkpoint(*this) == encode_checkpoint(other);
}

namespace {

class Writer {
public:
    void u32(std::uint32_t v) { raw(&v, sizeof v); }
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        bytes.insert(bytes.end(), b, b + n);
    }
    std::vector<std::uint8_t> bytes;
};

class Reader {
public:
    Reader(const std::vector<std::uint8_t>& b, std::size_t end) : bytes_(b), end_(end) {}

    void raw(void* p, std::size_t n) {
        if (n > end_ - pos_) {
            throw FormatError(FormatError::Kind::truncated, "checkpoint truncated at byte " + std::to_string(pos_),
                              pos_);
        }
        std::memcpy(p, bytes_.data() + pos_, n);
        pos_ += n;
    }
    std::uint32_t u32() {
        std::uint32_t v;
        raw(&v, sizeof v);
        return v;
    }
    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return end_ - pos_; }

private:
    const std::vector<std::uint8_t>& bytes_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

std::uint32_t checked_u32(std::size_t n, const char* what) {
    if (n > 0xffffffffu) {
        throw ShapeError(std::string("checkpoint: ") + what + " too large");
    }
    return static_cast<std::uint32_t>(n);
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
    Writer w;
    w.raw("TRNK", 4);
    w.u32(ck.version);
    std::string meta;
    for (const auto& [k, v] : ck.metadata) {
        if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
            throw DomainError("checkpoint metadata key/value '" + k + "' contains a separator");
        }
        meta += k + "=" + v + "\n";
    }
    w.u32(checked_u32(meta.size(), "metadata"));
    w.raw(meta.data(), meta.size());
    w.u32(checked_u32(ck.tensors.size(), "tensor count"));
    for (const auto& t : ck.tensors) {
        if (t.element_count() != t.data.size()) {
            throw ShapeError("checkpoint tensor '" + t.name + "': dims imply " + std::to_string(t.element_count()) +
                             " values, have " + std::to_string(t.data.size()));
        }
        w.u32(checked_u32(t.name.size(), "tensor name"));
        w.raw(t.name.data(), t.name.size());
        w.u32(checked_u32(t.dims.size(), "tensor rank"));
        for (const auto d : t.dims) w.u32(d);
        w.raw(t.data.data(), t.data.size() * sizeof(float));
    }
    const std::uint32_t crc = crc32_of(w.bytes.data(), w.bytes.size());
    w.u32(crc);
    return std::move(w.bytes);
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), "TRNK", 4) != 0) {
        throw FormatError(FormatError::Kind::bad_magic, "not a TRNK checkpoint (bad magic)", 0);
    }
    if (bytes.size() < 12) {
        throw FormatError(FormatError::Kind::truncated, "checkpoint truncated in header", bytes.size());
    }
    // The checksum guards everything, so verify it before trusting any length.
    const std::size_t body = bytes.size() - 4;
    std::uint32_t stored;
    std::memcpy(&stored, bytes.data() + body, 4);
    std::uint32_t version;
    std::memcpy(&version, bytes.data() + 4, 4);
    if (crc32_of(bytes.data(), body) != stored) {
        throw FormatError(FormatError::Kind::checksum, "checkpoint checksum mismatch (corrupt or truncated file)",
                          body);
    }
    if (version != kCheckpointVersion) {
        throw FormatError(FormatError::Kind::version,
                          "checkpoint version " + std::to_string(version) + " unsupported (expected " +
                              std::to_string(kCheckpointVersion) + ")",
                          4);
    }

    Reader r(bytes, body);
    char magic[4];
    r.raw(magic, 4);
    Checkpoint ck;
    ck.version = r.u32();
    const std::uint32_t meta_len = r.u32();
    std::string meta(meta_len, '\0');
    r.raw(meta.data(), meta_len);
    std::istringstream lines(meta);
    std::string line;
    while (std::getline(lines, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw FormatError(FormatError::Kind::malformed, "checkpoint metadata line without '='", r.pos());
        }
        ck.metadata[line.substr(0, eq)] = line.substr(eq + 1);
    }
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        const std::uint32_t name_len = r.u32();
        t.name.resize(name_len);
        r.raw(t.name.data(), name_len);
        const std::uint32_t rank = r.u32();
        if (rank > 16) {
            throw FormatError(FormatError::Kind::malformed, "tensor '" + t.name + "' has rank " + std::to_string(rank),
                              r.pos());
        }
        t.dims.resize(rank);
        for (auto& d : t.dims) d = r.u32();
        const std::size_t n = t.element_count();
        if (n > r.remaining() / sizeof(float)) {
            throw FormatError(FormatError::Kind::truncated, "tensor '" + t.name + "' extends past end of file",
                              r.pos());
        }
        t.data.resize(n);
        r.raw(t.data.data(), n * sizeof(float));
        ck.tensors.push_back(std::move(t));
    }
    if (r.remaining() != 0) {
        throw FormatError(FormatError::Kind::malformed, "trailing bytes after last tensor", r.pos());
    }
    return ck;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw IoError("failed writing " + path.string());
    }
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
    write_file_bytes(path, encode_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(read_file_bytes(path));
}

}  // namespace tremorank

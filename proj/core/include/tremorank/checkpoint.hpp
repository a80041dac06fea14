#pragma once

// TRNK checkpoint container (little-endian):
//   magic "TRNK" | u32 version
//   | u32 metadata byte count | metadata, UTF-8 "key=value\n" lines
//   | u32 tensor count
//   | per tensor: u32 name length | name | u32 rank | u32 dims[rank] | f32 data
//   | u32 CRC32 of everything before it

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace tremorank {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> data;

    std::size_t element_count() const;
    bool operator==(const NamedTensor&) const = default;
};

struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    std::map<std::string, std::string> metadata;
    std::vector<NamedTensor> tensors;

    const NamedTensor* find(const std::string& name) const;
    const NamedTensor& at(const std::string& name) const;
    std::vector<std::string> names() const;

    /// Compares float payloads bitwise, so NaN patterns and signed zeros count.
    bool bit_equal(const Checkpoint& other) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
/// Throws FormatError: bad_magic, version, truncated, checksum or malformed.
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace tremorank

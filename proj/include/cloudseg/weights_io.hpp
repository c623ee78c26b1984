#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace cloudseg {

struct NamedArray {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> data;

    bool operator==(const NamedArray&) const = default;
};

/// CPW1: "CPW1", u32 count, then per tensor u16 name length, name bytes,
/// u8 ndim, ndim x u32 dims, f32 data. Little-endian.
std::vector<std::uint8_t> encode_cpw(const std::vector<NamedArray>& arrays);
std::vector<NamedArray> decode_cpw(std::span<const std::uint8_t> bytes);

void write_cpw(const std::vector<NamedArray>& arrays, const std::filesystem::path& path);
std::vector<NamedArray> read_cpw(const std::filesystem::path& path);

} // namespace cloudseg

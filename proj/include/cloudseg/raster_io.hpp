#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "cloudseg/tensor.hpp"

namespace cloudseg {

enum class DType : std::uint16_t { U8 = 0, U16 = 1, F32 = 2 };

std::string to_string(DType dtype);

/// Multiband raster, band-sequential and row-major within each band. Band
/// order for scenes is R, G, B, NIR; masks are single-band u8 with 255 = cloud.
struct RasterScene {
    using Samples = std::variant<std::vector<std::uint8_t>, std::vector<std::uint16_t>, std::vector<float>>;

    std::uint32_t width = 0;
    std::uint32_t height = 0;
    std::uint16_t bands = 0;
    std::string tag;
    Samples samples;

    static constexpr std::uint16_t max_bands = 16;
    static constexpr std::size_t max_tag_bytes = 255;

    static RasterScene zeros(std::uint32_t width, std::uint32_t height, std::uint16_t bands, DType dtype,
                             std::string tag = {});

    DType dtype() const { return static_cast<DType>(samples.index()); }
    std::size_t expected_samples() const
    {
        return static_cast<std::size_t>(width) * height * bands;
    }
    std::size_t sample_count() const;

    template <typename S>
    std::span<const S> as() const
    {
        return std::get<std::vector<S>>(samples);
    }
    template <typename S>
    std::span<S> as()
    {
        return std::get<std::vector<S>>(samples);
    }

    /// Throws ValidationError describing the first violated invariant.
    void validate() const;

    /// validate() plus the mask rules: one u8 band holding only 0 and 255.
    void validate_mask() const;

    /// Sample equality on raw bytes (NaN payloads compare equal to themselves).
    bool operator==(const RasterScene& other) const;
};

/// Square window of a scene, normalized to reflectance in [0,1]. `pixels` has
/// shape (1, bands, size, size) so it can be batched directly.
struct Patch {
    std::uint32_t origin_x = 0;
    std::uint32_t origin_y = 0;
    std::uint32_t size = 0;
    Tensor pixels;
};

/// MSR1: "MSR1", u32 width, u32 height, u16 bands, u16 dtype, u8 tag length,
/// tag bytes, samples. Little-endian, no padding.
std::vector<std::uint8_t> encode_msr(const RasterScene& scene);
RasterScene decode_msr(std::span<const std::uint8_t> bytes);

void write_msr(const RasterScene& scene, const std::filesystem::path& path);
RasterScene read_msr(const std::filesystem::path& path);

/// u8 / 255; u16 / 10000 clamped to [0,1]; f32 clamped to [0,1].
float normalize_sample(std::uint8_t v);
float normalize_sample(std::uint16_t v);
float normalize_sample(float v);
std::vector<float> normalize_reflectance(const RasterScene::Samples& samples);

Patch extract_patch(const RasterScene& scene, std::uint32_t x, std::uint32_t y, std::uint32_t size);

/// Raw (unnormalized) rectangular copy with the same dtype and tag.
RasterScene crop_scene(const RasterScene& scene, std::uint32_t x, std::uint32_t y, std::uint32_t w,
                       std::uint32_t h);

/// (1,1,h,w) tensor of 0/1 labels from a validated mask.
Tensor mask_to_tensor(const RasterScene& mask);

/// Fraction of mask pixels equal to 255.
double cloud_fraction(const RasterScene& mask);

} // namespace cloudseg

#include "cloudseg/raster_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace cloudseg {

namespace {

constexpr char kMagic[4] = {'M', 'S', 'R', '1'};
constexpr std::size_t kFixedHeader = 17;

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U value)
{
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
    }
}

template <typename U>
U get_le(const std::uint8_t* p)
{
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        value |= static_cast<U>(static_cast<U>(p[i]) << (8 * i));
    }
    return value;
}

std::size_t sample_bytes(DType dtype)
{
    switch (dtype) {
    case DType::U8:
        return 1;
    case DType::U16:
        return 2;
    case DType::F32:
        return 4;
    }
    return 0;
}

template <typename S>
void append_samples(std::vector<std::uint8_t>& out, const std::vector<S>& samples)
{
    if constexpr (sizeof(S) == 1) {
        out.insert(out.end(), samples.begin(), samples.end());
    } else {
        using Bits = std::conditional_t<sizeof(S) == 2, std::uint16_t, std::uint32_t>;
        out.reserve(out.size() + samples.size() * sizeof(S));
        for (const S& s : samples) {
            put_le(out, std::bit_cast<Bits>(s));
        }
    }
}

template <typename S>
std::vector<S> read_samples(const std::uint8_t* p, std::size_t count)
{
    std::vector<S> out(count);
    if constexpr (sizeof(S) == 1) {
        std::memcpy(out.data(), p, count);
    } else {
        using Bits = std::conditional_t<sizeof(S) == 2, std::uint16_t, std::uint32_t>;
        for (std::size_t i = 0; i < count; ++i) {
            out[i] = std::bit_cast<S>(get_le<Bits>(p + i * sizeof(S)));
        }
    }
    return out;
}

} // namespace

std::string to_string(DType dtype)
{
    switch (dtype) {
    case DType::U8:
        return "u8";
    case DType::U16:
        return "u16";
    case DType::F32:
        return "f32";
    }
    return "unknown";
}

RasterScene RasterScene::zeros(std::uint32_t width, std::uint32_t height, std::uint16_t bands, DType dtype,
                               std::string tag)
{
    RasterScene s;
    s.width = width;
    s.height = height;
    s.bands = bands;
    s.tag = std::move(tag);
    const std::size_t n = s.expected_samples();
    switch (dtype) {
    case DType::U8:
        s.samples = std::vector<std::uint8_t>(n, 0);
        break;
    case DType::U16:
        s.samples = std::vector<std::uint16_t>(n, 0);
        break;
    case DType::F32:
        s.samples = std::vector<float>(n, 0.0f);
        break;
    }
    return s;
}

std::size_t RasterScene::sample_count() const
{
    return std::visit([](const auto& v) { return v.size(); }, samples);
}

void RasterScene::validate() const
{
    if (width < 1 || height < 1) {
        throw ValidationError("scene dims must be >= 1, got " + std::to_string(width) + "x" + std::to_string(height));
    }
    if (bands < 1 || bands > max_bands) {
        throw ValidationError("band count must be in [1, 16], got " + std::to_string(bands));
    }
    if (tag.size() > max_tag_bytes) {
        throw ValidationError("tag is " + std::to_string(tag.size()) + " bytes, limit is 255");
    }
    if (sample_count() != expected_samples()) {
        throw ValidationError("data length " + std::to_string(sample_count()) + " != width x height x bands = "
                              + std::to_string(expected_samples()));
    }
}

void RasterScene::validate_mask() const
{
    validate();
    if (bands != 1 || dtype() != DType::U8) {
        throw ValidationError("mask must be a single u8 band, got " + std::to_string(bands) + " "
                              + to_string(dtype()) + " band(s)");
    }
    const auto data = as<std::uint8_t>();
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (data[i] != 0 && data[i] != 255) {
            throw ValidationError("mask sample " + std::to_string(data[i]) + " at (x=" + std::to_string(i % width)
                                  + ", y=" + std::to_string(i / width) + ") is not 0 or 255");
        }
    }
}

bool RasterScene::operator==(const RasterScene& other) const
{
    if (width != other.width || height != other.height || bands != other.bands || tag != other.tag
        || samples.index() != other.samples.index() || sample_count() != other.sample_count()) {
        return false;
    }
    return std::visit(
        [&](const auto& mine) {
            using V = std::decay_t<decltype(mine)>;
            const auto& theirs = std::get<V>(other.samples);
            return mine.empty() || std::memcmp(mine.data(), theirs.data(), mine.size() * sizeof(mine[0])) == 0;
        },
        samples);
}

std::vector<std::uint8_t> encode_msr(const RasterScene& scene)
{
    scene.validate();
    std::vector<std::uint8_t> out;
    out.reserve(kFixedHeader + scene.tag.size() + scene.expected_samples() * sample_bytes(scene.dtype()));
    out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
    put_le(out, scene.width);
    put_le(out, scene.height);
    put_le(out, scene.bands);
    put_le(out, static_cast<std::uint16_t>(scene.dtype()));
    out.push_back(static_cast<std::uint8_t>(scene.tag.size()));
    out.insert(out.end(), scene.tag.begin(), scene.tag.end());
    std::visit([&](const auto& v) { append_samples(out, v); }, scene.samples);
    return out;
}

RasterScene decode_msr(std::span<const std::uint8_t> bytes)
{
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw FormatError("not an MSR file");
    }
    if (bytes.size() < kFixedHeader) {
        throw FormatError("payload length mismatch: truncated header");
    }
    const std::uint8_t* p = bytes.data();
    RasterScene s;
    s.width = get_le<std::uint32_t>(p + 4);
    s.height = get_le<std::uint32_t>(p + 8);
    s.bands = get_le<std::uint16_t>(p + 12);
    const auto code = get_le<std::uint16_t>(p + 14);
    if (code > 2) {
        throw FormatError("unsupported dtype code " + std::to_string(code));
    }
    const std::size_t tag_len = p[16];
    if (bytes.size() < kFixedHeader + tag_len) {
        throw FormatError("payload length mismatch: truncated tag");
    }
    s.tag.assign(reinterpret_cast<const char*>(p + kFixedHeader), tag_len);
    const auto dtype = static_cast<DType>(code);
    const std::size_t count = s.expected_samples();
    const std::size_t payload = bytes.size() - kFixedHeader - tag_len;
    if (payload != count * sample_bytes(dtype)) {
        throw FormatError("payload length mismatch: header declares " + std::to_string(s.width) + "x"
                          + std::to_string(s.height) + "x" + std::to_string(s.bands) + " " + to_string(dtype) + " ("
                          + std::to_string(count * sample_bytes(dtype)) + " bytes), file holds "
                          + std::to_string(payload));
    }
    const std::uint8_t* data = p + kFixedHeader + tag_len;
    switch (dtype) {
    case DType::U8:
        s.samples = read_samples<std::uint8_t>(data, count);
        break;
    case DType::U16:
        s.samples = read_samples<std::uint16_t>(data, count);
        break;
    case DType::F32:
        s.samples = read_samples<float>(data, count);
        break;
    }
    try {
        s.validate();
    } catch (const ValidationError& e) {
        throw FormatError(std::string("invalid MSR header: ") + e.what());
    }
    return s;
}

void write_msr(const RasterScene& scene, const std::filesystem::path& path)
{
    const auto bytes = encode_msr(scene);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw IoError("write failed: " + path.string());
    }
}

RasterScene read_msr(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_msr(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

float normalize_sample(std::uint8_t v) { return static_cast<float>(v) / 255.0f; }

float normalize_sample(std::uint16_t v) { return std::min(static_cast<float>(v) / 10000.0f, 1.0f); }

float normalize_sample(float v)
{
    // NaN maps to 0 so the result stays inside [0,1].
    if (!(v > 0.0f)) {
        return 0.0f;
    }
    return std::min(v, 1.0f);
}

std::vector<float> normalize_reflectance(const RasterScene::Samples& samples)
{
    return std::visit(
        [](const auto& v) {
            std::vector<float> out(v.size());
            std::transform(v.begin(), v.end(), out.begin(), [](auto s) { return normalize_sample(s); });
            return out;
        },
        samples);
}

namespace {

void check_window(const RasterScene& scene, std::uint32_t x, std::uint32_t y, std::uint32_t w, std::uint32_t h)
{
    if (w < 1 || h < 1) {
        throw RangeError("window size must be >= 1");
    }
    if (static_cast<std::uint64_t>(x) + w > scene.width) {
        throw RangeError("window x=" + std::to_string(x) + " with size " + std::to_string(w)
                         + " exceeds scene width " + std::to_string(scene.width));
    }
    if (static_cast<std::uint64_t>(y) + h > scene.height) {
        throw RangeError("window y=" + std::to_string(y) + " with size " + std::to_string(h)
                         + " exceeds scene height " + std::to_string(scene.height));
    }
}

} // namespace

Patch extract_patch(const RasterScene& scene, std::uint32_t x, std::uint32_t y, std::uint32_t size)
{
    check_window(scene, x, y, size, size);
    Patch patch{x, y, size, Tensor({1, scene.bands, size, size})};
    std::visit(
        [&](const auto& data) {
            const std::size_t plane = static_cast<std::size_t>(scene.width) * scene.height;
            for (std::uint16_t b = 0; b < scene.bands; ++b) {
                for (std::uint32_t i = 0; i < size; ++i) {
                    const std::size_t row = b * plane + static_cast<std::size_t>(y + i) * scene.width + x;
                    float* dst = &patch.pixels.at(0, b, i, 0);
                    for (std::uint32_t j = 0; j < size; ++j) {
                        dst[j] = normalize_sample(data[row + j]);
                    }
                }
            }
        },
        scene.samples);
    return patch;
}

RasterScene crop_scene(const RasterScene& scene, std::uint32_t x, std::uint32_t y, std::uint32_t w,
                       std::uint32_t h)
{
    check_window(scene, x, y, w, h);
    RasterScene out = RasterScene::zeros(w, h, scene.bands, scene.dtype(), scene.tag);
    std::visit(
        [&](const auto& src) {
            using V = std::decay_t<decltype(src)>;
            auto& dst = std::get<V>(out.samples);
            const std::size_t plane = static_cast<std::size_t>(scene.width) * scene.height;
            for (std::uint16_t b = 0; b < scene.bands; ++b) {
                for (std::uint32_t i = 0; i < h; ++i) {
                    const auto begin = src.begin()
                                       + static_cast<std::ptrdiff_t>(b * plane
                                                                     + static_cast<std::size_t>(y + i) * scene.width + x);
                    std::copy(begin, begin + w,
                              dst.begin() + static_cast<std::ptrdiff_t>((static_cast<std::size_t>(b) * h + i) * w));
                }
            }
        },
        scene.samples);
    return out;
}

Tensor mask_to_tensor(const RasterScene& mask)
{
    mask.validate_mask();
    Tensor t({1, 1, mask.height, mask.width});
    const auto data = mask.as<std::uint8_t>();
    for (std::size_t i = 0; i < data.size(); ++i) {
        t[static_cast<std::int64_t>(i)] = data[i] == 255 ? 1.0f : 0.0f;
    }
    return t;
}

double cloud_fraction(const RasterScene& mask)
{
    mask.validate_mask();
    const auto data = mask.as<std::uint8_t>();
    const auto clouds = std::count(data.begin(), data.end(), std::uint8_t{255});
    return static_cast<double>(clouds) / static_cast<double>(data.size());
}

} // namespace cloudseg

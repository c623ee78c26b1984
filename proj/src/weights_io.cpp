#include "cloudseg/weights_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "cloudseg/errors.hpp"

namespace cloudseg {

namespace {

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U value)
{
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
    }
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    template <typename U>
    U get(const char* what)
    {
        need(sizeof(U), what);
        U value = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) {
            value |= static_cast<U>(static_cast<U>(bytes_[pos_ + i]) << (8 * i));
        }
        pos_ += sizeof(U);
        return value;
    }

    std::string text(std::size_t n)
    {
        need(n, "name");
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n, const char* what) const
    {
        if (bytes_.size() - pos_ < n) {
            throw FormatError(std::string("CPW1 truncated while reading ") + what);
        }
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

} // namespace

std::vector<std::uint8_t> encode_cpw(const std::vector<NamedArray>& arrays)
{
    std::vector<std::uint8_t> out{'C', 'P', 'W', '1'};
    put_le(out, static_cast<std::uint32_t>(arrays.size()));
    for (const auto& a : arrays) {
        if (a.name.size() > UINT16_MAX) {
            throw ValidationError("tensor name longer than 65535 bytes");
        }
        if (a.dims.size() > UINT8_MAX) {
            throw ValidationError("tensor " + a.name + " has too many dims");
        }
        std::uint64_t count = 1;
        for (auto d : a.dims) {
            count *= d;
        }
        if (count != a.data.size()) {
            throw ValidationError("tensor " + a.name + ": dims hold " + std::to_string(count) + " values, data has "
                                  + std::to_string(a.data.size()));
        }
        put_le(out, static_cast<std::uint16_t>(a.name.size()));
        out.insert(out.end(), a.name.begin(), a.name.end());
        out.push_back(static_cast<std::uint8_t>(a.dims.size()));
        for (auto d : a.dims) {
            put_le(out, d);
        }
        for (float v : a.data) {
            put_le(out, std::bit_cast<std::uint32_t>(v));
        }
    }
    return out;
}

std::vector<NamedArray> decode_cpw(std::span<const std::uint8_t> bytes)
{
    if (bytes.size() < 4 || std::memcmp(bytes.data(), "CPW1", 4) != 0) {
        throw FormatError("not a CPW1 file");
    }
    Reader r(bytes.subspan(4));
    const auto count = r.get<std::uint32_t>("tensor count");
    std::vector<NamedArray> arrays;
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedArray a;
        a.name = r.text(r.get<std::uint16_t>("name length"));
        const auto ndim = r.get<std::uint8_t>("ndim");
        std::uint64_t values = 1;
        for (std::uint8_t d = 0; d < ndim; ++d) {
            a.dims.push_back(r.get<std::uint32_t>("dims"));
            values *= a.dims.back();
        }
        if (values > bytes.size()) {
            throw FormatError("CPW1 tensor " + a.name + " declares more values than the file holds");
        }
        a.data.resize(values);
        for (auto& v : a.data) {
            v = std::bit_cast<float>(r.get<std::uint32_t>("data"));
        }
        arrays.push_back(std::move(a));
    }
    if (!r.done()) {
        throw FormatError("CPW1 has trailing bytes after " + std::to_string(count) + " tensors");
    }
    return arrays;
}

void write_cpw(const std::vector<NamedArray>& arrays, const std::filesystem::path& path)
{
    const auto bytes = encode_cpw(arrays);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw IoError("write failed: " + path.string());
    }
}

std::vector<NamedArray> read_cpw(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_cpw(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

} // namespace cloudseg

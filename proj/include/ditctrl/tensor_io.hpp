#pragma once

#include <array>
#include <cctype>
#include <cstdint>
#include <string_view>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "ditctrl/error.hpp"
#include "ditctrl/tensor.hpp"

namespace ditctrl {

// Tensor dump format ("DITC"):
//   bytes 0..3   magic "DITC"
//   u32 LE       rank
//   rank x u32   extents
//   float32 LE   row-major values
// Values are narrowed to float32 on write; a dump read back and rewritten is byte-identical.

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32(const std::vector<std::uint8_t>& in, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[at + i]) << (8 * i);
    return v;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::Io, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(out), ErrorKind::Io, "write failed for " + path.string());
}

} // namespace detail

inline std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
    require(t.rank() > 0, ErrorKind::Shape, "encode_tensor: cannot encode an absent tensor");
    require(t.all_finite(), ErrorKind::NonFinite, "encode_tensor: non-finite value");
    std::vector<std::uint8_t> out{'D', 'I', 'T', 'C'};
    out.reserve(8 + 4 * t.rank() + 4 * t.size());
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.dims()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.values()) {
        const float f = static_cast<float>(v);
        std::uint32_t bits;
        std::memcpy(&bits, &f, sizeof bits);
        detail::put_u32(out, bits);
    }
    return out;
}

inline Tensor decode_tensor(const std::vector<std::uint8_t>& bytes) {
    require(bytes.size() >= 8 && std::memcmp(bytes.data(), "DITC", 4) == 0, ErrorKind::Io,
            "decode_tensor: missing DITC magic");
    const std::uint32_t rank = detail::get_u32(bytes, 4);
    require(rank > 0 && bytes.size() >= 8 + 4ull * rank, ErrorKind::Io, "decode_tensor: truncated header");
    Dims dims(rank);
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        dims[i] = detail::get_u32(bytes, 8 + 4 * i);
        require(dims[i] > 0, ErrorKind::Io, "decode_tensor: zero extent");
        count *= dims[i];
    }
    const std::size_t offset = 8 + 4ull * rank;
    require(bytes.size() == offset + 4 * count, ErrorKind::Io,
            "decode_tensor: payload length does not match extents " + dims_to_string(dims));
    std::vector<double> data(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint32_t bits = detail::get_u32(bytes, offset + 4 * i);
        float f;
        std::memcpy(&f, &bits, sizeof f);
        data[i] = f;
    }
    return Tensor(std::move(dims), std::move(data));
}

inline void write_tensor(const std::filesystem::path& path, const Tensor& t) {
    detail::write_file(path, encode_tensor(t));
}

inline Tensor read_tensor(const std::filesystem::path& path) { return decode_tensor(detail::read_file(path)); }

// 64-bit FNV-1a, used for manifest digests.
inline std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
    for (std::size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::string_view s) {
    return fnv1a64(reinterpret_cast<const std::uint8_t*>(s.data()), s.size());
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string file_digest(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    return hex64(fnv1a64(bytes.data(), bytes.size()));
}

// Binary PGM (P5, maxval 255).
struct GrayImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels; // row-major, height x width

    friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
    require(img.width > 0 && img.height > 0 && img.pixels.size() == img.width * img.height, ErrorKind::Shape,
            "write_pgm: pixel buffer does not match image size");
    const std::string header =
        "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> bytes(header.begin(), header.end());
    bytes.insert(bytes.end(), img.pixels.begin(), img.pixels.end());
    detail::write_file(path, bytes);
}

inline GrayImage read_pgm(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    std::size_t pos = 0;
    auto next_token = [&]() {
        for (;;) {
            while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
            if (pos < bytes.size() && bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
                continue;
            }
            break;
        }
        std::string tok;
        while (pos < bytes.size() && !std::isspace(bytes[pos])) tok += static_cast<char>(bytes[pos++]);
        return tok;
    };
    require(next_token() == "P5", ErrorKind::Io, "read_pgm: not a binary PGM: " + path.string());
    GrayImage img;
    try {
        img.width = std::stoul(next_token());
        img.height = std::stoul(next_token());
        require(std::stoul(next_token()) == 255, ErrorKind::Io, "read_pgm: maxval must be 255");
    } catch (const std::logic_error&) {
        fail(ErrorKind::Io, "read_pgm: malformed header in " + path.string());
    }
    ++pos; // single whitespace after maxval
    require(bytes.size() >= pos && bytes.size() - pos == img.width * img.height, ErrorKind::Io,
            "read_pgm: pixel payload size mismatch");
    img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
    return img;
}

} // namespace ditctrl

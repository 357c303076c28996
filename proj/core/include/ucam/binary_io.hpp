#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "ucam/error.hpp"

namespace ucam::binary {

// Little-endian primitives shared by the feature and checkpoint formats.

inline std::uint32_t byteswap32(std::uint32_t v) {
    return (v >> 24) | ((v >> 8) & 0xFF00u) | ((v << 8) & 0xFF0000u) | (v << 24);
}

class Writer {
  public:
    explicit Writer(std::ostream& os) : os_(os) {}

    void bytes(const void* p, std::size_t n) {
        os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
        if (!os_) throw IoError("write failed");
    }
    void u32(std::uint32_t v) {
        if constexpr (std::endian::native == std::endian::big) v = byteswap32(v);
        bytes(&v, 4);
    }
    void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }
    void f32s(const float* p, std::size_t n) {
        if constexpr (std::endian::native == std::endian::little) {
            bytes(p, n * 4);
        } else {
            for (std::size_t i = 0; i < n; ++i) f32(p[i]);
        }
    }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }

  private:
    std::ostream& os_;
};

class Reader {
  public:
    Reader(std::istream& is, std::string what) : is_(is), what_(std::move(what)) {}

    void bytes(void* p, std::size_t n) {
        is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(is_.gcount()) != n) {
            throw TruncatedFileError(what_ + ": file ends in the middle of a record");
        }
    }
    std::uint32_t u32() {
        std::uint32_t v;
        bytes(&v, 4);
        if constexpr (std::endian::native == std::endian::big) v = byteswap32(v);
        return v;
    }
    void f32s(float* p, std::size_t n) {
        bytes(p, n * 4);
        if constexpr (std::endian::native == std::endian::big) {
            for (std::size_t i = 0; i < n; ++i) p[i] = std::bit_cast<float>(byteswap32(std::bit_cast<std::uint32_t>(p[i])));
        }
    }
    // Length-prefixed string; limit guards against reading a garbage length.
    std::string str(std::size_t limit = 1u << 26) {
        const std::uint32_t n = u32();
        if (n > limit) throw PayloadError(what_ + ": implausible string length " + std::to_string(n));
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
    void magic(const char (&expected)[5]) {
        char m[4];
        bytes(m, 4);
        if (std::memcmp(m, expected, 4) != 0) throw BadMagicError(what_ + ": bad magic, expected '" + expected + "'");
    }
    bool at_end() { return is_.peek() == std::char_traits<char>::eof(); }

  private:
    std::istream& is_;
    std::string what_;
};

}  // namespace ucam::binary

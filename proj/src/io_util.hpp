#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "sepdon/errors.hpp"

namespace sepdon::detail {

// Little-endian f64 blobs, independent of host byte order.
inline void append_f64_le(std::vector<unsigned char>& out, const double* src, std::size_t n) {
    out.reserve(out.size() + n * 8);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint64_t bits = std::bit_cast<std::uint64_t>(src[i]);
        for (int b = 0; b < 8; ++b) out.push_back(static_cast<unsigned char>((bits >> (8 * b)) & 0xff));
    }
}

inline void read_f64_le(const unsigned char* src, double* dst, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(src[i * 8 + b]) << (8 * b);
        dst[i] = std::bit_cast<double>(bits);
    }
}

inline void write_file(const std::string& path, const void* data, std::size_t len) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw io_error("cannot open for writing: " + path);
    f.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
    if (!f) throw io_error("write failed: " + path);
}

inline std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw io_error("cannot open for reading: " + path);
    std::streamsize len = f.tellg();
    f.seekg(0);
    std::vector<unsigned char> buf(static_cast<std::size_t>(len));
    if (len > 0) f.read(reinterpret_cast<char*>(buf.data()), len);
    if (!f) throw io_error("read failed: " + path);
    return buf;
}

inline std::string read_text_file(const std::string& path) {
    auto raw = read_file(path);
    return std::string(raw.begin(), raw.end());
}

} // namespace sepdon::detail

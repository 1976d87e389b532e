#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>

#include "rdiff/common.hpp"

// Little-endian primitives shared by the checkpoint, value-function and
// feasibility-table formats.
namespace rdiff::binio {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

template <typename T>
void write_pod(std::ostream& out, T value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, std::string_view what) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) {
        fail(ErrorKind::io, "truncated file while reading " + std::string(what));
    }
    return value;
}

inline void write_f64s(std::ostream& out, std::span<const double> values) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(double)));
}

inline void read_f64s(std::istream& in, std::span<double> values, std::string_view what) {
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!in) {
        fail(ErrorKind::io, "truncated file while reading " + std::string(what));
    }
}

inline void write_magic(std::ostream& out, std::string_view magic) {
    out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

inline void expect_magic(std::istream& in, std::string_view magic) {
    std::string got(magic.size(), '\0');
    in.read(got.data(), static_cast<std::streamsize>(got.size()));
    if (!in || got != magic) {
        fail(ErrorKind::io, "bad magic: expected \"" + std::string(magic) + "\"");
    }
}

}  // namespace rdiff::binio

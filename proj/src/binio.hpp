#pragma once

// Little-endian primitive encoding shared by the volume, pool and checkpoint
// containers. Reader failures carry the byte offset of the failed field.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "msfseg/errors.hpp"

namespace msf::bin {

template <class T>
T to_le(T v) {
    if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
        using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint16_t>>;
        U u = std::bit_cast<U>(v), r = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) r |= ((u >> (8 * i)) & 0xffu) << (8 * (sizeof(T) - 1 - i));
        return std::bit_cast<T>(r);
    }
    return v;
}

inline std::vector<char> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::vector<char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot open " + path + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw InputError("write failed: " + path);
}

class Writer {
public:
    template <class T>
    void put(T v) {
        static_assert(std::is_arithmetic_v<T>);
        v = to_le(v);
        const auto* p = reinterpret_cast<const char*>(&v);
        buf_.insert(buf_.end(), p, p + sizeof(T));
    }
    void bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const char*>(data);
        buf_.insert(buf_.end(), p, p + n);
    }
    void magic(std::string_view m) { bytes(m.data(), m.size()); }
    void str(const std::string& s) {
        put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void doubles(const std::vector<double>& v) {
        for (double x : v) put(x);
    }
    void u8s(const std::vector<std::uint8_t>& v) { bytes(v.data(), v.size()); }

    const std::vector<char>& buffer() const { return buf_; }

private:
    std::vector<char> buf_;
};

class Reader {
public:
    explicit Reader(std::vector<char> data, std::string what) : data_(std::move(data)), what_(std::move(what)) {}

    template <class T>
    T get(const char* field) {
        need(sizeof(T), field);
        T v;
        std::memcpy(&v, data_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return to_le(v);
    }
    void magic(std::string_view m) {
        need(m.size(), "magic");
        if (std::string_view(data_.data() + pos_, m.size()) != m) fail("bad magic");
        pos_ += m.size();
    }
    std::string str(const char* field, std::size_t max_len = 1 << 20) {
        const auto n = get<std::uint32_t>(field);
        if (n > max_len) fail(std::string(field) + ": implausible length " + std::to_string(n));
        need(n, field);
        std::string s(data_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    std::vector<double> doubles(std::size_t n, const char* field) {
        need(n * sizeof(double), field);
        std::vector<double> v(n);
        for (auto& x : v) x = get<double>(field);
        return v;
    }
    std::vector<std::uint8_t> u8s(std::size_t n, const char* field) {
        need(n, field);
        std::vector<std::uint8_t> v(data_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                    data_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
        return v;
    }
    std::size_t remaining() const { return data_.size() - pos_; }
    std::size_t offset() const { return pos_; }
    void expect_end() const {
        if (pos_ != data_.size()) fail(std::to_string(data_.size() - pos_) + " trailing bytes");
    }
    [[noreturn]] void fail(const std::string& msg) const { throw FormatError(what_ + ": " + msg, pos_); }

private:
    void need(std::size_t n, const char* field) const {
        if (n > data_.size() - pos_) fail(std::string("truncated while reading ") + field);
    }
    std::vector<char> data_;
    std::string what_;
    std::size_t pos_ = 0;
};

}  // namespace msf::bin

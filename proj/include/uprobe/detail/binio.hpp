#pragma once

// Little-endian byte packing for the record envelope.

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "uprobe/errors.hpp"

namespace uprobe::detail {

static_assert(std::endian::native == std::endian::little, "record envelope assumes a little-endian host");

class ByteWriter {
public:
    template <typename T>
        requires std::is_arithmetic_v<T>
    void put(T value) {
        char buf[sizeof(T)];
        std::memcpy(buf, &value, sizeof(T));
        bytes_.append(buf, sizeof(T));
    }

    void put_string(std::string_view s) {
        put(static_cast<std::uint32_t>(s.size()));
        bytes_.append(s.data(), s.size());
    }

    template <typename T>
    void put_array(std::span<const T> values) {
        const auto n = values.size_bytes();
        const auto at = bytes_.size();
        bytes_.resize(at + n);
        if (n) std::memcpy(bytes_.data() + at, values.data(), n);
    }

    const std::string& bytes() const { return bytes_; }
    std::string take() { return std::move(bytes_); }

private:
    std::string bytes_;
};

class ByteReader {
public:
    explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

    template <typename T>
        requires std::is_arithmetic_v<T>
    T get() {
        need(sizeof(T));
        T value;
        std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return value;
    }

    std::string get_string() {
        const auto n = get<std::uint32_t>();
        need(n);
        std::string s(bytes_.substr(pos_, n));
        pos_ += n;
        return s;
    }

    template <typename T>
    std::vector<T> get_array(std::size_t count) {
        if (count > remaining() / sizeof(T)) {
            throw ParseError(ParseError::Reason::truncated, "record payload shorter than its declared array length");
        }
        std::vector<T> out(count);
        if (count) std::memcpy(out.data(), bytes_.data() + pos_, count * sizeof(T));
        pos_ += count * sizeof(T);
        return out;
    }

    std::size_t remaining() const { return bytes_.size() - pos_; }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (remaining() < n) {
            throw ParseError(ParseError::Reason::truncated, "record payload ends before its last field");
        }
    }

    std::string_view bytes_;
    std::size_t pos_ = 0;
};

}  // namespace uprobe::detail

#pragma once

// Versioned container shared by every binary artifact the toolkit writes.
//
// Binary layout:
//   "UPRB" | u32 version | u32 header_len | header JSON (canonical) |
//   { u32 payload_len | payload }*
// The same content may also be stored as line-delimited JSON: a header
// object on the first line and one object per payload after it.
//
// A Codec supplies the payload variant:
//   static constexpr int payload;
//   static void encode(const T&, detail::ByteWriter&);
//   static T decode(detail::ByteReader&, const FileHeader&);
//   static nlohmann::json to_json(const T&);
//   static T from_json(const nlohmann::json&, const FileHeader&);
//   static void check(const T&, const FileHeader&);   // dims etc.

#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uprobe/detail/binio.hpp"
#include "uprobe/errors.hpp"

namespace uprobe {

inline constexpr char kMagic[4] = {'U', 'P', 'R', 'B'};
inline constexpr std::uint32_t kFormatVersion = 1;

enum class PayloadVariant : int { token_record = 1, labeled_example = 2, probe_model = 3, toy_model = 4 };

enum class EnvelopeFormat { binary, jsonl };

struct FileHeader {
    std::uint32_t version = kFormatVersion;
    int payload = 0;
    std::string meta;                          // model-pair identifier
    std::map<std::int32_t, std::uint32_t> dims;  // embedding dim per layer tag
    std::optional<std::uint64_t> count;
    nlohmann::json info = nlohmann::json::object();  // provenance: config hash, seed, ...

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["format"] = "uprobe";
        j["version"] = version;
        j["payload"] = payload;
        j["meta"] = meta;
        nlohmann::json d = nlohmann::json::object();
        for (const auto& [tag, dim] : dims) d[std::to_string(tag)] = dim;
        j["dims"] = d;
        if (count) j["count"] = *count;
        j["info"] = info;
        return j;
    }

    static FileHeader from_json(const nlohmann::json& j) {
        FileHeader h;
        try {
            if (j.value("format", std::string{}) != "uprobe") {
                throw ParseError(ParseError::Reason::malformed, "header is not a uprobe header");
            }
            h.version = j.at("version").get<std::uint32_t>();
            if (h.version != kFormatVersion) {
                throw ParseError(ParseError::Reason::version_mismatch,
                                 "unsupported format version " + std::to_string(h.version) + " (expected " +
                                     std::to_string(kFormatVersion) + ")");
            }
            h.payload = j.at("payload").get<int>();
            h.meta = j.value("meta", std::string{});
            for (const auto& [k, v] : j.at("dims").items()) h.dims[std::stoi(k)] = v.get<std::uint32_t>();
            if (j.contains("count")) h.count = j.at("count").get<std::uint64_t>();
            if (j.contains("info")) h.info = j.at("info");
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(ParseError::Reason::malformed, std::string("malformed header: ") + e.what());
        }
        return h;
    }
};

inline void check_embedding_dims(const std::map<std::int32_t, std::vector<float>>& embeddings,
                                 const FileHeader& header) {
    if (embeddings.size() != header.dims.size()) {
        throw DimensionError("record carries " + std::to_string(embeddings.size()) + " layers, header declares " +
                             std::to_string(header.dims.size()));
    }
    for (const auto& [tag, vec] : embeddings) {
        const auto it = header.dims.find(tag);
        if (it == header.dims.end()) {
            throw DimensionError("record has layer " + std::to_string(tag) + " not declared in the header");
        }
        if (vec.size() != it->second) {
            throw DimensionError("layer " + std::to_string(tag) + " has dim " + std::to_string(vec.size()) +
                                 ", header declares " + std::to_string(it->second));
        }
    }
}

template <typename Codec>
class EnvelopeWriter {
public:
    using value_type = typename Codec::value_type;

    EnvelopeWriter(std::ostream& out, FileHeader header, EnvelopeFormat format = EnvelopeFormat::binary)
        : out_(out), header_(std::move(header)), format_(format) {
        header_.payload = Codec::payload;
        const std::string blob = header_.to_json().dump();
        if (format_ == EnvelopeFormat::binary) {
            detail::ByteWriter w;
            for (char c : kMagic) w.put(c);
            w.put(header_.version);
            w.put(static_cast<std::uint32_t>(blob.size()));
            out_.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
            out_.write(blob.data(), static_cast<std::streamsize>(blob.size()));
        } else {
            out_ << blob << '\n';
        }
        if (!out_) throw IoError("failed to write envelope header");
    }

    void write(const value_type& item) {
        Codec::check(item, header_);
        if (format_ == EnvelopeFormat::binary) {
            detail::ByteWriter w;
            Codec::encode(item, w);
            const std::string& payload = w.bytes();
            detail::ByteWriter len;
            len.put(static_cast<std::uint32_t>(payload.size()));
            out_.write(len.bytes().data(), 4);
            out_.write(payload.data(), static_cast<std::streamsize>(payload.size()));
        } else {
            out_ << Codec::to_json(item).dump() << '\n';
        }
        if (!out_) throw IoError("failed to write envelope payload");
        ++written_;
    }

    // Verifies a declared count; the stream itself is flushed by its owner.
    void finish() {
        if (header_.count && *header_.count != written_) {
            throw DataError("header declares " + std::to_string(*header_.count) + " payloads, wrote " +
                            std::to_string(written_));
        }
        out_.flush();
    }

    const FileHeader& header() const { return header_; }

private:
    std::ostream& out_;
    FileHeader header_;
    EnvelopeFormat format_;
    std::uint64_t written_ = 0;
};

// Streaming reader: one payload in memory at a time.
template <typename Codec>
class EnvelopeReader {
public:
    using value_type = typename Codec::value_type;

    explicit EnvelopeReader(std::istream& in) : in_(in) {
        const int first = in_.peek();
        if (first == std::char_traits<char>::eof()) {
            throw ParseError(ParseError::Reason::truncated, "empty input: missing envelope header");
        }
        if (first == '{') {
            format_ = EnvelopeFormat::jsonl;
            std::string line;
            std::getline(in_, line);
            header_ = FileHeader::from_json(parse_line(line));
        } else {
            format_ = EnvelopeFormat::binary;
            char magic[4];
            if (!in_.read(magic, 4)) throw ParseError(ParseError::Reason::truncated, "truncated magic bytes");
            if (std::string_view(magic, 4) != std::string_view(kMagic, 4)) {
                throw ParseError(ParseError::Reason::bad_magic, "not a uprobe file (bad magic bytes)");
            }
            const auto version = read_u32("version");
            if (version != kFormatVersion) {
                throw ParseError(ParseError::Reason::version_mismatch,
                                 "unsupported format version " + std::to_string(version));
            }
            const auto len = read_u32("header length");
            std::string blob(len, '\0');
            if (!in_.read(blob.data(), len)) throw ParseError(ParseError::Reason::truncated, "truncated header");
            header_ = FileHeader::from_json(parse_line(blob));
        }
        if (header_.payload != Codec::payload) {
            throw ParseError(ParseError::Reason::malformed, "payload variant " + std::to_string(header_.payload) +
                                                               " where " + std::to_string(Codec::payload) +
                                                               " was expected");
        }
    }

    const FileHeader& header() const { return header_; }
    EnvelopeFormat format() const { return format_; }

    std::optional<value_type> next() {
        std::optional<value_type> item = format_ == EnvelopeFormat::binary ? next_binary() : next_jsonl();
        if (item) {
            Codec::check(*item, header_);
            ++read_;
        } else if (header_.count && *header_.count != read_) {
            throw ParseError(ParseError::Reason::count_mismatch, "header declares " + std::to_string(*header_.count) +
                                                                     " payloads, stream holds " +
                                                                     std::to_string(read_));
        }
        return item;
    }

private:
    static nlohmann::json parse_line(const std::string& text) {
        try {
            return nlohmann::json::parse(text);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(ParseError::Reason::malformed, std::string("malformed JSON: ") + e.what());
        }
    }

    std::uint32_t read_u32(const char* what) {
        char buf[4];
        if (!in_.read(buf, 4)) throw ParseError(ParseError::Reason::truncated, std::string("truncated ") + what);
        detail::ByteReader r(std::string_view(buf, 4));
        return r.get<std::uint32_t>();
    }

    std::optional<value_type> next_binary() {
        char buf[4];
        in_.read(buf, 4);
        const auto got = in_.gcount();
        if (got == 0) return std::nullopt;
        if (got != 4) throw ParseError(ParseError::Reason::truncated, "truncated payload length prefix");
        detail::ByteReader lr(std::string_view(buf, 4));
        const auto len = lr.get<std::uint32_t>();
        payload_.resize(len);
        if (!in_.read(payload_.data(), len)) {
            throw ParseError(ParseError::Reason::truncated, "payload " + std::to_string(read_) + " is truncated");
        }
        detail::ByteReader r(payload_);
        auto item = Codec::decode(r, header_);
        if (!r.done()) throw ParseError(ParseError::Reason::malformed, "trailing bytes in payload");
        return item;
    }

    std::optional<value_type> next_jsonl() {
        std::string line;
        while (std::getline(in_, line)) {
            if (line.empty()) continue;
            try {
                return Codec::from_json(parse_line(line), header_);
            } catch (const nlohmann::json::exception& e) {
                throw ParseError(ParseError::Reason::malformed, std::string("malformed payload: ") + e.what());
            }
        }
        return std::nullopt;
    }

    std::istream& in_;
    FileHeader header_;
    EnvelopeFormat format_ = EnvelopeFormat::binary;
    std::string payload_;
    std::uint64_t read_ = 0;
};

}  // namespace uprobe

#pragma once

// Token records, next-token distributions and the information measures used
// throughout the toolkit. All entropies are in bits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uprobe/envelope.hpp"
#include "uprobe/errors.hpp"

namespace uprobe {

using TokenId = std::uint64_t;

inline constexpr double kProbTolerance = 1e-6;

// -sum p log2 p with 0 log 0 = 0. Validates the vector first.
inline double entropy_bits(std::span<const double> probs) {
    double sum = 0.0;
    for (double p : probs) {
        if (!(p >= 0.0) || !std::isfinite(p)) throw InvalidDistribution("probability is negative or not finite");
        sum += p;
    }
    if (probs.empty() || std::abs(sum - 1.0) > kProbTolerance) {
        throw InvalidDistribution("probabilities sum to " + std::to_string(sum) + ", not 1");
    }
    double h = 0.0;
    for (double p : probs) {
        if (p > 0.0) h -= p * std::log2(p);
    }
    return std::max(0.0, h);
}

// Jensen-Shannon divergence in bits; symmetric bit-for-bit because each
// term pair is evaluated in an order-independent way.
inline double jensen_shannon_bits(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) {
        throw DimensionError("distributions have different support sizes (" + std::to_string(p.size()) + " vs " +
                             std::to_string(q.size()) + ")");
    }
    entropy_bits(p);
    entropy_bits(q);
    auto half_kl_term = [](double a, double b) {
        // a * log2(a / m) with m = (a + b) / 2
        return a > 0.0 ? a * std::log2(2.0 * a / (a + b)) : 0.0;
    };
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        total += half_kl_term(p[i], q[i]) + half_kl_term(q[i], p[i]);
    }
    return std::clamp(0.5 * total, 0.0, 1.0);
}

struct TopEntry {
    TokenId token = 0;
    double prob = 0.0;

    bool operator==(const TopEntry&) const = default;
};

// Either a full probability vector or a top-k head with its tail mass and the
// exact entropy of the full distribution (computed by whoever had it).
class Distribution {
public:
    static Distribution full(std::vector<double> probs) {
        Distribution d;
        d.exact_entropy_bits_ = entropy_bits(probs);
        d.probs_ = std::move(probs);
        d.is_full_ = true;
        return d;
    }

    static Distribution top_k(std::vector<TopEntry> top, double tail_mass, double exact_entropy_bits) {
        double head = 0.0;
        for (const auto& e : top) {
            if (!(e.prob >= 0.0) || e.prob > 1.0 + kProbTolerance) {
                throw InvalidDistribution("top-k probability outside [0, 1]");
            }
            head += e.prob;
        }
        if (!(tail_mass >= -kProbTolerance) || std::abs(tail_mass - (1.0 - head)) > kProbTolerance) {
            throw InvalidDistribution("tail mass " + std::to_string(tail_mass) + " does not equal 1 - head mass " +
                                      std::to_string(1.0 - head));
        }
        Distribution d;
        d.top_ = std::move(top);
        d.tail_mass_ = tail_mass;
        d.exact_entropy_bits_ = exact_entropy_bits;
        d.is_full_ = false;
        const double head_h = d.head_entropy_bits();
        if (!(exact_entropy_bits >= 0.0) || exact_entropy_bits + kProbTolerance < head_h) {
            throw InvalidDistribution("exact entropy " + std::to_string(exact_entropy_bits) +
                                      " is below the entropy of the top-k head " + std::to_string(head_h));
        }
        return d;
    }

    bool is_full() const { return is_full_; }
    const std::vector<double>& probs() const { return probs_; }
    double exact_entropy_bits() const { return exact_entropy_bits_; }
    double tail_mass() const { return is_full_ ? 0.0 : tail_mass_; }

    // Head entries; for the full form, the k most probable tokens (ties by id).
    std::vector<TopEntry> top(std::size_t k) const {
        std::vector<TopEntry> out;
        if (is_full_) {
            for (std::size_t i = 0; i < probs_.size(); ++i) out.push_back({i, probs_[i]});
        } else {
            out = top_;
        }
        std::stable_sort(out.begin(), out.end(), [](const TopEntry& a, const TopEntry& b) {
            return a.prob != b.prob ? a.prob > b.prob : a.token < b.token;
        });
        if (out.size() > k) out.resize(k);
        return out;
    }

    const std::vector<TopEntry>& top_entries() const { return top_; }

    // Partial entropy -sum p log2 p over the head entries only.
    double head_entropy_bits() const {
        double h = 0.0;
        if (is_full_) return exact_entropy_bits_;
        for (const auto& e : top_) {
            if (e.prob > 0.0) h -= e.prob * std::log2(e.prob);
        }
        return h;
    }

    // Truncates a full distribution to its top-k head, keeping the exact entropy.
    Distribution truncated(std::size_t k) const {
        auto head = top(k);
        double mass = 0.0;
        for (const auto& e : head) mass += e.prob;
        return top_k(std::move(head), std::max(0.0, 1.0 - mass), exact_entropy_bits_);
    }

private:
    Distribution() = default;

    std::vector<double> probs_;
    std::vector<TopEntry> top_;
    double tail_mass_ = 0.0;
    double exact_entropy_bits_ = 0.0;
    bool is_full_ = true;
};

inline double entropy_bits(const Distribution& d) {
    return d.is_full() ? entropy_bits(d.probs()) : d.exact_entropy_bits();
}

struct TokenRecord {
    std::string doc_id;
    std::uint64_t position = 0;
    TokenId token_id = 0;
    TokenId prev_token_id = 0;
    double small_entropy_bits = 0.0;
    std::optional<double> large_entropy_bits;
    std::map<std::int32_t, std::vector<float>> embeddings;  // layer tag (-1 = final) -> vector
    std::string meta;
    // Full next-token distributions, only dumped when JSD targets are wanted.
    std::optional<std::vector<double>> small_probs;
    std::optional<std::vector<double>> large_probs;

    bool operator==(const TokenRecord&) const = default;
};

namespace detail {

inline void put_embeddings(const std::map<std::int32_t, std::vector<float>>& emb, ByteWriter& w) {
    w.put(static_cast<std::uint32_t>(emb.size()));
    for (const auto& [tag, vec] : emb) {
        w.put(tag);
        w.put(static_cast<std::uint32_t>(vec.size()));
        w.put_array<float>(vec);
    }
}

inline std::map<std::int32_t, std::vector<float>> get_embeddings(ByteReader& r) {
    std::map<std::int32_t, std::vector<float>> emb;
    const auto n = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < n; ++i) {
        const auto tag = r.get<std::int32_t>();
        const auto dim = r.get<std::uint32_t>();
        emb[tag] = r.get_array<float>(dim);
    }
    return emb;
}

inline void put_optional_probs(const std::optional<std::vector<double>>& p, ByteWriter& w) {
    w.put(static_cast<std::uint8_t>(p ? 1 : 0));
    if (p) {
        w.put(static_cast<std::uint32_t>(p->size()));
        w.put_array<double>(*p);
    }
}

inline std::optional<std::vector<double>> get_optional_probs(ByteReader& r) {
    if (r.get<std::uint8_t>() == 0) return std::nullopt;
    const auto n = r.get<std::uint32_t>();
    return r.get_array<double>(n);
}

inline nlohmann::json embeddings_to_json(const std::map<std::int32_t, std::vector<float>>& emb) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [tag, vec] : emb) j[std::to_string(tag)] = vec;
    return j;
}

inline std::map<std::int32_t, std::vector<float>> embeddings_from_json(const nlohmann::json& j) {
    std::map<std::int32_t, std::vector<float>> emb;
    for (const auto& [k, v] : j.items()) emb[std::stoi(k)] = v.get<std::vector<float>>();
    return emb;
}

}  // namespace detail

struct TokenRecordCodec {
    using value_type = TokenRecord;
    static constexpr int payload = static_cast<int>(PayloadVariant::token_record);

    static void encode(const TokenRecord& r, detail::ByteWriter& w) {
        w.put_string(r.doc_id);
        w.put(r.position);
        w.put(r.token_id);
        w.put(r.prev_token_id);
        w.put(r.small_entropy_bits);
        w.put(static_cast<std::uint8_t>(r.large_entropy_bits ? 1 : 0));
        w.put(r.large_entropy_bits.value_or(0.0));
        detail::put_embeddings(r.embeddings, w);
        detail::put_optional_probs(r.small_probs, w);
        detail::put_optional_probs(r.large_probs, w);
    }

    static TokenRecord decode(detail::ByteReader& rd, const FileHeader& h) {
        TokenRecord r;
        r.doc_id = rd.get_string();
        r.position = rd.get<std::uint64_t>();
        r.token_id = rd.get<std::uint64_t>();
        r.prev_token_id = rd.get<std::uint64_t>();
        r.small_entropy_bits = rd.get<double>();
        const bool has_large = rd.get<std::uint8_t>() != 0;
        const double large = rd.get<double>();
        if (has_large) r.large_entropy_bits = large;
        r.embeddings = detail::get_embeddings(rd);
        r.small_probs = detail::get_optional_probs(rd);
        r.large_probs = detail::get_optional_probs(rd);
        r.meta = h.meta;
        return r;
    }

    static nlohmann::json to_json(const TokenRecord& r) {
        nlohmann::json j;
        j["doc_id"] = r.doc_id;
        j["position"] = r.position;
        j["token_id"] = r.token_id;
        j["prev_token_id"] = r.prev_token_id;
        j["small_entropy_bits"] = r.small_entropy_bits;
        if (r.large_entropy_bits) j["large_entropy_bits"] = *r.large_entropy_bits;
        j["embeddings"] = detail::embeddings_to_json(r.embeddings);
        if (r.small_probs) j["small_probs"] = *r.small_probs;
        if (r.large_probs) j["large_probs"] = *r.large_probs;
        return j;
    }

    static TokenRecord from_json(const nlohmann::json& j, const FileHeader& h) {
        TokenRecord r;
        r.doc_id = j.at("doc_id").get<std::string>();
        r.position = j.at("position").get<std::uint64_t>();
        r.token_id = j.at("token_id").get<std::uint64_t>();
        r.prev_token_id = j.at("prev_token_id").get<std::uint64_t>();
        r.small_entropy_bits = j.at("small_entropy_bits").get<double>();
        if (j.contains("large_entropy_bits")) r.large_entropy_bits = j.at("large_entropy_bits").get<double>();
        r.embeddings = detail::embeddings_from_json(j.at("embeddings"));
        if (j.contains("small_probs")) r.small_probs = j.at("small_probs").get<std::vector<double>>();
        if (j.contains("large_probs")) r.large_probs = j.at("large_probs").get<std::vector<double>>();
        r.meta = h.meta;
        return r;
    }

    static void check(const TokenRecord& r, const FileHeader& h) {
        if (!(r.small_entropy_bits >= 0.0)) throw DataError("small-model entropy must be >= 0");
        if (r.large_entropy_bits && !(*r.large_entropy_bits >= 0.0)) {
            throw DataError("large-model entropy must be >= 0");
        }
        if (!r.meta.empty() && r.meta != h.meta) {
            throw DataError("record meta '" + r.meta + "' differs from the file's model pair '" + h.meta + "'");
        }
        check_embedding_dims(r.embeddings, h);
    }
};

using RecordWriter = EnvelopeWriter<TokenRecordCodec>;
using RecordReader = EnvelopeReader<TokenRecordCodec>;

// Header whose dims are taken from the first record.
inline FileHeader header_for(const std::vector<TokenRecord>& records, std::string meta = {}) {
    FileHeader h;
    h.meta = std::move(meta);
    if (!records.empty()) {
        if (h.meta.empty()) h.meta = records.front().meta;
        for (const auto& [tag, vec] : records.front().embeddings) h.dims[tag] = static_cast<std::uint32_t>(vec.size());
    }
    h.count = records.size();
    return h;
}

inline void write_records(const std::vector<TokenRecord>& records, std::ostream& out, FileHeader header,
                          EnvelopeFormat format = EnvelopeFormat::binary) {
    RecordWriter w(out, std::move(header), format);
    for (const auto& r : records) w.write(r);
    w.finish();
}

inline std::vector<TokenRecord> read_records(std::istream& in) {
    RecordReader r(in);
    std::vector<TokenRecord> out;
    while (auto rec = r.next()) out.push_back(std::move(*rec));
    return out;
}

inline std::ifstream open_input(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open input file '" + path.string() + "'");
    return in;
}

inline std::ofstream open_output(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open output file '" + path.string() + "'");
    return out;
}

inline std::vector<TokenRecord> read_record_file(const std::filesystem::path& path) {
    auto in = open_input(path);
    return read_records(in);
}

}  // namespace uprobe

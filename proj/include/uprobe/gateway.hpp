#pragma once

// Model gateway: the one interface live-model consumers talk to.
//
// An endpoint maps a token context to the next-token Distribution (top-k
// head plus the exact entropy of the full distribution). MockEndpoint is a
// deterministic rule table used by tests and the CLI's mock mode.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uprobe/errors.hpp"
#include "uprobe/records.hpp"

namespace uprobe {

struct SpecialTokens {
    std::optional<TokenId> bos;
    std::optional<TokenId> eos;
    std::map<std::string, TokenId> others;
};

struct EndpointInfo {
    std::size_t vocab_size = 0;
    SpecialTokens special;

    void validate() const {
        if (vocab_size == 0) throw ConfigError("endpoint vocab_size must be > 0");
        auto check = [&](std::optional<TokenId> id, const char* name) {
            if (id && *id >= vocab_size) {
                throw ConfigError(std::string(name) + " id " + std::to_string(*id) + " is outside the vocabulary");
            }
        };
        check(special.bos, "bos");
        check(special.eos, "eos");
        for (const auto& [name, id] : special.others) check(id, name.c_str());
    }
};

class ModelEndpoint {
public:
    virtual ~ModelEndpoint() = default;

    const EndpointInfo& info() const { return info_; }
    std::size_t vocab_size() const { return info_.vocab_size; }
    const SpecialTokens& special_tokens() const { return info_.special; }

    Distribution next_token_distribution(std::span<const TokenId> tokens, std::size_t top_k) {
        if (tokens.empty()) throw ConfigError("next_token_distribution needs a nonempty context");
        if (top_k == 0) throw ConfigError("top_k must be >= 1");
        for (TokenId t : tokens) {
            if (t >= info_.vocab_size) {
                throw EndpointError(EndpointError::Reason::vocab_mismatch,
                                    "context token " + std::to_string(t) + " is outside the vocabulary");
            }
        }
        Distribution d = query(tokens, top_k);
        for (const auto& e : d.top_entries()) {
            if (e.token >= info_.vocab_size) {
                throw EndpointError(EndpointError::Reason::vocab_mismatch,
                                    "reply token " + std::to_string(e.token) + " is outside the vocabulary");
            }
        }
        return d;
    }

protected:
    explicit ModelEndpoint(EndpointInfo info) : info_(std::move(info)) { info_.validate(); }

    virtual Distribution query(std::span<const TokenId> tokens, std::size_t top_k) = 0;

private:
    EndpointInfo info_;
};

// --- mock ---------------------------------------------------------------------

struct MockRule {
    std::vector<TokenId> suffix;    // context must end with these tokens
    std::vector<TokenId> contains;  // context must contain this run somewhere
    // Copy rule: the last `repeat_len` tokens (suffix length when 0) must also
    // occur earlier; the reply is one-hot on the token that followed the most
    // recent earlier occurrence.
    bool copy = false;
    std::size_t repeat_len = 0;
    std::vector<double> probs;  // full distribution for non-copy rules
};

struct MockModelSpec {
    EndpointInfo info;
    std::vector<MockRule> rules;  // first match wins, declared order
    std::vector<double> default_probs;
};

namespace detail {

inline bool ends_with(std::span<const TokenId> ctx, std::span<const TokenId> tail) {
    return tail.size() <= ctx.size() && std::equal(tail.begin(), tail.end(), ctx.end() - tail.size());
}

inline bool contains_run(std::span<const TokenId> ctx, std::span<const TokenId> run) {
    if (run.empty()) return true;
    return std::search(ctx.begin(), ctx.end(), run.begin(), run.end()) != ctx.end();
}

// Token after the most recent earlier occurrence of the last `len` tokens.
inline std::optional<TokenId> induction_next(std::span<const TokenId> ctx, std::size_t len) {
    if (len == 0 || ctx.size() < len + 1) return std::nullopt;
    const auto tail = ctx.subspan(ctx.size() - len);
    for (std::size_t end = ctx.size() - 1; end-- > len - 1;) {
        // occurrence occupies [end - len + 1, end], followed by ctx[end + 1]
        if (std::equal(tail.begin(), tail.end(), ctx.begin() + (end + 1 - len))) return ctx[end + 1];
    }
    return std::nullopt;
}

inline std::vector<double> parse_mock_distribution(const nlohmann::json& j, std::size_t vocab) {
    std::vector<double> p(vocab, 0.0);
    if (j.contains("uniform") && j.at("uniform").get<bool>()) {
        std::fill(p.begin(), p.end(), 1.0 / static_cast<double>(vocab));
    } else if (j.contains("one_hot")) {
        const auto id = j.at("one_hot").get<TokenId>();
        if (id >= vocab) throw ConfigError("mock one_hot token outside the vocabulary");
        p[id] = 1.0;
    } else if (j.contains("probs")) {
        p = j.at("probs").get<std::vector<double>>();
        if (p.size() != vocab) throw ConfigError("mock probs length must equal vocab_size");
    } else if (j.contains("top")) {
        for (const auto& e : j.at("top")) {
            const auto id = e.at(0).get<TokenId>();
            if (id >= vocab) throw ConfigError("mock top token outside the vocabulary");
            p[id] += e.at(1).get<double>();
        }
    } else {
        throw ConfigError("mock distribution needs one of: uniform, one_hot, probs, top");
    }
    entropy_bits(p);
    return p;
}

inline nlohmann::json mock_distribution_json(const std::vector<double>& p) {
    nlohmann::json top = nlohmann::json::array();
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0) top.push_back({i, p[i]});
    }
    return {{"top", top}};
}

}  // namespace detail

inline MockModelSpec mock_spec_from_json(const nlohmann::json& j) {
    MockModelSpec s;
    try {
        s.info.vocab_size = j.at("vocab_size").get<std::size_t>();
        if (j.contains("bos_id")) s.info.special.bos = j.at("bos_id").get<TokenId>();
        if (j.contains("eos_id")) s.info.special.eos = j.at("eos_id").get<TokenId>();
        if (j.contains("special")) {
            for (const auto& [k, v] : j.at("special").items()) s.info.special.others[k] = v.get<TokenId>();
        }
        s.info.validate();
        s.default_probs = detail::parse_mock_distribution(j.value("default", nlohmann::json{{"uniform", true}}),
                                                          s.info.vocab_size);
        for (const auto& rj : j.value("rules", nlohmann::json::array())) {
            MockRule r;
            r.suffix = rj.value("suffix", std::vector<TokenId>{});
            r.contains = rj.value("contains", std::vector<TokenId>{});
            r.copy = rj.value("copy", false);
            r.repeat_len = rj.value("repeat_len", std::size_t{0});
            if (r.copy) {
                if (r.suffix.empty() && r.repeat_len == 0) throw ConfigError("copy rule needs a suffix or repeat_len");
            } else {
                r.probs = detail::parse_mock_distribution(rj.at("dist"), s.info.vocab_size);
            }
            s.rules.push_back(std::move(r));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed mock spec: ") + e.what());
    }
    return s;
}

inline nlohmann::json mock_spec_to_json(const MockModelSpec& s) {
    nlohmann::json j;
    j["vocab_size"] = s.info.vocab_size;
    if (s.info.special.bos) j["bos_id"] = *s.info.special.bos;
    if (s.info.special.eos) j["eos_id"] = *s.info.special.eos;
    if (!s.info.special.others.empty()) j["special"] = s.info.special.others;
    j["default"] = detail::mock_distribution_json(s.default_probs);
    nlohmann::json rules = nlohmann::json::array();
    for (const auto& r : s.rules) {
        nlohmann::json rj;
        if (!r.suffix.empty()) rj["suffix"] = r.suffix;
        if (!r.contains.empty()) rj["contains"] = r.contains;
        if (r.copy) {
            rj["copy"] = true;
            if (r.repeat_len) rj["repeat_len"] = r.repeat_len;
        } else {
            rj["dist"] = detail::mock_distribution_json(r.probs);
        }
        rules.push_back(rj);
    }
    j["rules"] = rules;
    return j;
}

inline MockModelSpec load_mock_spec(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open mock spec '" + path.string() + "'");
    try {
        return mock_spec_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("mock spec is not valid JSON: ") + e.what());
    }
}

// Pure function of (spec, tokens).
class MockEndpoint final : public ModelEndpoint {
public:
    explicit MockEndpoint(MockModelSpec spec) : ModelEndpoint(spec.info), spec_(std::move(spec)) {}

    const std::vector<double>& full_distribution(std::span<const TokenId> tokens, std::vector<double>& scratch) const {
        for (const auto& r : spec_.rules) {
            if (!detail::ends_with(tokens, r.suffix) || !detail::contains_run(tokens, r.contains)) continue;
            if (!r.copy) return r.probs;
            const auto next = detail::induction_next(tokens, r.repeat_len ? r.repeat_len : r.suffix.size());
            if (!next) continue;
            scratch.assign(spec_.info.vocab_size, 0.0);
            scratch[*next] = 1.0;
            return scratch;
        }
        return spec_.default_probs;
    }

protected:
    Distribution query(std::span<const TokenId> tokens, std::size_t top_k) override {
        std::vector<double> scratch;
        return Distribution::full(full_distribution(tokens, scratch)).truncated(top_k);
    }

private:
    MockModelSpec spec_;
};

// --- wire protocol --------------------------------------------------------------
//
// One JSON object per line, strictly request/reply:
//   {"id":n,"tokens":[...],"top_k":k}
//   {"id":n,"top":[[token_id,prob],...],"entropy_bits":e,"tail_mass":m}
// A server that cannot answer replies {"id":n,"error":"..."}.

namespace wire {

struct Request {
    std::uint64_t id = 0;
    std::vector<TokenId> tokens;
    std::size_t top_k = 1;
};

inline std::string encode_request(const Request& r) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["tokens"] = r.tokens;
    j["top_k"] = r.top_k;
    return j.dump();
}

inline Request decode_request(const std::string& line) {
    const auto j = nlohmann::json::parse(line);
    Request r;
    r.id = j.at("id").get<std::uint64_t>();
    r.tokens = j.at("tokens").get<std::vector<TokenId>>();
    r.top_k = j.at("top_k").get<std::size_t>();
    if (r.tokens.empty()) throw std::invalid_argument("tokens must be nonempty");
    if (r.top_k == 0) throw std::invalid_argument("top_k must be >= 1");
    return r;
}

inline std::string encode_reply(std::uint64_t id, const Distribution& d) {
    nlohmann::ordered_json j;
    j["id"] = id;
    nlohmann::ordered_json top = nlohmann::ordered_json::array();
    for (const auto& e : d.top_entries()) top.push_back({e.token, e.prob});
    j["top"] = top;
    j["entropy_bits"] = d.exact_entropy_bits();
    j["tail_mass"] = d.tail_mass();
    return j.dump();
}

inline std::string encode_error(std::optional<std::uint64_t> id, const std::string& message) {
    nlohmann::ordered_json j;
    j["id"] = id ? nlohmann::ordered_json(*id) : nlohmann::ordered_json(nullptr);
    j["error"] = message;
    return j.dump(-1, ' ', false, nlohmann::ordered_json::error_handler_t::replace);
}

struct Reply {
    std::uint64_t id = 0;
    std::optional<std::string> error;
    std::optional<Distribution> dist;
};

// Throws EndpointError(malformed_reply / inconsistent_reply).
inline Reply decode_reply(const std::string& line) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw EndpointError(EndpointError::Reason::malformed_reply, std::string("reply is not JSON: ") + e.what());
    }
    Reply r;
    try {
        r.id = j.at("id").get<std::uint64_t>();
        if (j.contains("error")) {
            r.error = j.at("error").get<std::string>();
            return r;
        }
        std::vector<TopEntry> top;
        for (const auto& e : j.at("top")) top.push_back({e.at(0).get<TokenId>(), e.at(1).get<double>()});
        const double h = j.at("entropy_bits").get<double>();
        const double tail = j.at("tail_mass").get<double>();
        try {
            r.dist = Distribution::top_k(std::move(top), tail, h);
        } catch (const InvalidDistribution& e) {
            throw EndpointError(EndpointError::Reason::inconsistent_reply, e.what());
        }
    } catch (const nlohmann::json::exception& e) {
        throw EndpointError(EndpointError::Reason::malformed_reply, std::string("malformed reply: ") + e.what());
    }
    return r;
}

// Server-side handling of one request line; never throws.
inline std::string handle_line(ModelEndpoint& endpoint, const std::string& line) {
    std::optional<std::uint64_t> id;
    try {
        const auto j = nlohmann::json::parse(line);
        if (j.is_object() && j.contains("id") && j.at("id").is_number_unsigned()) id = j.at("id").get<std::uint64_t>();
    } catch (const nlohmann::json::exception&) {
    }
    try {
        const auto req = decode_request(line);
        return encode_reply(req.id, endpoint.next_token_distribution(req.tokens, req.top_k));
    } catch (const std::exception& e) {
        return encode_error(id, e.what());
    }
}

}  // namespace wire

}  // namespace uprobe

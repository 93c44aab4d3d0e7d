#pragma once

// In-Context Learning Test: repeat the prompt after a candidate continuation
// and see whether the model's entropy collapses.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "uprobe/errors.hpp"
#include "uprobe/gateway.hpp"
#include "uprobe/records.hpp"
#include "uprobe/rng.hpp"

namespace uprobe {

enum class SeparatorConfig { bos, bos_and_eos, eos_only, none };

inline const char* to_string(SeparatorConfig s) {
    switch (s) {
        case SeparatorConfig::bos: return "bos";
        case SeparatorConfig::bos_and_eos: return "bos_eos";
        case SeparatorConfig::eos_only: return "eos";
        case SeparatorConfig::none: return "none";
    }
    return "?";
}

inline SeparatorConfig separator_from_string(const std::string& s) {
    if (s == "bos") return SeparatorConfig::bos;
    if (s == "bos_eos" || s == "bos_and_eos") return SeparatorConfig::bos_and_eos;
    if (s == "eos" || s == "eos_only") return SeparatorConfig::eos_only;
    if (s == "none") return SeparatorConfig::none;
    throw ConfigError("unknown separator '" + s + "' (expected bos, bos_eos, eos or none)");
}

struct RepetitionPrompt {
    TokenId candidate = 0;
    std::vector<TokenId> tokens;
};

namespace detail {

inline void require_special(SeparatorConfig sep, const SpecialTokens& special) {
    const bool need_bos = sep == SeparatorConfig::bos || sep == SeparatorConfig::bos_and_eos;
    const bool need_eos = sep == SeparatorConfig::bos_and_eos || sep == SeparatorConfig::eos_only;
    if (need_bos && !special.bos) throw ConfigError(std::string("separator ") + to_string(sep) + " needs a BOS token");
    if (need_eos && !special.eos) throw ConfigError(std::string("separator ") + to_string(sep) + " needs an EOS token");
}

// sep? ++ orig ++ context ++ sep? ++ orig
inline std::vector<TokenId> layout(std::span<const TokenId> orig, std::span<const TokenId> context, SeparatorConfig sep,
                                   const SpecialTokens& special) {
    std::vector<TokenId> t;
    t.reserve(2 * orig.size() + context.size() + 3);
    const bool bos = sep == SeparatorConfig::bos || sep == SeparatorConfig::bos_and_eos;
    const bool eos = sep == SeparatorConfig::bos_and_eos || sep == SeparatorConfig::eos_only;
    if (bos) t.push_back(*special.bos);
    t.insert(t.end(), orig.begin(), orig.end());
    t.insert(t.end(), context.begin(), context.end());
    if (eos) t.push_back(*special.eos);
    if (bos) t.push_back(*special.bos);
    t.insert(t.end(), orig.begin(), orig.end());
    return t;
}

}  // namespace detail

inline std::vector<RepetitionPrompt> build_repetition_prompts(std::span<const TokenId> orig,
                                                              std::span<const TokenId> candidates, SeparatorConfig sep,
                                                              const SpecialTokens& special) {
    if (orig.empty()) throw ConfigError("original prompt is empty");
    if (candidates.empty()) throw ConfigError("no candidates");
    if (std::set<TokenId>(candidates.begin(), candidates.end()).size() != candidates.size()) {
        throw ConfigError("candidates must be distinct");
    }
    detail::require_special(sep, special);
    std::vector<RepetitionPrompt> out;
    out.reserve(candidates.size());
    for (TokenId c : candidates) {
        const TokenId ctx[1] = {c};
        out.push_back({c, detail::layout(orig, ctx, sep, special)});
    }
    return out;
}

struct IcltScore {
    double min_entropy_bits = 0.0;
    double original_entropy_bits = 0.0;
    std::vector<TokenId> candidates;
    std::vector<double> candidate_entropies;
};

namespace detail {

template <class QueryFn>
IcltScore score_contexts(ModelEndpoint& endpoint, double original_entropy,
                         std::vector<TokenId> candidates, QueryFn&& prompt_for) {
    IcltScore s;
    s.original_entropy_bits = original_entropy;
    s.candidates = std::move(candidates);
    for (std::size_t i = 0; i < s.candidates.size(); ++i) {
        try {
            const auto prompt = prompt_for(i);
            s.candidate_entropies.push_back(endpoint.next_token_distribution(prompt, 1).exact_entropy_bits());
        } catch (EndpointError& e) {
            e.candidate = static_cast<int>(i);
            throw;
        }
    }
    s.min_entropy_bits = *std::min_element(s.candidate_entropies.begin(), s.candidate_entropies.end());
    return s;
}

// Zero-probability entries of the head are not candidates.
inline std::vector<TokenId> top_candidates(const Distribution& d, std::size_t k) {
    std::vector<TokenId> c;
    for (const auto& e : d.top(k)) {
        if (e.prob > 0.0) c.push_back(e.token);
    }
    if (c.empty()) throw EndpointError(EndpointError::Reason::inconsistent_reply, "reply has no positive-probability token");
    return c;
}

}  // namespace detail

inline IcltScore iclt_score(ModelEndpoint& endpoint, std::span<const TokenId> orig, std::size_t k = 10,
                            SeparatorConfig sep = SeparatorConfig::bos) {
    if (k == 0) throw ConfigError("ICLT needs k >= 1");
    detail::require_special(sep, endpoint.special_tokens());
    const auto base = endpoint.next_token_distribution(orig, k);
    auto candidates = detail::top_candidates(base, k);
    const auto prompts = build_repetition_prompts(orig, candidates, sep, endpoint.special_tokens());
    return detail::score_contexts(endpoint, base.exact_entropy_bits(), std::move(candidates),
                                  [&](std::size_t i) { return prompts[i].tokens; });
}

enum class AblationMode { additional_context, irrelevant_context, random_candidates };

inline const char* to_string(AblationMode m) {
    switch (m) {
        case AblationMode::additional_context: return "additional_context";
        case AblationMode::irrelevant_context: return "irrelevant_context";
        case AblationMode::random_candidates: return "random_candidates";
    }
    return "?";
}

inline AblationMode ablation_from_string(const std::string& s) {
    if (s == "additional_context") return AblationMode::additional_context;
    if (s == "irrelevant_context") return AblationMode::irrelevant_context;
    if (s == "random_candidates") return AblationMode::random_candidates;
    throw ConfigError("unknown ablation mode '" + s + "'");
}

struct AblationParams {
    std::size_t k = 10;
    SeparatorConfig sep = SeparatorConfig::bos;
    std::optional<TokenId> period;             // sentence terminator for greedy extension
    std::size_t max_extension = 64;
    std::vector<TokenId> irrelevant_block;     // inserted after the candidate
    std::uint64_t seed = 0;
};

// Greedy continuation of `prefix` until the period token (kept) or EOS
// (dropped), at most `cap` tokens.
inline std::vector<TokenId> greedy_extend(ModelEndpoint& endpoint, std::vector<TokenId> prefix,
                                          std::optional<TokenId> period, std::size_t cap) {
    std::vector<TokenId> ext;
    const auto eos = endpoint.special_tokens().eos;
    while (ext.size() < cap) {
        const TokenId t = endpoint.next_token_distribution(prefix, 1).top(1).at(0).token;
        if (eos && t == *eos) break;
        ext.push_back(t);
        prefix.push_back(t);
        if (period && t == *period) break;
    }
    return ext;
}

inline IcltScore iclt_ablation_context(ModelEndpoint& endpoint, std::span<const TokenId> orig, AblationMode mode,
                                       const AblationParams& p) {
    if (p.k == 0) throw ConfigError("ICLT needs k >= 1");
    if (orig.empty()) throw ConfigError("original prompt is empty");
    const auto& special = endpoint.special_tokens();
    detail::require_special(p.sep, special);
    const auto base = endpoint.next_token_distribution(orig, p.k);

    if (mode == AblationMode::random_candidates) {
        if (p.k > endpoint.vocab_size()) throw ConfigError("k exceeds the vocabulary size");
        Rng rng(derive_seed(p.seed, "random-candidates"));
        std::vector<TokenId> pool(endpoint.vocab_size());
        for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
        for (std::size_t i = 0; i < p.k; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
        pool.resize(p.k);
        const auto prompts = build_repetition_prompts(orig, pool, p.sep, special);
        return detail::score_contexts(endpoint, base.exact_entropy_bits(), pool,
                                      [&](std::size_t i) { return prompts[i].tokens; });
    }

    auto candidates = detail::top_candidates(base, p.k);
    if (mode == AblationMode::irrelevant_context) {
        if (p.irrelevant_block.empty()) throw ConfigError("irrelevant_context needs a nonempty irrelevant block");
        return detail::score_contexts(endpoint, base.exact_entropy_bits(), candidates, [&](std::size_t i) {
            std::vector<TokenId> ctx{candidates[i]};
            ctx.insert(ctx.end(), p.irrelevant_block.begin(), p.irrelevant_block.end());
            return detail::layout(orig, ctx, p.sep, special);
        });
    }

    return detail::score_contexts(endpoint, base.exact_entropy_bits(), candidates, [&](std::size_t i) {
        std::vector<TokenId> prefix(orig.begin(), orig.end());
        prefix.push_back(candidates[i]);
        std::vector<TokenId> ctx{candidates[i]};
        const auto ext = greedy_extend(endpoint, std::move(prefix), p.period, p.max_extension);
        ctx.insert(ctx.end(), ext.begin(), ext.end());
        return detail::layout(orig, ctx, p.sep, special);
    });
}

// --- designed mock suite ------------------------------------------------------

struct MockSuiteItem {
    std::vector<TokenId> prompt;
    int label = 0;  // 0 = context-copying (epistemic), 1 = context-ignoring
};

struct MockSuite {
    MockModelSpec spec;
    std::vector<MockSuiteItem> items;
};

// `per_class` copying prompts and `per_class` context-ignoring prompts. Item i
// of each class shares its no-context distribution with item i of the other,
// so the small-entropy scores of the two classes coincide.
inline MockSuite make_designed_mock_suite(std::size_t per_class = 100, std::uint64_t seed = 0) {
    constexpr TokenId kBos = 0, kEos = 1, kMarker = 2, kFirstPrompt = 10;
    constexpr std::size_t kSupport = 12;
    MockSuite suite;
    const TokenId first_answer = kFirstPrompt + 2 * per_class;
    suite.spec.info.vocab_size = first_answer + kSupport;
    suite.spec.info.special.bos = kBos;
    suite.spec.info.special.eos = kEos;
    suite.spec.default_probs.assign(suite.spec.info.vocab_size, 1.0 / static_cast<double>(suite.spec.info.vocab_size));

    Rng rng(derive_seed(seed, "mock-suite"));
    std::vector<std::vector<double>> shared(per_class);
    for (auto& p : shared) {
        p.assign(suite.spec.info.vocab_size, 0.0);
        const std::size_t width = 2 + rng.below(kSupport - 1);
        double total = 0.0;
        for (std::size_t j = 0; j < width; ++j) total += (p[first_answer + j] = 0.05 + rng.uniform());
        for (auto& x : p) x /= total;
    }
    for (int label = 0; label < 2; ++label) {
        for (std::size_t i = 0; i < per_class; ++i) {
            const TokenId head = kFirstPrompt + static_cast<TokenId>(label) * per_class + i;
            std::vector<TokenId> prompt{head, kMarker};
            if (label == 0) {
                MockRule copy;
                copy.suffix = prompt;
                copy.copy = true;
                suite.spec.rules.push_back(copy);
            }
            MockRule base;
            base.suffix = prompt;
            base.probs = shared[i];
            suite.spec.rules.push_back(base);
            suite.items.push_back({prompt, label});
        }
    }
    return suite;
}

}  // namespace uprobe

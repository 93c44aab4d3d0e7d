#include <gtest/gtest.h>

#include "support.hpp"
#include "uprobe/iclt.hpp"
#include "uprobe/metrics.hpp"

using namespace uprobe;

namespace {

SpecialTokens specials() {
    SpecialTokens s;
    s.bos = 1;
    s.eos = 2;
    return s;
}

// Context-insensitive mock: same distribution whatever the prompt.
MockModelSpec flat_spec(std::size_t vocab = 20) {
    MockModelSpec s;
    s.info.vocab_size = vocab;
    s.info.special = specials();
    s.default_probs.assign(vocab, 0.0);
    double total = 0.0;
    for (std::size_t i = 3; i < vocab; ++i) total += (s.default_probs[i] = static_cast<double>(i));
    for (auto& p : s.default_probs) p /= total;
    return s;
}

// Copies whatever followed an earlier occurrence of the last two tokens.
MockModelSpec copying_spec() {
    auto s = flat_spec();
    MockRule r;
    r.copy = true;
    r.repeat_len = 2;
    s.rules.push_back(r);
    return s;
}

}  // namespace

TEST(RepetitionPrompts, FourSeparatorLayoutsByteExact) {
    const std::vector<TokenId> orig{5, 6}, cand{9};
    const auto sp = specials();
    auto one = [&](SeparatorConfig sep) { return build_repetition_prompts(orig, cand, sep, sp).at(0).tokens; };
    EXPECT_EQ(one(SeparatorConfig::none), (std::vector<TokenId>{5, 6, 9, 5, 6}));
    EXPECT_EQ(one(SeparatorConfig::bos), (std::vector<TokenId>{1, 5, 6, 9, 1, 5, 6}));
    EXPECT_EQ(one(SeparatorConfig::bos_and_eos), (std::vector<TokenId>{1, 5, 6, 9, 2, 1, 5, 6}));
    EXPECT_EQ(one(SeparatorConfig::eos_only), (std::vector<TokenId>{5, 6, 9, 2, 5, 6}));
}

TEST(RepetitionPrompts, OnePromptPerCandidateInOrder) {
    const std::vector<TokenId> orig{5, 6};
    std::vector<TokenId> cands;
    for (TokenId c = 10; c < 20; ++c) cands.push_back(c);
    const auto before = orig;
    const auto a = build_repetition_prompts(orig, cands, SeparatorConfig::bos, specials());
    const auto b = build_repetition_prompts(orig, cands, SeparatorConfig::bos, specials());
    ASSERT_EQ(a.size(), 10u);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].candidate, cands[i]);
        EXPECT_EQ(a[i].tokens[3], cands[i]);
        EXPECT_EQ(std::count(a[i].tokens.begin(), a[i].tokens.end(), cands[i]), 1);
        EXPECT_EQ(a[i].tokens, b[i].tokens);
    }
    EXPECT_EQ(orig, before);
}

TEST(RepetitionPrompts, Errors) {
    const std::vector<TokenId> orig{5}, empty{}, dup{3, 3}, c{3};
    EXPECT_THROW(build_repetition_prompts(empty, c, SeparatorConfig::none, {}), ConfigError);
    EXPECT_THROW(build_repetition_prompts(orig, empty, SeparatorConfig::none, {}), ConfigError);
    EXPECT_THROW(build_repetition_prompts(orig, dup, SeparatorConfig::none, {}), ConfigError);
    SpecialTokens no_eos;
    no_eos.bos = 1;
    EXPECT_THROW(build_repetition_prompts(orig, c, SeparatorConfig::eos_only, no_eos), ConfigError);
    EXPECT_THROW(build_repetition_prompts(orig, c, SeparatorConfig::bos, SpecialTokens{}), ConfigError);
    EXPECT_NO_THROW(build_repetition_prompts(orig, c, SeparatorConfig::bos, no_eos));
}

TEST(Separator, StringRoundTrip) {
    for (auto s : {SeparatorConfig::bos, SeparatorConfig::bos_and_eos, SeparatorConfig::eos_only,
                   SeparatorConfig::none}) {
        EXPECT_EQ(separator_from_string(to_string(s)), s);
    }
    EXPECT_THROW(separator_from_string("semicolon"), ConfigError);
}

TEST(IcltScore, CopyingMockGivesZeroMinEntropy) {
    MockEndpoint ep(copying_spec());
    const std::vector<TokenId> orig{5, 6};
    const auto s = iclt_score(ep, orig, 10, SeparatorConfig::bos);
    EXPECT_EQ(s.candidates.size(), 10u);
    EXPECT_EQ(s.min_entropy_bits, 0.0);
    EXPECT_GT(s.original_entropy_bits, 3.0);
    for (double h : s.candidate_entropies) EXPECT_EQ(h, 0.0);
}

TEST(IcltScore, ContextInsensitiveMockKeepsOriginalEntropy) {
    MockEndpoint ep(flat_spec());
    const std::vector<TokenId> orig{5, 6};
    const auto s = iclt_score(ep, orig, 5, SeparatorConfig::bos);
    EXPECT_EQ(s.min_entropy_bits, s.original_entropy_bits);
    // Candidates are the top-5 tokens of the base distribution.
    EXPECT_EQ(s.candidates, (std::vector<TokenId>{19, 18, 17, 16, 15}));
}

TEST(IcltScore, MinIsBelowEveryCandidateAndKOneEqualsSinglePrompt) {
    const auto suite = make_designed_mock_suite(20, 3);
    MockEndpoint ep(suite.spec);
    for (const auto& item : suite.items) {
        const auto s = iclt_score(ep, item.prompt, 10);
        for (double h : s.candidate_entropies) EXPECT_LE(s.min_entropy_bits, h);
        const auto k1 = iclt_score(ep, item.prompt, 1);
        ASSERT_EQ(k1.candidates.size(), 1u);
        const auto prompt =
            build_repetition_prompts(item.prompt, k1.candidates, SeparatorConfig::bos, ep.special_tokens()).at(0);
        EXPECT_EQ(k1.min_entropy_bits, ep.next_token_distribution(prompt.tokens, 1).exact_entropy_bits());
    }
}

TEST(IcltScore, KZeroIsConfigError) {
    MockEndpoint ep(flat_spec());
    EXPECT_THROW(iclt_score(ep, std::vector<TokenId>{5}, 0), ConfigError);
}

TEST(IcltScore, ZeroProbabilityTokensAreNotCandidates) {
    auto spec = flat_spec(8);
    spec.default_probs.assign(8, 0.0);
    spec.default_probs[4] = 0.75;
    spec.default_probs[5] = 0.25;
    MockEndpoint ep(spec);
    const auto s = iclt_score(ep, std::vector<TokenId>{3}, 10);
    EXPECT_EQ(s.candidates, (std::vector<TokenId>{4, 5}));
}

TEST(MockSuite, IcltAucOneSmeAucHalf) {
    const auto suite = make_designed_mock_suite(100, 0);
    ASSERT_EQ(suite.items.size(), 200u);
    MockEndpoint ep(suite.spec);
    ScoredSet iclt, sme;
    for (const auto& item : suite.items) {
        const auto s = iclt_score(ep, item.prompt, 10);
        iclt.add(s.min_entropy_bits, item.label);
        sme.add(s.original_entropy_bits, item.label);
    }
    EXPECT_EQ(auroc(iclt), 1.0);
    EXPECT_NEAR(auroc(sme), 0.5, 0.05);
}

TEST(MockSuite, ContextInsensitiveMockIcltEqualsSme) {
    MockEndpoint ep(flat_spec());
    ScoredSet iclt, sme;
    Rng rng(4);
    for (int i = 0; i < 50; ++i) {
        const std::vector<TokenId> orig{3 + rng.below(17)};
        const auto s = iclt_score(ep, orig, 4);
        iclt.add(s.min_entropy_bits, i % 2);
        sme.add(s.original_entropy_bits, i % 2);
    }
    EXPECT_EQ(iclt.scores, sme.scores);
    EXPECT_EQ(auroc(iclt), auroc(sme));
}

TEST(Ablation, RandomCandidatesOnContextInsensitiveMock) {
    MockEndpoint ep(flat_spec());
    AblationParams p;
    p.k = 10;
    p.seed = 5;
    const auto s = iclt_ablation_context(ep, std::vector<TokenId>{5, 6}, AblationMode::random_candidates, p);
    EXPECT_EQ(s.min_entropy_bits, s.original_entropy_bits);
    EXPECT_EQ(std::set<TokenId>(s.candidates.begin(), s.candidates.end()).size(), 10u);
    const auto again = iclt_ablation_context(ep, std::vector<TokenId>{5, 6}, AblationMode::random_candidates, p);
    EXPECT_EQ(s.candidates, again.candidates);
}

TEST(Ablation, IrrelevantContextPromptShape) {
    // Records every prompt the harness sends.
    struct Recorder final : ModelEndpoint {
        std::vector<std::vector<TokenId>> seen;
        MockEndpoint inner;
        explicit Recorder(MockModelSpec s) : ModelEndpoint(s.info), inner(s) {}
        Distribution query(std::span<const TokenId> t, std::size_t k) override {
            seen.emplace_back(t.begin(), t.end());
            return inner.next_token_distribution(t, k);
        }
    };
    Recorder ep(flat_spec());
    AblationParams p;
    p.k = 2;
    p.irrelevant_block = {7, 8, 7};
    iclt_ablation_context(ep, std::vector<TokenId>{5, 6}, AblationMode::irrelevant_context, p);
    ASSERT_EQ(ep.seen.size(), 3u);
    EXPECT_EQ(ep.seen[1], (std::vector<TokenId>{1, 5, 6, 19, 7, 8, 7, 1, 5, 6}));
    EXPECT_EQ(ep.seen[2], (std::vector<TokenId>{1, 5, 6, 18, 7, 8, 7, 1, 5, 6}));
    p.irrelevant_block.clear();
    EXPECT_THROW(iclt_ablation_context(ep, std::vector<TokenId>{5, 6}, AblationMode::irrelevant_context, p),
                 ConfigError);
}

TEST(Ablation, AdditionalContextExtendsToPeriod) {
    // After 9 the model emits 10, then 11, then the period 12.
    auto spec = flat_spec();
    auto one_hot = [&](TokenId t) {
        std::vector<double> p(20, 0.0);
        p[t] = 1.0;
        return p;
    };
    spec.default_probs = one_hot(9);
    for (auto [from, to] : std::vector<std::pair<TokenId, TokenId>>{{9, 10}, {10, 11}, {11, 12}}) {
        MockRule r;
        r.suffix = {from};
        r.probs = one_hot(to);
        spec.rules.push_back(r);
    }
    struct Recorder final : ModelEndpoint {
        std::vector<std::vector<TokenId>> seen;
        MockEndpoint inner;
        explicit Recorder(MockModelSpec s) : ModelEndpoint(s.info), inner(s) {}
        Distribution query(std::span<const TokenId> t, std::size_t k) override {
            seen.emplace_back(t.begin(), t.end());
            return inner.next_token_distribution(t, k);
        }
    };
    Recorder ep(spec);
    AblationParams p;
    p.k = 1;
    p.period = 12;
    iclt_ablation_context(ep, std::vector<TokenId>{5, 6}, AblationMode::additional_context, p);
    EXPECT_EQ(ep.seen.back(), (std::vector<TokenId>{1, 5, 6, 9, 10, 11, 12, 1, 5, 6}));
}

TEST(Ablation, GreedyExtensionIsCapped) {
    auto spec = flat_spec();
    spec.default_probs.assign(20, 0.0);
    spec.default_probs[7] = 1.0;
    MockEndpoint ep(spec);
    const auto ext = greedy_extend(ep, {5}, std::nullopt, 64);
    EXPECT_EQ(ext.size(), 64u);
}

TEST(Ablation, ModeStrings) {
    for (auto m : {AblationMode::additional_context, AblationMode::irrelevant_context, AblationMode::random_candidates}) {
        EXPECT_EQ(ablation_from_string(to_string(m)), m);
    }
    EXPECT_THROW(ablation_from_string("nope"), ConfigError);
}

TEST(IcltScore, EndpointErrorsCarryCandidateIndex) {
    struct FailsThird final : ModelEndpoint {
        MockEndpoint inner;
        int calls = 0;
        explicit FailsThird(MockModelSpec s) : ModelEndpoint(s.info), inner(s) {}
        Distribution query(std::span<const TokenId> t, std::size_t k) override {
            if (++calls == 4) throw EndpointError(EndpointError::Reason::server_error, "down");
            return inner.next_token_distribution(t, k);
        }
    };
    FailsThird ep(flat_spec());
    try {
        iclt_score(ep, std::vector<TokenId>{5}, 5);
        FAIL();
    } catch (const EndpointError& e) {
        EXPECT_EQ(e.candidate, 2);
    }
}

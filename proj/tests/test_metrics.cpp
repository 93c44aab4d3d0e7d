#include <gtest/gtest.h>

#include "support.hpp"
#include "uprobe/metrics.hpp"

using namespace uprobe;

TEST(Auroc, MatchesBruteForceIncludingTies) {
    Rng rng(41);
    for (int i = 0; i < 1000; ++i) {
        const auto n = 2 + rng.below(199);
        const auto s = support::random_scored_set(rng, n, i % 2 == 0);
        const double brute = support::brute_force_auc(s);
        ASSERT_NEAR(auroc(s), brute, 1e-9) << i;
        ASSERT_NEAR(trapezoid_area(roc_curve(s)), brute, 1e-9) << i;
    }
}

TEST(Auroc, KnownValues) {
    ScoredSet perfect;
    perfect.scores = {0.1, 0.2, 0.8, 0.9};
    perfect.labels = {0, 0, 1, 1};
    EXPECT_DOUBLE_EQ(auroc(perfect), 1.0);
    ScoredSet inverted = perfect;
    inverted.labels = {1, 1, 0, 0};
    EXPECT_DOUBLE_EQ(auroc(inverted), 0.0);
    ScoredSet tied;
    tied.scores = {1, 1, 1, 1};
    tied.labels = {0, 1, 0, 1};
    EXPECT_DOUBLE_EQ(auroc(tied), 0.5);
}

TEST(Auroc, SingleClassIsAnError) {
    ScoredSet s;
    s.scores = {0.1, 0.2};
    s.labels = {1, 1};
    EXPECT_THROW(auroc(s), DataError);
    s.labels = {1, 2};
    EXPECT_THROW(auroc(s), DataError);
    s.labels = {1};
    EXPECT_THROW(auroc(s), DimensionError);
}

TEST(RocCurve, StartsAtOriginEndsAtOneMonotone) {
    Rng rng(42);
    const auto s = support::random_scored_set(rng, 150, true);
    const auto pts = roc_curve(s);
    ASSERT_GE(pts.size(), 2u);
    EXPECT_EQ(pts.front().fpr, 0.0);
    EXPECT_EQ(pts.front().tpr, 0.0);
    EXPECT_EQ(pts.back().fpr, 1.0);
    EXPECT_EQ(pts.back().tpr, 1.0);
    for (std::size_t i = 1; i < pts.size(); ++i) {
        EXPECT_GE(pts[i].fpr, pts[i - 1].fpr);
        EXPECT_GE(pts[i].tpr, pts[i - 1].tpr);
    }
}

namespace {

// Every candidate cut (all scores and +-inf) in both polarities.
double brute_best_accuracy(const ScoredSet& s) {
    std::vector<double> cuts = s.scores;
    cuts.push_back(-1e300);
    cuts.push_back(1e300);
    double best = 0.0;
    for (double c : cuts) {
        for (double eps : {-1e-9, 1e-9}) {
            std::size_t hi = 0, lo = 0;
            for (std::size_t i = 0; i < s.size(); ++i) {
                const bool above = s.scores[i] > c + eps;
                hi += (above ? 1 : 0) == s.labels[i];
                lo += (above ? 0 : 1) == s.labels[i];
            }
            best = std::max({best, static_cast<double>(hi) / s.size(), static_cast<double>(lo) / s.size()});
        }
    }
    return best;
}

}  // namespace

TEST(Bet, BestThresholdMatchesBruteForce) {
    Rng rng(43);
    for (int i = 0; i < 300; ++i) {
        auto s = support::random_scored_set(rng, 2 + rng.below(60), i % 3 == 0);
        const auto r = best_entropy_threshold(s);
        ASSERT_DOUBLE_EQ(r.accuracy, brute_best_accuracy(s)) << i;
        // The reported threshold and polarity reproduce the reported accuracy.
        std::size_t hit = 0;
        for (std::size_t k = 0; k < s.size(); ++k) {
            const bool above = s.scores[k] > r.threshold;
            hit += ((above == r.high_is_positive) ? 1 : 0) == s.labels[k];
        }
        ASSERT_DOUBLE_EQ(static_cast<double>(hit) / s.size(), r.accuracy) << i;
    }
}

TEST(Bet, FindsLowEntropyMeansEpistemicPolarity) {
    ScoredSet s;
    s.scores = {0.1, 0.2, 0.3, 2.0, 2.5, 3.0};
    s.labels = {0, 0, 0, 1, 1, 1};
    const auto r = best_entropy_threshold(s);
    EXPECT_EQ(r.accuracy, 1.0);
    EXPECT_TRUE(r.high_is_positive);
    EXPECT_DOUBLE_EQ(r.threshold, 1.15);
}

TEST(Accuracy, AtCutoff) {
    ScoredSet s;
    s.scores = {0.2, 0.5, 0.7, 0.4};
    s.labels = {0, 1, 1, 1};
    EXPECT_DOUBLE_EQ(accuracy_at(s), 0.75);
}

TEST(PrecisionRecall, ThresholdedRegression) {
    const std::vector<double> pred{0.1, 0.5, 2.0, 0.2};
    const std::vector<double> target{0.2, 1.5, 0.1, 0.3};
    const auto pr = threshold_pr(pred, target, 1.0);
    ASSERT_TRUE(pr.precision && pr.recall);
    EXPECT_DOUBLE_EQ(*pr.precision, 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(*pr.recall, 2.0 / 3.0);
    const auto none = threshold_pr({5, 6}, {5, 6}, 1.0);
    EXPECT_FALSE(none.precision);
    EXPECT_FALSE(none.recall);
}

TEST(Mse, Simple) {
    EXPECT_DOUBLE_EQ(mean_squared_error({1, 2, 3}, {1, 2, 5}), 4.0 / 3.0);
    EXPECT_THROW(mean_squared_error({1}, {1, 2}), DimensionError);
}

TEST(Baselines, SmeUsesSmallEntropy) {
    std::vector<LabeledExample> ex(4);
    const double small[] = {2.1, 2.9, 2.5, 2.2};
    for (int i = 0; i < 4; ++i) {
        ex[i].small_entropy_bits = small[i];
        ex[i].large_entropy_bits = small[i] - 0.5;
        ex[i].label = i % 2;
    }
    const auto s = sme_scores(ex);
    EXPECT_EQ(s.scores, std::vector<double>(small, small + 4));
    // positives 2.9 and 2.2 against negatives 2.1 and 2.5
    EXPECT_DOUBLE_EQ(auroc(s), 0.75);
    EXPECT_DOUBLE_EQ(sme_regression_mse(ex), 0.25);
}

TEST(Baselines, PieOnLabelIndependentLayerZeroIsChance) {
    // Layer 0 is pure noise; layer 5 carries the planted signal.
    auto p = support::planted_hyperplane(16, 3000, 400, 2000, 1.0, 44, 5);
    Rng rng(45);
    for (auto* set : {&p.train, &p.val, &p.test}) {
        for (auto& e : *set) {
            std::vector<float> v(16);
            for (auto& x : v) x = static_cast<float>(rng.normal());
            e.embeddings[0] = v;
        }
    }
    ProbeConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.seed = 1;
    const auto pie = pie_baseline(p.train, p.val, p.test, cfg);
    EXPECT_NEAR(auroc(pie.test_scores), 0.5, 0.05);
    EXPECT_EQ(pie.test_scores.provenance, "pie");
}

TEST(Baselines, PieWithoutLayerZeroIsDataError) {
    const auto p = support::planted_hyperplane(4, 50, 20, 20, 1.0, 46, 3);
    EXPECT_THROW(pie_baseline(p.train, p.val, p.test, ProbeConfig{}), DataError);
}

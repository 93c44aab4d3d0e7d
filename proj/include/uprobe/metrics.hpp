#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "uprobe/dataset.hpp"
#include "uprobe/errors.hpp"
#include "uprobe/probes.hpp"

namespace uprobe {

struct ScoredSet {
    std::vector<double> scores;
    std::vector<int> labels;  // 0 or 1
    std::string provenance;

    void add(double score, int label) {
        scores.push_back(score);
        labels.push_back(label);
    }
    std::size_t size() const { return scores.size(); }

    std::size_t positives() const {
        return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
    }

    void validate_for_auc() const {
        if (scores.size() != labels.size()) throw DimensionError("scores and labels differ in length");
        for (int l : labels) {
            if (l != 0 && l != 1) throw DataError("labels must be 0 or 1");
        }
        const auto pos = positives();
        if (pos == 0 || pos == labels.size()) {
            throw DataError("AUROC is undefined unless both classes are present");
        }
    }
};

// P(score_pos > score_neg) + 1/2 P(tie) via midranks (Mann-Whitney U).
inline double auroc(const ScoredSet& s) {
    s.validate_for_auc();
    const std::size_t n = s.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s.scores[a] < s.scores[b]; });
    double rank_sum_pos = 0.0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && s.scores[order[j + 1]] == s.scores[order[i]]) ++j;
        const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) {
            if (s.labels[order[k]] == 1) rank_sum_pos += midrank;
        }
        i = j + 1;
    }
    const double n_pos = static_cast<double>(s.positives());
    const double n_neg = static_cast<double>(n) - n_pos;
    return (rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

struct RocPoint {
    double fpr = 0.0;
    double tpr = 0.0;
};

// ROC vertices sweeping the threshold from +inf down; tied scores move
// diagonally in one step so the trapezoid area equals the midrank AUROC.
inline std::vector<RocPoint> roc_curve(const ScoredSet& s) {
    s.validate_for_auc();
    const std::size_t n = s.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s.scores[a] > s.scores[b]; });
    const double n_pos = static_cast<double>(s.positives());
    const double n_neg = static_cast<double>(n) - n_pos;
    std::vector<RocPoint> pts{{0.0, 0.0}};
    double tp = 0, fp = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && s.scores[order[j]] == s.scores[order[i]]) {
            (s.labels[order[j]] == 1 ? tp : fp) += 1;
            ++j;
        }
        pts.push_back({fp / n_neg, tp / n_pos});
        i = j;
    }
    return pts;
}

inline double trapezoid_area(const std::vector<RocPoint>& pts) {
    double area = 0.0;
    for (std::size_t i = 1; i < pts.size(); ++i) {
        area += (pts[i].fpr - pts[i - 1].fpr) * (pts[i].tpr + pts[i - 1].tpr) * 0.5;
    }
    return area;
}

// Fraction of rows where (score >= cutoff) equals the label.
inline double accuracy_at(const ScoredSet& s, double cutoff = 0.5) {
    if (s.size() == 0) throw DataError("accuracy of an empty set");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < s.size(); ++i) hit += ((s.scores[i] >= cutoff ? 1 : 0) == s.labels[i]) ? 1 : 0;
    return static_cast<double>(hit) / static_cast<double>(s.size());
}

struct ThresholdResult {
    double threshold = 0.0;
    double accuracy = 0.0;
    bool high_is_positive = true;  // predict label 1 when score > threshold
};

// Exhaustive sweep over midpoints between distinct sorted scores plus +-inf,
// in both polarities. Ties in accuracy go to the lowest threshold, then to
// the "high score => label 1" polarity.
inline ThresholdResult best_entropy_threshold(const ScoredSet& s) {
    if (s.size() == 0) throw DataError("threshold sweep over an empty set");
    std::vector<std::size_t> order(s.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s.scores[a] < s.scores[b]; });

    const double n = static_cast<double>(s.size());
    const double total_pos = static_cast<double>(s.positives());
    // Walk thresholds upward; below = rows with score < threshold.
    double pos_below = 0, neg_below = 0;
    ThresholdResult best{-std::numeric_limits<double>::infinity(), -1.0, true};
    auto consider = [&](double thr) {
        const double neg_total = n - total_pos;
        const double acc_high = (neg_below + (total_pos - pos_below)) / n;  // above => 1
        const double acc_low = (pos_below + (neg_total - neg_below)) / n;   // below => 1
        if (acc_high > best.accuracy) best = {thr, acc_high, true};
        if (acc_low > best.accuracy) best = {thr, acc_low, false};
    };
    consider(-std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && s.scores[order[j]] == s.scores[order[i]]) {
            (s.labels[order[j]] == 1 ? pos_below : neg_below) += 1;
            ++j;
        }
        const double thr = j < order.size() ? 0.5 * (s.scores[order[i]] + s.scores[order[j]])
                                            : std::numeric_limits<double>::infinity();
        consider(thr);
        i = j;
    }
    return best;
}

struct PrecisionRecall {
    std::optional<double> precision;  // undefined when nothing is predicted positive
    std::optional<double> recall;     // undefined when no target is positive
};

// Positive = value below the threshold (low large-model entropy).
inline PrecisionRecall threshold_pr(const std::vector<double>& predictions, const std::vector<double>& targets,
                                    double threshold_bits) {
    if (predictions.size() != targets.size()) throw DimensionError("predictions and targets differ in length");
    std::size_t tp = 0, pred_pos = 0, actual_pos = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const bool p = predictions[i] < threshold_bits;
        const bool a = targets[i] < threshold_bits;
        pred_pos += p;
        actual_pos += a;
        tp += p && a;
    }
    PrecisionRecall pr;
    if (pred_pos) pr.precision = static_cast<double>(tp) / static_cast<double>(pred_pos);
    if (actual_pos) pr.recall = static_cast<double>(tp) / static_cast<double>(actual_pos);
    return pr;
}

inline double mean_squared_error(const std::vector<double>& predictions, const std::vector<double>& targets) {
    if (predictions.size() != targets.size() || predictions.empty()) {
        throw DimensionError("MSE needs equal-length nonempty inputs");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const double d = predictions[i] - targets[i];
        s += d * d;
    }
    return s / static_cast<double>(predictions.size());
}

// --- baselines ----------------------------------------------------------------

// SME for classification: the small model's own entropy is the score.
inline ScoredSet sme_scores(const std::vector<LabeledExample>& examples) {
    ScoredSet s;
    s.provenance = "sme";
    for (const auto& e : examples) {
        if (!e.label) throw DataError("SME classification needs labeled examples");
        s.add(e.small_entropy_bits, *e.label);
    }
    return s;
}

// SME for regression: predict the small entropy; error against the large entropy.
inline double sme_regression_mse(const std::vector<LabeledExample>& examples) {
    std::vector<double> pred, target;
    for (const auto& e : examples) {
        if (!e.large_entropy_bits) throw DataError("SME regression needs large-model entropies");
        pred.push_back(e.small_entropy_bits);
        target.push_back(*e.large_entropy_bits);
    }
    return mean_squared_error(pred, target);
}

inline constexpr std::int32_t kInitialEmbeddingLayer = 0;

// PIE: a standard probe on layer-0 (initial) embeddings.
inline void require_initial_embeddings(const std::vector<LabeledExample>& examples) {
    for (const auto& e : examples) {
        if (!e.embeddings.contains(kInitialEmbeddingLayer)) {
            throw DataError(
                "PIE baseline needs layer-0 embeddings: dump the records with layer tag 0 and rebuild the dataset");
        }
    }
}

inline ScoredSet probe_scores(const ProbeModel& model, const std::vector<LabeledExample>& examples,
                              std::int32_t layer, std::string provenance) {
    const auto data = make_probe_data(examples, layer, ProbeTask::binary);
    const auto sc = model.scores(data.x);
    ScoredSet s;
    s.provenance = std::move(provenance);
    for (std::size_t i = 0; i < examples.size(); ++i) s.add(sc(static_cast<Eigen::Index>(i)), *examples[i].label);
    return s;
}

struct PieResult {
    ProbeModel model;
    ScoredSet test_scores;
};

inline PieResult pie_baseline(const std::vector<LabeledExample>& train, const std::vector<LabeledExample>& val,
                              const std::vector<LabeledExample>& test, const ProbeConfig& cfg) {
    require_initial_embeddings(train);
    require_initial_embeddings(val);
    require_initial_embeddings(test);
    auto model = train_probe(train, val, kInitialEmbeddingLayer, cfg);
    auto scores = probe_scores(model, test, kInitialEmbeddingLayer, "pie");
    return {std::move(model), std::move(scores)};
}

}  // namespace uprobe

#pragma once

// Generators and independent oracles shared by the unit tests and the
// acceptance binary.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <boost/multiprecision/cpp_dec_float.hpp>

#include "uprobe/dataset.hpp"
#include "uprobe/metrics.hpp"
#include "uprobe/records.hpp"
#include "uprobe/rng.hpp"

namespace support {

using uprobe::Rng;
using HP = boost::multiprecision::cpp_dec_float_50;

// Random distribution over n outcomes: a mix of flat, peaked, sparse and
// one-hot shapes so the extremes of the measures are exercised.
inline std::vector<double> random_distribution(Rng& rng, std::size_t n) {
    std::vector<double> p(n, 0.0);
    const auto shape = rng.below(4);
    if (shape == 3) {
        p[rng.below(n)] = 1.0;
        return p;
    }
    double total = 0.0;
    for (auto& x : p) {
        double v = rng.uniform();
        if (shape == 1) v = std::pow(v, 8.0);
        if (shape == 2 && rng.bernoulli(0.5)) v = 0.0;
        x = v;
        total += v;
    }
    if (total == 0.0) {
        p[0] = 1.0;
        return p;
    }
    for (auto& x : p) x /= total;
    return p;
}

inline HP hp_log2(const HP& x) { return log(x) / log(HP(2)); }

// Oracles below take the doubles as exact inputs and sum in 50 digits.
inline double oracle_entropy(const std::vector<double>& p) {
    HP h = 0;
    for (double x : p) {
        if (x > 0) h -= HP(x) * hp_log2(HP(x));
    }
    return static_cast<double>(h);
}

inline double oracle_jsd(const std::vector<double>& p, const std::vector<double>& q) {
    HP total = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const HP m = (HP(p[i]) + HP(q[i])) / 2;
        if (p[i] > 0) total += HP(p[i]) * hp_log2(HP(p[i]) / m);
        if (q[i] > 0) total += HP(q[i]) * hp_log2(HP(q[i]) / m);
    }
    return static_cast<double>(total / 2);
}

// All-pairs Mann-Whitney statistic: P(pos > neg) + 1/2 P(tie).
inline double brute_force_auc(const uprobe::ScoredSet& s) {
    double wins = 0.0, pairs = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s.labels[i] != 1) continue;
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (s.labels[j] != 0) continue;
            pairs += 1.0;
            if (s.scores[i] > s.scores[j]) wins += 1.0;
            else if (s.scores[i] == s.scores[j]) wins += 0.5;
        }
    }
    return wins / pairs;
}

// Scores drawn from a small grid when `heavy_ties`, so many values repeat.
inline uprobe::ScoredSet random_scored_set(Rng& rng, std::size_t n, bool heavy_ties) {
    uprobe::ScoredSet s;
    while (true) {
        s.scores.clear();
        s.labels.clear();
        for (std::size_t i = 0; i < n; ++i) {
            const int label = rng.bernoulli(0.5) ? 1 : 0;
            double score = heavy_ties ? static_cast<double>(rng.below(4)) : rng.normal() + 0.7 * label;
            s.add(score, label);
        }
        const auto pos = s.positives();
        if (pos > 0 && pos < n) return s;
    }
}

struct CorpusSpec {
    std::size_t n = 50000;
    std::size_t dim = 8;
    std::vector<std::int32_t> layers{0, 16};
    std::size_t n_prev_tokens = 20;
    std::size_t docs = 500;
};

// Token records whose entropies cover the band and both gapped classes, with
// prev-token frequencies that differ by class so balancing has work to do.
inline std::vector<uprobe::TokenRecord> synthetic_corpus(const CorpusSpec& spec, std::uint64_t seed) {
    Rng rng(uprobe::derive_seed(seed, "corpus"));
    std::vector<uprobe::TokenRecord> out;
    out.reserve(spec.n);
    for (std::size_t i = 0; i < spec.n; ++i) {
        uprobe::TokenRecord r;
        r.doc_id = "doc" + std::to_string(rng.below(spec.docs));
        r.position = i;
        r.token_id = rng.below(1000);
        r.small_entropy_bits = rng.uniform(0.0, 5.0);
        const auto kind = rng.below(3);
        if (kind == 0) {
            r.large_entropy_bits = rng.uniform(0.0, 0.4);
        } else if (kind == 1) {
            r.large_entropy_bits = std::max(0.0, r.small_entropy_bits + rng.uniform(-0.2, 0.2));
        } else {
            r.large_entropy_bits = rng.uniform(0.0, 5.0);
        }
        // Skewed prev-token distribution that depends on the large entropy.
        const double u = rng.uniform();
        const double skew = *r.large_entropy_bits < 0.2 ? 2.0 : 0.5;
        r.prev_token_id = static_cast<std::uint64_t>(std::pow(u, skew) * static_cast<double>(spec.n_prev_tokens));
        for (auto layer : spec.layers) {
            std::vector<float> v(spec.dim);
            for (auto& x : v) x = static_cast<float>(rng.normal());
            r.embeddings[layer] = std::move(v);
        }
        r.meta = "small/large";
        out.push_back(std::move(r));
    }
    return out;
}

struct Planted {
    std::vector<uprobe::LabeledExample> train, val, test;
    std::vector<double> w;
    double b = 0.0;
};

// Binary task with a known separating plane: |w.x + b| >= margin / 2 for every
// point, label = [w.x + b > 0].
inline Planted planted_hyperplane(std::size_t dim, std::size_t n_train, std::size_t n_val, std::size_t n_test,
                                  double margin, std::uint64_t seed, std::int32_t layer = 0) {
    Rng rng(uprobe::derive_seed(seed, "plane"));
    Planted p;
    p.w.resize(dim);
    double norm = 0.0;
    for (auto& x : p.w) {
        x = rng.normal();
        norm += x * x;
    }
    for (auto& x : p.w) x /= std::sqrt(norm);
    p.b = 0.3;
    auto make = [&](std::size_t n, std::vector<uprobe::LabeledExample>& out) {
        while (out.size() < n) {
            std::vector<float> v(dim);
            double s = p.b;
            for (std::size_t j = 0; j < dim; ++j) {
                v[j] = static_cast<float>(rng.normal());
                s += p.w[j] * v[j];
            }
            if (std::abs(s) < margin / 2) continue;
            uprobe::LabeledExample e;
            e.doc_id = "p" + std::to_string(out.size());
            e.label = s > 0 ? 1 : 0;
            e.embeddings[layer] = std::move(v);
            out.push_back(std::move(e));
        }
    };
    make(n_train, p.train);
    make(n_val, p.val);
    make(n_test, p.test);
    return p;
}

// Regression targets equal to a fixed linear map of the embedding.
inline Planted planted_linear_map(std::size_t dim, std::size_t n_train, std::size_t n_val, std::size_t n_test,
                                  std::uint64_t seed, std::int32_t layer = 0) {
    Rng rng(uprobe::derive_seed(seed, "linear-map"));
    Planted p;
    p.w.resize(dim);
    for (auto& x : p.w) x = rng.normal() / std::sqrt(static_cast<double>(dim));
    p.b = 1.5;
    auto make = [&](std::size_t n, std::vector<uprobe::LabeledExample>& out) {
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<float> v(dim);
            double s = p.b;
            for (std::size_t j = 0; j < dim; ++j) {
                v[j] = static_cast<float>(rng.normal());
                s += p.w[j] * v[j];
            }
            uprobe::LabeledExample e;
            e.doc_id = "r" + std::to_string(i);
            e.target = s;
            e.embeddings[layer] = std::move(v);
            out.push_back(std::move(e));
        }
    };
    make(n_train, p.train);
    make(n_val, p.val);
    make(n_test, p.test);
    return p;
}

// |observed - expected| <= 3 sigma for a binomial count.
inline bool within_3sigma(double observed, double n, double p) {
    const double sigma = std::sqrt(n * p * (1.0 - p));
    return std::abs(observed - n * p) <= 3.0 * sigma + 1e-9;
}

inline std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("uprobe_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace support

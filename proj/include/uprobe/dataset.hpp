#pragma once

// Turns token records into probe-ready labeled examples: entropy-band
// filtering, gapped or thresholded labeling, per-previous-token class
// balancing, regression targets and low-entropy upsampling.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uprobe/envelope.hpp"
#include "uprobe/errors.hpp"
#include "uprobe/records.hpp"
#include "uprobe/rng.hpp"

namespace uprobe {

// Half-open band [lo, hi) of small-model entropy.
struct BandSpec {
    double lo = 2.0;
    double hi = 3.0;

    void validate() const {
        if (!(lo >= 0.0 && lo < hi)) throw ConfigError("band must satisfy 0 <= lo < hi");
    }
    bool contains(double h) const { return h >= lo && h < hi; }
};

struct GapSpec {
    double near_zero_hi = 0.2;
    double delta = 0.1;

    void validate(const BandSpec& band) const {
        if (!(near_zero_hi > 0.0)) throw ConfigError("gap near-zero bound must be > 0");
        if (!(delta > 0.0)) throw ConfigError("gap delta must be > 0");
        if (!(near_zero_hi < band.lo)) throw ConfigError("gap near-zero bound must lie below the band");
    }
};

struct LabeledExample {
    std::string doc_id;
    std::uint64_t position = 0;
    TokenId prev_token_id = 0;
    double small_entropy_bits = 0.0;
    std::optional<double> large_entropy_bits;
    std::optional<int> label;      // 0 = near-zero / epistemic-like, 1 = high / aleatoric-like
    std::optional<double> target;  // regression target
    std::map<std::int32_t, std::vector<float>> embeddings;

    const std::vector<float>& embedding(std::int32_t layer) const {
        const auto it = embeddings.find(layer);
        if (it == embeddings.end()) {
            throw DataError("example has no embedding for layer " + std::to_string(layer));
        }
        return it->second;
    }

    bool operator==(const LabeledExample&) const = default;
};

enum class BalanceMode { probabilistic, deterministic };

struct BuildReport {
    std::size_t input = 0;
    std::size_t skipped_missing_large = 0;
    std::size_t skipped_missing_layer = 0;
    std::size_t after_band = 0;
    std::size_t after_labeling = 0;
    std::size_t after_balancing = 0;
    std::size_t class0 = 0;
    std::size_t class1 = 0;

    bool empty() const { return after_balancing == 0; }

    nlohmann::json to_json() const {
        return {{"input", input},
                {"skipped_missing_large", skipped_missing_large},
                {"skipped_missing_layer", skipped_missing_layer},
                {"after_band", after_band},
                {"after_labeling", after_labeling},
                {"after_balancing", after_balancing},
                {"class_counts", {{"0", class0}, {"1", class1}}}};
    }
};

struct BuildResult {
    std::vector<LabeledExample> examples;
    BuildReport report;

    // An empty result is reported, not thrown.
    bool empty() const { return examples.empty(); }
};

inline LabeledExample to_example(const TokenRecord& r) {
    LabeledExample e;
    e.doc_id = r.doc_id;
    e.position = r.position;
    e.prev_token_id = r.prev_token_id;
    e.small_entropy_bits = r.small_entropy_bits;
    e.large_entropy_bits = r.large_entropy_bits;
    e.embeddings = r.embeddings;
    return e;
}

// Within each previous-token group T, label l survives with probability
// min(|T0|, |T1|) / |Tl| (probabilistic) or exactly min(|T0|, |T1|) of each
// label survive (deterministic). Output keeps input order.
inline std::vector<LabeledExample> balance_by_prev_token(std::vector<LabeledExample> examples, BalanceMode mode,
                                                         std::uint64_t seed) {
    std::map<TokenId, std::array<std::vector<std::size_t>, 2>> groups;
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const auto& e = examples[i];
        if (!e.label || (*e.label != 0 && *e.label != 1)) throw DataError("balancing requires binary labels");
        groups[e.prev_token_id][*e.label].push_back(i);
    }
    std::vector<char> keep(examples.size(), 0);
    Rng rng(derive_seed(seed, "balance"));
    for (auto& [prev, by_label] : groups) {
        const std::size_t m = std::min(by_label[0].size(), by_label[1].size());
        if (m == 0) continue;
        for (auto& members : by_label) {
            if (mode == BalanceMode::deterministic) {
                auto chosen = members;
                rng.shuffle(chosen);
                for (std::size_t j = 0; j < m; ++j) keep[chosen[j]] = 1;
            } else {
                const double p = static_cast<double>(m) / static_cast<double>(members.size());
                for (std::size_t idx : members) keep[idx] = rng.uniform() < p ? 1 : 0;
            }
        }
    }
    std::vector<LabeledExample> out;
    for (std::size_t i = 0; i < examples.size(); ++i) {
        if (keep[i]) out.push_back(std::move(examples[i]));
    }
    return out;
}

struct BuildOptions {
    BandSpec band;
    std::int32_t layer = -1;
    BalanceMode balance = BalanceMode::probabilistic;
    std::uint64_t seed = 0;
};

namespace detail {

template <typename Labeler>
BuildResult build_classification_set(const std::vector<TokenRecord>& records, const BuildOptions& opt,
                                      Labeler&& labeler) {
    opt.band.validate();
    BuildResult result;
    auto& rep = result.report;
    rep.input = records.size();
    std::vector<LabeledExample> labeled;
    for (const auto& r : records) {
        if (!r.large_entropy_bits) {
            ++rep.skipped_missing_large;
            continue;
        }
        if (!r.embeddings.contains(opt.layer)) {
            ++rep.skipped_missing_layer;
            continue;
        }
        if (!opt.band.contains(r.small_entropy_bits)) continue;
        ++rep.after_band;
        const std::optional<int> label = labeler(r.small_entropy_bits, *r.large_entropy_bits);
        if (!label) continue;
        auto e = to_example(r);
        e.label = *label;
        labeled.push_back(std::move(e));
    }
    rep.after_labeling = labeled.size();
    result.examples = balance_by_prev_token(std::move(labeled), opt.balance, opt.seed);
    rep.after_balancing = result.examples.size();
    for (const auto& e : result.examples) (*e.label == 0 ? rep.class0 : rep.class1)++;
    return result;
}

}  // namespace detail

// Label 0 when the large model's entropy is in [0, near_zero_hi), label 1 when
// it is within delta of the token's own small-model entropy; otherwise drop.
inline std::optional<int> gapped_label(double small, double large, const GapSpec& gap) {
    if (large >= 0.0 && large < gap.near_zero_hi) return 0;
    if (std::abs(large - small) <= gap.delta) return 1;
    return std::nullopt;
}

inline BuildResult build_gapped_classification_set(const std::vector<TokenRecord>& records, const BuildOptions& opt,
                                                   const GapSpec& gap) {
    gap.validate(opt.band);
    return detail::build_classification_set(
        records, opt, [&](double small, double large) { return gapped_label(small, large, gap); });
}

inline BuildResult build_threshold_classification_set(const std::vector<TokenRecord>& records,
                                                      const BuildOptions& opt, double threshold_bits = 1.0) {
    if (!(threshold_bits > 0.0)) throw ConfigError("threshold must be > 0 bits");
    return detail::build_classification_set(records, opt, [&](double, double large) -> std::optional<int> {
        return large >= threshold_bits ? 1 : 0;
    });
}

enum class RegressionObjective { entropy, log_entropy, jsd, log_jsd };

// Regression target for one record, or nullopt when the record must be
// excluded (log of a zero quantity). Missing inputs are errors.
inline std::optional<double> make_regression_target(const TokenRecord& r, RegressionObjective objective) {
    double value = 0.0;
    switch (objective) {
        case RegressionObjective::entropy:
        case RegressionObjective::log_entropy:
            if (!r.large_entropy_bits) throw DataError("record has no large-model entropy");
            value = *r.large_entropy_bits;
            break;
        case RegressionObjective::jsd:
        case RegressionObjective::log_jsd:
            if (!r.small_probs || !r.large_probs) {
                throw DataError("JSD objectives need full small/large distributions dumped with the records");
            }
            value = jensen_shannon_bits(*r.small_probs, *r.large_probs);
            break;
    }
    if (objective == RegressionObjective::log_entropy || objective == RegressionObjective::log_jsd) {
        if (value <= 0.0) return std::nullopt;
        return std::log(value);
    }
    return value;
}

struct RegressionBuild {
    std::vector<LabeledExample> examples;
    BuildReport report;
    std::size_t excluded_log_zero = 0;
};

inline RegressionBuild build_regression_set(const std::vector<TokenRecord>& records, const BuildOptions& opt,
                                            RegressionObjective objective) {
    opt.band.validate();
    RegressionBuild out;
    out.report.input = records.size();
    for (const auto& r : records) {
        if (!r.large_entropy_bits) {
            ++out.report.skipped_missing_large;
            continue;
        }
        if (!r.embeddings.contains(opt.layer)) {
            ++out.report.skipped_missing_layer;
            continue;
        }
        if (!opt.band.contains(r.small_entropy_bits)) continue;
        ++out.report.after_band;
        const auto t = make_regression_target(r, objective);
        if (!t) {
            ++out.excluded_log_zero;
            continue;
        }
        auto e = to_example(r);
        e.target = *t;
        out.examples.push_back(std::move(e));
    }
    out.report.after_labeling = out.examples.size();
    out.report.after_balancing = out.examples.size();
    return out;
}

inline double upsample_acceptance(double large_entropy_bits, double alpha, double epsilon) {
    return std::min(1.0, 1.0 / std::max(epsilon, alpha * large_entropy_bits));
}

// Keeps each example with probability min(1, 1 / max(eps, alpha * H_large)).
inline std::vector<LabeledExample> upsample_low_entropy(std::vector<LabeledExample> examples, double alpha,
                                                        double epsilon, std::uint64_t seed) {
    if (!(alpha > 0.0) || !(epsilon > 0.0)) throw ConfigError("upsampling needs alpha > 0 and epsilon > 0");
    Rng rng(derive_seed(seed, "upsample"));
    std::vector<LabeledExample> out;
    for (auto& e : examples) {
        if (!e.large_entropy_bits) throw DataError("upsampling requires large-model entropy on every example");
        if (rng.uniform() < upsample_acceptance(*e.large_entropy_bits, alpha, epsilon)) out.push_back(std::move(e));
    }
    return out;
}

enum class Split { train, validation, test };

// Document-level split from a hash of the doc id: 90/5/5 by default.
inline Split split_of(const std::string& doc_id, int train_pct = 90, int val_pct = 5) {
    const auto bucket = static_cast<int>(splitmix64(fnv1a64(doc_id)) % 100);
    if (bucket < train_pct) return Split::train;
    if (bucket < train_pct + val_pct) return Split::validation;
    return Split::test;
}

struct LabeledExampleCodec {
    using value_type = LabeledExample;
    static constexpr int payload = static_cast<int>(PayloadVariant::labeled_example);

    static void encode(const LabeledExample& e, detail::ByteWriter& w) {
        w.put_string(e.doc_id);
        w.put(e.position);
        w.put(e.prev_token_id);
        w.put(e.small_entropy_bits);
        w.put(static_cast<std::uint8_t>(e.large_entropy_bits ? 1 : 0));
        w.put(e.large_entropy_bits.value_or(0.0));
        w.put(static_cast<std::int8_t>(e.label ? *e.label : -1));
        w.put(static_cast<std::uint8_t>(e.target ? 1 : 0));
        w.put(e.target.value_or(0.0));
        detail::put_embeddings(e.embeddings, w);
    }

    static LabeledExample decode(detail::ByteReader& r, const FileHeader&) {
        LabeledExample e;
        e.doc_id = r.get_string();
        e.position = r.get<std::uint64_t>();
        e.prev_token_id = r.get<std::uint64_t>();
        e.small_entropy_bits = r.get<double>();
        const bool has_large = r.get<std::uint8_t>() != 0;
        const double large = r.get<double>();
        if (has_large) e.large_entropy_bits = large;
        const auto label = r.get<std::int8_t>();
        if (label >= 0) e.label = label;
        const bool has_target = r.get<std::uint8_t>() != 0;
        const double target = r.get<double>();
        if (has_target) e.target = target;
        e.embeddings = detail::get_embeddings(r);
        return e;
    }

    static nlohmann::json to_json(const LabeledExample& e) {
        nlohmann::json j;
        j["doc_id"] = e.doc_id;
        j["position"] = e.position;
        j["prev_token_id"] = e.prev_token_id;
        j["small_entropy_bits"] = e.small_entropy_bits;
        if (e.large_entropy_bits) j["large_entropy_bits"] = *e.large_entropy_bits;
        if (e.label) j["label"] = *e.label;
        if (e.target) j["target"] = *e.target;
        j["embeddings"] = detail::embeddings_to_json(e.embeddings);
        return j;
    }

    static LabeledExample from_json(const nlohmann::json& j, const FileHeader&) {
        LabeledExample e;
        e.doc_id = j.at("doc_id").get<std::string>();
        e.position = j.at("position").get<std::uint64_t>();
        e.prev_token_id = j.at("prev_token_id").get<std::uint64_t>();
        e.small_entropy_bits = j.at("small_entropy_bits").get<double>();
        if (j.contains("large_entropy_bits")) e.large_entropy_bits = j.at("large_entropy_bits").get<double>();
        if (j.contains("label")) e.label = j.at("label").get<int>();
        if (j.contains("target")) e.target = j.at("target").get<double>();
        e.embeddings = detail::embeddings_from_json(j.at("embeddings"));
        return e;
    }

    static void check(const LabeledExample& e, const FileHeader& h) { check_embedding_dims(e.embeddings, h); }
};

using ExampleWriter = EnvelopeWriter<LabeledExampleCodec>;
using ExampleReader = EnvelopeReader<LabeledExampleCodec>;

inline std::vector<LabeledExample> read_examples(std::istream& in, FileHeader* header_out = nullptr) {
    ExampleReader r(in);
    if (header_out) *header_out = r.header();
    std::vector<LabeledExample> out;
    while (auto e = r.next()) out.push_back(std::move(*e));
    return out;
}

inline void write_examples(const std::vector<LabeledExample>& examples, std::ostream& out, FileHeader header) {
    header.count = examples.size();
    ExampleWriter w(out, std::move(header));
    for (const auto& e : examples) w.write(e);
    w.finish();
}

}  // namespace uprobe

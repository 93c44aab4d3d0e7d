#pragma once

// Experiment configuration: one JSON document with optional sections
// (dataset, train, iclt, synthetic). Unknown keys and type errors are
// collected and reported together.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uprobe/dataset.hpp"
#include "uprobe/errors.hpp"
#include "uprobe/iclt.hpp"
#include "uprobe/probes.hpp"
#include "uprobe/rng.hpp"
#include "uprobe/synthetic.hpp"

namespace uprobe {

class SchemaError : public ConfigError {
public:
    explicit SchemaError(std::vector<std::string> problems)
        : ConfigError(join(problems)), problems_(std::move(problems)) {}
    const std::vector<std::string>& problems() const { return problems_; }

private:
    static std::string join(const std::vector<std::string>& p) {
        std::string s = std::to_string(p.size()) + " config problem(s)";
        for (const auto& x : p) s += "; " + x;
        return s;
    }
    std::vector<std::string> problems_;
};

struct UpsampleSpec {
    double alpha = 1.0;
    double epsilon = 0.1;
};

struct DatasetSection {
    std::vector<std::string> records;
    BandSpec band;
    std::optional<GapSpec> gap;  // gapped labels when set
    std::optional<double> threshold;
    std::optional<RegressionObjective> regression;
    std::int32_t layer = -1;
    BalanceMode balance = BalanceMode::probabilistic;
    std::optional<UpsampleSpec> upsample;
    int train_pct = 90;
    int val_pct = 5;
};

struct TrainSection {
    std::string train;  // dataset directory or file
    std::string eval;   // optional cross-domain evaluation set
    ProbeConfig probe;
    std::int32_t layer = -1;
    std::vector<std::string> baselines{"bet", "sme"};
};

struct IcltSection {
    std::string endpoint;
    std::string prompts;  // JSONL: {"doc_id", "position", "tokens", "label"?}
    SeparatorConfig sep = SeparatorConfig::bos;
    std::size_t top_k = 10;
    std::optional<std::size_t> vocab_size;
    std::optional<TokenId> bos, eos;
    int timeout_ms = 30000;
    bool mock_suite = false;  // score the built-in designed mock suite
    std::optional<AblationMode> ablation;
    std::optional<TokenId> period;
    std::vector<TokenId> irrelevant;
};

struct SyntheticSection {
    int bits = 10;
    int questions = 512;
    double epistemic_fraction = 0.5;
    double duplication_rate = 0.6;
    int shots = 4;
    int n_eval = 512;
    synthetic::ToyTrainConfig train;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    DatasetSection dataset;
    TrainSection train;
    IcltSection iclt;
    SyntheticSection synthetic;
};

inline std::string to_string(RegressionObjective o) {
    switch (o) {
        case RegressionObjective::entropy: return "entropy";
        case RegressionObjective::log_entropy: return "log_entropy";
        case RegressionObjective::jsd: return "jsd";
        case RegressionObjective::log_jsd: return "log_jsd";
    }
    return "?";
}

namespace detail {

// Walks a JSON object, recording every problem instead of stopping at the first.
class SchemaReader {
public:
    std::vector<std::string> problems;

    bool object(const nlohmann::json& j, const std::string& path, std::initializer_list<const char*> allowed) {
        if (!j.is_object()) {
            problems.push_back(path + ": expected an object");
            return false;
        }
        for (const auto& [k, v] : j.items()) {
            bool ok = false;
            for (const char* a : allowed) ok = ok || k == a;
            if (!ok) problems.push_back(path + "." + k + ": unknown key");
        }
        return true;
    }

    template <class T>
    void get(const nlohmann::json& j, const std::string& path, const char* key, T& out) {
        if (!j.contains(key)) return;
        try {
            out = j.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            problems.push_back(path + "." + key + ": wrong type");
        }
    }

    template <class T>
    void get(const nlohmann::json& j, const std::string& path, const char* key, std::optional<T>& out) {
        if (!j.contains(key) || j.at(key).is_null()) return;
        T v{};
        try {
            v = j.at(key).get<T>();
            out = v;
        } catch (const nlohmann::json::exception&) {
            problems.push_back(path + "." + key + ": wrong type");
        }
    }

    template <class E, class Parse>
    void get_enum(const nlohmann::json& j, const std::string& path, const char* key, E& out, Parse&& parse) {
        std::string s;
        if (!j.contains(key)) return;
        get(j, path, key, s);
        try {
            out = parse(s);
        } catch (const ConfigError& e) {
            problems.push_back(path + "." + key + ": " + e.what());
        }
    }

    void check(bool ok, const std::string& message) {
        if (!ok) problems.push_back(message);
    }
};

inline std::pair<double, double> pair_or(const nlohmann::json& j, SchemaReader& r, const std::string& path,
                                         std::pair<double, double> def) {
    if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number()) {
        r.problems.push_back(path + ": expected [number, number]");
        return def;
    }
    return {j[0].get<double>(), j[1].get<double>()};
}

inline BalanceMode balance_from_string(const std::string& s) {
    if (s == "probabilistic") return BalanceMode::probabilistic;
    if (s == "deterministic") return BalanceMode::deterministic;
    throw ConfigError("expected probabilistic or deterministic, got '" + s + "'");
}

inline RegressionObjective objective_from_string(const std::string& s) {
    if (s == "entropy") return RegressionObjective::entropy;
    if (s == "log_entropy") return RegressionObjective::log_entropy;
    if (s == "jsd") return RegressionObjective::jsd;
    if (s == "log_jsd") return RegressionObjective::log_jsd;
    throw ConfigError("unknown regression objective '" + s + "'");
}

inline ProbeKind probe_kind_from_string(const std::string& s) {
    if (s == "linear") return ProbeKind::linear;
    if (s == "mlp") return ProbeKind::mlp;
    throw ConfigError("probe must be linear or mlp, got '" + s + "'");
}

inline ProbeLoss probe_loss_from_string(const std::string& s) {
    if (s == "cross_entropy") return ProbeLoss::cross_entropy;
    if (s == "mse") return ProbeLoss::mse;
    if (s == "mse_pu") return ProbeLoss::mse_pu;
    throw ConfigError("unknown probe loss '" + s + "'");
}

inline synthetic::LossPositions loss_positions_from_string(const std::string& s) {
    if (s == "answers") return synthetic::LossPositions::answers;
    if (s == "all") return synthetic::LossPositions::all;
    throw ConfigError("unknown loss_positions '" + s + "' (answers or all)");
}

}  // namespace detail

// Semantic checks on a fully assembled config (after flag overrides).
inline std::vector<std::string> config_problems(const ExperimentConfig& c) {
    std::vector<std::string> p;
    auto check = [&](bool ok, const std::string& m) {
        if (!ok) p.push_back(m);
    };
    const auto& d = c.dataset;
    check(d.band.lo >= 0.0 && d.band.lo < d.band.hi, "dataset.band: need 0 <= lo < hi");
    if (d.gap) {
        check(d.gap->near_zero_hi > 0.0, "dataset.gap.near_zero_hi: must be > 0");
        check(d.gap->delta > 0.0, "dataset.gap.delta: must be > 0");
        check(d.gap->near_zero_hi < d.band.lo, "dataset.gap.near_zero_hi: must lie below band lo");
    }
    if (d.threshold) check(*d.threshold > 0.0, "dataset.threshold: must be > 0");
    check(int(d.gap.has_value()) + int(d.threshold.has_value()) + int(d.regression.has_value()) <= 1,
          "dataset: gap, threshold and regression are mutually exclusive");
    if (d.upsample) {
        check(d.upsample->alpha > 0.0, "dataset.upsample.alpha: must be > 0");
        check(d.upsample->epsilon > 0.0, "dataset.upsample.epsilon: must be > 0");
    }
    check(d.train_pct > 0 && d.val_pct > 0 && d.train_pct + d.val_pct < 100,
          "dataset.split: need train_pct > 0, val_pct > 0 and train_pct + val_pct < 100");

    const auto& pr = c.train.probe;
    if (pr.kind == ProbeKind::mlp) check(pr.hidden_dim > 0, "train.probe.hidden_dim: must be > 0");
    check(pr.learning_rate > 0.0, "train.probe.learning_rate: must be > 0");
    check(pr.batch_size > 0, "train.probe.batch_size: must be > 0");
    check(pr.max_epochs > 0, "train.probe.max_epochs: must be > 0");
    check(pr.patience >= 1, "train.probe.patience: must be >= 1");
    check(pr.pu_alpha >= 0.0, "train.probe.pu_alpha: must be >= 0");
    for (const auto& b : c.train.baselines) {
        check(b == "bet" || b == "sme" || b == "pie", "train.baselines: unknown baseline '" + b + "'");
    }

    check(c.iclt.top_k >= 1, "iclt.top_k: must be >= 1");
    check(c.iclt.timeout_ms > 0, "iclt.timeout_ms: must be > 0");
    if (c.iclt.vocab_size) check(*c.iclt.vocab_size > 0, "iclt.vocab_size: must be > 0");
    if (c.iclt.ablation == AblationMode::irrelevant_context) {
        check(!c.iclt.irrelevant.empty(), "iclt.irrelevant: irrelevant_context needs a token block");
    }

    const auto& s = c.synthetic;
    check(s.bits >= 1 && s.bits <= 30, "synthetic.bits: must be in [1, 30]");
    check(s.questions >= 1 && (s.bits >= 30 || s.questions <= (1 << s.bits)),
          "synthetic.questions: must be in [1, 2^bits]");
    check(s.epistemic_fraction > 0.0 && s.epistemic_fraction < 1.0, "synthetic.epistemic_fraction: must be in (0, 1)");
    check(s.duplication_rate >= 0.0 && s.duplication_rate <= 1.0, "synthetic.duplication_rate: must be in [0, 1]");
    check(s.shots >= 0, "synthetic.shots: must be >= 0");
    check(s.n_eval >= 1, "synthetic.n_eval: must be >= 1");
    check(s.train.steps > 0, "synthetic.steps: must be > 0");
    check(s.train.batch_size > 0, "synthetic.batch_size: must be > 0");
    check(s.train.learning_rate > 0.0, "synthetic.learning_rate: must be > 0");
    check(s.train.weight_decay >= 0.0, "synthetic.weight_decay: must be >= 0");
    check(s.train.warmup_steps >= 0, "synthetic.warmup_steps: must be >= 0");
    check(s.train.width > 0 && s.train.heads > 0 && s.train.width % s.train.heads == 0,
          "synthetic.width: must be a positive multiple of heads");
    check(s.train.layers > 0, "synthetic.layers: must be > 0");
    return p;
}

inline void validate_config(const ExperimentConfig& c) {
    auto p = config_problems(c);
    if (!p.empty()) throw SchemaError(std::move(p));
}

// Parses and validates; every schema and range problem is reported at once.
inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
    detail::SchemaReader r;
    ExperimentConfig c;
    if (!r.object(j, "config", {"seed", "dataset", "train", "iclt", "synthetic"})) throw SchemaError(r.problems);
    r.get(j, "config", "seed", c.seed);

    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        const std::string p = "dataset";
        if (r.object(d, p, {"records", "band", "gap", "threshold", "regression", "layer", "balance", "upsample",
                            "train_pct", "val_pct"})) {
            r.get(d, p, "records", c.dataset.records);
            if (d.contains("band")) {
                const auto b = detail::pair_or(d.at("band"), r, p + ".band", {c.dataset.band.lo, c.dataset.band.hi});
                c.dataset.band = {b.first, b.second};
            }
            if (d.contains("gap") && !d.at("gap").is_null()) {
                const auto g = detail::pair_or(d.at("gap"), r, p + ".gap", {0.2, 0.1});
                c.dataset.gap = GapSpec{g.first, g.second};
            }
            r.get(d, p, "threshold", c.dataset.threshold);
            if (d.contains("regression") && !d.at("regression").is_null()) {
                RegressionObjective o{};
                r.get_enum(d, p, "regression", o, detail::objective_from_string);
                c.dataset.regression = o;
            }
            r.get(d, p, "layer", c.dataset.layer);
            r.get_enum(d, p, "balance", c.dataset.balance, detail::balance_from_string);
            if (d.contains("upsample") && !d.at("upsample").is_null()) {
                const auto& u = d.at("upsample");
                UpsampleSpec us;
                if (r.object(u, p + ".upsample", {"alpha", "epsilon"})) {
                    r.get(u, p + ".upsample", "alpha", us.alpha);
                    r.get(u, p + ".upsample", "epsilon", us.epsilon);
                }
                c.dataset.upsample = us;
            }
            r.get(d, p, "train_pct", c.dataset.train_pct);
            r.get(d, p, "val_pct", c.dataset.val_pct);
        }
    }

    if (j.contains("train")) {
        const auto& t = j.at("train");
        const std::string p = "train";
        if (r.object(t, p, {"train", "eval", "probe", "layer", "baselines"})) {
            r.get(t, p, "train", c.train.train);
            r.get(t, p, "eval", c.train.eval);
            r.get(t, p, "layer", c.train.layer);
            r.get(t, p, "baselines", c.train.baselines);
            if (t.contains("probe")) {
                const auto& pj = t.at("probe");
                const std::string pp = p + ".probe";
                auto& pc = c.train.probe;
                if (r.object(pj, pp, {"kind", "hidden_dim", "learning_rate", "batch_size", "max_epochs", "patience",
                                      "loss", "pu_alpha", "zscore"})) {
                    r.get_enum(pj, pp, "kind", pc.kind, detail::probe_kind_from_string);
                    r.get(pj, pp, "hidden_dim", pc.hidden_dim);
                    r.get(pj, pp, "learning_rate", pc.learning_rate);
                    r.get(pj, pp, "batch_size", pc.batch_size);
                    r.get(pj, pp, "max_epochs", pc.max_epochs);
                    r.get(pj, pp, "patience", pc.patience);
                    r.get_enum(pj, pp, "loss", pc.loss, detail::probe_loss_from_string);
                    r.get(pj, pp, "pu_alpha", pc.pu_alpha);
                    r.get(pj, pp, "zscore", pc.zscore);
                }
            }
        }
    }

    if (j.contains("iclt")) {
        const auto& t = j.at("iclt");
        const std::string p = "iclt";
        if (r.object(t, p, {"endpoint", "prompts", "sep", "top_k", "vocab_size", "bos", "eos", "timeout_ms",
                            "mock_suite", "ablation", "period", "irrelevant"})) {
            r.get(t, p, "endpoint", c.iclt.endpoint);
            r.get(t, p, "prompts", c.iclt.prompts);
            r.get_enum(t, p, "sep", c.iclt.sep, separator_from_string);
            r.get(t, p, "top_k", c.iclt.top_k);
            r.get(t, p, "vocab_size", c.iclt.vocab_size);
            r.get(t, p, "bos", c.iclt.bos);
            r.get(t, p, "eos", c.iclt.eos);
            r.get(t, p, "timeout_ms", c.iclt.timeout_ms);
            r.get(t, p, "mock_suite", c.iclt.mock_suite);
            if (t.contains("ablation") && !t.at("ablation").is_null()) {
                AblationMode m{};
                r.get_enum(t, p, "ablation", m, ablation_from_string);
                c.iclt.ablation = m;
            }
            r.get(t, p, "period", c.iclt.period);
            r.get(t, p, "irrelevant", c.iclt.irrelevant);
        }
    }

    if (j.contains("synthetic")) {
        const auto& t = j.at("synthetic");
        const std::string p = "synthetic";
        auto& s = c.synthetic;
        if (r.object(t, p, {"bits", "questions", "epistemic_fraction", "duplication_rate", "shots", "n_eval", "steps",
                            "batch_size", "learning_rate", "weight_decay", "warmup_steps", "width", "layers",
                            "heads", "loss_positions"})) {
            r.get(t, p, "bits", s.bits);
            r.get(t, p, "questions", s.questions);
            r.get(t, p, "epistemic_fraction", s.epistemic_fraction);
            r.get(t, p, "duplication_rate", s.duplication_rate);
            r.get(t, p, "shots", s.shots);
            r.get(t, p, "n_eval", s.n_eval);
            r.get(t, p, "steps", s.train.steps);
            r.get(t, p, "batch_size", s.train.batch_size);
            r.get(t, p, "learning_rate", s.train.learning_rate);
            r.get(t, p, "weight_decay", s.train.weight_decay);
            r.get(t, p, "warmup_steps", s.train.warmup_steps);
            r.get(t, p, "width", s.train.width);
            r.get(t, p, "layers", s.train.layers);
            r.get(t, p, "heads", s.train.heads);
            r.get_enum(t, p, "loss_positions", s.train.loss_positions, detail::loss_positions_from_string);
        }
    }

    auto semantic = config_problems(c);
    r.problems.insert(r.problems.end(), semantic.begin(), semantic.end());
    if (!r.problems.empty()) throw SchemaError(r.problems);
    return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError({std::string("config is not valid JSON: ") + e.what()});
    }
    return parse_experiment_config(j);
}

// Canonical form of the effective config: every field, sorted keys.
inline nlohmann::json config_to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["seed"] = c.seed;
    const auto& d = c.dataset;
    j["dataset"] = {{"records", d.records},
                    {"band", {d.band.lo, d.band.hi}},
                    {"gap", d.gap ? nlohmann::json{d.gap->near_zero_hi, d.gap->delta} : nlohmann::json(nullptr)},
                    {"threshold", d.threshold ? nlohmann::json(*d.threshold) : nlohmann::json(nullptr)},
                    {"regression", d.regression ? nlohmann::json(to_string(*d.regression)) : nlohmann::json(nullptr)},
                    {"layer", d.layer},
                    {"balance", d.balance == BalanceMode::probabilistic ? "probabilistic" : "deterministic"},
                    {"upsample", d.upsample ? nlohmann::json{{"alpha", d.upsample->alpha}, {"epsilon", d.upsample->epsilon}}
                                            : nlohmann::json(nullptr)},
                    {"train_pct", d.train_pct},
                    {"val_pct", d.val_pct}};
    auto probe = probe_config_json(c.train.probe);
    probe.erase("seed");
    probe.erase("task");
    j["train"] = {{"train", c.train.train},
                  {"eval", c.train.eval},
                  {"layer", c.train.layer},
                  {"baselines", c.train.baselines},
                  {"probe", probe}};
    auto opt = [](const auto& o) { return o ? nlohmann::json(*o) : nlohmann::json(nullptr); };
    j["iclt"] = {{"endpoint", c.iclt.endpoint}, {"prompts", c.iclt.prompts},
                 {"sep", to_string(c.iclt.sep)}, {"top_k", c.iclt.top_k},
                 {"vocab_size", opt(c.iclt.vocab_size)}, {"bos", opt(c.iclt.bos)},
                 {"eos", opt(c.iclt.eos)}, {"timeout_ms", c.iclt.timeout_ms},
                 {"mock_suite", c.iclt.mock_suite},
                 {"ablation", c.iclt.ablation ? nlohmann::json(to_string(*c.iclt.ablation)) : nlohmann::json(nullptr)},
                 {"period", opt(c.iclt.period)}, {"irrelevant", c.iclt.irrelevant}};
    const auto& s = c.synthetic;
    j["synthetic"] = {{"bits", s.bits},
                      {"questions", s.questions},
                      {"epistemic_fraction", s.epistemic_fraction},
                      {"duplication_rate", s.duplication_rate},
                      {"shots", s.shots},
                      {"n_eval", s.n_eval},
                      {"steps", s.train.steps},
                      {"batch_size", s.train.batch_size},
                      {"learning_rate", s.train.learning_rate},
                      {"weight_decay", s.train.weight_decay},
                      {"warmup_steps", s.train.warmup_steps},
                      {"width", s.train.width},
                      {"layers", s.train.layers},
                      {"heads", s.train.heads},
                      {"loss_positions", s.train.loss_positions == synthetic::LossPositions::all ? "all" : "answers"}};
    return j;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string config_hash(const ExperimentConfig& c) { return hex64(fnv1a64(config_to_json(c).dump())); }

// Content hash of a file, used to tag metrics with dataset provenance.
inline std::string file_hash(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return hex64(fnv1a64(ss.str()));
}

}  // namespace uprobe

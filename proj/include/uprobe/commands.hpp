#pragma once

// Subcommand bodies. Each takes the effective config and an output directory
// and writes only inside that directory. Every artifact carries the config
// hash and the seed.

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uprobe/config.hpp"
#include "uprobe/dataset.hpp"
#include "uprobe/gateway.hpp"
#include "uprobe/iclt.hpp"
#include "uprobe/metrics.hpp"
#include "uprobe/probes.hpp"
#include "uprobe/records.hpp"
#include "uprobe/report.hpp"
#include "uprobe/synthetic.hpp"
#include "uprobe/transport.hpp"

namespace uprobe::cmd {

namespace fs = std::filesystem;

namespace detail {

inline void write_text(const fs::path& path, const std::string& text) {
    auto out = open_output(path);
    out << text;
    if (!out) throw IoError("failed writing " + path.string());
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline nlohmann::json provenance(const ExperimentConfig& c) {
    return {{"config_hash", config_hash(c)}, {"seed", c.seed}};
}

inline void make_out_dir(const fs::path& out) {
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IoError("cannot create output directory " + out.string() + ": " + ec.message());
}

inline std::vector<LabeledExample> read_example_file(const fs::path& p, FileHeader* header = nullptr) {
    auto in = open_input(p);
    return read_examples(in, header);
}

// A dataset directory resolves to one of its split files; a file is used as is.
inline fs::path split_file(const fs::path& p, const char* split) {
    if (fs::is_directory(p)) return p / (std::string(split) + ".uprb");
    return p;
}

struct MetricsTable {
    std::string train_hash, eval_hash, config_hash;
    std::uint64_t seed = 0;
    std::string body = csv_row({"method", "metric", "value", "train_hash", "eval_hash", "config_hash", "seed"});

    void add(const std::string& method, const std::string& metric, double value) {
        body += csv_row({method, metric, fmt_double(value), train_hash, eval_hash, config_hash, std::to_string(seed)});
    }
};

}  // namespace detail

// --- build-dataset --------------------------------------------------------------

inline nlohmann::json build_dataset(const ExperimentConfig& c, const fs::path& out) {
    validate_config(c);
    const auto& d = c.dataset;
    if (d.records.empty()) throw ConfigError("build-dataset needs at least one record file");
    std::vector<TokenRecord> records;
    std::string meta;
    for (const auto& path : d.records) {
        auto part = read_record_file(path);
        if (!part.empty() && meta.empty()) meta = part.front().meta;
        records.insert(records.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    }
    detail::make_out_dir(out);

    BuildOptions opt;
    opt.band = d.band;
    opt.layer = d.layer;
    opt.balance = d.balance;
    opt.seed = c.seed;

    std::vector<LabeledExample> examples;
    BuildReport report;
    std::string task = "binary";
    std::string labeling;
    nlohmann::json extra = nlohmann::json::object();
    if (d.regression) {
        auto r = build_regression_set(records, opt, *d.regression);
        examples = std::move(r.examples);
        report = r.report;
        task = "regression";
        labeling = "regression:" + to_string(*d.regression);
        extra["excluded_log_zero"] = r.excluded_log_zero;
    } else if (d.threshold) {
        auto r = build_threshold_classification_set(records, opt, *d.threshold);
        examples = std::move(r.examples);
        report = r.report;
        labeling = "threshold";
    } else {
        auto r = build_gapped_classification_set(records, opt, d.gap.value_or(GapSpec{}));
        examples = std::move(r.examples);
        report = r.report;
        labeling = "gapped";
    }
    if (d.upsample) {
        examples = upsample_low_entropy(std::move(examples), d.upsample->alpha, d.upsample->epsilon, c.seed);
        extra["after_upsampling"] = examples.size();
    }

    std::map<Split, std::vector<LabeledExample>> parts;
    for (auto& e : examples) parts[split_of(e.doc_id, d.train_pct, d.val_pct)].push_back(std::move(e));

    FileHeader header;
    header.meta = meta;
    if (!records.empty()) {
        for (const auto& [tag, vec] : records.front().embeddings) header.dims[tag] = static_cast<std::uint32_t>(vec.size());
    }
    header.info = detail::provenance(c);
    header.info["task"] = task;
    header.info["labeling"] = labeling;
    header.info["layer"] = d.layer;

    nlohmann::json split_counts;
    const std::pair<Split, const char*> names[] = {
        {Split::train, "train"}, {Split::validation, "val"}, {Split::test, "test"}};
    for (const auto& [split, name] : names) {
        auto h = header;
        h.info["split"] = name;
        auto o = open_output(out / (std::string(name) + ".uprb"));
        write_examples(parts[split], o, h);
        split_counts[name] = parts[split].size();
    }

    nlohmann::json summary = detail::provenance(c);
    summary["report"] = report.to_json();
    summary["report"].update(extra);
    summary["splits"] = split_counts;
    summary["task"] = task;
    summary["labeling"] = labeling;
    summary["config"] = config_to_json(c);
    detail::write_json(out / "build_report.json", summary);
    return summary;
}

// --- train-eval ---------------------------------------------------------------------

inline nlohmann::json train_eval(const ExperimentConfig& c, const fs::path& out) {
    validate_config(c);
    const auto& t = c.train;
    if (t.train.empty()) throw ConfigError("train-eval needs a training dataset (--train)");
    const fs::path train_dir = t.train;
    if (!fs::is_directory(train_dir)) throw IoError("training dataset directory not found: " + train_dir.string());
    const auto train_file = detail::split_file(train_dir, "train");
    const auto val_file = detail::split_file(train_dir, "val");
    const auto eval_file = detail::split_file(t.eval.empty() ? train_dir : fs::path(t.eval), "test");

    FileHeader train_header;
    const auto train = detail::read_example_file(train_file, &train_header);
    const auto val = detail::read_example_file(val_file);
    const auto test = detail::read_example_file(eval_file);
    for (const auto& [part, file] : {std::pair{&train, &train_file}, {&val, &val_file}, {&test, &eval_file}}) {
        if (part->empty()) throw DataError("no examples in " + file->string());
    }
    detail::make_out_dir(out);

    const std::string task = train_header.info.value("task", std::string("binary"));
    ProbeConfig pc = t.probe;
    pc.seed = derive_seed(c.seed, "probe");
    pc.task = task == "regression" ? ProbeTask::regression : ProbeTask::binary;
    if (pc.task == ProbeTask::regression && pc.loss == ProbeLoss::cross_entropy) pc.loss = ProbeLoss::mse;
    if (pc.task == ProbeTask::binary) pc.loss = ProbeLoss::cross_entropy;

    detail::MetricsTable m;
    m.train_hash = file_hash(train_file);
    m.eval_hash = file_hash(eval_file);
    m.config_hash = config_hash(c);
    m.seed = c.seed;

    const auto model = train_probe(make_probe_data(train, t.layer, pc.task), make_probe_data(val, t.layer, pc.task), pc);
    const std::string probe_name = "probe_" + to_string(pc.kind);
    {
        FileHeader h;
        h.info = detail::provenance(c);
        h.info["train_hash"] = m.train_hash;
        h.info["layer"] = t.layer;
        h.count = 1;
        auto o = open_output(out / "probe.uprb");
        EnvelopeWriter<ProbeModelCodec> w(o, h);
        w.write(model);
        w.finish();
    }

    nlohmann::json summary = detail::provenance(c);
    summary["task"] = task;
    summary["train_hash"] = m.train_hash;
    summary["eval_hash"] = m.eval_hash;
    summary["counts"] = {{"train", train.size()}, {"val", val.size()}, {"eval", test.size()}};

    if (pc.task == ProbeTask::binary) {
        std::string roc = csv_row({"curve", "fpr", "tpr"});
        auto add_scored = [&](const std::string& method, const ScoredSet& s) {
            const double auc = auroc(s);
            m.add(method, "auc", auc);
            summary["auc"][method] = auc;
            roc += roc_csv(method, roc_curve(s), false);
        };
        const auto ps = probe_scores(model, test, t.layer, probe_name);
        add_scored(probe_name, ps);
        m.add(probe_name, "accuracy", accuracy_at(ps, 0.5));
        for (const auto& b : t.baselines) {
            if (b == "sme") {
                add_scored("sme", sme_scores(test));
            } else if (b == "bet") {
                const auto fit = best_entropy_threshold(sme_scores(train));
                const auto s = sme_scores(test);
                std::size_t hit = 0;
                for (std::size_t i = 0; i < s.size(); ++i) {
                    const bool above = s.scores[i] > fit.threshold;
                    hit += (above == fit.high_is_positive ? 1 : 0) == s.labels[i] ? 1 : 0;
                }
                m.add("bet", "accuracy", static_cast<double>(hit) / static_cast<double>(s.size()));
                m.add("bet", "threshold_bits", fit.threshold);
                m.add("bet", "train_accuracy", fit.accuracy);
            } else if (b == "pie") {
                auto pie_cfg = pc;
                pie_cfg.seed = derive_seed(c.seed, "pie");
                const auto pie = pie_baseline(train, val, test, pie_cfg);
                add_scored("pie", pie.test_scores);
                m.add("pie", "accuracy", accuracy_at(pie.test_scores, 0.5));
            }
        }
        detail::write_text(out / "roc.csv", roc);
    } else {
        const auto data = make_probe_data(test, t.layer, ProbeTask::regression);
        const auto pred = model.raw_outputs(data.x);
        std::vector<double> p(pred.data(), pred.data() + pred.size());
        std::vector<double> y(data.y.data(), data.y.data() + data.y.size());
        m.add(probe_name, "mse", mean_squared_error(p, y));
        if (train_header.info.value("labeling", std::string()) == "regression:entropy") {
            const double thr = c.dataset.threshold.value_or(1.0);
            const auto pr = threshold_pr(p, y, thr);
            if (pr.precision) m.add(probe_name, "precision", *pr.precision);
            if (pr.recall) m.add(probe_name, "recall", *pr.recall);
            m.add(probe_name, "threshold_bits", thr);
        }
        for (const auto& b : t.baselines) {
            if (b == "sme") m.add("sme", "mse_vs_large_entropy", sme_regression_mse(test));
        }
    }
    detail::write_text(out / "metrics.csv", m.body);
    detail::write_json(out / "summary.json", summary);
    return summary;
}

// --- iclt ---------------------------------------------------------------------------

struct PromptItem {
    std::string doc_id;
    std::uint64_t position = 0;
    std::vector<TokenId> tokens;
    std::optional<int> label;
};

inline std::vector<PromptItem> read_prompts(const fs::path& path) {
    auto in = open_input(path);
    std::vector<PromptItem> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            PromptItem p;
            p.doc_id = j.value("doc_id", std::string("line") + std::to_string(n));
            p.position = j.value("position", std::uint64_t{0});
            p.tokens = j.at("tokens").get<std::vector<TokenId>>();
            if (j.contains("label") && !j.at("label").is_null()) p.label = j.at("label").get<int>();
            out.push_back(std::move(p));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(ParseError::Reason::malformed,
                             path.string() + ":" + std::to_string(n) + ": bad prompt line: " + e.what());
        }
    }
    return out;
}

inline nlohmann::json iclt(const ExperimentConfig& c, const fs::path& out) {
    validate_config(c);
    const auto& ic = c.iclt;
    detail::make_out_dir(out);
    std::unique_ptr<ModelEndpoint> endpoint;
    std::vector<PromptItem> prompts;
    if (ic.mock_suite) {
        auto suite = make_designed_mock_suite(100, c.seed);
        std::string lines;
        for (std::size_t i = 0; i < suite.items.size(); ++i) {
            PromptItem p{"mock" + std::to_string(i), 0, suite.items[i].prompt, suite.items[i].label};
            lines += nlohmann::json{{"doc_id", p.doc_id}, {"position", 0}, {"tokens", p.tokens}, {"label", *p.label}}
                         .dump() +
                     "\n";
            prompts.push_back(std::move(p));
        }
        detail::write_json(out / "mock_spec.json", mock_spec_to_json(suite.spec));
        detail::write_text(out / "prompts.jsonl", lines);
        endpoint = std::make_unique<MockEndpoint>(std::move(suite.spec));
    } else {
        if (ic.prompts.empty()) throw ConfigError("iclt needs --prompts or --mock-suite");
        prompts = read_prompts(ic.prompts);
        std::optional<EndpointInfo> info;
        if (ic.vocab_size) {
            info = EndpointInfo{*ic.vocab_size, {}};
            info->special.bos = ic.bos;
            info->special.eos = ic.eos;
        }
        endpoint = open_endpoint(ic.endpoint, info, std::chrono::milliseconds(ic.timeout_ms));
    }

    const auto hash = config_hash(c);
    std::string csv = csv_row({"doc_id", "position", "label", "original_entropy", "min_entropy",
                               "candidate_entropies", "separator", "config_hash", "seed"});
    ScoredSet iclt_set, sme_set;
    bool labeled = true;
    for (const auto& p : prompts) {
        IcltScore s;
        if (ic.ablation) {
            AblationParams ap;
            ap.k = ic.top_k;
            ap.sep = ic.sep;
            ap.period = ic.period;
            ap.irrelevant_block = ic.irrelevant;
            ap.seed = derive_seed(c.seed, p.doc_id + ":" + std::to_string(p.position));
            s = iclt_ablation_context(*endpoint, p.tokens, *ic.ablation, ap);
        } else {
            s = iclt_score(*endpoint, p.tokens, ic.top_k, ic.sep);
        }
        std::string cands;
        for (std::size_t i = 0; i < s.candidate_entropies.size(); ++i) {
            if (i) cands += ';';
            cands += fmt_double(s.candidate_entropies[i]);
        }
        csv += csv_row({p.doc_id, std::to_string(p.position), p.label ? std::to_string(*p.label) : "",
                        fmt_double(s.original_entropy_bits), fmt_double(s.min_entropy_bits), cands,
                        to_string(ic.sep), hash, std::to_string(c.seed)});
        if (p.label) {
            iclt_set.add(s.min_entropy_bits, *p.label);
            sme_set.add(s.original_entropy_bits, *p.label);
        } else {
            labeled = false;
        }
    }
    detail::write_text(out / "iclt.csv", csv);

    nlohmann::json summary = detail::provenance(c);
    summary["tokens"] = prompts.size();
    summary["separator"] = to_string(ic.sep);
    if (labeled && !prompts.empty()) {
        detail::MetricsTable m;
        m.config_hash = hash;
        m.seed = c.seed;
        const double a = auroc(iclt_set), b = auroc(sme_set);
        m.add("iclt", "auc", a);
        m.add("sme", "auc", b);
        summary["auc"] = {{"iclt", a}, {"sme", b}};
        detail::write_text(out / "metrics.csv", m.body);
        detail::write_text(out / "roc.csv", csv_row({"curve", "fpr", "tpr"}) + roc_csv("iclt", roc_curve(iclt_set), false) +
                                                 roc_csv("sme", roc_curve(sme_set), false));
    }
    detail::write_json(out / "summary.json", summary);
    return summary;
}

// --- synthetic -----------------------------------------------------------------------

inline nlohmann::json synthetic_run(const ExperimentConfig& c, const fs::path& out,
                                    const synthetic::ProgressFn& progress = {}) {
    validate_config(c);
    const auto& s = c.synthetic;
    detail::make_out_dir(out);
    auto world = synthetic::generate_question_set(s.bits, s.questions, s.epistemic_fraction, derive_seed(c.seed, "world"));
    world.duplication_rate = s.duplication_rate;
    world.shots = s.shots;
    auto tc = s.train;
    tc.seed = derive_seed(c.seed, "toy-train");
    const auto lm = synthetic::train_toy_lm(world, tc, progress);
    const auto nc = synthetic::no_context_report(lm.net, world);
    const auto rep = synthetic::iclt_eval_toy(lm.net, world, static_cast<std::size_t>(s.n_eval), derive_seed(c.seed, "eval"));

    const auto hash = config_hash(c);
    const auto seed = std::to_string(c.seed);
    auto world_json = synthetic::world_to_json(world);
    world_json["config_hash"] = hash;
    detail::write_json(out / "world.json", world_json);
    {
        FileHeader h;
        h.info = detail::provenance(c);
        h.count = 1;
        auto o = open_output(out / "toy_model.uprb");
        EnvelopeWriter<synthetic::ToyModelCodec> w(o, h);
        w.write(lm.net);
        w.finish();
    }
    std::string curve = csv_row({"step", "loss", "config_hash", "seed"});
    for (const auto& [step, loss] : lm.loss_curve) curve += csv_row({std::to_string(step), fmt_double(loss), hash, seed});
    detail::write_text(out / "loss_curve.csv", curve);

    std::string rows = csv_row({"qtype", "index", "provided_answer", "agrees_with_fixed", "p_before", "p_after",
                                "config_hash", "seed"});
    for (const auto& r : rep.rows) {
        rows += csv_row({r.qtype == synthetic::QuestionType::epistemic ? "epistemic" : "aleatoric",
                         std::to_string(r.index), std::to_string(r.provided_answer),
                         r.qtype == synthetic::QuestionType::epistemic ? (r.agrees_with_fixed ? "1" : "0") : "",
                         fmt_double(r.p_before), fmt_double(r.p_after), hash, seed});
    }
    detail::write_text(out / "fig5.csv", rows);

    const auto& sm = rep.summary;
    const double initial = lm.loss_curve.empty() ? 0.0 : lm.loss_curve.front().second;
    const double final_loss = lm.loss_curve.empty() ? 0.0 : lm.loss_curve.back().second;
    const std::vector<std::pair<std::string, double>> metrics = {
        {"no_context_epistemic_accuracy", nc.epistemic_accuracy},
        {"no_context_aleatoric_entropy_bits", nc.aleatoric_mean_entropy},
        {"epistemic_agree_p_after", sm.epistemic_agree_p_after},
        {"epistemic_contradict_p_after", sm.epistemic_contradict_p_after},
        {"epistemic_mean_shift", sm.epistemic_mean_shift},
        {"aleatoric_mean_shift", sm.aleatoric_mean_shift},
        {"aleatoric_mean_abs_dev", sm.aleatoric_mean_abs_dev},
        {"initial_loss", initial},
        {"final_loss", final_loss},
    };
    std::string summary_csv = csv_row({"metric", "value", "config_hash", "seed"});
    nlohmann::json summary = detail::provenance(c);
    for (const auto& [k, v] : metrics) {
        summary_csv += csv_row({k, fmt_double(v), hash, seed});
        summary["metrics"][k] = v;
    }
    detail::write_text(out / "fig5_summary.csv", summary_csv);
    summary["parameters"] = lm.net.parameter_count();
    detail::write_json(out / "summary.json", summary);
    return summary;
}

// --- report --------------------------------------------------------------------------

// Renders every roc*.csv in `in` to an SVG with one path per curve, and
// fig5.csv (when present) to grouped bars.
inline nlohmann::json report(const fs::path& in, const fs::path& out) {
    if (!fs::is_directory(in)) throw IoError("report input directory not found: " + in.string());
    detail::make_out_dir(out);
    nlohmann::json summary;
    summary["svgs"] = nlohmann::json::array();
    std::vector<fs::path> inputs;
    for (const auto& e : fs::directory_iterator(in)) inputs.push_back(e.path());
    std::sort(inputs.begin(), inputs.end());
    for (const auto& p : inputs) {
        const auto name = p.filename().string();
        const bool is_roc = name.rfind("roc", 0) == 0 && p.extension() == ".csv";
        const bool is_fig5 = name == "fig5.csv";
        if (!is_roc && !is_fig5) continue;
        auto f = open_input(p);
        const auto table = parse_csv(f);
        const std::string comment = "source " + name + " hash " + file_hash(p);
        const auto svg_path = out / (p.stem().string() + ".svg");
        if (is_roc) {
            const auto curves = roc_curves_from_csv(table);
            detail::write_text(svg_path, roc_svg(curves, comment));
            summary["svgs"].push_back({{"file", svg_path.filename().string()}, {"curves", curves.size()}});
        } else {
            // Mean P(provided) before/after context per question group.
            const auto qt = table.column("qtype"), ag = table.column("agrees_with_fixed");
            const auto pb = table.column("p_before"), pa = table.column("p_after");
            std::map<std::string, std::pair<double, double>> sums;
            std::map<std::string, std::size_t> counts;
            for (const auto& r : table.rows) {
                const std::string g = r[qt] == "aleatoric" ? "aleatoric"
                                      : r[ag] == "1"       ? "epistemic agreeing"
                                                           : "epistemic contradicting";
                sums[g].first += std::stod(r[pb]);
                sums[g].second += std::stod(r[pa]);
                ++counts[g];
            }
            std::vector<BarGroup> groups;
            for (const char* g : {"epistemic agreeing", "epistemic contradicting", "aleatoric"}) {
                if (!counts[g]) continue;
                const double n = static_cast<double>(counts[g]);
                groups.push_back({g, {{"no context", sums[g].first / n}, {"with context", sums[g].second / n}}});
            }
            detail::write_text(svg_path, bar_svg(groups, "P(provided answer)", comment));
            summary["svgs"].push_back({{"file", svg_path.filename().string()}, {"groups", groups.size()}});
        }
    }
    return summary;
}

// --- dump-protocol-check ---------------------------------------------------------------

// Validates record files (envelope, dims, entropy consistency) and,
// optionally, a live endpoint's replies. Returns {"ok": bool, "checks": [...]}.
inline nlohmann::json protocol_check(const std::vector<std::string>& record_files, ModelEndpoint* endpoint,
                                     const std::vector<std::vector<TokenId>>& probe_prompts) {
    nlohmann::json checks = nlohmann::json::array();
    bool ok = true;
    auto add = [&](const std::string& name, bool pass, const std::string& detail) {
        checks.push_back({{"check", name}, {"pass", pass}, {"detail", detail}});
        ok = ok && pass;
    };
    for (const auto& f : record_files) {
        try {
            const auto recs = read_record_file(f);
            std::size_t bad = 0;
            for (const auto& r : recs) {
                auto consistent = [](const std::optional<std::vector<double>>& p, double h) {
                    return !p || std::abs(entropy_bits(*p) - h) <= 1e-6;
                };
                if (!consistent(r.small_probs, r.small_entropy_bits)) ++bad;
                if (r.large_entropy_bits && !consistent(r.large_probs, *r.large_entropy_bits)) ++bad;
            }
            add("records:" + f, bad == 0,
                std::to_string(recs.size()) + " records, " + std::to_string(bad) + " entropy mismatches");
        } catch (const Error& e) {
            add("records:" + f, false, std::string(to_string(e.kind())) + ": " + e.what());
        }
    }
    if (endpoint) {
        for (std::size_t i = 0; i < probe_prompts.size(); ++i) {
            const std::string name = "endpoint:prompt" + std::to_string(i);
            try {
                const auto d = endpoint->next_token_distribution(probe_prompts[i], 10);
                const bool head_ok = d.exact_entropy_bits() + 1e-9 >= d.head_entropy_bits();
                add(name, head_ok, "entropy " + fmt_double(d.exact_entropy_bits()) + " head " +
                                       fmt_double(d.head_entropy_bits()));
                const auto full = endpoint->next_token_distribution(probe_prompts[i], endpoint->vocab_size());
                add(name + ":full", full.tail_mass() <= 1e-6, "tail mass at top_k = vocab: " + fmt_double(full.tail_mass()));
            } catch (const Error& e) {
                add(name, false, std::string(to_string(e.kind())) + ": " + e.what());
            }
        }
    }
    return {{"ok", ok}, {"checks", checks}};
}

}  // namespace uprobe::cmd

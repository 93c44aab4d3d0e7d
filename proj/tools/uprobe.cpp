// uprobe: command-line front end.
//
//   uprobe build-dataset --records a.uprb --band 2:3 --gap 0.2:0.1 --layer 16 --out ds/
//   uprobe train-eval    --train ds/ [--eval other_ds/] --probe linear --baseline sme --out run/
//   uprobe iclt          --endpoint tcp:localhost:9000 --prompts p.jsonl --sep bos --top-k 10 --out iclt/
//   uprobe synthetic     --seed 1 --out toy/
//   uprobe report        --in run/ --out plots/
//   uprobe dump-protocol-check --records a.uprb [--endpoint ADDR]
//   uprobe serve-mock    --spec mock.json --listen tcp:127.0.0.1:9000 | --stdio
//
// Failures print {"error": {"kind": ..., "message": ...}} on stderr.
// Exit codes: 0 ok, 1 failure, 2 I/O error, 3 config error.

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "uprobe/commands.hpp"

namespace {

using namespace uprobe;

std::atomic<bool> g_stop{false};

std::pair<double, double> parse_pair(const std::string& s, const char* flag) {
    const auto colon = s.find(':');
    if (colon == std::string::npos) throw ConfigError(std::string(flag) + " expects A:B, got '" + s + "'");
    try {
        return {std::stod(s.substr(0, colon)), std::stod(s.substr(colon + 1))};
    } catch (const std::exception&) {
        throw ConfigError(std::string(flag) + " expects two numbers, got '" + s + "'");
    }
}

int exit_code(ErrorKind k) {
    switch (k) {
        case ErrorKind::io: return 2;
        case ErrorKind::config: return 3;
        default: return 1;
    }
}

int report_error(ErrorKind kind, const std::string& message, const std::vector<std::string>& problems = {}) {
    nlohmann::json j;
    j["error"]["kind"] = std::string(to_string(kind));
    j["error"]["message"] = message;
    if (!problems.empty()) j["error"]["problems"] = problems;
    std::cerr << j.dump() << std::endl;
    return exit_code(kind);
}

// Flags shared by the experiment subcommands; unset flags leave the config alone.
struct Overrides {
    std::string config;
    std::vector<std::string> records;
    std::string band, gap, regression, balance;
    std::optional<double> threshold;
    std::optional<std::int32_t> layer;
    std::string probe;
    std::vector<std::string> baselines;
    std::string train, eval;
    std::string endpoint, prompts, sep, ablation;
    std::optional<std::size_t> top_k, vocab_size;
    std::optional<TokenId> bos, eos, period;
    bool mock_suite = false;
    std::optional<std::uint64_t> seed;
    std::optional<long> steps;
    std::optional<double> lr;

    ExperimentConfig apply() const {
        ExperimentConfig c = config.empty() ? ExperimentConfig{} : load_experiment_config(config);
        if (seed) c.seed = *seed;
        if (!records.empty()) c.dataset.records = records;
        if (!band.empty()) {
            const auto [lo, hi] = parse_pair(band, "--band");
            c.dataset.band = {lo, hi};
        }
        if (!gap.empty()) {
            const auto [z, d] = parse_pair(gap, "--gap");
            c.dataset.gap = GapSpec{z, d};
        }
        if (threshold) c.dataset.threshold = *threshold;
        if (!regression.empty()) c.dataset.regression = uprobe::detail::objective_from_string(regression);
        if (!balance.empty()) c.dataset.balance = uprobe::detail::balance_from_string(balance);
        if (layer) {
            c.dataset.layer = *layer;
            c.train.layer = *layer;
        }
        if (!probe.empty()) c.train.probe.kind = uprobe::detail::probe_kind_from_string(probe);
        if (!baselines.empty()) c.train.baselines = baselines;
        if (!train.empty()) c.train.train = train;
        if (!eval.empty()) c.train.eval = eval;
        if (!endpoint.empty()) c.iclt.endpoint = endpoint;
        if (!prompts.empty()) c.iclt.prompts = prompts;
        if (!sep.empty()) c.iclt.sep = separator_from_string(sep);
        if (!ablation.empty()) c.iclt.ablation = ablation_from_string(ablation);
        if (top_k) c.iclt.top_k = *top_k;
        if (vocab_size) c.iclt.vocab_size = *vocab_size;
        if (bos) c.iclt.bos = *bos;
        if (eos) c.iclt.eos = *eos;
        if (period) c.iclt.period = *period;
        if (mock_suite) c.iclt.mock_suite = true;
        if (steps) c.synthetic.train.steps = *steps;
        if (lr) c.synthetic.train.learning_rate = *lr;
        validate_config(c);
        return c;
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"uprobe: epistemic/aleatoric uncertainty probing toolkit"};
    app.require_subcommand(1);
    Overrides o;
    std::string out = "out";

    auto common = [&](CLI::App* s) {
        s->add_option("--config", o.config, "experiment config (JSON)");
        s->add_option("--seed", o.seed, "top-level seed");
        s->add_option("--out", out, "output directory");
    };

    auto* build = app.add_subcommand("build-dataset", "band, label and balance token records into a dataset");
    common(build);
    build->add_option("--records", o.records, "record file(s)");
    build->add_option("--band", o.band, "small-entropy band LO:HI (bits)");
    build->add_option("--gap", o.gap, "gapped labels NEAR_ZERO:DELTA (bits)");
    build->add_option("--threshold", o.threshold, "threshold labels: large entropy >= BITS is class 1");
    build->add_option("--regression", o.regression, "regression target: entropy, log_entropy, jsd, log_jsd");
    build->add_option("--layer", o.layer, "embedding layer tag");
    build->add_option("--balance", o.balance, "probabilistic or deterministic");

    auto* te = app.add_subcommand("train-eval", "train a probe and evaluate it with baselines");
    common(te);
    te->add_option("--train", o.train, "dataset directory to train on");
    te->add_option("--eval", o.eval, "dataset directory or file to evaluate on (cross-domain)");
    te->add_option("--probe", o.probe, "linear or mlp");
    te->add_option("--layer", o.layer, "embedding layer tag");
    te->add_option("--baseline", o.baselines, "bet, sme, pie (repeatable)");
    te->add_option("--threshold", o.threshold, "precision/recall threshold for entropy regression (bits)");

    auto* ic = app.add_subcommand("iclt", "score tokens with the in-context learning test");
    common(ic);
    ic->add_option("--endpoint", o.endpoint, "model endpoint (default $UPROBE_MODEL_ENDPOINT)");
    ic->add_option("--prompts", o.prompts, "JSONL prompts");
    ic->add_flag("--mock-suite", o.mock_suite, "score the designed mock suite");
    ic->add_option("--sep", o.sep, "bos, bos_eos, eos or none");
    ic->add_option("--top-k", o.top_k, "candidates per token");
    ic->add_option("--vocab-size", o.vocab_size, "remote endpoint vocabulary size");
    ic->add_option("--bos", o.bos, "remote endpoint BOS id");
    ic->add_option("--eos", o.eos, "remote endpoint EOS id");
    ic->add_option("--ablation", o.ablation, "additional_context, irrelevant_context or random_candidates");
    ic->add_option("--period", o.period, "sentence terminator for additional_context");

    auto* syn = app.add_subcommand("synthetic", "train the toy LM and run the in-context copying test");
    common(syn);
    syn->add_option("--steps", o.steps, "training steps");
    syn->add_option("--lr", o.lr, "peak learning rate");
    bool quiet = false;
    syn->add_flag("--quiet", quiet, "no progress on stderr");

    std::string report_in;
    auto* rep = app.add_subcommand("report", "render ROC curves and copying-test bars as SVG");
    rep->add_option("--in", report_in, "directory holding roc*.csv / fig5.csv")->required();
    rep->add_option("--out", out, "output directory");

    std::vector<std::string> check_records;
    std::string check_endpoint;
    std::vector<std::string> check_prompts;
    auto* dpc = app.add_subcommand("dump-protocol-check", "validate record files and an endpoint's replies");
    dpc->add_option("--records", check_records, "record file(s)");
    dpc->add_option("--endpoint", check_endpoint, "endpoint to probe");
    dpc->add_option("--vocab-size", o.vocab_size, "remote endpoint vocabulary size");
    dpc->add_option("--prompt", check_prompts, "comma-separated token ids to query (repeatable)");
    dpc->add_option("--out", out, "output directory");

    std::string spec_path, listen;
    bool use_stdio = false;
    std::size_t max_connections = 0;
    auto* serve = app.add_subcommand("serve-mock", "serve a mock spec over the wire protocol");
    serve->add_option("--spec", spec_path, "mock spec JSON")->required();
    serve->add_option("--listen", listen, "tcp:HOST:PORT or unix:PATH");
    serve->add_flag("--stdio", use_stdio, "serve on stdin/stdout");
    serve->add_option("--max-connections", max_connections, "exit after this many connections");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 3;
    }

    try {
        nlohmann::json result;
        if (*build) {
            result = cmd::build_dataset(o.apply(), out);
        } else if (*te) {
            result = cmd::train_eval(o.apply(), out);
        } else if (*ic) {
            result = cmd::iclt(o.apply(), out);
        } else if (*syn) {
            synthetic::ProgressFn progress;
            if (!quiet) {
                progress = [](long step, double loss) {
                    std::fprintf(stderr, "step %ld loss %.4f\n", step + 1, loss);
                };
            }
            result = cmd::synthetic_run(o.apply(), out, progress);
        } else if (*rep) {
            result = cmd::report(report_in, out);
        } else if (*dpc) {
            std::unique_ptr<ModelEndpoint> ep;
            std::vector<std::vector<TokenId>> prompts;
            if (!check_endpoint.empty()) {
                std::optional<EndpointInfo> info;
                if (o.vocab_size) info = EndpointInfo{*o.vocab_size, {}};
                ep = open_endpoint(check_endpoint, info);
                for (const auto& p : check_prompts) {
                    std::vector<TokenId> toks;
                    std::stringstream ss(p);
                    std::string t;
                    while (std::getline(ss, t, ',')) toks.push_back(std::stoull(t));
                    prompts.push_back(toks);
                }
                if (prompts.empty()) prompts.push_back({0});
            }
            result = cmd::protocol_check(check_records, ep.get(), prompts);
            std::filesystem::create_directories(out);
            auto f = open_output(std::filesystem::path(out) / "protocol_check.json");
            f << result.dump(2) << "\n";
            std::cout << result.dump() << std::endl;
            return result.at("ok").get<bool>() ? 0 : 1;
        } else if (*serve) {
            MockEndpoint ep(load_mock_spec(spec_path));
            if (use_stdio) {
                serve_stream(ep, 0, 1);
                return 0;
            }
            const auto a = parse_endpoint_address(listen);
            auto server = a.kind == EndpointAddress::Kind::unix_socket
                              ? SocketServer::unix_socket(a.target)
                              : SocketServer::tcp(a.target, static_cast<std::uint16_t>(std::stoi(a.port)));
            std::signal(SIGINT, [](int) { g_stop = true; });
            std::signal(SIGTERM, [](int) { g_stop = true; });
            std::cerr << "listening on " << listen << " (port " << server.port() << ")" << std::endl;
            server.run(ep, g_stop, max_connections);
            return 0;
        }
        std::cout << result.dump(2) << std::endl;
        return 0;
    } catch (const SchemaError& e) {
        return report_error(e.kind(), e.what(), e.problems());
    } catch (const EndpointError& e) {
        std::string msg = e.what();
        if (e.candidate >= 0) msg += " (candidate " + std::to_string(e.candidate) + ")";
        return report_error(e.kind(), msg);
    } catch (const Error& e) {
        return report_error(e.kind(), e.what());
    } catch (const std::exception& e) {
        return report_error(ErrorKind::data, e.what());
    }
}

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "support.hpp"
#include "uprobe/commands.hpp"

using namespace uprobe;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

struct RunResult {
    int code = -1;
    std::string err;
};

RunResult run_cli(const std::string& args, const fs::path& scratch) {
    const auto err_file = scratch / "stderr.txt";
    const std::string cmd = std::string(UPROBE_CLI_PATH) + " " + args + " > " + (scratch / "stdout.txt").string() +
                            " 2> " + err_file.string();
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.err = slurp(err_file);
    return r;
}

// Every regular file under `dir`, relative path -> contents.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
    }
    return out;
}

std::vector<std::string> problems_of(const nlohmann::json& j) {
    try {
        parse_experiment_config(j);
    } catch (const SchemaError& e) {
        return e.problems();
    }
    return {};
}

bool mentions(const std::vector<std::string>& problems, const std::string& needle) {
    for (const auto& p : problems) {
        if (p.find(needle) != std::string::npos) return true;
    }
    return false;
}

}  // namespace

TEST(Config, DefaultsRoundTripThroughCanonicalJson) {
    const ExperimentConfig c;
    const auto j = config_to_json(c);
    EXPECT_EQ(config_to_json(parse_experiment_config(j)), j);
    EXPECT_EQ(config_hash(parse_experiment_config(j)), config_hash(c));
}

TEST(Config, HashTracksEveryField) {
    ExperimentConfig a, b;
    b.synthetic.train.weight_decay = 0.5;
    EXPECT_NE(config_hash(a), config_hash(b));
    b = a;
    b.iclt.top_k = 11;
    EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Config, AllProblemsReportedAtOnce) {
    const auto j = nlohmann::json::parse(R"({
        "seed": "seven",
        "colour": 1,
        "dataset": {"band": [3, 2], "balance": "sometimes", "bogus": true},
        "train": {"probe": {"kind": "forest", "learning_rate": -1}},
        "iclt": {"top_k": 0, "sep": "comma"},
        "synthetic": {"width": 30, "heads": 4, "questions": 5000, "loss_positions": "some"}
    })");
    const auto p = problems_of(j);
    EXPECT_TRUE(mentions(p, "config.seed: wrong type"));
    EXPECT_TRUE(mentions(p, "config.colour: unknown key"));
    EXPECT_TRUE(mentions(p, "dataset.bogus: unknown key"));
    EXPECT_TRUE(mentions(p, "dataset.balance"));
    EXPECT_TRUE(mentions(p, "dataset.band"));
    EXPECT_TRUE(mentions(p, "train.probe.kind"));
    EXPECT_TRUE(mentions(p, "train.probe.learning_rate"));
    EXPECT_TRUE(mentions(p, "iclt.top_k"));
    EXPECT_TRUE(mentions(p, "iclt.sep"));
    EXPECT_TRUE(mentions(p, "synthetic.width"));
    EXPECT_TRUE(mentions(p, "synthetic.questions"));
    EXPECT_TRUE(mentions(p, "synthetic.loss_positions"));
    EXPECT_GE(p.size(), 12u);
}

TEST(Config, SectionMustBeObjectAndLabelsExclusive) {
    EXPECT_TRUE(mentions(problems_of({{"train", 3}}), "train: expected an object"));
    EXPECT_TRUE(mentions(problems_of({{"dataset", {{"gap", {0.2, 0.1}}, {"threshold", 1.0}}}}), "mutually exclusive"));
    EXPECT_TRUE(problems_of(nlohmann::json::object()).empty());
}

TEST(Config, LoadErrorsAreTyped) {
    const auto dir = support::temp_dir("cfg_load");
    EXPECT_THROW(load_experiment_config(dir / "missing.json"), IoError);
    spit(dir / "bad.json", "{ not json");
    EXPECT_THROW(load_experiment_config(dir / "bad.json"), SchemaError);
}

TEST(Report, SvgsMatchGoldenAndOracleGeometry) {
    const auto out = support::temp_dir("report");
    const fs::path in = fs::path(UPROBE_FIXTURE_DIR) / "report";
    const auto summary = cmd::report(in, out);
    ASSERT_EQ(summary.at("svgs").size(), 2u);

    const auto roc = slurp(out / "roc.svg");
    const auto fig5 = slurp(out / "fig5.svg");
    EXPECT_EQ(roc, slurp(fs::path(UPROBE_FIXTURE_DIR) / "report_golden" / "roc.svg"));
    EXPECT_EQ(fig5, slurp(fs::path(UPROBE_FIXTURE_DIR) / "report_golden" / "fig5.svg"));

    // Two curves; the probe curve's third point (0.25, 0.75) on a 400px plot at offset 50.
    std::size_t paths = 0;
    for (auto pos = roc.find("class=\"roc\""); pos != std::string::npos; pos = roc.find("class=\"roc\"", pos + 1)) {
        ++paths;
    }
    EXPECT_EQ(paths, 2u);
    EXPECT_NE(roc.find("L150.00 150.00"), std::string::npos);

    // Bar heights are group means of the fixture on a 300px axis.
    for (const char* h : {"240.00", "292.50", "60.00", "255.00", "150.00"}) {
        EXPECT_NE(fig5.find(std::string("height=\"") + h + "\""), std::string::npos) << h;
    }
}

TEST(Report, MissingInputIsIoError) {
    EXPECT_THROW(cmd::report("/nonexistent/uprobe/dir", support::temp_dir("report_missing")), IoError);
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = support::temp_dir(std::string("cli_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    }
    fs::path dir_;
};

TEST_F(Cli, MissingRecordFileExitsTwoWithIoKind) {
    const auto r = run_cli("build-dataset --records " + (dir_ / "nope.uprb").string() + " --out " +
                               (dir_ / "out").string(),
                           dir_);
    EXPECT_EQ(r.code, 2);
    const auto j = nlohmann::json::parse(r.err);
    EXPECT_EQ(j.at("error").at("kind"), "io");
}

TEST_F(Cli, ConfigProblemsExitThree) {
    spit(dir_ / "cfg.json", R"({"synthetic": {"steps": 0, "shots": -1}})");
    const auto r = run_cli("synthetic --config " + (dir_ / "cfg.json").string() + " --out " + (dir_ / "o").string(),
                           dir_);
    EXPECT_EQ(r.code, 3);
    const auto j = nlohmann::json::parse(r.err);
    EXPECT_EQ(j.at("error").at("kind"), "config");
    EXPECT_EQ(j.at("error").at("problems").size(), 2u);
}

TEST_F(Cli, BadFlagValueExitsThree) {
    EXPECT_EQ(run_cli("build-dataset --band 3 --records x --out " + dir_.string(), dir_).code, 3);
    EXPECT_EQ(run_cli("no-such-command", dir_).code, 3);
}

TEST_F(Cli, CorruptRecordFileIsParseError) {
    spit(dir_ / "bad.uprb", "XXXXnot an envelope");
    const auto r = run_cli("build-dataset --records " + (dir_ / "bad.uprb").string() + " --out " +
                               (dir_ / "out").string(),
                           dir_);
    EXPECT_EQ(r.code, 1);
    EXPECT_EQ(nlohmann::json::parse(r.err).at("error").at("kind"), "parse");
}

// build-dataset -> train-eval -> report, twice with the same seed.
TEST_F(Cli, PipelineIsByteIdenticalAcrossRuns) {
    support::CorpusSpec spec;
    spec.n = 20000;
    spec.docs = 400;
    const auto recs = support::synthetic_corpus(spec, 21);
    {
        auto out = open_output(dir_ / "records.uprb");
        write_records(recs, out, header_for(recs));
    }
    auto pipeline = [&](const std::string& tag) {
        const auto root = dir_ / tag;
        const auto ds = root / "ds", run = root / "run", plots = root / "plots";
        EXPECT_EQ(run_cli("build-dataset --seed 5 --records " + (dir_ / "records.uprb").string() +
                              " --band 2:3 --gap 0.2:0.1 --layer 16 --out " + ds.string(),
                          dir_)
                      .code,
                  0);
        EXPECT_EQ(run_cli("train-eval --seed 5 --train " + ds.string() +
                              " --layer 16 --probe mlp --baseline sme --baseline bet --baseline pie --out " + run.string(),
                          dir_)
                      .code,
                  0)
            << slurp(dir_ / "stderr.txt");
        EXPECT_EQ(run_cli("report --in " + run.string() + " --out " + plots.string(), dir_).code, 0);
        return snapshot(root);
    };
    // Paths are part of the config, so the rerun goes to the same place.
    const auto a = pipeline("p");
    fs::remove_all(dir_ / "p");
    const auto b = pipeline("p");
    EXPECT_EQ(a, b);
    for (const char* f : {"ds/train.uprb", "ds/val.uprb", "ds/test.uprb", "ds/build_report.json", "run/probe.uprb",
                          "run/metrics.csv", "run/roc.csv", "run/summary.json", "plots/roc.svg"}) {
        EXPECT_TRUE(a.count(f)) << f;
    }
    // Only the config hash (which covers the dataset path) may change with the location.
    const auto c = pipeline("elsewhere");
    auto without_hash = [](const std::map<std::string, std::string>& snap) {
        const auto hash = nlohmann::json::parse(snap.at("run/summary.json")).at("config_hash").get<std::string>();
        auto m = snap.at("run/metrics.csv");
        for (auto pos = m.find(hash); pos != std::string::npos; pos = m.find(hash, pos)) m.replace(pos, hash.size(), "H");
        return m;
    };
    EXPECT_EQ(without_hash(a), without_hash(c));
}

TEST_F(Cli, IcltMockSuiteIsByteIdentical) {
    auto go = [&](const std::string& tag) {
        EXPECT_EQ(run_cli("iclt --mock-suite --seed 3 --top-k 10 --out " + (dir_ / tag).string(), dir_).code, 0);
        return snapshot(dir_ / tag);
    };
    const auto a = go("a");
    fs::remove_all(dir_ / "a");
    EXPECT_EQ(a, go("a"));
    const auto summary = nlohmann::json::parse(a.at("summary.json"));
    EXPECT_EQ(summary.at("auc").at("iclt").get<double>(), 1.0);
}

TEST_F(Cli, SyntheticSmallRunIsByteIdentical) {
    spit(dir_ / "cfg.json", R"({"seed": 4, "synthetic": {"bits": 4, "questions": 16, "shots": 2, "n_eval": 16,
        "steps": 60, "batch_size": 8, "width": 16, "heads": 2, "warmup_steps": 5}})");
    auto go = [&](const std::string& tag) {
        EXPECT_EQ(run_cli("synthetic --quiet --config " + (dir_ / "cfg.json").string() + " --out " +
                              (dir_ / tag).string(),
                          dir_)
                      .code,
                  0)
            << slurp(dir_ / "stderr.txt");
        return snapshot(dir_ / tag);
    };
    const auto a = go("a");
    fs::remove_all(dir_ / "a");
    EXPECT_EQ(a, go("a"));
    for (const char* f : {"world.json", "toy_model.uprb", "loss_curve.csv", "fig5.csv", "fig5_summary.csv",
                          "summary.json"}) {
        EXPECT_TRUE(a.count(f)) << f;
    }
    // fig5.csv: one row per (question, provided answer) plus the header.
    EXPECT_EQ(std::count(a.at("fig5.csv").begin(), a.at("fig5.csv").end(), '\n'), 33);
}

TEST_F(Cli, ServeMockOverStdioPassesProtocolCheck) {
    const fs::path spec = fs::path(UPROBE_FIXTURE_DIR) / "golden_spec.json";
    const auto r = run_cli("dump-protocol-check --endpoint \"stdio:" + std::string(UPROBE_CLI_PATH) +
                               " serve-mock --stdio --spec " + spec.string() + "\" --vocab-size 8 --prompt 0,5 --out " +
                               dir_.string(),
                           dir_);
    EXPECT_EQ(r.code, 0) << r.err;
    const auto j = nlohmann::json::parse(slurp(dir_ / "protocol_check.json"));
    EXPECT_TRUE(j.at("ok").get<bool>());
}

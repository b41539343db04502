#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "helpers.hpp"
#include "projprune/error.hpp"
#include "projprune/experiments.hpp"

using namespace projprune;
namespace fs = std::filesystem;

namespace {

// A scratch directory holding the residual test model and a small run
// config on 3-class synthetic data.
struct Workspace {
    fs::path dir;

    explicit Workspace(const std::string& name) : dir(fs::temp_directory_path() / ("projprune_" + name)) {
        fs::remove_all(dir);
        fs::create_directories(dir);
        std::ofstream(dir / "model.txt") << testing::kResidualCnn;
    }
    ~Workspace() { fs::remove_all(dir); }

    RunConfig config() const {
        RunConfig c = RunConfig::parse(R"(
model = model.txt
data = synthetic
data.classes = 3
data.per_class = 16
data.test_per_class = 8
data.shape = 3 6 6
data.noise = 0.1
train.epochs = 3
train.batch_size = 8
score.batch_size = 8
seeds = 1,2
ratios = 0,0.25,0.5
fractions = 1,0.5
)");
        c.base_dir = dir;
        c.set("out_dir", (dir / "out").string());
        return c;
    }

    std::string read(const std::string& name) const {
        std::ifstream in(dir / "out" / name, std::ios::binary);
        std::ostringstream ss;
        ss << in.rdbuf();
        return ss.str();
    }
};

std::size_t data_rows(const std::string& csv) {
    std::size_t rows = 0;
    std::istringstream in(csv);
    for (std::string line; std::getline(in, line);)
        if (!line.empty() && line[0] != '#') ++rows;
    return rows - 1;  // header
}

std::set<std::pair<std::string, std::size_t>> channel_set(const ImportanceReport& r) {
    std::set<std::pair<std::string, std::size_t>> out;
    for (const auto& e : r.entries) out.emplace(e.layer, e.channel);
    return out;
}

}  // namespace

TEST_SUITE("cli-experiments") {

TEST_CASE("run config text: comments, trimming, duplicates, canonical order") {
    const RunConfig c = RunConfig::parse("# header\n  seed = 3  # trailing\n\nalpha=x\n");
    CHECK(c.values.at("seed") == "3");
    CHECK(c.canonical() == "alpha=x\nseed=3\n");
    CHECK_THROWS_AS(RunConfig::parse("seed = 1\nseed = 2\n"), ParseError);
    CHECK_THROWS_AS(RunConfig::parse("seed 1\n"), ParseError);
    CHECK_THROWS_AS(RunConfig::parse(" = 1\n"), ParseError);
}

TEST_CASE("config hash: FNV-1a vectors, stable, sensitive to values but not to out_dir") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
    CHECK(fnv1a64("foobar") == 0x85944171f73967e8ull);
    RunConfig a = RunConfig::parse("seed = 1\nratio = 0.5\n");
    const RunConfig b = RunConfig::parse("ratio = 0.5\n# reordered\nseed = 1\n");
    CHECK(a.hash() == b.hash());
    CHECK(a.hash().size() == 16);
    a.set("out_dir", "/somewhere");
    CHECK(a.hash() == b.hash());
    a.set("seed", "2");
    CHECK(a.hash() != b.hash());
}

TEST_CASE("settings: defaults, overrides and validation") {
    Workspace w("settings");
    RunConfig c = w.config();
    Settings s = resolve_settings(c);
    CHECK(s.model == w.dir / "model.txt");
    CHECK(s.criteria.size() == 5);
    CHECK(s.seeds == std::vector<std::uint64_t>{1, 2});
    CHECK(s.config_hash == c.hash());
    c.set("ratio.stem", "0.25");
    c.set("criterion", "l1, fpgm");
    s = resolve_settings(c);
    CHECK(s.layer_ratios.at("stem") == 0.25);
    CHECK(s.criteria == std::vector<Criterion>{Criterion::l1, Criterion::fpgm});

    for (const auto& [key, value] : std::vector<std::pair<std::string, std::string>>{
             {"bogus", "1"},       {"ratio", "1"},        {"ratio", "abc"},         {"subset", "0"},
             {"lambda", "0"},      {"criterion", "l7"},   {"mode", "sideways"},     {"data", "tape"},
             {"seed", "-1"},       {"train.lr", "0"},     {"train.schedule", "odd"}, {"min_keep", "0"},
             {"fractions", "1.5"}, {"include_bias", "maybe"}}) {
        RunConfig bad = w.config();
        bad.set(key, value);
        CAPTURE(key);
        CHECK_THROWS_AS(resolve_settings(bad), ConfigError);
    }
}

TEST_CASE("missing inputs are config errors and leave no output directory") {
    Workspace w("missing");
    RunConfig c = w.config();
    c.set("data", "idx");
    c.set("data.train_images", "nope-images");
    c.set("data.train_labels", "nope-labels");
    c.set("data.test_images", "nope-images");
    c.set("data.test_labels", "nope-labels");
    CHECK_THROWS_AS(run_command("train", c), ConfigError);
    CHECK_FALSE(fs::exists(w.dir / "out"));

    RunConfig no_model = w.config();
    no_model.set("model", "absent.txt");
    CHECK_THROWS_AS(run_command("score", no_model), ConfigError);
    RunConfig no_ckpt = w.config();
    no_ckpt.set("checkpoint", "absent.ckpt");
    CHECK_THROWS_AS(run_command("score", no_ckpt), ConfigError);
    CHECK_THROWS_AS(run_command("finetune", w.config()), ConfigError);
    CHECK_THROWS_AS(run_command("dance", w.config()), ConfigError);
    CHECK_FALSE(fs::exists(w.dir / "out"));
}

TEST_CASE("write_outputs is all-or-nothing") {
    Workspace w("atomic");
    const fs::path out = w.dir / "out";
    write_outputs(out, {{"a.csv", "1\n"}, {"b.csv", "2\n"}});
    CHECK(w.read("a.csv") == "1\n");

    fs::remove_all(out);
    fs::create_directories(out / "b.csv" / "blocker");  // rename onto a non-empty directory fails
    CHECK_THROWS_AS(write_outputs(out, {{"a.csv", "1\n"}, {"b.csv", "2\n"}}), Error);
    std::vector<std::string> left;
    for (const auto& e : fs::directory_iterator(out)) left.push_back(e.path().filename().string());
    CHECK(left == std::vector<std::string>{"b.csv"});
}

TEST_CASE("train: separable data reaches 99% train accuracy; fixed seed gives identical checkpoint bytes") {
    Workspace w("train");
    RunConfig c = w.config();
    c.set("data.noise", "0");
    c.set("train.epochs", "20");
    const Settings s = resolve_settings(c);
    const OutputFiles a = cmd_train(s), b = cmd_train(s);
    CHECK(a == b);
    CHECK(a.at("train_log.csv").rfind("# config_hash=" + s.config_hash + "\n", 0) == 0);
    CHECK(data_rows(a.at("train_log.csv")) == 20);
    const Datasets data = load_datasets(s);
    write_outputs(s.out_dir, a);
    RunConfig with_ckpt = c;
    with_ckpt.set("checkpoint", (s.out_dir / "model.ckpt").string());
    const Settings s2 = resolve_settings(with_ckpt);
    Model m = baseline_model(s2, data, 1);
    CHECK(accuracy(m, data.train) >= 0.99);
}

TEST_CASE("score: one CSV per criterion with identical channel sets; reruns are byte-identical") {
    Workspace w("score");
    const RunConfig c = w.config();
    const auto files = run_command("score", c);
    REQUIRE(files.size() == 5);
    std::set<std::pair<std::string, std::size_t>> first;
    for (const auto& f : files) {
        const std::string text = w.read(f);
        CHECK(text.rfind("# config_hash=" + c.hash() + "\n", 0) == 0);
        const auto channels = channel_set(report_from_csv(text));
        if (first.empty()) first = channels;
        CHECK(channels == first);
    }
    const std::string before = w.read(files.front());
    run_command("score", c);
    CHECK(w.read(files.front()) == before);
}

TEST_CASE("prune writes a plan consistent with the pruned model") {
    Workspace w("prune");
    RunConfig c = w.config();
    CHECK_THROWS_AS(run_command("prune", c), ConfigError);  // five criteria
    c.set("criterion", "l1");
    c.set("ratio", "0.5");
    run_command("prune", c);
    const PrunePlan plan = parse_plan(w.read("plan.txt"));
    CHECK(plan.selected.size() == 10);  // half of each class: {stem,a2}, {a1}, {d1}, {d2,skip}
    const Model pruned = Model::from_state(load_model_spec(w.dir / "out" / "pruned_model.txt"),
                                           load_checkpoint(w.dir / "out" / "pruned.ckpt"));
    CHECK(pruned.layer("stem").out_channels == 2);
    CHECK(pruned.layer("d1").out_channels == 3);
    CHECK(data_rows(w.read("prune_summary.csv")) == 1);

    RunConfig ft = w.config();
    ft.set("model", (w.dir / "out" / "pruned_model.txt").string());
    ft.set("checkpoint", (w.dir / "out" / "pruned.ckpt").string());
    ft.set("finetune.epochs", "1");
    ft.set("finetune.batch_size", "8");
    ft.set("out_dir", (w.dir / "ft").string());
    CHECK(run_command("finetune", ft).size() == 3);
}

TEST_CASE("eval: rows = criteria x ratios, ratio 0 reproduces the baseline") {
    Workspace w("eval");
    RunConfig c = w.config();
    c.set("seeds", "1");
    run_command("eval", c);
    const std::string table = w.read("eval.csv");
    CHECK(data_rows(table) == 5 * 3);
    CHECK(data_rows(w.read("eval_seeds.csv")) == 5 * 3);
    std::istringstream in(table);
    std::string line;
    std::getline(in, line);
    std::getline(in, line);
    while (std::getline(in, line)) {
        std::vector<std::string> f;
        std::istringstream fields(line);
        for (std::string x; std::getline(fields, x, ',');) f.push_back(x);
        if (f[1] == "0") CHECK(f[3] == f[4]);
    }
}

TEST_CASE("sweep-lambda: one gradient pass; homogeneity in lambda * gradient") {
    Workspace w("lambda");
    RunConfig c = w.config();
    run_command("sweep-lambda", c);
    CHECK(w.read("sweep_lambda_summary.json").find("\"gradient_passes\": 1") != std::string::npos);
    CHECK(data_rows(w.read("sweep_lambda_scale.csv")) == 4);
    CHECK(data_rows(w.read("sweep_lambda_tau.csv")) == 6 * 6);  // 6 scored conv layers, 6 lambda pairs

    const Settings s = resolve_settings(c);
    const Datasets data = load_datasets(s);
    const Model m = baseline_model(s, data, 1);
    ScoringOptions o;
    o.batch_size = 8;
    ProscoreGradients g = accumulate_proscore_gradients(m, data.train, o);
    const ImportanceReport base = proscore_report(g, 0.01);
    for (auto& v : g.filter_grads)
        for (double& x : v) x *= 0.5;
    for (double& x : g.d_grads) x *= 0.5;
    const ImportanceReport doubled = proscore_report(g, 0.02);
    for (std::size_t i = 0; i < base.entries.size(); ++i)
        CHECK(doubled.entries[i].score == doctest::Approx(base.entries[i].score).epsilon(1e-14));
}

TEST_CASE("sweep-sampling: fraction 1 matches itself; timing columns only on request") {
    Workspace w("sampling");
    RunConfig c = w.config();
    run_command("sweep-sampling", c);
    const std::string table = w.read("sweep_sampling.csv");
    CHECK(table.find("time_mean") == std::string::npos);
    CHECK(table.find("\n1,2,1,1,1,1,1,") != std::string::npos);
    CHECK(data_rows(w.read("sweep_sampling_runs.csv")) == 4);
    c.set("timing", "true");
    run_command("sweep-sampling", c);
    CHECK(w.read("sweep_sampling.csv").find("time_mean") != std::string::npos);
}

TEST_CASE("correlate: unit diagonal, symmetric matrices, long format") {
    Workspace w("correlate");
    run_command("correlate", w.config());
    const std::string json = w.read("correlation.json");
    CHECK(json.find("\"spearman\"") != std::string::npos);
    CHECK(data_rows(w.read("correlation_long.csv")) == 2 * 25);
    std::istringstream in(w.read("correlation_spearman.csv"));
    std::string line;
    std::getline(in, line);
    std::getline(in, line);
    std::vector<std::vector<double>> m;
    while (std::getline(in, line)) {
        std::istringstream fields(line);
        std::string x;
        std::getline(fields, x, ',');
        m.emplace_back();
        while (std::getline(fields, x, ',')) m.back().push_back(std::stod(x));
    }
    REQUIRE(m.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(m[i][i] == doctest::Approx(1.0).epsilon(1e-12));
        for (std::size_t j = 0; j < 5; ++j) CHECK(std::abs(m[i][j] - m[j][i]) <= 1e-12);
    }
}

TEST_CASE("every command is deterministic for an identical config") {
    Workspace w("determinism");
    RunConfig c = w.config();
    c.set("seeds", "1");
    c.set("train.epochs", "1");
    for (const auto& cmd : {"train", "score", "eval", "sweep-lambda", "sweep-sampling", "correlate"}) {
        CAPTURE(cmd);
        const Settings s = resolve_settings(c);
        OutputFiles a, b;
        const std::string name = cmd;
        if (name == "train") a = cmd_train(s), b = cmd_train(s);
        if (name == "score") a = cmd_score(s), b = cmd_score(s);
        if (name == "eval") a = cmd_eval(s), b = cmd_eval(s);
        if (name == "sweep-lambda") a = cmd_sweep_lambda(s), b = cmd_sweep_lambda(s);
        if (name == "sweep-sampling") a = cmd_sweep_sampling(s), b = cmd_sweep_sampling(s);
        if (name == "correlate") a = cmd_correlate(s), b = cmd_correlate(s);
        CHECK(!a.empty());
        CHECK(a == b);
    }
}

}  // TEST_SUITE

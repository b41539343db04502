#include <filesystem>
#include <iostream>
#include <set>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "projprune/error.hpp"
#include "projprune/experiments.hpp"

using namespace projprune;

namespace {

struct Overrides {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir, criterion, lambda, ratio, subset;
    std::vector<std::string> sets;
    bool quiet = false;
};

void add_flags(CLI::App& cmd, Overrides& o) {
    cmd.add_option("--config", o.config, "Run config file (key = value lines)");
    cmd.add_option("--seed", o.seed, "Override `seed`");
    cmd.add_option("--out-dir", o.out_dir, "Override `out_dir`");
    cmd.add_option("--criterion", o.criterion, "Override `criterion` (comma-separated list)");
    cmd.add_option("--lambda", o.lambda, "Override `lambda`");
    cmd.add_option("--ratio", o.ratio, "Override `ratio`");
    cmd.add_option("--subset", o.subset, "Override `subset`");
    cmd.add_option("--set", o.sets, "Override any key, as key=value (repeatable)");
    cmd.add_flag("--quiet", o.quiet, "No progress messages");
}

// Paths given on the command line are relative to the working directory,
// not to the config file.
std::string absolute_path(const std::string& key, const std::string& value) {
    static const std::set<std::string> path_keys{"model", "checkpoint", "out_dir", "data.train_images",
                                                 "data.train_labels", "data.test_images", "data.test_labels"};
    if (path_keys.count(key)) return std::filesystem::absolute(value).lexically_normal().string();
    if (key != "data.train_files" && key != "data.test_files") return value;
    std::string out;
    std::size_t start = 0;
    while (start <= value.size()) {
        const auto end = std::min(value.find(',', start), value.size());
        if (!out.empty()) out += ',';
        out += std::filesystem::absolute(value.substr(start, end - start)).lexically_normal().string();
        start = end + 1;
    }
    return out;
}

RunConfig build_config(const Overrides& o) {
    RunConfig c = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
    // Flag values are stored as typed, so the hash reflects what the user wrote.
    if (o.seed) c.set("seed", std::to_string(*o.seed));
    if (o.out_dir) c.set("out_dir", absolute_path("out_dir", *o.out_dir));
    if (o.criterion) c.set("criterion", *o.criterion);
    if (o.lambda) c.set("lambda", *o.lambda);
    if (o.ratio) c.set("ratio", *o.ratio);
    if (o.subset) c.set("subset", *o.subset);
    for (const auto& kv : o.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + kv + "'");
        const std::string key = kv.substr(0, eq);
        c.set(key, absolute_path(key, kv.substr(eq + 1)));
    }
    return c;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Structured channel pruning experiments"};
    app.require_subcommand(1);
    Overrides o;
    for (const auto& name : command_names()) add_flags(*app.add_subcommand(name), o);
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }
    try {
        const std::string command = app.get_subcommands().front()->get_name();
        const RunConfig config = build_config(o);
        for (const auto& f : run_command(command, config, o.quiet ? nullptr : &std::cerr)) std::cout << f << "\n";
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

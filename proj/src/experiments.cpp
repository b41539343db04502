#include "projprune/experiments.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <ostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "projprune/channels.hpp"
#include "projprune/checkpoint.hpp"
#include "projprune/error.hpp"
#include "projprune/format.hpp"
#include "projprune/stats.hpp"

namespace projprune {

namespace fs = std::filesystem;

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const auto end = std::min(s.find(sep, start), s.size());
        const std::string item = trim(s.substr(start, end - start));
        if (!item.empty()) out.push_back(item);
        start = end + 1;
    }
    return out;
}

// Hands out config values by key and remembers which keys were read, so
// that leftovers can be reported as unknown.
class Reader {
public:
    explicit Reader(const RunConfig& config) : config_(config) {}

    const std::string* raw(const std::string& key) {
        used_.insert(key);
        const auto it = config_.values.find(key);
        return it == config_.values.end() ? nullptr : &it->second;
    }

    std::string text(const std::string& key, const std::string& fallback) {
        const std::string* v = raw(key);
        return v ? *v : fallback;
    }

    double number(const std::string& key, double fallback) {
        const std::string* v = raw(key);
        return v ? to_double(key, *v) : fallback;
    }

    std::uint64_t count(const std::string& key, std::uint64_t fallback) {
        const std::string* v = raw(key);
        return v ? to_u64(key, *v) : fallback;
    }

    bool flag(const std::string& key, bool fallback) {
        const std::string* v = raw(key);
        if (!v) return fallback;
        if (*v == "true" || *v == "1" || *v == "yes") return true;
        if (*v == "false" || *v == "0" || *v == "no") return false;
        throw ConfigError(key + ": expected true or false, got '" + *v + "'");
    }

    std::vector<double> numbers(const std::string& key, std::vector<double> fallback) {
        const std::string* v = raw(key);
        if (!v) return fallback;
        std::vector<double> out;
        for (const auto& item : split_list(*v, ',')) out.push_back(to_double(key, item));
        if (out.empty()) throw ConfigError(key + ": empty list");
        return out;
    }

    std::vector<std::uint64_t> counts(const std::string& key, std::vector<std::uint64_t> fallback) {
        const std::string* v = raw(key);
        if (!v) return fallback;
        std::vector<std::uint64_t> out;
        for (const auto& item : split_list(*v, ',')) out.push_back(to_u64(key, item));
        if (out.empty()) throw ConfigError(key + ": empty list");
        return out;
    }

    fs::path path(const std::string& key) {
        const std::string* v = raw(key);
        return v ? resolve(*v) : fs::path{};
    }

    std::vector<fs::path> paths(const std::string& key) {
        const std::string* v = raw(key);
        std::vector<fs::path> out;
        if (v)
            for (const auto& item : split_list(*v, ',')) out.push_back(resolve(item));
        return out;
    }

    fs::path resolve(const std::string& p) const {
        const fs::path path(p);
        return path.is_relative() && !config_.base_dir.empty() ? config_.base_dir / path : path;
    }

    void reject_unused(const std::string& prefix_ok) const {
        for (const auto& [key, value] : config_.values) {
            if (used_.count(key) || key.rfind(prefix_ok, 0) == 0) continue;
            throw ConfigError("unknown config key '" + key + "'");
        }
    }

private:
    static double to_double(const std::string& key, const std::string& s) {
        try {
            return parse_double(s, key);
        } catch (const ParseError& e) {
            throw ConfigError(e.what());
        }
    }

    static std::uint64_t to_u64(const std::string& key, const std::string& s) {
        std::uint64_t v = 0;
        auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || ptr != s.data() + s.size())
            throw ConfigError(key + ": expected a non-negative integer, got '" + s + "'");
        return v;
    }

    const RunConfig& config_;
    std::set<std::string> used_;
};

Recipe read_recipe(Reader& r, const std::string& prefix, Recipe d) {
    d.epochs = r.count(prefix + ".epochs", d.epochs);
    d.batch_size = r.count(prefix + ".batch_size", d.batch_size);
    d.lr = r.number(prefix + ".lr", d.lr);
    d.momentum = r.number(prefix + ".momentum", d.momentum);
    d.weight_decay = r.number(prefix + ".weight_decay", d.weight_decay);
    d.schedule = r.text(prefix + ".schedule", d.schedule);
    d.step_size = r.count(prefix + ".step_size", d.step_size);
    d.gamma = r.number(prefix + ".gamma", d.gamma);
    if (d.batch_size < 2) throw ConfigError(prefix + ".batch_size must be at least 2");
    if (!(d.lr > 0.0)) throw ConfigError(prefix + ".lr must be positive");
    if (d.schedule != "cosine" && d.schedule != "step" && d.schedule != "constant")
        throw ConfigError(prefix + ".schedule must be cosine, step or constant");
    if (d.schedule == "step" && d.step_size == 0) throw ConfigError(prefix + ".step_size must be positive");
    return d;
}

void require_fraction(const std::string& key, double v) {
    if (!(v > 0.0 && v <= 1.0)) throw ConfigError(key + " must be in (0, 1], got " + fmt_double(v));
}

void require_ratio(const std::string& key, double v) {
    if (!(v >= 0.0 && v < 1.0)) throw ConfigError(key + " must be in [0, 1), got " + fmt_double(v));
}

void require_file(const fs::path& p, const std::string& what) {
    if (p.empty()) throw ConfigError(what + " is not configured");
    std::error_code ec;
    if (!fs::is_regular_file(p, ec)) throw ConfigError(what + " not found: " + p.string());
}

void note(const Settings& s, const std::string& msg) {
    if (s.log) *s.log << msg << std::endl;
}

std::string hash_comment(const Settings& s) { return "# config_hash=" + s.config_hash + "\n"; }

std::string csv_row(const std::vector<std::string>& fields) {
    std::string out;
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i) out += ',';
        out += fields[i];
    }
    return out + "\n";
}

std::string fmt_count(std::uint64_t v) { return std::to_string(v); }

std::string join_channels(const std::vector<std::size_t>& channels) {
    std::string out;
    for (std::size_t i = 0; i < channels.size(); ++i) {
        if (i) out += ';';
        out += std::to_string(channels[i]);
    }
    return out;
}

double percent_reduction(std::uint64_t before, std::uint64_t after) {
    return before == 0 ? 0.0 : 100.0 * (static_cast<double>(before) - static_cast<double>(after)) / static_cast<double>(before);
}

std::string as_bytes(const std::vector<std::uint8_t>& v) { return std::string(v.begin(), v.end()); }

std::string dump_json(const nlohmann::json& j) { return j.dump(2) + "\n"; }

ModelSpec model_spec(const Settings& s) {
    require_file(s.model, "model spec");
    return load_model_spec(s.model);
}

// Layers of a report in first-appearance order.
std::vector<std::string> report_layers(const ImportanceReport& r) {
    std::vector<std::string> out;
    for (const auto& e : r.entries)
        if (out.empty() || out.back() != e.layer) out.push_back(e.layer);
    return out;
}

std::vector<double> layer_scores(const ImportanceReport& r, const std::string& layer) {
    std::vector<double> out;
    for (const auto& e : r.entries)
        if (e.layer == layer) out.push_back(e.score);
    return out;
}

std::vector<std::pair<std::string, std::size_t>> report_order(const ImportanceReport& r) {
    std::vector<std::pair<std::string, std::size_t>> out;
    for (const auto& e : r.entries) out.emplace_back(e.layer, e.channel);
    return out;
}

double elapsed_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct Summary {
    double mean = 0.0, min = 0.0, max = 0.0;
};

Summary summarize(const std::vector<double>& v) {
    if (v.empty()) return {std::nan(""), std::nan(""), std::nan("")};
    return {projprune::mean(v), *std::min_element(v.begin(), v.end()), *std::max_element(v.begin(), v.end())};
}

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

RunConfig RunConfig::parse(std::string_view text) {
    RunConfig c;
    std::size_t line_no = 0, start = 0;
    while (start < text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        std::string line(text.substr(start, end - start));
        start = end + 1;
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ParseError("config line " + std::to_string(line_no) + ": expected key = value");
        const std::string key = trim(std::string_view(line).substr(0, eq));
        const std::string value = trim(std::string_view(line).substr(eq + 1));
        if (key.empty()) throw ParseError("config line " + std::to_string(line_no) + ": empty key");
        if (!c.values.emplace(key, value).second)
            throw ParseError("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
    return c;
}

RunConfig RunConfig::load(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    RunConfig c = parse(ss.str());
    c.base_dir = path.parent_path();
    return c;
}

std::string RunConfig::canonical() const {
    std::string out;
    for (const auto& [k, v] : values)
        if (k != "out_dir") out += k + "=" + v + "\n";
    return out;
}

std::string RunConfig::hash() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(canonical())));
    return buf;
}

Settings resolve_settings(const RunConfig& config) {
    Settings s;
    Reader r(config);
    s.config_hash = config.hash();
    s.model = r.path("model");
    s.checkpoint = r.path("checkpoint");
    if (const std::string* v = r.raw("out_dir")) s.out_dir = r.resolve(*v);

    DataSettings& d = s.data;
    d.kind = r.text("data", d.kind);
    SyntheticSpec& syn = d.synthetic;
    syn.classes = r.count("data.classes", syn.classes);
    syn.per_class = r.count("data.per_class", syn.per_class);
    d.test_per_class = r.count("data.test_per_class", d.test_per_class);
    if (const std::string* v = r.raw("data.shape")) {
        Shape shape;
        for (const auto& item : split_list(*v, ' ')) {
            std::uint64_t dim = 0;
            auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), dim);
            if (ec != std::errc() || ptr != item.data() + item.size() || dim == 0)
                throw ConfigError("data.shape: bad dimension '" + item + "'");
            shape.push_back(dim);
        }
        syn.shape = shape;
    }
    syn.noise = r.number("data.noise", syn.noise);
    syn.jitter = r.count("data.jitter", syn.jitter);
    syn.modes = r.count("data.modes", syn.modes);
    syn.seed = r.count("data.seed", syn.seed);
    syn.prototype_seed = r.count("data.prototype_seed", syn.prototype_seed);
    d.train_images = r.path("data.train_images");
    d.train_labels = r.path("data.train_labels");
    d.test_images = r.path("data.test_images");
    d.test_labels = r.path("data.test_labels");
    d.train_files = r.paths("data.train_files");
    d.test_files = r.paths("data.test_files");
    d.normalize = r.flag("data.normalize", d.normalize);
    if (d.kind != "synthetic" && d.kind != "idx" && d.kind != "cifar")
        throw ConfigError("data must be synthetic, idx or cifar, got '" + d.kind + "'");
    if (d.kind == "synthetic" && d.test_per_class == 0) throw ConfigError("data.test_per_class must be positive");

    if (const std::string* v = r.raw("criterion")) {
        s.criteria.clear();
        for (const auto& item : split_list(*v, ',')) s.criteria.push_back(parse_criterion(item));
        if (s.criteria.empty()) throw ConfigError("criterion: empty list");
    }
    s.lambda = r.number("lambda", s.lambda);
    s.lambdas = r.numbers("lambdas", s.lambdas);
    if (!(s.lambda > 0.0)) throw ConfigError("lambda must be positive");
    for (double l : s.lambdas)
        if (!(l > 0.0)) throw ConfigError("lambdas must be positive");
    if (const std::string* v = r.raw("target")) s.target = parse_target(*v);
    if (const std::string* v = r.raw("site_policy")) s.injection.policy = parse_site_policy(*v);
    s.injection.filter.include_bias = r.flag("include_bias", s.injection.filter.include_bias);

    if (const std::string* v = r.raw("mode")) s.mode = parse_plan_mode(*v);
    s.ratio = r.number("ratio", s.ratio);
    require_ratio("ratio", s.ratio);
    s.ratios = r.numbers("ratios", s.ratios);
    for (double v : s.ratios) require_ratio("ratios", v);
    for (const auto& [key, value] : config.values) {
        if (key.rfind("ratio.", 0) != 0) continue;
        const double v = r.number(key, 0.0);
        require_ratio(key, v);
        s.layer_ratios[key.substr(6)] = v;
    }
    s.min_keep = r.count("min_keep", s.min_keep);
    if (s.min_keep == 0) throw ConfigError("min_keep must be at least 1");

    s.subset = r.number("subset", s.subset);
    require_fraction("subset", s.subset);
    s.fractions = r.numbers("fractions", s.fractions);
    for (double f : s.fractions) require_fraction("fractions", f);
    s.seed = r.count("seed", s.seed);
    s.seeds = r.counts("seeds", s.seeds);

    Recipe train_default;
    train_default.epochs = 15;
    s.train = read_recipe(r, "train", train_default);
    Recipe ft_default;
    ft_default.epochs = 5;
    ft_default.lr = 0.01;
    s.finetune = read_recipe(r, "finetune", ft_default);
    s.eval_finetune = r.flag("eval.finetune", s.eval_finetune);
    s.score_batch_size = r.count("score.batch_size", s.score_batch_size);
    if (s.score_batch_size < 2) throw ConfigError("score.batch_size must be at least 2");
    s.threads = r.count("threads", s.threads);
    if (s.threads == 0) throw ConfigError("threads must be positive");
    s.timing = r.flag("timing", s.timing);

    r.reject_unused("ratio.");
    return s;
}

Datasets load_datasets(const Settings& s) {
    const DataSettings& d = s.data;
    Datasets out;
    if (d.kind == "synthetic") {
        out.train = synthetic(d.synthetic, Split::train);
        SyntheticSpec test = d.synthetic;
        test.per_class = d.test_per_class;
        out.test = synthetic(test, Split::test);
    } else if (d.kind == "idx") {
        require_file(d.train_images, "data.train_images");
        require_file(d.train_labels, "data.train_labels");
        require_file(d.test_images, "data.test_images");
        require_file(d.test_labels, "data.test_labels");
        out.train = load_idx(d.train_images, d.train_labels);
        out.test = load_idx(d.test_images, d.test_labels);
        out.test.split = Split::test;
    } else {
        if (d.train_files.empty()) throw ConfigError("data.train_files is not configured");
        if (d.test_files.empty()) throw ConfigError("data.test_files is not configured");
        for (const auto& p : d.train_files) require_file(p, "data.train_files entry");
        for (const auto& p : d.test_files) require_file(p, "data.test_files entry");
        out.train = load_cifar_bin(d.train_files);
        out.test = load_cifar_bin(d.test_files);
        out.test.split = Split::test;
    }
    if (out.train.sample_shape() != out.test.sample_shape())
        throw ConfigError("train and test samples have different shapes");
    out.test.classes = out.train.classes = std::max(out.train.classes, out.test.classes);
    if (d.normalize) {
        const ChannelStats stats = channel_stats(out.train);
        normalize(out.train, stats);
        normalize(out.test, stats);
    }
    return out;
}

Model baseline_model(const Settings& s, const Datasets& data, std::uint64_t seed) {
    ModelSpec spec = model_spec(s);
    if (spec.input_shape != data.train.sample_shape())
        throw ConfigError("model input shape does not match the dataset samples");
    if (!s.checkpoint.empty()) {
        require_file(s.checkpoint, "checkpoint");
        return Model::from_state(std::move(spec), load_checkpoint(s.checkpoint));
    }
    Model m = Model::build(std::move(spec), seed);
    if (m.num_classes() != data.train.classes) throw ConfigError("model classes do not match the dataset");
    Recipe recipe = s.train;
    recipe.seed = seed;
    note(s, "training baseline (seed " + std::to_string(seed) + ", " + std::to_string(recipe.epochs) + " epochs)");
    train(m, data.train, data.test, recipe);
    return m;
}

ImportanceReport run_criterion(Criterion c, const Model& model, const Dataset& train, const Settings& s, double lambda,
                               double subset, std::uint64_t seed) {
    ScoringOptions o;
    o.target = s.target;
    o.injection = s.injection;
    o.subset = subset;
    o.seed = seed;
    o.batch_size = s.score_batch_size;
    o.threads = s.threads;
    switch (c) {
        case Criterion::proscore: return score_proscore(model, train, lambda, o);
        case Criterion::l1: return score_l1(model, s.target, s.injection.filter);
        case Criterion::l2: return score_l2(model, s.target, s.injection.filter);
        case Criterion::taylor: return score_taylor(model, train, o);
        case Criterion::fpgm: return score_fpgm(model, s.target, s.injection.filter);
        case Criterion::random: return score_random(model, s.target, seed);
    }
    throw ConfigError("unknown criterion");
}

PrunePlan make_plan(const Model& model, const ImportanceReport& report, const Settings& s, double ratio) {
    PrunePlan p = s.mode == PlanMode::layerwise ? plan_layerwise(model, report, LayerRatios{ratio, s.layer_ratios})
                                                : plan_global(model, report, ratio, s.min_keep);
    p.source = report.id();
    return p;
}

double plan_overlap(const PrunePlan& reference, const PrunePlan& plan) {
    if (reference.selected.empty()) return 1.0;
    const std::set<PlanEntry> chosen(plan.selected.begin(), plan.selected.end());
    std::size_t hits = 0;
    for (const auto& e : reference.selected) hits += chosen.count(e);
    return static_cast<double>(hits) / static_cast<double>(reference.selected.size());
}

void write_outputs(const fs::path& dir, const OutputFiles& files) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error("cannot create output directory " + dir.string() + ": " + ec.message());
    std::vector<std::pair<fs::path, fs::path>> staged;
    auto discard = [&] {
        for (const auto& [tmp, final_path] : staged) fs::remove(tmp, ec);
    };
    for (const auto& [name, bytes] : files) {
        const fs::path final_path = dir / name;
        const fs::path tmp = dir / ("." + name + ".partial");
        staged.emplace_back(tmp, final_path);
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.close();
        if (!out) {
            discard();
            throw Error("cannot write " + tmp.string());
        }
    }
    for (std::size_t i = 0; i < staged.size(); ++i) {
        fs::rename(staged[i].first, staged[i].second, ec);
        if (ec) {
            const std::string msg = "cannot rename " + staged[i].first.string() + ": " + ec.message();
            for (std::size_t j = 0; j < i; ++j) fs::remove(staged[j].second, ec);
            for (std::size_t j = i; j < staged.size(); ++j) fs::remove(staged[j].first, ec);
            throw Error(msg);
        }
    }
}

OutputFiles cmd_train(const Settings& s) {
    const Datasets data = load_datasets(s);
    ModelSpec spec = model_spec(s);
    Model m = Model::build(spec, s.seed);
    if (m.num_classes() != data.train.classes) throw ConfigError("model classes do not match the dataset");
    Recipe recipe = s.train;
    recipe.seed = s.seed;
    note(s, "training " + std::to_string(recipe.epochs) + " epochs");
    const TrainTrace trace = train(m, data.train, data.test, recipe);

    std::string log = hash_comment(s) + "epoch,train_loss,eval_accuracy\n";
    for (std::size_t e = 0; e < trace.train_loss.size(); ++e)
        log += csv_row({fmt_count(e + 1), fmt_double(trace.train_loss[e]), fmt_double(trace.eval_accuracy[e])});
    const CostReport cost = count_params_flops(m);
    nlohmann::json summary = {{"config_hash", s.config_hash},
                              {"checkpoint", "model.ckpt"},
                              {"seed", s.seed},
                              {"epochs", recipe.epochs},
                              {"train_accuracy", accuracy(m, data.train)},
                              {"test_accuracy", accuracy(m, data.test)},
                              {"params", cost.params},
                              {"flops", cost.flops}};
    return {{"model.ckpt", as_bytes(encode_checkpoint(m.state()))},
            {"model.txt", hash_comment(s) + format_model_spec(spec)},
            {"train_log.csv", log},
            {"train_summary.json", dump_json(summary)}};
}

OutputFiles cmd_score(const Settings& s) {
    const Datasets data = load_datasets(s);
    const Model m = baseline_model(s, data, s.seed);
    OutputFiles out;
    for (Criterion c : s.criteria) {
        note(s, std::string("scoring ") + criterion_name(c));
        const ImportanceReport r = run_criterion(c, m, data.train, s, s.lambda, s.subset, s.seed);
        out["scores_" + r.id() + ".csv"] = report_to_csv(r, "config_hash=" + s.config_hash);
    }
    return out;
}

OutputFiles cmd_prune(const Settings& s) {
    if (s.criteria.size() != 1) throw ConfigError("prune needs exactly one criterion");
    const Datasets data = load_datasets(s);
    Model m = baseline_model(s, data, s.seed);
    const ImportanceReport r = run_criterion(s.criteria.front(), m, data.train, s, s.lambda, s.subset, s.seed);
    const PrunePlan plan = make_plan(m, r, s, s.ratio);
    Model pruned = apply_plan(m, plan);
    const CostReport before = count_params_flops(m), after = count_params_flops(pruned);
    std::string summary = hash_comment(s) +
                          "criterion,mode,ratio,channels_removed,params_before,params_after,params_reduction_pct,"
                          "flops_before,flops_after,flops_reduction_pct,acc_before,acc_after_prune\n";
    summary += csv_row({criterion_name(r.criterion), plan_mode_name(s.mode), fmt_double(s.ratio),
                        fmt_count(plan.selected.size()), fmt_count(before.params), fmt_count(after.params),
                        fmt_double(percent_reduction(before.params, after.params)), fmt_count(before.flops),
                        fmt_count(after.flops), fmt_double(percent_reduction(before.flops, after.flops)),
                        fmt_double(accuracy(m, data.test)), fmt_double(accuracy(pruned, data.test))});
    return {{"plan.txt", hash_comment(s) + format_plan(plan)},
            {"pruned.ckpt", as_bytes(encode_checkpoint(pruned.state()))},
            {"pruned_model.txt", hash_comment(s) + format_model_spec(pruned.spec())},
            {"prune_summary.csv", summary}};
}

OutputFiles cmd_finetune(const Settings& s) {
    if (s.checkpoint.empty()) throw ConfigError("finetune needs a checkpoint");
    const Datasets data = load_datasets(s);
    Model m = baseline_model(s, data, s.seed);
    Recipe recipe = s.finetune;
    recipe.seed = s.seed;
    note(s, "fine-tuning " + std::to_string(recipe.epochs) + " epochs");
    FinetuneResult ft = finetune(m, data.train, data.test, recipe);
    std::string log = hash_comment(s) + "epoch,train_loss,eval_accuracy\n";
    for (std::size_t e = 0; e < ft.trace.train_loss.size(); ++e)
        log += csv_row({fmt_count(e + 1), fmt_double(ft.trace.train_loss[e]), fmt_double(ft.trace.eval_accuracy[e])});
    nlohmann::json summary = {{"config_hash", s.config_hash},
                              {"checkpoint", "finetuned.ckpt"},
                              {"epochs", recipe.epochs},
                              {"acc_before", accuracy(m, data.test)},
                              {"acc_after", accuracy(ft.model, data.test)}};
    return {{"finetuned.ckpt", as_bytes(encode_checkpoint(ft.model.state()))},
            {"finetune_log.csv", log},
            {"finetune_summary.json", dump_json(summary)}};
}

OutputFiles cmd_eval(const Settings& s) {
    const Datasets data = load_datasets(s);
    const bool tune = s.eval_finetune && s.finetune.epochs > 0;
    struct Cell {
        std::vector<double> baseline, before, after, params, flops;
    };
    std::map<std::pair<std::size_t, std::size_t>, Cell> cells;  // (criterion, ratio) indices
    std::string per_seed = hash_comment(s) +
                           "seed,criterion,ratio,channels_removed,baseline_acc,acc_before_ft,acc_after_ft,"
                           "params_reduction_pct,flops_reduction_pct\n";
    for (std::uint64_t seed : s.seeds) {
        Model m = baseline_model(s, data, seed);
        const double base = accuracy(m, data.test);
        const CostReport full = count_params_flops(m);
        for (std::size_t ci = 0; ci < s.criteria.size(); ++ci) {
            note(s, "seed " + std::to_string(seed) + ": " + criterion_name(s.criteria[ci]));
            const ImportanceReport r = run_criterion(s.criteria[ci], m, data.train, s, s.lambda, s.subset, seed);
            for (std::size_t ri = 0; ri < s.ratios.size(); ++ri) {
                const PrunePlan plan = make_plan(m, r, s, s.ratios[ri]);
                Model pruned = apply_plan(m, plan);
                const double acc = accuracy(pruned, data.test);
                double acc_ft = std::nan("");
                if (tune) {
                    Recipe recipe = s.finetune;
                    recipe.seed = seed;
                    FinetuneResult ft = finetune(pruned, data.train, data.test, recipe);
                    acc_ft = accuracy(ft.model, data.test);
                }
                const CostReport cost = count_params_flops(pruned);
                const double dp = percent_reduction(full.params, cost.params);
                const double df = percent_reduction(full.flops, cost.flops);
                Cell& cell = cells[{ci, ri}];
                cell.baseline.push_back(base);
                cell.before.push_back(acc);
                if (tune) cell.after.push_back(acc_ft);
                cell.params.push_back(dp);
                cell.flops.push_back(df);
                per_seed += csv_row({fmt_count(seed), criterion_name(s.criteria[ci]), fmt_double(s.ratios[ri]),
                                     fmt_count(plan.selected.size()), fmt_double(base), fmt_double(acc),
                                     fmt_double(acc_ft), fmt_double(dp), fmt_double(df)});
            }
        }
    }
    std::string table = hash_comment(s) +
                        "criterion,ratio,seeds,baseline_acc,acc_before_ft,acc_before_ft_min,acc_before_ft_max,"
                        "acc_after_ft,params_reduction_pct,flops_reduction_pct\n";
    for (std::size_t ci = 0; ci < s.criteria.size(); ++ci)
        for (std::size_t ri = 0; ri < s.ratios.size(); ++ri) {
            const Cell& c = cells.at({ci, ri});
            const Summary before = summarize(c.before);
            table += csv_row({criterion_name(s.criteria[ci]), fmt_double(s.ratios[ri]), fmt_count(s.seeds.size()),
                              fmt_double(mean(c.baseline)), fmt_double(before.mean), fmt_double(before.min),
                              fmt_double(before.max), fmt_double(summarize(c.after).mean), fmt_double(mean(c.params)),
                              fmt_double(mean(c.flops))});
        }
    return {{"eval.csv", table}, {"eval_seeds.csv", per_seed}};
}

OutputFiles cmd_sweep_lambda(const Settings& s) {
    const Datasets data = load_datasets(s);
    const Model m = baseline_model(s, data, s.seed);
    ScoringOptions o;
    o.target = s.target;
    o.injection = s.injection;
    o.subset = s.subset;
    o.seed = s.seed;
    o.batch_size = s.score_batch_size;
    o.threads = s.threads;
    note(s, "accumulating gradients once");
    const ProscoreGradients g = accumulate_proscore_gradients(m, data.train, o);

    std::vector<ImportanceReport> reports;
    std::vector<std::map<std::string, std::vector<std::size_t>>> indices;
    std::string idx_csv = hash_comment(s) + "lambda,layer,pruned_channels\n";
    std::string scale_csv = hash_comment(s) + "lambda,min,max,mean,median,stddev,infinite\n";
    for (double lambda : s.lambdas) {
        reports.push_back(proscore_report(g, lambda));
        const ImportanceReport& r = reports.back();
        indices.push_back(pruned_indices(m, make_plan(m, r, s, s.ratio)));
        for (const auto& layer : report_layers(r)) {
            const auto it = indices.back().find(layer);
            idx_csv += csv_row({fmt_double(lambda), layer,
                                join_channels(it == indices.back().end() ? std::vector<std::size_t>{} : it->second)});
        }
        std::vector<double> finite;
        std::size_t inf = 0;
        for (const auto& e : r.entries) {
            if (std::isfinite(e.score)) finite.push_back(e.score);
            else ++inf;
        }
        std::sort(finite.begin(), finite.end());
        double sd = 0.0, med = std::nan(""), mu = std::nan("");
        if (!finite.empty()) {
            mu = mean(finite);
            for (double v : finite) sd += (v - mu) * (v - mu);
            sd = std::sqrt(sd / static_cast<double>(finite.size()));
            const std::size_t n = finite.size();
            med = n % 2 ? finite[n / 2] : 0.5 * (finite[n / 2 - 1] + finite[n / 2]);
        }
        scale_csv += csv_row({fmt_double(lambda), fmt_double(finite.empty() ? std::nan("") : finite.front()),
                              fmt_double(finite.empty() ? std::nan("") : finite.back()), fmt_double(mu), fmt_double(med),
                              fmt_double(sd), fmt_count(inf)});
    }

    std::string tau_csv = hash_comment(s) + "layer,lambda_a,lambda_b,kendall_tau,identical_indices\n";
    bool all_identical = true;
    double min_tau = 1.0;
    const auto layers = report_layers(reports.front());
    for (const auto& layer : layers)
        for (std::size_t a = 0; a < reports.size(); ++a)
            for (std::size_t b = a + 1; b < reports.size(); ++b) {
                const double tau = kendall_tau(layer_scores(reports[a], layer), layer_scores(reports[b], layer));
                const auto ia = indices[a].find(layer), ib = indices[b].find(layer);
                const bool same = (ia == indices[a].end() ? std::vector<std::size_t>{} : ia->second) ==
                                  (ib == indices[b].end() ? std::vector<std::size_t>{} : ib->second);
                all_identical = all_identical && same;
                if (!std::isnan(tau)) min_tau = std::min(min_tau, tau);
                tau_csv += csv_row({layer, fmt_double(s.lambdas[a]), fmt_double(s.lambdas[b]), fmt_double(tau),
                                    same ? "true" : "false"});
            }
    nlohmann::json summary = {{"config_hash", s.config_hash},  {"gradient_passes", 1},
                              {"batches", g.batches},          {"lambdas", s.lambdas},
                              {"ratio", s.ratio},              {"mode", plan_mode_name(s.mode)},
                              {"all_indices_identical", all_identical}, {"min_kendall_tau", min_tau}};
    return {{"sweep_lambda_indices.csv", idx_csv},
            {"sweep_lambda_tau.csv", tau_csv},
            {"sweep_lambda_scale.csv", scale_csv},
            {"sweep_lambda_summary.json", dump_json(summary)}};
}

OutputFiles cmd_sweep_sampling(const Settings& s) {
    const Datasets data = load_datasets(s);
    const Model m = baseline_model(s, data, s.seed);
    note(s, "scoring the full dataset");
    const ImportanceReport full = run_criterion(Criterion::proscore, m, data.train, s, s.lambda, 1.0, s.seed);
    const PrunePlan full_plan = make_plan(m, full, s, s.ratio);
    const auto order = report_order(full);
    const std::vector<double> full_norm = normalized_scores(full, order);

    struct Row {
        std::vector<double> time, rho, overlap, acc;
    };
    std::vector<Row> rows(s.fractions.size());
    std::string runs = hash_comment(s) + "fraction,seed," + (s.timing ? "time_s," : "") +
                       "spearman_vs_full,overlap,acc_after_prune\n";
    for (std::size_t fi = 0; fi < s.fractions.size(); ++fi)
        for (std::uint64_t seed : s.seeds) {
            note(s, "fraction " + fmt_double(s.fractions[fi]) + " seed " + std::to_string(seed));
            const auto t0 = std::chrono::steady_clock::now();
            const ImportanceReport r = run_criterion(Criterion::proscore, m, data.train, s, s.lambda, s.fractions[fi], seed);
            const double t = elapsed_since(t0);
            const PrunePlan plan = make_plan(m, r, s, s.ratio);
            Model pruned = apply_plan(m, plan);
            Row& row = rows[fi];
            row.time.push_back(t);
            row.rho.push_back(spearman(full_norm, normalized_scores(r, order)));
            row.overlap.push_back(plan_overlap(full_plan, plan));
            row.acc.push_back(accuracy(pruned, data.test));
            runs += fmt_double(s.fractions[fi]) + "," + fmt_count(seed) + "," + (s.timing ? fmt_double(t) + "," : "") +
                    fmt_double(row.rho.back()) + "," + fmt_double(row.overlap.back()) + "," +
                    fmt_double(row.acc.back()) + "\n";
        }
    std::string table = hash_comment(s) + "fraction,runs," + (s.timing ? "time_mean,time_max," : "") +
                        "spearman_mean,spearman_max,overlap_mean,overlap_min,overlap_max,acc_mean,acc_max\n";
    for (std::size_t fi = 0; fi < s.fractions.size(); ++fi) {
        const Row& row = rows[fi];
        const Summary time = summarize(row.time), rho = summarize(row.rho), ov = summarize(row.overlap),
                      acc = summarize(row.acc);
        table += fmt_double(s.fractions[fi]) + "," + fmt_count(row.rho.size()) + "," +
                 (s.timing ? fmt_double(time.mean) + "," + fmt_double(time.max) + "," : "") + fmt_double(rho.mean) +
                 "," + fmt_double(rho.max) + "," + fmt_double(ov.mean) + "," + fmt_double(ov.min) + "," +
                 fmt_double(ov.max) + "," + fmt_double(acc.mean) + "," + fmt_double(acc.max) + "\n";
    }
    return {{"sweep_sampling.csv", table}, {"sweep_sampling_runs.csv", runs}};
}

OutputFiles cmd_correlate(const Settings& s) {
    const Datasets data = load_datasets(s);
    const Model m = baseline_model(s, data, s.seed);
    std::vector<ImportanceReport> reports;
    for (Criterion c : s.criteria) {
        note(s, std::string("scoring ") + criterion_name(c));
        reports.push_back(run_criterion(c, m, data.train, s, s.lambda, s.subset, s.seed));
    }
    const CorrelationMatrix cm = correlate(reports);
    auto matrix_csv = [&](const std::vector<std::vector<double>>& mat) {
        std::string out = hash_comment(s) + "criterion";
        for (const auto& n : cm.names) out += "," + n;
        out += "\n";
        for (std::size_t i = 0; i < cm.names.size(); ++i) {
            out += cm.names[i];
            for (double v : mat[i]) out += "," + fmt_double(v);
            out += "\n";
        }
        return out;
    };
    std::string lng = hash_comment(s) + "method,row,col,value\n";
    for (const auto& [method, mat] : {std::pair{"pearson", &cm.pearson}, std::pair{"spearman", &cm.spearman}})
        for (std::size_t i = 0; i < cm.names.size(); ++i)
            for (std::size_t j = 0; j < cm.names.size(); ++j)
                lng += csv_row({method, cm.names[i], cm.names[j], fmt_double((*mat)[i][j])});
    nlohmann::json j = {{"config_hash", s.config_hash}, {"names", cm.names}, {"pearson", cm.pearson}, {"spearman", cm.spearman}};
    return {{"correlation_pearson.csv", matrix_csv(cm.pearson)},
            {"correlation_spearman.csv", matrix_csv(cm.spearman)},
            {"correlation_long.csv", lng},
            {"correlation.json", dump_json(j)}};
}

const std::vector<std::string>& command_names() {
    static const std::vector<std::string> names{"train", "score", "prune", "eval", "finetune", "sweep-lambda",
                                                "sweep-sampling", "correlate"};
    return names;
}

std::vector<std::string> run_command(std::string_view command, const RunConfig& config, std::ostream* log) {
    Settings s = resolve_settings(config);
    s.log = log;
    OutputFiles files;
    if (command == "train") files = cmd_train(s);
    else if (command == "score") files = cmd_score(s);
    else if (command == "prune") files = cmd_prune(s);
    else if (command == "eval") files = cmd_eval(s);
    else if (command == "finetune") files = cmd_finetune(s);
    else if (command == "sweep-lambda") files = cmd_sweep_lambda(s);
    else if (command == "sweep-sampling") files = cmd_sweep_sampling(s);
    else if (command == "correlate") files = cmd_correlate(s);
    else throw ConfigError("unknown command '" + std::string(command) + "'");
    write_outputs(s.out_dir, files);
    std::vector<std::string> names;
    for (const auto& [name, bytes] : files) names.push_back(name);
    return names;
}

}  // namespace projprune

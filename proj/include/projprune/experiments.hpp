#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "projprune/data.hpp"
#include "projprune/importance.hpp"
#include "projprune/model.hpp"
#include "projprune/pruner.hpp"
#include "projprune/training.hpp"

namespace projprune {

// Key-value run description. Text form: one `key = value` per line, '#'
// starts a comment. Relative paths resolve against `base_dir`.
struct RunConfig {
    std::map<std::string, std::string> values;
    std::filesystem::path base_dir;

    static RunConfig parse(std::string_view text);
    static RunConfig load(const std::filesystem::path& path);

    void set(const std::string& key, const std::string& value) { values[key] = value; }
    // Sorted `key=value` lines. out_dir is left out: it decides where files
    // go, not what they contain.
    std::string canonical() const;
    // FNV-1a 64 of canonical(), as 16 lowercase hex digits.
    std::string hash() const;
};

std::uint64_t fnv1a64(std::string_view bytes);

struct DataSettings {
    std::string kind = "synthetic";  // synthetic | idx | cifar
    SyntheticSpec synthetic;
    std::size_t test_per_class = 50;
    std::filesystem::path train_images, train_labels, test_images, test_labels;
    std::vector<std::filesystem::path> train_files, test_files;
    bool normalize = true;
};

struct Settings {
    std::string config_hash;
    std::filesystem::path model;
    std::filesystem::path checkpoint;  // empty: train a baseline per seed
    std::filesystem::path out_dir = "out";
    DataSettings data;

    std::vector<Criterion> criteria{Criterion::proscore, Criterion::l1, Criterion::taylor, Criterion::fpgm,
                                    Criterion::random};
    double lambda = 0.01;
    std::vector<double> lambdas{1.0, 0.1, 0.01, 0.001};
    FilterTarget target = FilterTarget::conv_weights;
    InjectionOptions injection;

    PlanMode mode = PlanMode::layerwise;
    double ratio = 0.5;
    std::vector<double> ratios{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8};
    std::map<std::string, double> layer_ratios;
    std::size_t min_keep = 1;

    double subset = 1.0;
    std::vector<double> fractions{1.0, 0.5, 0.25, 0.05};
    std::uint64_t seed = 1;
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};

    Recipe train;
    Recipe finetune;
    bool eval_finetune = false;
    std::size_t score_batch_size = 64;
    std::size_t threads = 1;
    // Wall-time columns make outputs run-dependent, so they are opt-in.
    bool timing = false;

    // Progress messages; not part of any output file.
    std::ostream* log = nullptr;
};

// Validates every key; unknown keys are a ConfigError.
Settings resolve_settings(const RunConfig& config);

struct Datasets {
    Dataset train;
    Dataset test;
};

// Missing files are a ConfigError.
Datasets load_datasets(const Settings& settings);

// The checkpoint when one is configured, otherwise a model trained from
// scratch with the train recipe and `seed`.
Model baseline_model(const Settings& settings, const Datasets& data, std::uint64_t seed);

ImportanceReport run_criterion(Criterion criterion, const Model& model, const Dataset& train, const Settings& settings,
                               double lambda, double subset, std::uint64_t seed);
PrunePlan make_plan(const Model& model, const ImportanceReport& report, const Settings& settings, double ratio);

// Fraction of `reference`'s entries also selected by `plan`; 1 when the
// reference is empty.
double plan_overlap(const PrunePlan& reference, const PrunePlan& plan);

// File name -> contents. Commands build these in memory; nothing touches
// disk until write_outputs.
using OutputFiles = std::map<std::string, std::string>;

// Writes every file to a temporary name in `dir`, then renames them all.
// On failure the temporaries are removed and no output file is created.
void write_outputs(const std::filesystem::path& dir, const OutputFiles& files);

OutputFiles cmd_train(const Settings& settings);
OutputFiles cmd_score(const Settings& settings);
OutputFiles cmd_prune(const Settings& settings);
OutputFiles cmd_eval(const Settings& settings);
OutputFiles cmd_finetune(const Settings& settings);
OutputFiles cmd_sweep_lambda(const Settings& settings);
OutputFiles cmd_sweep_sampling(const Settings& settings);
OutputFiles cmd_correlate(const Settings& settings);

const std::vector<std::string>& command_names();
// Resolves, runs `command` and writes its outputs to settings.out_dir.
// Returns the written file names.
std::vector<std::string> run_command(std::string_view command, const RunConfig& config, std::ostream* log = nullptr);

}  // namespace projprune

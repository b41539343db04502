#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "projprune/channels.hpp"
#include "projprune/data.hpp"
#include "projprune/importance.hpp"
#include "projprune/model.hpp"
#include "projprune/training.hpp"

namespace projprune {

enum class PlanMode { layerwise, global };

const char* plan_mode_name(PlanMode m);
PlanMode parse_plan_mode(std::string_view s);

// Fraction of channels removed per channel class. A class takes the ratio of
// the first of its producer layers (then batchnorm layers) named in
// `per_layer`, else `default_ratio`.
struct LayerRatios {
    double default_ratio = 0.0;
    std::map<std::string, double> per_layer;

    bool operator==(const LayerRatios&) const = default;
};

// A removed channel, identified by the first producer layer of its class.
struct PlanEntry {
    std::string layer;
    std::size_t channel = 0;

    auto operator<=>(const PlanEntry&) const = default;
};

struct PrunePlan {
    PlanMode mode = PlanMode::layerwise;
    // Sorted by (class order, channel).
    std::vector<PlanEntry> selected;
    LayerRatios ratios;        // layerwise
    double global_ratio = 0;   // global
    std::size_t min_keep = 1;  // global
    std::string source;        // report id

    bool empty() const { return selected.empty(); }
    bool operator==(const PrunePlan&) const = default;
};

// Groups scoring +inf, or with no member in the report, are never removed.
// Group score is the mean of its members' scores; ties go to the class that
// appears first in the model, then to the lower channel.
PrunePlan plan_layerwise(const Model& model, const ImportanceReport& report, const LayerRatios& ratios);
PrunePlan plan_global(const Model& model, const ImportanceReport& report, double ratio, std::size_t min_keep = 1);

// Mean member score per prune group, in dependency_groups order; NaN for a
// group with no scored member.
std::vector<double> group_scores(const Model& model, const DependencyAnalysis& deps, const ImportanceReport& report);

// The dependency groups a plan removes; throws PlanError on a mismatch.
std::vector<PruneGroup> plan_groups(const Model& model, const PrunePlan& plan);

// Physically removes the planned channels from a model without psi layers.
Model apply_plan(const Model& model, const PrunePlan& plan);

// The original model with every planned channel's producer rows, biases,
// batchnorm scale and shift, and consumer input slices set to zero.
Model mask_plan(const Model& model, const PrunePlan& plan);

// Removed channel indices per producer and batchnorm layer.
std::map<std::string, std::vector<std::size_t>> pruned_indices(const Model& model, const PrunePlan& plan);

std::string format_plan(const PrunePlan& plan);
PrunePlan parse_plan(std::string_view text);

struct FinetuneResult {
    Model model;
    TrainTrace trace;
};

FinetuneResult finetune(const Model& model, const Dataset& train_set, const Dataset& eval_set, const Recipe& recipe);

}  // namespace projprune

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "projprune/checkpoint.hpp"
#include "projprune/model.hpp"

namespace projprune {

// Which parameters realize a prunable filter.
enum class FilterTarget {
    conv_weights,   // conv output channel: weight row (+ bias)
    dense_weights,  // hidden dense unit: weight row (+ bias)
    bn_params,      // batchnorm channel: (gamma, beta)
};

const char* target_name(FilterTarget t);
FilterTarget parse_target(std::string_view s);

// A contiguous run of scalars inside one named parameter.
struct ParamSlice {
    std::string param;
    std::size_t offset = 0;
    std::size_t length = 0;

    bool operator==(const ParamSlice&) const = default;
};

// One prunable output channel and the parameter slices whose concatenation
// is its filter vector.
struct FilterHandle {
    std::string layer;
    std::size_t channel = 0;
    std::vector<ParamSlice> slices;
    std::size_t filter_dim = 0;
};

struct FilterOptions {
    // Whether a conv/dense filter includes its bias entry.
    bool include_bias = true;
};

// One handle per output channel of every prunable layer of the requested
// kind, in layer order then channel order. The classifier and any channel
// space tied to the model input are never prunable.
std::vector<FilterHandle> extract_filters(const Model& model, FilterTarget target, const FilterOptions& options = {});

// Concatenated slice contents from `tensors` (model parameters or a
// gradient table).
std::vector<double> gather(const NamedTensors& tensors, const FilterHandle& handle);
void scatter(NamedTensors& tensors, const FilterHandle& handle, std::span<const double> values);

// How a consumer layer reads a channel space.
struct ChannelConsumer {
    std::size_t layer = 0;
    // Features per channel in the consumer's input: 1 for conv2d and for
    // dense on an unflattened space, H*W for dense after flatten.
    std::size_t block = 1;
};

// A set of channel spaces that structural coupling (residual adds) forces to
// share channel indices. Channel i of every producer, batchnorm and consumer
// in the class is one prune decision.
struct ChannelClass {
    std::size_t id = 0;
    std::size_t channels = 0;
    std::vector<std::size_t> producers;   // conv2d / dense layers
    std::vector<std::size_t> batchnorms;
    std::vector<ChannelConsumer> consumers;
    bool prunable = false;
};

struct PruneGroup {
    std::size_t class_id = 0;
    std::size_t channel = 0;
    // Producer rows and batchnorm entries realizing the channel.
    std::vector<FilterHandle> members;
    // Input-channel slices of consumer layers that disappear with it.
    std::vector<ParamSlice> downstream;
};

struct DependencyAnalysis {
    std::vector<ChannelClass> classes;
    // Prunable classes only, ordered by class then channel.
    std::vector<PruneGroup> groups;
};

// Union of channel spaces across residual adds; throws UnsupportedTopology
// for layouts the pruner cannot rebuild.
DependencyAnalysis analyse_dependencies(const Model& model);
std::vector<PruneGroup> dependency_groups(const Model& model);

struct LayerCost {
    std::string layer;
    std::size_t params = 0;
    std::size_t flops = 0;
};

struct CostReport {
    std::size_t params = 0;
    std::size_t flops = 0;
    std::vector<LayerCost> layers;
};

// params = trainable scalars; FLOPs = 2 x MACs for conv and dense, 2 per
// element for batchnorm, 1 per element for relu, add and average pooling
// input, 5 per element for psi.
CostReport count_params_flops(const ModelSpec& spec, const Shape& input_shape);
CostReport count_params_flops(const Model& model);

}  // namespace projprune

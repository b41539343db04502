#include "projprune/channels.hpp"

#include <algorithm>
#include <map>
#include <numeric>

#include "projprune/error.hpp"

namespace projprune {

const char* target_name(FilterTarget t) {
    switch (t) {
        case FilterTarget::conv_weights: return "conv_weights";
        case FilterTarget::dense_weights: return "dense_weights";
        case FilterTarget::bn_params: return "bn_params";
    }
    return "?";
}

FilterTarget parse_target(std::string_view s) {
    if (s == "conv_weights") return FilterTarget::conv_weights;
    if (s == "dense_weights") return FilterTarget::dense_weights;
    if (s == "bn_params") return FilterTarget::bn_params;
    throw ConfigError("unknown filter target '" + std::string(s) + "'");
}

namespace {

FilterHandle producer_handle(const Model& model, std::size_t layer, std::size_t channel, bool include_bias) {
    const LayerSpec& l = model.layers()[layer];
    const Tensor& w = model.param(l.name + ".weight");
    const std::size_t row = w.size() / w.dim(0);
    FilterHandle h{l.name, channel, {{l.name + ".weight", channel * row, row}}, row};
    if (l.bias && include_bias) {
        h.slices.push_back({l.name + ".bias", channel, 1});
        h.filter_dim += 1;
    }
    return h;
}

FilterHandle bn_handle(const Model& model, std::size_t layer, std::size_t channel) {
    const std::string& name = model.layers()[layer].name;
    return {name, channel, {{name + ".gamma", channel, 1}, {name + ".beta", channel, 1}}, 2};
}

struct UnionFind {
    std::vector<std::size_t> parent;
    std::size_t make() {
        parent.push_back(parent.size());
        return parent.size() - 1;
    }
    std::size_t find(std::size_t x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    }
    void unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
    }
};

}  // namespace

DependencyAnalysis analyse_dependencies(const Model& model) {
    const auto& layers = model.layers();
    const std::size_t n = layers.size();
    UnionFind uf;
    const std::size_t input_space = uf.make();

    // A layer's output lives either directly in a channel space, or in the
    // flattened view of one (block = features per channel).
    struct Placement {
        std::size_t space = 0;
        std::size_t block = 0;  // 0: direct
    };
    std::vector<Placement> out(n);
    auto in_place = [&](std::size_t i, std::size_t slot) {
        const std::size_t p = model.producers(i)[slot];
        return p == Model::npos ? Placement{input_space, 0} : out[p];
    };

    for (std::size_t i = 0; i < n; ++i) {
        const LayerSpec& l = layers[i];
        const Placement src = in_place(i, 0);
        switch (l.kind) {
            case LayerKind::conv2d:
                if (src.block) throw UnsupportedTopology("conv2d '" + l.name + "' consumes a flattened tensor");
                out[i] = {uf.make(), 0};
                break;
            case LayerKind::dense:
                out[i] = {uf.make(), 0};
                break;
            case LayerKind::batchnorm:
            case LayerKind::avgpool:
                if (src.block) {
                    throw UnsupportedTopology(std::string(layer_kind_name(l.kind)) + " '" + l.name +
                                              "' on a flattened tensor is not supported");
                }
                out[i] = src;
                break;
            case LayerKind::relu:
            case LayerKind::psi:
                out[i] = src;
                break;
            case LayerKind::flatten: {
                if (src.block) throw UnsupportedTopology("nested flatten at '" + l.name + "'");
                const Shape& s = model.input_shape_of(i);
                out[i] = {src.space, s.size() > 1 ? shape_size(s) / s[0] : 1};
                break;
            }
            case LayerKind::add: {
                const Placement other = in_place(i, 1);
                if (src.block || other.block) throw UnsupportedTopology("add '" + l.name + "' on flattened tensors");
                uf.unite(src.space, other.space);
                out[i] = src;
                break;
            }
        }
    }

    // Gather classes keyed by union-find root, in order of first appearance.
    std::map<std::size_t, std::size_t> root_to_class;
    DependencyAnalysis result;
    auto class_of = [&](std::size_t space) -> ChannelClass& {
        const std::size_t root = uf.find(space);
        auto [it, fresh] = root_to_class.try_emplace(root, result.classes.size());
        if (fresh) {
            ChannelClass c;
            c.id = result.classes.size();
            c.prunable = true;
            result.classes.push_back(c);
        }
        return result.classes[it->second];
    };

    class_of(input_space).prunable = false;
    class_of(input_space).channels = model.input_shape()[0];
    for (std::size_t i = 0; i < n; ++i) {
        const LayerSpec& l = layers[i];
        if (l.kind == LayerKind::conv2d || l.kind == LayerKind::dense) {
            ChannelClass& c = class_of(out[i].space);
            c.producers.push_back(i);
            c.channels = l.out_channels;
            const Placement src = in_place(i, 0);
            ChannelClass& ic = class_of(src.space);
            ic.consumers.push_back({i, src.block ? src.block : 1});
        } else if (l.kind == LayerKind::batchnorm) {
            class_of(out[i].space).batchnorms.push_back(i);
        }
    }
    class_of(out[n - 1].space).prunable = false;

    for (const ChannelClass& c : result.classes) {
        if (!c.prunable) continue;
        for (std::size_t ch = 0; ch < c.channels; ++ch) {
            PruneGroup g;
            g.class_id = c.id;
            g.channel = ch;
            for (std::size_t p : c.producers) g.members.push_back(producer_handle(model, p, ch, true));
            for (std::size_t b : c.batchnorms) g.members.push_back(bn_handle(model, b, ch));
            for (const ChannelConsumer& cons : c.consumers) {
                const LayerSpec& l = layers[cons.layer];
                const Tensor& w = model.param(l.name + ".weight");
                const std::size_t outs = w.dim(0), row = w.size() / outs;
                const std::size_t per = l.kind == LayerKind::conv2d ? l.kernel * l.kernel : cons.block;
                for (std::size_t o = 0; o < outs; ++o) g.downstream.push_back({l.name + ".weight", o * row + ch * per, per});
            }
            result.groups.push_back(std::move(g));
        }
    }
    return result;
}

std::vector<PruneGroup> dependency_groups(const Model& model) { return analyse_dependencies(model).groups; }

std::vector<FilterHandle> extract_filters(const Model& model, FilterTarget target, const FilterOptions& options) {
    const DependencyAnalysis deps = analyse_dependencies(model);
    std::vector<char> prunable(model.layers().size(), 0);
    for (const ChannelClass& c : deps.classes) {
        if (!c.prunable) continue;
        for (std::size_t p : c.producers) prunable[p] = 1;
        for (std::size_t b : c.batchnorms) prunable[b] = 1;
    }
    std::vector<FilterHandle> out;
    for (std::size_t i = 0; i < model.layers().size(); ++i) {
        if (!prunable[i]) continue;
        const LayerSpec& l = model.layers()[i];
        const bool match = (target == FilterTarget::conv_weights && l.kind == LayerKind::conv2d) ||
                           (target == FilterTarget::dense_weights && l.kind == LayerKind::dense) ||
                           (target == FilterTarget::bn_params && l.kind == LayerKind::batchnorm);
        if (!match) continue;
        for (std::size_t ch = 0; ch < l.out_channels; ++ch) {
            out.push_back(target == FilterTarget::bn_params ? bn_handle(model, i, ch)
                                                            : producer_handle(model, i, ch, options.include_bias));
        }
    }
    return out;
}

std::vector<double> gather(const NamedTensors& tensors, const FilterHandle& handle) {
    std::vector<double> v;
    v.reserve(handle.filter_dim);
    for (const ParamSlice& s : handle.slices) {
        auto it = tensors.find(s.param);
        if (it == tensors.end()) throw StateError("gather: no tensor '" + s.param + "'");
        if (s.offset + s.length > it->second.size()) throw ShapeError("gather: slice outside '" + s.param + "'");
        const auto vals = it->second.values().subspan(s.offset, s.length);
        v.insert(v.end(), vals.begin(), vals.end());
    }
    return v;
}

void scatter(NamedTensors& tensors, const FilterHandle& handle, std::span<const double> values) {
    if (values.size() != handle.filter_dim) throw ShapeError("scatter: filter length mismatch");
    std::size_t k = 0;
    for (const ParamSlice& s : handle.slices) {
        auto it = tensors.find(s.param);
        if (it == tensors.end()) throw StateError("scatter: no tensor '" + s.param + "'");
        if (s.offset + s.length > it->second.size()) throw ShapeError("scatter: slice outside '" + s.param + "'");
        for (std::size_t i = 0; i < s.length; ++i) it->second[s.offset + i] = values[k++];
    }
}

CostReport count_params_flops(const ModelSpec& spec, const Shape& input_shape) {
    ModelSpec s = spec;
    s.input_shape = input_shape;
    return count_params_flops(Model::build(std::move(s), 0));
}

CostReport count_params_flops(const Model& model) {
    CostReport r;
    for (std::size_t i = 0; i < model.layers().size(); ++i) {
        const LayerSpec& l = model.layers()[i];
        const Shape& o = model.output_shape(i);
        const std::size_t elems = shape_size(o);
        LayerCost c{l.name, 0, 0};
        switch (l.kind) {
            case LayerKind::conv2d: {
                const std::size_t k2 = l.kernel * l.kernel;
                c.params = l.out_channels * l.in_channels * k2 + (l.bias ? l.out_channels : 0);
                c.flops = 2 * l.out_channels * l.in_channels * k2 * o[1] * o[2];
                break;
            }
            case LayerKind::dense:
                c.params = l.out_channels * l.in_channels + (l.bias ? l.out_channels : 0);
                c.flops = 2 * l.in_channels * l.out_channels;
                break;
            case LayerKind::batchnorm:
                c.params = 2 * l.out_channels;
                c.flops = 2 * elems;
                break;
            case LayerKind::relu:
            case LayerKind::add:
                c.flops = elems;
                break;
            case LayerKind::avgpool:
                c.flops = shape_size(model.input_shape_of(i));
                break;
            case LayerKind::psi:
                c.params = 2 * o[0];
                c.flops = 5 * elems;
                break;
            case LayerKind::flatten:
                break;
        }
        r.params += c.params;
        r.flops += c.flops;
        r.layers.push_back(std::move(c));
    }
    return r;
}

}  // namespace projprune

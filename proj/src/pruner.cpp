#include "projprune/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "projprune/error.hpp"
#include "projprune/format.hpp"

namespace projprune {

const char* plan_mode_name(PlanMode m) { return m == PlanMode::layerwise ? "layerwise" : "global"; }

PlanMode parse_plan_mode(std::string_view s) {
    if (s == "layerwise") return PlanMode::layerwise;
    if (s == "global") return PlanMode::global;
    throw ConfigError("unknown pruning mode '" + std::string(s) + "'");
}

namespace {

constexpr double kFloorEps = 1e-9;

void check_ratio(double r, const char* what) {
    if (!(r >= 0.0 && r < 1.0)) throw PlanError(std::string(what) + ": ratio must be in [0, 1), got " + fmt_double(r));
}

const std::string& class_key(const Model& model, const ChannelClass& c) {
    if (!c.producers.empty()) return model.layers()[c.producers.front()].name;
    return model.layers()[c.batchnorms.front()].name;
}

std::size_t class_order(const ChannelClass& c) {
    std::size_t first = std::numeric_limits<std::size_t>::max();
    for (std::size_t p : c.producers) first = std::min(first, p);
    for (std::size_t b : c.batchnorms) first = std::min(first, b);
    return first;
}

void check_report(const Model& model, const ImportanceReport& report) {
    for (const ScoreEntry& e : report.entries) {
        if (!model.has_layer(e.layer)) throw PlanError("report names unknown layer '" + e.layer + "'");
        const LayerSpec& l = model.layer(e.layer);
        if (e.channel >= l.out_channels) {
            throw PlanError("report channel " + e.layer + "[" + std::to_string(e.channel) + "] out of range");
        }
        if (std::isnan(e.score)) throw PlanError("report has NaN score for " + e.layer + "[" + std::to_string(e.channel) + "]");
    }
}

struct Candidate {
    double score;
    std::size_t order;
    std::size_t channel;
    std::size_t class_index;

    bool operator<(const Candidate& o) const {
        if (score != o.score) return score < o.score;
        if (order != o.order) return order < o.order;
        return channel < o.channel;
    }
};

// Finite-scored groups of every prunable class, sorted by the tie rule.
std::vector<Candidate> candidates(const Model& model, const DependencyAnalysis& deps, const ImportanceReport& report,
                                  std::size_t* scored_groups) {
    const std::vector<double> scores = group_scores(model, deps, report);
    std::vector<Candidate> out;
    std::size_t scored = 0;
    for (std::size_t g = 0; g < deps.groups.size(); ++g) {
        if (std::isnan(scores[g])) continue;
        ++scored;
        if (std::isinf(scores[g]) && scores[g] > 0) continue;
        const ChannelClass& c = deps.classes[deps.groups[g].class_id];
        out.push_back({scores[g], class_order(c), deps.groups[g].channel, c.id});
    }
    if (scored_groups) *scored_groups = scored;
    std::sort(out.begin(), out.end());
    return out;
}

void finish(const Model& model, const DependencyAnalysis& deps, PrunePlan& plan,
            const std::vector<std::pair<std::size_t, std::size_t>>& removed) {
    auto sorted = removed;
    std::sort(sorted.begin(), sorted.end());
    for (const auto& [cls, ch] : sorted) plan.selected.push_back({class_key(model, deps.classes[cls]), ch});
}

double class_ratio(const Model& model, const ChannelClass& c, const LayerRatios& ratios) {
    for (std::size_t p : c.producers) {
        auto it = ratios.per_layer.find(model.layers()[p].name);
        if (it != ratios.per_layer.end()) return it->second;
    }
    for (std::size_t b : c.batchnorms) {
        auto it = ratios.per_layer.find(model.layers()[b].name);
        if (it != ratios.per_layer.end()) return it->second;
    }
    return ratios.default_ratio;
}

// Copy of `t` keeping `keep` (in blocks of `block` entries) along `axis`.
Tensor select_axis(const Tensor& t, std::size_t axis, const std::vector<std::size_t>& keep, std::size_t block = 1) {
    const Shape& s = t.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t extent = s[axis];
    Shape ns = s;
    ns[axis] = keep.size() * block;
    std::vector<double> v;
    v.reserve(shape_size(ns));
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k : keep) {
            const double* src = t.data() + (o * extent + k * block) * inner;
            v.insert(v.end(), src, src + block * inner);
        }
    return Tensor(std::move(ns), std::move(v));
}

}  // namespace

std::vector<double> group_scores(const Model& model, const DependencyAnalysis& deps, const ImportanceReport& report) {
    std::map<std::pair<std::string, std::size_t>, double> lookup;
    for (const ScoreEntry& e : report.entries) lookup[{e.layer, e.channel}] = e.score;
    std::vector<double> out;
    out.reserve(deps.groups.size());
    for (const PruneGroup& g : deps.groups) {
        double sum = 0.0;
        std::size_t n = 0;
        std::set<std::string> seen;
        for (const FilterHandle& h : g.members) {
            if (!seen.insert(h.layer).second) continue;
            auto it = lookup.find({h.layer, g.channel});
            if (it == lookup.end()) continue;
            sum += it->second;
            ++n;
        }
        out.push_back(n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN());
    }
    (void)model;
    return out;
}

PrunePlan plan_layerwise(const Model& model, const ImportanceReport& report, const LayerRatios& ratios) {
    check_ratio(ratios.default_ratio, "plan_layerwise");
    for (const auto& [name, r] : ratios.per_layer) {
        check_ratio(r, "plan_layerwise");
        if (!model.has_layer(name)) throw PlanError("ratio given for unknown layer '" + name + "'");
    }
    check_report(model, report);
    const DependencyAnalysis deps = analyse_dependencies(model);
    std::size_t scored = 0;
    const auto cands = candidates(model, deps, report, &scored);
    if (scored == 0 && !report.entries.empty()) throw PlanError("report covers no prunable channel of the model");

    PrunePlan plan;
    plan.mode = PlanMode::layerwise;
    plan.ratios = ratios;
    plan.source = report.id();
    std::vector<std::pair<std::size_t, std::size_t>> removed;
    for (const ChannelClass& c : deps.classes) {
        if (!c.prunable) continue;
        const std::size_t k = std::min(
            c.channels - 1, static_cast<std::size_t>(std::floor(class_ratio(model, c, ratios) * c.channels + kFloorEps)));
        std::size_t taken = 0;
        for (const Candidate& cand : cands) {
            if (taken == k) break;
            if (cand.class_index != c.id) continue;
            removed.emplace_back(c.id, cand.channel);
            ++taken;
        }
    }
    finish(model, deps, plan, removed);
    return plan;
}

PrunePlan plan_global(const Model& model, const ImportanceReport& report, double ratio, std::size_t min_keep) {
    check_ratio(ratio, "plan_global");
    if (min_keep < 1) throw PlanError("plan_global: min_keep must be at least 1");
    check_report(model, report);
    const DependencyAnalysis deps = analyse_dependencies(model);
    std::size_t scored = 0;
    const auto cands = candidates(model, deps, report, &scored);
    if (scored == 0 && !report.entries.empty()) throw PlanError("report covers no prunable channel of the model");

    std::size_t total = 0;
    for (const ChannelClass& c : deps.classes)
        if (c.prunable) total += c.channels;
    const auto target = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(total) - kFloorEps));

    PrunePlan plan;
    plan.mode = PlanMode::global;
    plan.global_ratio = ratio;
    plan.min_keep = min_keep;
    plan.source = report.id();
    std::vector<std::size_t> taken(deps.classes.size(), 0);
    std::vector<std::pair<std::size_t, std::size_t>> removed;
    for (const Candidate& cand : cands) {
        if (removed.size() == target) break;
        const ChannelClass& c = deps.classes[cand.class_index];
        if (taken[c.id] + 1 + min_keep > c.channels) continue;
        ++taken[c.id];
        removed.emplace_back(c.id, cand.channel);
    }
    if (removed.size() < target) {
        throw PlanError("plan_global: ratio " + fmt_double(ratio) + " unreachable with min_keep " +
                        std::to_string(min_keep) + "; achievable maximum is " +
                        fmt_double(static_cast<double>(removed.size()) / static_cast<double>(total)));
    }
    finish(model, deps, plan, removed);
    return plan;
}

namespace {

// Removed channels per class id; validates the plan against the model.
std::map<std::size_t, std::set<std::size_t>> resolve(const Model& model, const DependencyAnalysis& deps,
                                                     const PrunePlan& plan) {
    std::map<std::string, std::size_t> key_to_class;
    for (const ChannelClass& c : deps.classes)
        if (c.prunable) key_to_class[class_key(model, c)] = c.id;
    std::map<std::size_t, std::set<std::size_t>> out;
    for (const PlanEntry& e : plan.selected) {
        auto it = key_to_class.find(e.layer);
        if (it == key_to_class.end()) throw PlanError("plan names '" + e.layer + "', which heads no prunable channel class");
        const ChannelClass& c = deps.classes[it->second];
        if (e.channel >= c.channels) {
            throw PlanError("plan channel " + e.layer + "[" + std::to_string(e.channel) + "] out of range");
        }
        if (!out[c.id].insert(e.channel).second) {
            throw PlanError("plan lists " + e.layer + "[" + std::to_string(e.channel) + "] twice");
        }
    }
    for (const auto& [cls, chans] : out)
        if (chans.size() >= deps.classes[cls].channels) {
            throw PlanError("plan removes every channel of '" + class_key(model, deps.classes[cls]) + "'");
        }
    return out;
}

}  // namespace

std::vector<PruneGroup> plan_groups(const Model& model, const PrunePlan& plan) {
    const DependencyAnalysis deps = analyse_dependencies(model);
    const auto removed = resolve(model, deps, plan);
    std::vector<PruneGroup> out;
    for (const PruneGroup& g : deps.groups) {
        auto it = removed.find(g.class_id);
        if (it != removed.end() && it->second.count(g.channel)) out.push_back(g);
    }
    return out;
}

Model apply_plan(const Model& model, const PrunePlan& plan) {
    for (const LayerSpec& l : model.layers())
        if (l.kind == LayerKind::psi) throw PlanError("apply_plan: model carries injected layer '" + l.name + "'");
    const DependencyAnalysis deps = analyse_dependencies(model);
    const auto removed = resolve(model, deps, plan);
    if (removed.empty()) return model;

    ModelSpec spec = model.spec();
    NamedTensors state = model.state();
    for (const auto& [cls, gone] : removed) {
        const ChannelClass& c = deps.classes[cls];
        std::vector<std::size_t> keep;
        for (std::size_t ch = 0; ch < c.channels; ++ch)
            if (!gone.count(ch)) keep.push_back(ch);

        for (std::size_t p : c.producers) {
            LayerSpec& l = spec.layers[p];
            state[l.name + ".weight"] = select_axis(state.at(l.name + ".weight"), 0, keep);
            if (l.bias) state[l.name + ".bias"] = select_axis(state.at(l.name + ".bias"), 0, keep);
            l.out_channels = keep.size();
        }
        for (std::size_t b : c.batchnorms) {
            LayerSpec& l = spec.layers[b];
            for (const char* suffix : {".gamma", ".beta", ".running_mean", ".running_var"}) {
                const std::string key = l.name + suffix;
                state[key] = select_axis(state.at(key), 0, keep);
            }
            l.out_channels = keep.size();
        }
        for (const ChannelConsumer& cons : c.consumers) {
            LayerSpec& l = spec.layers[cons.layer];
            const std::string key = l.name + ".weight";
            if (l.kind == LayerKind::conv2d) {
                state[key] = select_axis(state.at(key), 1, keep);
                l.in_channels = keep.size();
            } else {
                state[key] = select_axis(state.at(key), 1, keep, cons.block);
                l.in_channels = keep.size() * cons.block;
            }
        }
    }
    return Model::from_state(std::move(spec), std::move(state));
}

Model mask_plan(const Model& model, const PrunePlan& plan) {
    Model masked = model;
    for (const PruneGroup& g : plan_groups(model, plan)) {
        for (const FilterHandle& h : g.members) scatter(masked.params(), h, std::vector<double>(h.filter_dim, 0.0));
        for (const ParamSlice& s : g.downstream) {
            Tensor& t = masked.param(s.param);
            std::fill_n(t.data() + s.offset, s.length, 0.0);
        }
    }
    return masked;
}

std::map<std::string, std::vector<std::size_t>> pruned_indices(const Model& model, const PrunePlan& plan) {
    std::map<std::string, std::vector<std::size_t>> out;
    for (const PruneGroup& g : plan_groups(model, plan)) {
        std::set<std::string> seen;
        for (const FilterHandle& h : g.members)
            if (seen.insert(h.layer).second) out[h.layer].push_back(g.channel);
    }
    return out;
}

std::string format_plan(const PrunePlan& plan) {
    std::ostringstream os;
    os << "mode = " << plan_mode_name(plan.mode) << '\n';
    os << "source = " << plan.source << '\n';
    if (plan.mode == PlanMode::layerwise) {
        os << "default_ratio = " << fmt_double(plan.ratios.default_ratio) << '\n';
        for (const auto& [layer, r] : plan.ratios.per_layer) os << "ratio = " << layer << ' ' << fmt_double(r) << '\n';
    } else {
        os << "global_ratio = " << fmt_double(plan.global_ratio) << '\n';
        os << "min_keep = " << plan.min_keep << '\n';
    }
    for (std::size_t i = 0; i < plan.selected.size();) {
        std::size_t j = i;
        os << "prune = " << plan.selected[i].layer << ' ';
        for (; j < plan.selected.size() && plan.selected[j].layer == plan.selected[i].layer; ++j)
            os << (j == i ? "" : ",") << plan.selected[j].channel;
        os << '\n';
        i = j;
    }
    return os.str();
}

PrunePlan parse_plan(std::string_view text) {
    PrunePlan plan;
    std::istringstream is{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    bool have_mode = false;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const auto eq = line.find('=');
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = "plan line " + std::to_string(lineno);
        if (eq == std::string::npos) throw ParseError(where + ": expected key = value");
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        std::istringstream vs(value);
        if (key == "mode") {
            plan.mode = parse_plan_mode(value);
            have_mode = true;
        } else if (key == "source") {
            plan.source = value;
        } else if (key == "default_ratio") {
            plan.ratios.default_ratio = parse_double(value, where);
        } else if (key == "ratio") {
            std::string layer, r;
            if (!(vs >> layer >> r)) throw ParseError(where + ": expected 'ratio = <layer> <fraction>'");
            plan.ratios.per_layer[layer] = parse_double(r, where);
        } else if (key == "global_ratio") {
            plan.global_ratio = parse_double(value, where);
        } else if (key == "min_keep") {
            plan.min_keep = std::stoull(value);
        } else if (key == "prune") {
            std::string layer, list;
            if (!(vs >> layer >> list)) throw ParseError(where + ": expected 'prune = <layer> <c0,c1,...>'");
            std::stringstream ls(list);
            std::string item;
            while (std::getline(ls, item, ',')) {
                if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos) {
                    throw ParseError(where + ": bad channel index '" + item + "'");
                }
                plan.selected.push_back({layer, std::stoull(item)});
            }
        } else {
            throw ParseError(where + ": unknown key '" + key + "'");
        }
    }
    if (!have_mode) throw ParseError("plan: missing 'mode'");
    return plan;
}

FinetuneResult finetune(const Model& model, const Dataset& train_set, const Dataset& eval_set, const Recipe& recipe) {
    FinetuneResult r{model, {}};
    r.trace = train(r.model, train_set, eval_set, recipe);
    return r;
}

}  // namespace projprune

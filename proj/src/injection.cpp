#include "projprune/injection.hpp"

#include <algorithm>
#include <set>

#include "projprune/error.hpp"

namespace projprune {

const char* site_policy_name(SitePolicy p) {
    return p == SitePolicy::after_sigma ? "after_sigma" : "after_target";
}

SitePolicy parse_site_policy(std::string_view s) {
    if (s == "after_sigma") return SitePolicy::after_sigma;
    if (s == "after_target") return SitePolicy::after_target;
    throw ConfigError("unknown site policy '" + std::string(s) + "'");
}

std::vector<double> filter_norms(const Model& model, const std::string& layer, const FilterOptions& options) {
    const LayerSpec& l = model.layer(layer);
    FilterTarget target;
    switch (l.kind) {
        case LayerKind::conv2d: target = FilterTarget::conv_weights; break;
        case LayerKind::dense: target = FilterTarget::dense_weights; break;
        case LayerKind::batchnorm: target = FilterTarget::bn_params; break;
        default: throw UnsupportedSite("layer '" + layer + "' has no filters");
    }
    std::vector<double> norms;
    const NamedTensors& params = model.params();
    for (const FilterHandle& h : extract_filters(model, target, options)) {
        if (h.layer == layer) norms.push_back(l2_norm(gather(params, h)));
    }
    if (norms.empty()) throw UnsupportedSite("layer '" + layer + "' is not prunable");
    return norms;
}

namespace {

std::size_t sole_consumer(const Model& m, std::size_t layer) {
    const auto& cons = m.consumers(layer);
    if (cons.size() != 1) {
        throw UnsupportedSite("layer '" + m.layers()[layer].name + "' has " + std::to_string(cons.size()) +
                              " consumers; no unique element-wise site");
    }
    return cons[0];
}

}  // namespace

ExtendedModel::ExtendedModel(Model model, const std::vector<std::string>& targets, const InjectionOptions& options)
    : original_spec_(model.spec()) {
    ModelSpec spec = model.spec();
    NamedTensors state = model.state();
    std::set<std::string> used_sites;

    for (const std::string& target : targets) {
        const std::size_t t = model.layer_index(target);
        const LayerKind kind = model.layers()[t].kind;
        if (kind != LayerKind::conv2d && kind != LayerKind::dense && kind != LayerKind::batchnorm) {
            throw UnsupportedSite("target '" + target + "' is not a conv2d, dense or batchnorm layer");
        }
        InjectionSite site;
        site.target = target;
        site.d_init = filter_norms(model, target, options.filter);

        // Walk to the element-wise op the psi node replaces or precedes.
        std::size_t cur = t;
        std::size_t next = sole_consumer(model, cur);
        std::string wrap;       // relu layer turned into psi
        std::string insert_after;  // layer after which an identity psi goes
        if (options.policy == SitePolicy::after_target && kind != LayerKind::batchnorm) {
            const LayerKind nk = model.layers()[next].kind;
            if (nk != LayerKind::batchnorm && nk != LayerKind::relu && nk != LayerKind::add) {
                throw UnsupportedSite("target '" + target + "' is followed by " + layer_kind_name(nk) +
                                      ", not an element-wise operation");
            }
            insert_after = target;
        } else {
            if (kind != LayerKind::batchnorm && model.layers()[next].kind == LayerKind::batchnorm) {
                cur = next;
                next = sole_consumer(model, cur);
            }
            const LayerKind nk = model.layers()[next].kind;
            if (nk == LayerKind::relu) {
                wrap = model.layers()[next].name;
            } else if (nk == LayerKind::add) {
                insert_after = model.layers()[cur].name;
            } else {
                throw UnsupportedSite("target '" + target + "' is followed by " + layer_kind_name(nk) +
                                      ", not an element-wise operation");
            }
        }

        if (!wrap.empty()) {
            site.psi_layer = wrap;
            site.sigma = PsiSigma::relu;
            auto it = std::find_if(spec.layers.begin(), spec.layers.end(), [&](const LayerSpec& l) { return l.name == wrap; });
            it->kind = LayerKind::psi;
            it->sigma = PsiSigma::relu;
        } else {
            site.psi_layer = insert_after + ".psi";
            site.sigma = PsiSigma::identity;
            auto it = std::find_if(spec.layers.begin(), spec.layers.end(),
                                   [&](const LayerSpec& l) { return l.name == insert_after; });
            LayerSpec psi;
            psi.kind = LayerKind::psi;
            psi.name = site.psi_layer;
            psi.inputs = {insert_after};
            psi.sigma = PsiSigma::identity;
            for (LayerSpec& l : spec.layers)
                for (std::string& in : l.inputs)
                    if (in == insert_after) in = psi.name;
            spec.layers.insert(it + 1, std::move(psi));
        }
        if (!used_sites.insert(site.psi_layer).second) {
            throw UnsupportedSite("targets share the injection site '" + site.psi_layer + "'");
        }
        const Shape dshape{site.d_init.size()};
        state.emplace(site.psi_layer + ".d", Tensor(dshape, site.d_init));
        state.emplace(site.psi_layer + ".dbar", Tensor(dshape, site.d_init));
        sites_.push_back(std::move(site));
    }
    model_.emplace(Model::from_state(std::move(spec), std::move(state)));
}

Model& ExtendedModel::model() {
    if (!model_) throw StateError("extended model has been reverted");
    return *model_;
}

const InjectionSite& ExtendedModel::site(const std::string& target) const {
    for (const auto& s : sites_)
        if (s.target == target) return s;
    throw StateError("no injection site for target '" + target + "'");
}

DGradient ExtendedModel::d_gradient(const std::string& target, const GradTable& grads) const {
    if (!model_) throw StateError("d_gradient: model has been reverted");
    const InjectionSite& s = site(target);
    auto d = grads.find(s.psi_layer + ".d");
    auto dbar = grads.find(s.psi_layer + ".dbar");
    if (d == grads.end() || dbar == grads.end()) {
        throw StateError("d_gradient: gradient table has no entry for site '" + s.psi_layer + "'");
    }
    const auto dv = d->second.values();
    const auto dbv = dbar->second.values();
    return {std::vector<double>(dv.begin(), dv.end()), std::vector<double>(dbv.begin(), dbv.end())};
}

DGradient ExtendedModel::d_gradient(const std::string& target, const Tensor& batch, std::span<const int> labels) {
    Graph g;
    NodeId loss;
    forward_loss(g, model(), batch, labels, Mode::score, &loss);
    return d_gradient(target, g.backprop(loss));
}

Model ExtendedModel::revert() {
    if (!model_) throw StateError("revert: model was already reverted");
    NamedTensors state = model_->state();
    for (const auto& s : sites_) {
        state.erase(s.psi_layer + ".d");
        state.erase(s.psi_layer + ".dbar");
    }
    model_.reset();
    return Model::from_state(original_spec_, std::move(state));
}

}  // namespace projprune

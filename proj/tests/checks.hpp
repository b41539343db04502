#pragma once

// Property checks shared by the unit tests and the acceptance runner. Each
// returns a measurement; callers decide the tolerance.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "projprune/channels.hpp"
#include "projprune/error.hpp"
#include "projprune/graph.hpp"
#include "projprune/importance.hpp"
#include "projprune/injection.hpp"
#include "projprune/pruner.hpp"

namespace testing {

struct OpCase {
    const char* name;
    std::vector<Shape> params;
    // Builds the op under test from parameter nodes; returns its output.
    std::function<NodeId(Graph&, const std::vector<NodeId>&)> build;
    bool scalar_output = false;
};

// Tensors the op cases point into; must outlive them.
struct OpFixtures {
    Tensor running_mean{{3}, 0.1};
    Tensor running_var{{3}, 1.3};
    int labels[3] = {2, 0, 1};
};

// One case per op kind the graph records, plus stride, 1x1, eval-mode and
// dense-input variants.
inline std::vector<OpCase> op_cases(OpFixtures& f) {
    return {
        {"dense", {{3, 4}, {5, 4}, {5}}, [](Graph& g, const auto& p) { return g.dense(p[0], p[1], p[2]); }},
        {"conv2d", {{2, 2, 5, 5}, {3, 2, 3, 3}, {3}}, [](Graph& g, const auto& p) { return g.conv2d(p[0], p[1], p[2], 1, 1); }},
        {"conv2d_stride2", {{2, 2, 5, 5}, {3, 2, 3, 3}}, [](Graph& g, const auto& p) { return g.conv2d(p[0], p[1], std::nullopt, 2, 1); }},
        {"conv2d_1x1", {{2, 3, 4, 4}, {2, 3, 1, 1}}, [](Graph& g, const auto& p) { return g.conv2d(p[0], p[1], std::nullopt, 2, 0); }},
        {"batchnorm_train", {{4, 3, 2, 2}, {3}, {3}},
         [](Graph& g, const auto& p) { return g.batchnorm(p[0], p[1], p[2], BatchNormConfig{}); }},
        {"batchnorm_eval", {{4, 3, 2, 2}, {3}, {3}},
         [&f](Graph& g, const auto& p) {
             BatchNormConfig c;
             c.training = false;
             c.running_mean = &f.running_mean;
             c.running_var = &f.running_var;
             return g.batchnorm(p[0], p[1], p[2], c);
         }},
        {"batchnorm_dense", {{5, 3}, {3}, {3}}, [](Graph& g, const auto& p) { return g.batchnorm(p[0], p[1], p[2], BatchNormConfig{}); }},
        {"relu", {{2, 3, 2, 2}}, [](Graph& g, const auto& p) { return g.relu(p[0]); }},
        {"avgpool", {{2, 2, 4, 5}}, [](Graph& g, const auto& p) { return g.avgpool(p[0], 2); }},
        {"avgpool_global", {{2, 2, 3, 3}}, [](Graph& g, const auto& p) { return g.avgpool(p[0], 0); }},
        {"add", {{2, 3, 2, 2}, {2, 3, 2, 2}}, [](Graph& g, const auto& p) { return g.add(p[0], p[1]); }},
        {"flatten", {{2, 3, 2, 2}}, [](Graph& g, const auto& p) { return g.flatten(p[0]); }},
        {"psi_relu", {{2, 3, 2, 2}, {3}, {3}}, [](Graph& g, const auto& p) { return g.psi(p[0], p[1], p[2], PsiSigma::relu); }},
        {"psi_identity", {{2, 3}, {3}, {3}}, [](Graph& g, const auto& p) { return g.psi(p[0], p[1], p[2], PsiSigma::identity); }},
        {"channel_affine", {{2, 3, 2, 2}, {3}, {3}}, [](Graph& g, const auto& p) { return g.channel_affine(p[0], p[1], p[2]); }},
        {"mul", {{2, 3}, {2, 3}}, [](Graph& g, const auto& p) { return g.mul(p[0], p[1]); }},
        {"sum", {{2, 3}}, [](Graph& g, const auto& p) { return g.sum(p[0]); }, true},
        {"softmax_cross_entropy", {{3, 4}},
         [&f](Graph& g, const auto& p) { return g.softmax_cross_entropy(p[0], f.labels); }, true},
    };
}

// Keeps values away from relu kinks so central differences stay smooth.
inline void push_off_zero(Tensor& t) {
    for (double& v : t.values())
        if (std::abs(v) < 0.05) v += v < 0 ? -0.1 : 0.1;
}

// Relative error with a denominator floor, so entries whose true gradient is
// near zero are judged on absolute error.
inline double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-3});
}

// Worst relative error between backprop and central differences over
// `trials` random parameter draws; each trial checks one random entry of a
// random-weighted sum of the op's output.
inline double op_gradient_error(const OpCase& c, Rng& rng, int trials) {
    double worst = 0.0;
    for (int trial = 0; trial < trials; ++trial) {
        std::vector<Tensor> params;
        for (const Shape& s : c.params) {
            params.push_back(random_tensor(s, rng));
            push_off_zero(params.back());
        }
        std::optional<Tensor> weights;
        auto record = [&](Graph& g) {
            std::vector<NodeId> ids;
            for (std::size_t i = 0; i < params.size(); ++i) ids.push_back(g.parameter("p" + std::to_string(i), params[i]));
            const NodeId out = c.build(g, ids);
            if (c.scalar_output) return out;
            if (!weights) weights = random_tensor(g.value(out).shape(), rng);
            return g.sum(g.mul(out, g.input(*weights)));
        };
        Graph g;
        const NodeId loss = record(g);
        const GradTable grads = g.backprop(loss);
        const std::size_t which = rng.below(params.size());
        const std::size_t index = rng.below(params[which].size());
        auto eval = [&] {
            Graph h;
            return h.scalar(record(h));
        };
        const double numeric = finite_diff_oracle(eval, params[which], index, 1e-5);
        worst = std::max(worst, relative_error(grads.at("p" + std::to_string(which))[index], numeric));
    }
    return worst;
}

struct InjectionSetup {
    const char* name;
    const char* arch;
    FilterTarget target;
};

inline std::vector<InjectionSetup> injection_setups() {
    return {{"chain/conv", kChainCnn, FilterTarget::conv_weights},       {"chain/bn", kChainCnn, FilterTarget::bn_params},
            {"residual/conv", kResidualCnn, FilterTarget::conv_weights}, {"residual/bn", kResidualCnn, FilterTarget::bn_params},
            {"flatten/conv", kFlattenCnn, FilterTarget::conv_weights},   {"flatten/dense", kFlattenCnn, FilterTarget::dense_weights},
            {"mlp/dense", kMlp, FilterTarget::dense_weights}};
}

inline std::vector<std::string> target_layers(const Model& m, FilterTarget target) {
    std::vector<std::string> out;
    for (const auto& h : extract_filters(m, target))
        if (out.empty() || out.back() != h.layer) out.push_back(h.layer);
    return out;
}

inline std::vector<int> random_labels(Rng& rng, std::size_t n, std::size_t classes) {
    std::vector<int> l(n);
    for (int& v : l) v = static_cast<int>(rng.below(classes));
    return l;
}

struct IdentityResult {
    bool outputs_identical = true;
    double max_grad_diff = 0.0;  // weight gradients, extended vs original
    double max_dual_sum = 0.0;   // |dD + dDbar|
};

// Eval-mode outputs on `inputs` random batches, then score-mode gradients on
// `grad_trials` random labelled batches.
inline IdentityResult psi_identity(const InjectionSetup& s, Rng& rng, int inputs, int grad_trials) {
    IdentityResult r;
    Model m = perturbed_model(s.arch, 2);
    ExtendedModel ext(m, target_layers(m, s.target));
    for (int i = 0; i < inputs; ++i) {
        const Tensor x = random_tensor(batch_shape(m, 3), rng);
        r.outputs_identical = r.outputs_identical && predict(ext.model(), x).identical(predict(m, x));
    }
    for (int i = 0; i < grad_trials; ++i) {
        const Tensor x = random_tensor(batch_shape(m, 4), rng);
        const auto labels = random_labels(rng, 4, m.num_classes());
        NodeId lo, le;
        Graph go, ge;
        forward_loss(go, m, x, labels, Mode::score, &lo);
        forward_loss(ge, ext.model(), x, labels, Mode::score, &le);
        const GradTable a = go.backprop(lo), b = ge.backprop(le);
        for (const auto& [name, grad] : a) {
            if (!b.count(name)) {
                r.max_grad_diff = std::numeric_limits<double>::infinity();
                continue;
            }
            r.max_grad_diff = std::max(r.max_grad_diff, max_abs_diff(grad.values(), b.at(name).values()));
        }
        for (const auto& site : ext.sites()) {
            const DGradient dg = ext.d_gradient(site.target, b);
            for (std::size_t c = 0; c < dg.d.size(); ++c) r.max_dual_sum = std::max(r.max_dual_sum, std::abs(dg.d[c] + dg.dbar[c]));
        }
    }
    return r;
}

// Worst relative error of dL/dD against central differences. Every trial
// draws a fresh batch and checks every D entry of one site, cycling through
// the sites.
inline double d_gradient_error(const InjectionSetup& s, Rng& rng, int trials) {
    Model m = perturbed_model(s.arch, 4);
    ExtendedModel ext(m, target_layers(m, s.target));
    const auto& sites = ext.sites();
    double worst = 0.0;
    for (int t = 0; t < trials; ++t) {
        const Tensor x = random_tensor(batch_shape(m, 4), rng);
        const auto labels = random_labels(rng, 4, m.num_classes());
        const InjectionSite& site = sites[static_cast<std::size_t>(t) % sites.size()];
        const DGradient dg = ext.d_gradient(site.target, x, labels);
        Tensor& d = ext.model().param(site.psi_layer + ".d");
        auto loss = [&] {
            Graph g;
            return forward_loss(g, ext.model(), x, labels, Mode::score);
        };
        for (std::size_t c = 0; c < d.size(); ++c)
            worst = std::max(worst, relative_error(dg.d[c], finite_diff_oracle(loss, d, c, 1e-5)));
    }
    return worst;
}

// Every plan the pruning checks exercise: both planners, several ratios,
// random and l1 reports on each applicable target.
inline std::vector<PrunePlan> all_plans(const Model& m, std::uint64_t seed) {
    std::vector<PrunePlan> plans;
    for (FilterTarget t : {FilterTarget::conv_weights, FilterTarget::dense_weights, FilterTarget::bn_params}) {
        if (extract_filters(m, t).empty()) continue;
        for (const ImportanceReport& r : {score_random(m, t, seed), score_l1(m, t)}) {
            for (double ratio : {0.0, 0.25, 0.5, 0.75}) plans.push_back(plan_layerwise(m, r, {ratio, {}}));
            for (double ratio : {0.2, 0.5}) {
                try {
                    plans.push_back(plan_global(m, r, ratio, 1));
                } catch (const PlanError&) {
                    // target unreachable under min_keep on tiny layers
                }
            }
        }
    }
    return plans;
}

// Largest output difference between the physically pruned model and the
// zero-masked original over `inputs` random batches.
inline double masking_error(const Model& m, const PrunePlan& plan, Rng& rng, int inputs) {
    Model pruned = apply_plan(m, plan);
    Model masked = mask_plan(m, plan);
    double worst = 0.0;
    for (int i = 0; i < inputs; ++i) {
        const Tensor x = random_tensor(batch_shape(m, 2), rng);
        worst = std::max(worst, max_abs_diff(predict(pruned, x).values(), predict(masked, x).values()));
    }
    return worst;
}

}  // namespace testing

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "projprune/channels.hpp"
#include "projprune/graph.hpp"
#include "projprune/model.hpp"

namespace projprune {

// Where the psi node goes for a conv/dense target.
enum class SitePolicy {
    // Wrap the ReLU that follows the target, looking through one batchnorm.
    after_sigma,
    // Insert psi with identity sigma directly on the target's output.
    after_target,
};

const char* site_policy_name(SitePolicy p);
SitePolicy parse_site_policy(std::string_view s);

struct InjectionOptions {
    SitePolicy policy = SitePolicy::after_sigma;
    FilterOptions filter;
};

struct InjectionSite {
    std::string target;     // layer whose channels own D
    std::string psi_layer;  // name of the psi layer in the extended model
    PsiSigma sigma = PsiSigma::relu;
    // Initial D == Dbar: the filter norms of the target's channels.
    std::vector<double> d_init;
};

struct DGradient {
    std::vector<double> d;     // dL/dD_i
    std::vector<double> dbar;  // dL/dDbar_i
};

// A model with paired D, Dbar parameters injected around the element-wise
// operation after each target. Because D == Dbar bitwise, every forward
// output and every original-parameter gradient equals the unextended model's.
class ExtendedModel {
public:
    ExtendedModel(Model model, const std::vector<std::string>& targets, const InjectionOptions& options = {});

    Model& model();
    const std::vector<InjectionSite>& sites() const { return sites_; }
    const InjectionSite& site(const std::string& target) const;

    // Per-channel dL/dD and dL/dDbar of one target, read from a gradient
    // table produced by backprop on this model.
    DGradient d_gradient(const std::string& target, const GradTable& grads) const;
    // Runs forward (Mode::score) and backprop on one batch.
    DGradient d_gradient(const std::string& target, const Tensor& batch, std::span<const int> labels);

    // Removes every injected layer and parameter. A second call is an error.
    Model revert();
    bool reverted() const { return !model_.has_value(); }

private:
    std::optional<Model> model_;
    ModelSpec original_spec_;
    std::vector<InjectionSite> sites_;
};

// Filter norms ||F_i|| of one prunable layer (the D initialization).
std::vector<double> filter_norms(const Model& model, const std::string& layer, const FilterOptions& options = {});

}  // namespace projprune

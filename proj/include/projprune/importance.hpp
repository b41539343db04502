#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "projprune/channels.hpp"
#include "projprune/data.hpp"
#include "projprune/injection.hpp"
#include "projprune/model.hpp"

namespace projprune {

enum class Criterion { proscore, l1, l2, taylor, fpgm, random };

const char* criterion_name(Criterion c);
Criterion parse_criterion(std::string_view s);

struct ScoreEntry {
    std::string layer;
    std::size_t channel = 0;
    double score = 0.0;

    bool operator==(const ScoreEntry&) const = default;
};

struct ImportanceReport {
    Criterion criterion = Criterion::l1;
    FilterTarget target = FilterTarget::conv_weights;
    double lambda = 0.0;  // proscore only
    double subset = 1.0;  // fraction of the dataset scored
    std::uint64_t seed = 0;
    // One entry per prunable channel, in layer then channel order.
    std::vector<ScoreEntry> entries;

    // Throws if (layer, channel) is not in the report.
    double score(const std::string& layer, std::size_t channel) const;
    bool contains(const std::string& layer, std::size_t channel) const;
    // e.g. "proscore_lambda0.01_subset1_seed3"
    std::string id() const;

    bool operator==(const ImportanceReport&) const = default;
};

// Columns: layer,channel,criterion,lambda,subset,seed,score. Scores use the
// shortest round-trip decimal form; +inf is written as "inf". Lines
// starting with '#' are comments.
std::string report_to_csv(const ImportanceReport& report, std::string_view comment = {});
ImportanceReport report_from_csv(std::string_view text);

struct ScoringOptions {
    FilterTarget target = FilterTarget::conv_weights;
    InjectionOptions injection;
    double subset = 1.0;
    std::uint64_t seed = 0;
    std::size_t batch_size = 64;
    std::size_t threads = 1;
};

// Everything Eq. 4 needs, accumulated once; lambda enters only afterwards.
struct ProscoreGradients {
    std::vector<FilterHandle> handles;
    std::vector<std::vector<double>> filters;       // F_i
    std::vector<std::vector<double>> filter_grads;  // summed dL/dF_i
    std::vector<double> d;                          // D_i = ||F_i||
    std::vector<double> d_grads;                    // summed dL/dD_i
    std::size_t batches = 0;
    FilterTarget target = FilterTarget::conv_weights;
    double subset = 1.0;
    std::uint64_t seed = 0;
};

// Extract filters, inject psi with D = Dbar = ||F||, sum gradients over every
// batch of the (balanced-subsampled) dataset without updating anything,
// revert. `model` is not modified.
ProscoreGradients accumulate_proscore_gradients(const Model& model, const Dataset& data, const ScoringOptions& options);
ImportanceReport proscore_report(const ProscoreGradients& grads, double lambda);

ImportanceReport score_proscore(const Model& model, const Dataset& data, double lambda, const ScoringOptions& options);
ImportanceReport score_l1(const Model& model, FilterTarget target, const FilterOptions& filter = {});
ImportanceReport score_l2(const Model& model, FilterTarget target, const FilterOptions& filter = {});
// |sum_j w_ij g_ij| with g summed over the whole (sub)set.
ImportanceReport score_taylor(const Model& model, const Dataset& data, const ScoringOptions& options);
// Distance of each filter to the geometric median of its layer.
ImportanceReport score_fpgm(const Model& model, FilterTarget target, const FilterOptions& filter = {});
ImportanceReport score_random(const Model& model, FilterTarget target, std::uint64_t seed);

struct WeiszfeldResult {
    std::vector<double> median;
    std::size_t iterations = 0;
    bool converged = false;
};

inline constexpr double kWeiszfeldTol = 1e-9;
inline constexpr std::size_t kWeiszfeldMaxIter = 10000;

// Weiszfeld iteration with the Vardi-Zhang step when the iterate lands on a
// data point; starts from the centroid.
WeiszfeldResult geometric_median(const std::vector<std::vector<double>>& points, double tol = kWeiszfeldTol,
                                 std::size_t max_iter = kWeiszfeldMaxIter);

struct CorrelationMatrix {
    std::vector<std::string> names;
    std::vector<std::vector<double>> pearson;   // NaN: undefined
    std::vector<std::vector<double>> spearman;  // NaN: undefined
};

// Per-layer min-max normalization (+inf maps to the top of the range),
// concatenation in the first report's channel order, then pairwise
// coefficients.
CorrelationMatrix correlate(const std::vector<ImportanceReport>& reports);
std::vector<double> normalized_scores(const ImportanceReport& report, const std::vector<std::pair<std::string, std::size_t>>& order);

}  // namespace projprune

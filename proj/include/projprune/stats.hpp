#pragma once

#include <span>
#include <vector>

namespace projprune {

// Pearson correlation; NaN when either side has zero variance.
double pearson(std::span<const double> a, std::span<const double> b);

// Ranks starting at 1 with ties sharing their average rank.
std::vector<double> average_ranks(std::span<const double> v);

// Pearson correlation of average ranks.
double spearman(std::span<const double> a, std::span<const double> b);

// Kendall tau-b (tie-corrected); NaN when either side is constant.
double kendall_tau(std::span<const double> a, std::span<const double> b);

double mean(std::span<const double> v);

}  // namespace projprune

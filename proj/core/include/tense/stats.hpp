#pragma once

#include <optional>
#include <span>
#include <vector>

namespace tense {

double mean(std::span<const double> v);
/// Population standard deviation.
double stddev(std::span<const double> v);

/// Empty when either side has zero variance.
std::optional<double> pearson(std::span<const double> x, std::span<const double> y);
/// Pearson on average ranks (ties share their mean rank).
std::optional<double> spearman(std::span<const double> x, std::span<const double> y);
std::vector<double> ranks(std::span<const double> v);

/// Linear-interpolated percentile, q in [0, 100].
double percentile(std::vector<double> v, double q);

}  // namespace tense

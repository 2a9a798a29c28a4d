#pragma once

#include <cstddef>
#include <span>
#include <string>

#include "uqseg/tensor.hpp"

namespace uqseg::metrics {

// 2|A n B| / (|A| + |B|) over binary masks (values > 0.5 count as foreground).
// Two empty masks score 1.
double dice(const Tensor& a, const Tensor& b);

// Coefficient of determination; throws when y_true is constant.
double r2(std::span<const double> y_true, std::span<const double> y_pred);
// Sample Pearson correlation; throws when either sequence is constant.
double pcc(std::span<const double> y_true, std::span<const double> y_pred);
double rmse(std::span<const double> y_true, std::span<const double> y_pred);

enum class Cohort { poor, good, best };

// Half-open bands on the fraction scale: [0, 0.505) poor, [0.505, 0.805) good, [0.805, 1] best.
Cohort cohort_label(double dice_value);
std::string cohort_name(Cohort c);

struct MetricReport {
    double r2 = 0.0;
    double pcc = 0.0;
    double rmse = 0.0;
    std::size_t n = 0;
    std::size_t poor = 0;
    std::size_t good = 0;
    std::size_t best = 0; // cohorts are counted on y_true
};

MetricReport evaluate(std::span<const double> y_true, std::span<const double> y_pred);

} // namespace uqseg::metrics

#include "uqseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace uqseg::metrics {

namespace {

void check_pair(std::span<const double> a, std::span<const double> b, const char* what,
                std::size_t min_n)
{
    if (a.size() != b.size())
        throw std::invalid_argument(std::string(what) + ": sequences differ in length");
    if (a.size() < min_n)
        throw std::invalid_argument(std::string(what) + ": needs at least " +
                                    std::to_string(min_n) + " values");
}

double mean(std::span<const double> v)
{
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

} // namespace

double dice(const Tensor& a, const Tensor& b)
{
    require_same_shape(a, b, "dice");
    std::size_t inter = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool fa = a[i] > 0.5;
        const bool fb = b[i] > 0.5;
        na += fa;
        nb += fb;
        inter += fa && fb;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

double r2(std::span<const double> y_true, std::span<const double> y_pred)
{
    check_pair(y_true, y_pred, "r2", 2);
    const double m = mean(y_true);
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < y_true.size(); ++i) {
        ss_res += (y_true[i] - y_pred[i]) * (y_true[i] - y_pred[i]);
        ss_tot += (y_true[i] - m) * (y_true[i] - m);
    }
    if (ss_tot == 0.0) throw std::invalid_argument("r2: y_true is constant");
    return 1.0 - ss_res / ss_tot;
}

double pcc(std::span<const double> y_true, std::span<const double> y_pred)
{
    check_pair(y_true, y_pred, "pcc", 2);
    const double mt = mean(y_true);
    const double mp = mean(y_pred);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < y_true.size(); ++i) {
        const double dt = y_true[i] - mt;
        const double dp = y_pred[i] - mp;
        sxy += dt * dp;
        sxx += dt * dt;
        syy += dp * dp;
    }
    if (sxx == 0.0 || syy == 0.0) throw std::invalid_argument("pcc: constant input");
    const double r = sxy / std::sqrt(sxx * syy);
    return std::clamp(r, -1.0, 1.0);
}

double rmse(std::span<const double> y_true, std::span<const double> y_pred)
{
    check_pair(y_true, y_pred, "rmse", 1);
    double s = 0.0;
    for (std::size_t i = 0; i < y_true.size(); ++i)
        s += (y_true[i] - y_pred[i]) * (y_true[i] - y_pred[i]);
    return std::sqrt(s / static_cast<double>(y_true.size()));
}

Cohort cohort_label(double d)
{
    if (d < 0.505) return Cohort::poor;
    if (d < 0.805) return Cohort::good;
    return Cohort::best;
}

std::string cohort_name(Cohort c)
{
    switch (c) {
    case Cohort::poor: return "poor";
    case Cohort::good: return "good";
    case Cohort::best: return "best";
    }
    return "unknown";
}

MetricReport evaluate(std::span<const double> y_true, std::span<const double> y_pred)
{
    MetricReport r;
    r.n = y_true.size();
    r.r2 = r2(y_true, y_pred);
    r.pcc = pcc(y_true, y_pred);
    r.rmse = rmse(y_true, y_pred);
    for (double d : y_true) {
        switch (cohort_label(d)) {
        case Cohort::poor: ++r.poor; break;
        case Cohort::good: ++r.good; break;
        case Cohort::best: ++r.best; break;
        }
    }
    return r;
}

} // namespace uqseg::metrics

#pragma once

// Shared helpers for the unit tests: random tensors, finite differences and
// scratch directories.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include <unistd.h>

#include "uqseg/tensor.hpp"

namespace testing {

inline uqseg::Tensor random_tensor(uqseg::Shape shape, uqseg::Rng& rng, double lo = -1.0,
                                   double hi = 1.0)
{
    uqseg::Tensor t(std::move(shape));
    std::uniform_real_distribution<double> u(lo, hi);
    for (double& v : t.values()) v = u(rng);
    return t;
}

// Values in [-1, 1] kept at least `gap` away from zero, for ops with a kink at 0.
inline uqseg::Tensor random_away_from_zero(uqseg::Shape shape, uqseg::Rng& rng, double gap = 0.05)
{
    uqseg::Tensor t(std::move(shape));
    std::uniform_real_distribution<double> u(gap, 1.0);
    std::bernoulli_distribution sign(0.5);
    for (double& v : t.values()) v = sign(rng) ? u(rng) : -u(rng);
    return t;
}

inline double sum_product(const uqseg::Tensor& a, const uqseg::Tensor& b)
{
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

// Relative error with a floor so coordinates whose gradients are both tiny
// compare in absolute terms.
inline double relative_error(double analytic, double numeric, double floor = 1e-6)
{
    const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / scale;
}

inline constexpr double kFdStep = 1e-5;
inline constexpr double kFdTolerance = 1e-4;

// Central difference of `loss` with respect to `coord`.
inline double central_difference(const std::function<double()>& loss, double& coord,
                                 double h = kFdStep)
{
    const double saved = coord;
    coord = saved + h;
    const double up = loss();
    coord = saved - h;
    const double down = loss();
    coord = saved;
    return (up - down) / (2.0 * h);
}

// Max relative error over every coordinate of `t` (or `limit` random ones).
inline double check_tensor_gradient(const std::function<double()>& loss, uqseg::Tensor& t,
                                    const uqseg::Tensor& analytic, std::size_t limit = 0,
                                    std::uint64_t seed = 7)
{
    std::vector<std::size_t> idx(t.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (limit > 0 && limit < idx.size()) {
        uqseg::Rng rng(seed);
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(limit);
    }
    double worst = 0.0;
    for (std::size_t i : idx)
        worst = std::max(worst, relative_error(analytic[i], central_difference(loss, t[i])));
    return worst;
}

class TempDir {
public:
    explicit TempDir(const std::string& tag)
    {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("uqseg_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
                 std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

} // namespace testing

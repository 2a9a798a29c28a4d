#include "uqseg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "uqseg/metrics.hpp"

namespace uqseg::synth {

namespace {

constexpr double kMinArea = 0.02;
constexpr double kMaxArea = 0.60;
constexpr double kAmbiguousContrastScale = 0.25;
constexpr double kFlipFraction = 0.05;
constexpr double kAmbiguousDiceCeiling = 0.95;

double area_fraction(const Tensor& mask)
{
    double s = 0.0;
    for (double v : mask.values()) s += v;
    return s / static_cast<double>(mask.size());
}

// Randomized ellipse with a low-frequency radial perturbation.
Tensor draw_blob(std::size_t side, Rng& rng)
{
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const double n = static_cast<double>(side);
    for (;;) {
        const double area = 0.04 + 0.31 * unif(rng);
        const double aspect = 0.6 + 0.4 * unif(rng);
        const double a = std::sqrt(area * n * n / (std::numbers::pi * aspect));
        const double b = aspect * a;
        const double angle = std::numbers::pi * unif(rng);
        double amp[3], phase[3];
        for (int k = 0; k < 3; ++k) {
            amp[k] = 0.08 * unif(rng);
            phase[k] = 2.0 * std::numbers::pi * unif(rng);
        }
        const double reach = 1.25 * a;
        const double lo = reach + 1.0;
        const double hi = n - 2.0 - reach;
        const double cx = lo < hi ? lo + (hi - lo) * unif(rng) : 0.5 * (n - 1.0);
        const double cy = lo < hi ? lo + (hi - lo) * unif(rng) : 0.5 * (n - 1.0);
        const double cs = std::cos(angle), sn = std::sin(angle);

        Tensor mask({side, side});
        for (std::size_t y = 0; y < side; ++y) {
            for (std::size_t x = 0; x < side; ++x) {
                const double dx = static_cast<double>(x) - cx;
                const double dy = static_cast<double>(y) - cy;
                const double u = (dx * cs + dy * sn) / a;
                const double v = (-dx * sn + dy * cs) / b;
                const double rho = std::hypot(u, v);
                const double theta = std::atan2(v, u);
                double limit = 1.0;
                for (int k = 0; k < 3; ++k) limit += amp[k] * std::cos((k + 2) * theta + phase[k]);
                mask.at(y, x) = rho <= limit ? 1.0 : 0.0;
            }
        }
        const double f = area_fraction(mask);
        if (f >= kMinArea && f <= kMaxArea) return mask;
    }
}

Tensor corrupt_mask(const Tensor& blob, Rng& rng)
{
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> radius_dist(1, 3);
    const std::size_t n = blob.size();
    const auto flips = static_cast<std::size_t>(std::lround(kFlipFraction * static_cast<double>(n)));
    std::vector<std::size_t> order(n);
    for (;;) {
        const std::size_t r = radius_dist(rng);
        Tensor m = unif(rng) < 0.5 ? dilate(blob, r) : erode(blob, r);
        std::iota(order.begin(), order.end(), std::size_t{0});
        // partial Fisher-Yates: the first `flips` entries are a uniform sample
        for (std::size_t i = 0; i < flips; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, n - 1);
            std::swap(order[i], order[pick(rng)]);
            m[order[i]] = 1.0 - m[order[i]];
        }
        const double f = area_fraction(m);
        if (f >= kMinArea && f <= kMaxArea && metrics::dice(m, blob) < kAmbiguousDiceCeiling)
            return m;
    }
}

Tensor morph(const Tensor& mask, std::size_t radius, bool grow)
{
    const std::size_t h = mask.dim(0), w = mask.dim(1);
    Tensor out({h, w});
    const auto r = static_cast<long>(radius);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            bool hit = !grow;
            for (long dy = -r; dy <= r && hit != grow; ++dy) {
                for (long dx = -r; dx <= r; ++dx) {
                    const long iy = static_cast<long>(y) + dy;
                    const long ix = static_cast<long>(x) + dx;
                    // outside the image counts as background
                    const bool fg = iy >= 0 && ix >= 0 && iy < static_cast<long>(h) &&
                                    ix < static_cast<long>(w) && mask.at(iy, ix) > 0.5;
                    if (grow && fg) {
                        hit = true;
                        break;
                    }
                    if (!grow && !fg) {
                        hit = false;
                        break;
                    }
                }
            }
            out.at(y, x) = hit ? 1.0 : 0.0;
        }
    }
    return out;
}

std::uint64_t fnv1a(const std::string& s)
{
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

} // namespace

void CorpusSpec::validate() const
{
    if (n_images < 1) throw std::invalid_argument("corpus: n_images must be positive");
    if (side < 8 || side % 2 != 0) throw std::invalid_argument("corpus: side must be even and >= 8");
    if (!(contrast > 0.0 && contrast <= 1.0))
        throw std::invalid_argument("corpus: contrast must lie in (0, 1]");
    if (!(noise_sigma >= 0.0)) throw std::invalid_argument("corpus: noise_sigma must be >= 0");
    if (!(ambiguous_fraction >= 0.0 && ambiguous_fraction <= 1.0))
        throw std::invalid_argument("corpus: ambiguous_fraction must lie in [0, 1]");
}

std::size_t CorpusSpec::ambiguous_count() const
{
    return static_cast<std::size_t>(std::lround(ambiguous_fraction * static_cast<double>(n_images)));
}

std::string sample_id(std::size_t index)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "s%05zu", index);
    return buf;
}

SyntheticSample generate_sample(const CorpusSpec& spec, bool ambiguous, Rng& rng, std::string id)
{
    spec.validate();
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    SyntheticSample s;
    s.id = std::move(id);
    s.is_ambiguous = ambiguous;

    const Tensor blob = draw_blob(spec.side, rng);
    const double contrast = ambiguous ? spec.contrast * kAmbiguousContrastScale : spec.contrast;
    const double background = (1.0 - contrast) * (0.2 + 0.3 * unif(rng));

    s.image = Tensor({1, spec.side, spec.side});
    std::normal_distribution<double> noise(0.0, spec.noise_sigma > 0.0 ? spec.noise_sigma : 1.0);
    for (std::size_t i = 0; i < blob.size(); ++i) {
        double v = background + contrast * blob[i];
        if (spec.noise_sigma > 0.0) v += noise(rng);
        s.image[i] = std::clamp(v, 0.0, 1.0);
    }

    if (ambiguous) {
        s.gt_mask = corrupt_mask(blob, rng);
        s.label_dice = metrics::dice(s.gt_mask, blob);
    } else {
        s.gt_mask = blob;
    }
    return s;
}

std::vector<std::size_t> ambiguous_indices(const CorpusSpec& spec)
{
    std::vector<std::size_t> idx(spec.n_images);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(mix_seed(spec.seed, 0xA11B16u));
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(spec.ambiguous_count(), idx.size()));
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::vector<SyntheticSample> generate_corpus(const CorpusSpec& spec)
{
    spec.validate();
    const auto amb = ambiguous_indices(spec);
    std::vector<char> is_amb(spec.n_images, 0);
    for (std::size_t i : amb) is_amb[i] = 1;
    std::vector<SyntheticSample> out(spec.n_images);
    const auto n = static_cast<long>(spec.n_images);
#pragma omp parallel for schedule(dynamic)
    for (long i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(i);
        Rng rng(mix_seed(spec.seed, k));
        out[k] = generate_sample(spec, is_amb[k] != 0, rng, sample_id(k));
    }
    return out;
}

Split split_corpus(const std::vector<SyntheticSample>& samples, std::uint64_t seed)
{
    const std::size_t n = samples.size();
    if (n < 2) throw std::invalid_argument("split_corpus: need at least 2 samples");
    const std::size_t n_train = (n + 1) / 2;
    std::vector<std::pair<std::uint64_t, std::size_t>> clean;
    for (std::size_t i = 0; i < n; ++i)
        if (!samples[i].is_ambiguous) clean.emplace_back(mix_seed(seed, fnv1a(samples[i].id)), i);
    if (clean.size() < n_train)
        throw std::invalid_argument("split_corpus: too many ambiguous samples to keep them all in "
                                    "the test split");
    std::sort(clean.begin(), clean.end());
    Split s;
    std::vector<char> in_train(n, 0);
    for (std::size_t k = 0; k < n_train; ++k) in_train[clean[k].second] = 1;
    for (std::size_t i = 0; i < n; ++i) (in_train[i] ? s.train : s.test).push_back(i);
    return s;
}

Tensor dilate(const Tensor& mask, std::size_t radius)
{
    return morph(mask, radius, true);
}

Tensor erode(const Tensor& mask, std::size_t radius)
{
    return morph(mask, radius, false);
}

} // namespace uqseg::synth

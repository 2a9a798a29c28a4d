#pragma once

// Uncertainty models: MC dropout, deep ensemble and test-time rotation, each
// producing T candidate probability maps for one image.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "uqseg/segmenter.hpp"

namespace uqseg {

enum class UMKind { mcd, ensemble, tta };

std::string to_string(UMKind kind);
UMKind parse_um_kind(const std::string& s);

struct MemberMeta {
    std::size_t index = 0;
    std::uint64_t seed = 0;  // dropout stream (mcd)
    std::size_t member = 0;  // network index (ensemble)
    double angle_deg = 0.0;  // rotation (tta)
};

struct SampleStack {
    Tensor probs; // T x C x H x W
    UMKind kind = UMKind::mcd;
    std::vector<MemberMeta> meta;

    std::size_t count() const { return probs.dim(0); }
    std::size_t classes() const { return probs.dim(1); }
    std::size_t height() const { return probs.dim(2); }
    std::size_t width() const { return probs.dim(3); }
    // Sample t as a C x H x W tensor.
    Tensor sample(std::size_t t) const;
};

// Throws unless probs is T x C x H x W with T >= 2 and every pixel a simplex within tol.
void validate_stack(const SampleStack& stack, double tol = 1e-6);

struct UMConfig {
    UMKind kind = UMKind::mcd;
    std::size_t mcd_passes = 10;
    std::size_t ensemble_size = 3;
    std::size_t tta_count = 10;
    // When set, TTA uses these angles (degrees) instead of random draws.
    std::optional<std::vector<double>> tta_angles;
    std::uint64_t seed = 42;
};

SampleStack mcd_sample(const SegNet& net, const Tensor& image, std::size_t passes,
                       std::uint64_t seed);
SampleStack ensemble_sample(std::span<const SegNet> nets, const Tensor& image);

struct TtaDiagnostics {
    // Largest |sum_c p_c - 1| after the inverse warp, before renormalization.
    double max_renorm_deviation = 0.0;
};

SampleStack tta_sample(const SegNet& net, const Tensor& image, std::size_t count,
                       std::uint64_t seed, const std::optional<std::vector<double>>& angles = {},
                       TtaDiagnostics* diagnostics = nullptr);

// Dispatches on config.kind. Ensemble uses all of `nets`; mcd/tta use nets[0].
// `stream` decorrelates per-image randomness (typically the image index).
SampleStack sample_stack(const UMConfig& config, std::span<const SegNet> nets, const Tensor& image,
                         std::uint64_t stream);

// Per-image random stream derived from the image id (independent of list order).
std::uint64_t stack_stream(const std::string& id);

// Arithmetic mean over the T samples (C x H x W).
Tensor mean_prediction(const SampleStack& stack);

// Rotates every C x H x W plane about the image center by `angle_deg`
// (counter-clockwise in array coordinates), bilinear sampling, reflect padding.
Tensor rotate_bilinear(const Tensor& planes, double angle_deg);

void save_stack(const std::filesystem::path& dir, const std::string& id, const SampleStack& stack);
SampleStack load_stack(const std::filesystem::path& dir, const std::string& id);

} // namespace uqseg

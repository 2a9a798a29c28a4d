#pragma once

// Pixel-wise uncertainty estimates over a sample stack, per-image reductions,
// dataset normalization, the weighted aggregate score and annotation flagging.
// Natural logarithms throughout; 1e-12 guards every log argument.

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "uqseg/sampler.hpp"

namespace uqseg {

inline constexpr double kLogEpsilon = 1e-12;

enum class UEKind { confidence = 0, entropy = 1, mi = 2, epkl = 3 };
inline constexpr std::array<UEKind, 4> kAllUEKinds = {UEKind::confidence, UEKind::entropy,
                                                      UEKind::mi, UEKind::epkl};

std::string to_string(UEKind kind);
UEKind parse_ue_kind(const std::string& s);

// Which distribution the Renyi entropy is evaluated on.
enum class EntropyMode { of_mean, mean_of_samples };

struct UncertaintyMaps {
    Tensor confidence;
    Tensor entropy;
    Tensor mi;
    Tensor epkl;
    UMKind source = UMKind::mcd;

    const Tensor& get(UEKind kind) const;
};

// max_c of the mean prediction.
Tensor confidence_map(const SampleStack& stack);
// (1/(1-alpha)) ln sum_c p_c^alpha on a C x H x W simplex field.
Tensor renyi_entropy_map(const Tensor& mean_probs, double alpha = 2.0);
// Shannon entropy of the mean minus mean Shannon entropy of the samples.
Tensor mutual_information_map(const SampleStack& stack);
// (1/M) sum_m KL(P_m || mean).
Tensor epkl_map(const SampleStack& stack);

UncertaintyMaps compute_maps(const SampleStack& stack, EntropyMode mode = EntropyMode::of_mean,
                             double alpha = 2.0);

enum class Reduction { mean_all, mean_foreground_band };

std::string to_string(Reduction r);
Reduction parse_reduction(const std::string& s);

// mean_foreground_band averages over `foreground` dilated by 3 px; an empty band
// falls back to the whole image.
double image_score(const Tensor& map, Reduction reduction = Reduction::mean_all,
                   const Tensor* foreground = nullptr);

using UEScores = std::array<double, 4>; // indexed by UEKind

UEScores image_scores(const UncertaintyMaps& maps, Reduction reduction = Reduction::mean_all,
                      const Tensor* foreground = nullptr);

struct NormalizationStats {
    UEScores min{};
    UEScores max{};
};

NormalizationStats fit_normalization(std::span<const UEScores> raw);
// Min-max with clamping to [0, 1]; a constant column maps to 0.5.
UEScores normalize(const UEScores& raw, const NormalizationStats& stats);
// Column-wise min-max over one dataset column.
std::vector<double> normalize_scores(std::span<const double> column);

void save_normalization(const std::filesystem::path& path, const NormalizationStats& stats);
NormalizationStats load_normalization(const std::filesystem::path& path);

struct AggregateWeights {
    double confidence = 0.4;
    double entropy = 0.2;
    double mi = 0.2;
    double epkl = 0.2;

    static AggregateWeights parse(const std::string& csv); // "wC,wE,wM,wK"
};

// w_C*C - w_E*E + w_M*MI - w_K*EPKL on normalized inputs.
double aggregate_score(double c, double e, double mi, double epkl,
                       const AggregateWeights& w = {});

struct ScoreRow {
    std::string id;
    UEScores raw{};
    UEScores normalized{};
    double u_tot = 0.0;
    std::size_t rank = 0;
    bool flagged = false;
    std::optional<double> pred_dice;
    std::optional<double> true_dice;
};

using ScoreTable = std::vector<ScoreRow>;

// Normalizes (fitting stats on `rows` unless given) and fills u_tot.
NormalizationStats fill_scores(ScoreTable& rows, const AggregateWeights& weights,
                               const std::optional<NormalizationStats>& stats = {});

enum class FlagOrder { ascending, descending };
FlagOrder parse_flag_order(const std::string& s);

// Sorts by u_tot (ascending by default: lowest score is most suspect), ties by id,
// assigns ranks 1..n and flags the first k.
void rank_and_flag(ScoreTable& rows, std::size_t k, FlagOrder order = FlagOrder::ascending);

void write_score_table(const std::filesystem::path& path, const ScoreTable& rows);
ScoreTable read_score_table(const std::filesystem::path& path);

} // namespace uqseg

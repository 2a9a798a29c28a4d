#pragma once

// Deterministic synthetic lesion corpus: one blob-shaped foreground per image on a
// flat background, with optional Gaussian noise and injected label ambiguity.

#include <cstdint>
#include <string>
#include <vector>

#include "uqseg/tensor.hpp"

namespace uqseg::synth {

struct CorpusSpec {
    std::size_t n_images = 700;
    std::size_t side = 64;
    double contrast = 0.6;
    double noise_sigma = 0.15;
    double ambiguous_fraction = 0.05;
    std::uint64_t seed = 42;

    void validate() const;
    // Exact number of ambiguous samples: round(ambiguous_fraction * n_images).
    std::size_t ambiguous_count() const;
};

struct SyntheticSample {
    std::string id;
    Tensor image;   // 1 x side x side, values in [0, 1]
    Tensor gt_mask; // side x side, values in {0, 1}
    bool is_ambiguous = false;
    // Dice between the stored mask and the generating blob (1 for clean samples).
    double label_dice = 1.0;
};

std::string sample_id(std::size_t index);

// `ambiguous` selects the corrupted variant; all randomness comes from `rng`.
SyntheticSample generate_sample(const CorpusSpec& spec, bool ambiguous, Rng& rng,
                                std::string id = "");

// Whole corpus; sample i uses the stream mix_seed(spec.seed, i). Parallel over samples.
std::vector<SyntheticSample> generate_corpus(const CorpusSpec& spec);

// Indices of the ambiguous samples for a spec (sorted).
std::vector<std::size_t> ambiguous_indices(const CorpusSpec& spec);

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
};

// ceil(n/2) samples go to train, chosen from the clean samples by ascending
// hash(id, seed); ambiguous samples always land in test. Index lists are ascending.
Split split_corpus(const std::vector<SyntheticSample>& samples, std::uint64_t seed);

// Binary morphology with a (2r+1)^2 square structuring element.
Tensor dilate(const Tensor& mask, std::size_t radius);
Tensor erode(const Tensor& mask, std::size_t radius);

} // namespace uqseg::synth

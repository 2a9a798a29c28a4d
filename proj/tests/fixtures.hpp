#pragma once

// Small trained models shared by the sampler, uncertainty and quality tests.
// Built once per process.

#include <vector>

#include "uqseg/segmenter.hpp"
#include "uqseg/synth.hpp"

namespace testing {

inline const std::vector<uqseg::synth::SyntheticSample>& small_corpus()
{
    static const std::vector<uqseg::synth::SyntheticSample> corpus = [] {
        uqseg::synth::CorpusSpec spec;
        spec.n_images = 48;
        spec.side = 32;
        spec.seed = 5;
        return uqseg::synth::generate_corpus(spec);
    }();
    return corpus;
}

inline std::vector<const uqseg::synth::SyntheticSample*> pointers(
    const std::vector<uqseg::synth::SyntheticSample>& samples)
{
    std::vector<const uqseg::synth::SyntheticSample*> out;
    for (const auto& s : samples) out.push_back(&s);
    return out;
}

inline const uqseg::SegNet& small_segnet()
{
    static const uqseg::SegNet net = [] {
        uqseg::SegTrainConfig cfg;
        cfg.epochs = 3;
        cfg.seed = 7;
        uqseg::SegNetConfig net_cfg;
        net_cfg.side = 32;
        return uqseg::train_segmenter(pointers(small_corpus()), cfg, net_cfg);
    }();
    return net;
}

} // namespace testing

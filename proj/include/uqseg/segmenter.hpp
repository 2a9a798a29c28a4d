#pragma once

// Small encoder-decoder segmentation backbone with dropout, 2-class softmax head.
//
//   conv(1->16) relu dropout conv(16->32) relu maxpool
//   conv(32->32) relu dropout upsample2x conv(32->16) relu conv(16->2) softmax

#include <cstdint>
#include <filesystem>
#include <vector>

#include "uqseg/layers.hpp"
#include "uqseg/synth.hpp"

namespace uqseg {

struct SegNetConfig {
    std::size_t side = 64;
    double dropout = 0.2;
    bool with_dropout = true;
};

class SegNet {
public:
    SegNet() = default;
    explicit SegNet(SegNetConfig config);

    const SegNetConfig& config() const { return config_; }
    Sequential& body() { return body_; }
    const Sequential& body() const { return body_; }
    bool has_dropout() const { return body_.has_dropout(); }
    std::uint64_t checksum() const { return parameter_checksum(body_.parameters()); }

private:
    SegNetConfig config_;
    Sequential body_; // produces logits; softmax is applied by callers
};

struct SegTrainConfig {
    std::size_t epochs = 5;
    std::size_t batch_size = 16;
    double lr = 0.001;
    std::uint64_t seed = 42;
};

struct SegTrainReport {
    std::vector<double> epoch_loss;
};

SegNet train_segmenter(const std::vector<const synth::SyntheticSample*>& train,
                       const SegTrainConfig& config, const SegNetConfig& net_config = {},
                       SegTrainReport* report = nullptr);

enum class DropoutUse { off, mcd };

// image: 1 x H x W. Returns 2 x H x W per-pixel probabilities.
Tensor predict_probs(const SegNet& net, const Tensor& image, DropoutUse dropout, Rng* rng = nullptr);

// Batched: images N x 1 x H x W -> N x 2 x H x W. With mcd, sample n draws its
// dropout masks from mix_seed(seed, n).
Tensor predict_probs_batch(const SegNet& net, const Tensor& images, DropoutUse dropout,
                           std::uint64_t seed = 0);

// Foreground channel >= threshold -> 1 (ties go to foreground). probs: 2 x H x W.
Tensor hard_mask(const Tensor& probs, double threshold = 0.5);

void save_segnet(const std::filesystem::path& path, const SegNet& net);
SegNet load_segnet(const std::filesystem::path& path);

} // namespace uqseg

#pragma once

// Multi-branch CNN regressor predicting per-image Dice from uncertainty maps,
// predicted segmentation and/or the input image, plus Grad-CAM on its branches.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "uqseg/layers.hpp"
#include "uqseg/uncertainty.hpp"

namespace uqseg {

enum class QualityArch { two_way_seg, two_way_img, three_way };
enum class InputRole { image, ue_map, seg_map };

std::string to_string(QualityArch arch);
QualityArch parse_quality_arch(const std::string& s);
std::string to_string(InputRole role);

// Branch order: two_way_seg {ue_map, seg_map}, two_way_img {ue_map, image},
// three_way {image, ue_map, seg_map}.
std::vector<InputRole> input_roles(QualityArch arch);

inline constexpr std::array<std::size_t, 5> kBranchFilters = {64, 64, 32, 32, 16};

struct QualityPrediction {
    double raw = 0.0;
    double clamped = 0.0; // raw clipped to [0, 1]
};

class QualityNet {
public:
    QualityNet() = default;
    QualityNet(QualityArch arch, std::size_t side = 64);

    QualityArch arch() const { return arch_; }
    std::size_t side() const { return side_; }
    std::size_t branch_count() const { return branches_.size(); }
    // Spatial extent of each branch output (side / 32).
    std::size_t feature_side() const { return side_ / 32; }
    std::size_t branch_feature_size() const;

    Sequential& branch(std::size_t i) { return branches_.at(i); }
    const Sequential& branch(std::size_t i) const { return branches_.at(i); }
    Sequential& head() { return head_; }
    const Sequential& head() const { return head_; }

    // Per-branch affine input standardization: (x - offset) / scale.
    void set_input_normalization(std::vector<std::pair<double, double>> offset_scale);
    const std::vector<std::pair<double, double>>& input_normalization() const { return norm_; }

    struct Cache {
        std::vector<Sequential::Cache> branches;
        std::vector<Tensor> branch_outputs; // N x 16 x s x s each
        Sequential::Cache head;
        std::size_t batch = 0;
    };

    // inputs[b] is N x 1 x side x side for branch b. Returns N raw predictions.
    std::vector<double> forward_batch(const std::vector<Tensor>& inputs, Cache* cache) const;
    // inputs[b] is 1 x side x side or side x side.
    QualityPrediction forward(const std::vector<Tensor>& inputs) const;

    // grad_output holds dL/dpred per sample. Accumulates into `grads` (layout of
    // parameters()). Returns dL/d(branch output) per branch.
    std::vector<Tensor> backward(std::span<const double> grad_output, const Cache& cache,
                                 std::span<Tensor> grads) const;

    // Squared-error loss over a batch. Adds d(mean squared error)/d(params) into
    // `grads` and returns the summed squared error. Each sample runs its own
    // forward and backward pass; per-sample gradients are summed in sample order.
    double mse_gradients(const std::vector<Tensor>& inputs, std::span<const double> targets,
                         std::span<Tensor> grads) const;

    std::vector<Tensor*> parameters();
    std::vector<const Tensor*> parameters() const;
    std::vector<Tensor> zero_grads() const { return zeros_like(parameters()); }
    void init(Rng& rng);
    std::uint64_t checksum() const { return parameter_checksum(parameters()); }

private:
    std::vector<Tensor> prepare(const std::vector<Tensor>& inputs, std::size_t& batch) const;
    std::vector<double> run(const std::vector<Tensor>& xs, std::size_t n, Cache* cache) const;

    QualityArch arch_ = QualityArch::three_way;
    std::size_t side_ = 64;
    std::vector<Sequential> branches_;
    Sequential head_;
    std::vector<std::pair<double, double>> norm_;
};

// Everything the regressor can consume for one image, derived from one stack.
struct ImageFeatures {
    std::string id;
    Tensor image;          // 1 x H x W
    Tensor seg_map;        // H x W foreground probability of the mean prediction
    Tensor predicted_mask; // H x W hard mask of the mean prediction
    UncertaintyMaps maps;
    double true_dice = 0.0; // Dice(predicted_mask, gt) when ground truth was given
};

ImageFeatures extract_features(const std::string& id, const Tensor& image,
                               const SampleStack& stack, const Tensor* gt_mask,
                               EntropyMode mode = EntropyMode::of_mean);

struct QualityPair {
    std::string id;
    std::vector<Tensor> inputs; // per branch, 1 x H x W
    double target = 0.0;
};

QualityPair make_pair(const ImageFeatures& f, UEKind ue, QualityArch arch);
std::vector<QualityPair> make_pairs(std::span<const ImageFeatures> features, UEKind ue,
                                    QualityArch arch);

// Samples the uncertainty model for every image and builds regression pairs with
// Dice(hard_mask(mean prediction), gt) targets.
std::vector<QualityPair> make_training_pairs(const std::vector<const synth::SyntheticSample*>& samples,
                                             std::span<const SegNet> nets, const UMConfig& um,
                                             UEKind ue, QualityArch arch);

struct QPTrainConfig {
    std::size_t epochs = 20;
    std::size_t batch_size = 16;
    double lr = 0.001;
    std::uint64_t seed = 42;
    bool standardize_inputs = true;
};

struct QPTrainReport {
    std::vector<double> epoch_mse;
    double final_train_mse = 0.0;
};

QualityNet train_quality_net(std::span<const QualityPair> pairs, const QPTrainConfig& config,
                             QualityArch arch, QPTrainReport* report = nullptr);

std::vector<QualityPrediction> predict_quality(const QualityNet& net,
                                               std::span<const QualityPair> pairs);

struct GradCamOptions {
    bool apply_relu = true;
};

// Branch output activations and d(prediction)/d(activations), 16 x s x s each.
std::pair<Tensor, Tensor> branch_activation_gradient(const QualityNet& net,
                                                     const std::vector<Tensor>& inputs,
                                                     std::size_t branch);

// s x s heatmap in [0, 1] for one branch (s = side / 32).
Tensor grad_cam(const QualityNet& net, const std::vector<Tensor>& inputs, std::size_t branch,
                GradCamOptions options = {});

// Nearest-neighbour enlargement of a heatmap to side x side for display.
Tensor upscale_nearest(const Tensor& map, std::size_t side);

void save_quality_net(const std::filesystem::path& path, const QualityNet& net,
                      const std::vector<std::pair<std::string, std::string>>& extra = {});
QualityNet load_quality_net(const std::filesystem::path& path,
                            std::vector<std::pair<std::string, std::string>>* extra = nullptr);

} // namespace uqseg

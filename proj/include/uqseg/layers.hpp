#pragma once

// Layer operations with hand-written backward passes.
//
// Spatial tensors are batched N x C x H x W; a 3-D C x H x W tensor is accepted
// wherever a batch is and treated as N = 1 (the result keeps the caller's rank).
// Dense layers see N x F.

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "uqseg/kernels.hpp"
#include "uqseg/tensor.hpp"

namespace uqseg {

using kernels::Padding;

struct ConvParams {
    Tensor weights; // out x in x 3 x 3
    Tensor bias;    // out
    Padding padding = Padding::same;

    std::size_t out_channels() const { return weights.dim(0); }
    std::size_t in_channels() const { return weights.dim(1); }
};

struct ConvGrads {
    Tensor input;
    Tensor weights;
    Tensor bias;
};

Tensor conv2d_forward(const Tensor& input, const ConvParams& params);
ConvGrads conv2d_backward(const Tensor& grad_output, const Tensor& input, const ConvParams& params);

Tensor relu(const Tensor& input);
// Gradient passes only where input > 0.
Tensor relu_backward(const Tensor& grad_output, const Tensor& input);

struct PoolResult {
    Tensor output;
    std::vector<std::uint32_t> argmax; // flat index into the input, one per output value
};

// 2x2 max pooling, stride 2. Odd extents behave as if padded with -inf.
// Ties go to the first element in row-major window order.
PoolResult maxpool2x2(const Tensor& input);
Tensor maxpool2x2_backward(const Tensor& grad_output, std::span<const std::uint32_t> argmax,
                           const Shape& input_shape);

Tensor upsample2x_nearest(const Tensor& input);
Tensor upsample2x_nearest_backward(const Tensor& grad_output);

struct DenseParams {
    Tensor weights; // out x in
    Tensor bias;    // out
};

struct DenseGrads {
    Tensor input;
    Tensor weights;
    Tensor bias;
};

Tensor dense_forward(const Tensor& input, const DenseParams& params);
DenseGrads dense_backward(const Tensor& grad_output, const Tensor& input,
                          const DenseParams& params);

enum class DropoutMode { train, eval };

struct DropoutResult {
    Tensor output;
    Tensor mask; // 0 or 1/(1-p) per element; empty in eval mode
};

// Inverted dropout: survivors are scaled by 1/(1-p).
DropoutResult dropout_forward(const Tensor& input, double p, DropoutMode mode, Rng& rng);

// Softmax across the channel axis with max subtraction.
Tensor softmax_channels(const Tensor& logits);

struct LossResult {
    double loss = 0.0;
    Tensor grad;
};

struct ScalarLoss {
    double loss = 0.0;
    double grad = 0.0;
};

ScalarLoss mse_loss(double pred, double target);

// Mean per-pixel cross-entropy of softmax(logits) against a binary mask per sample.
// logits: N x 2 x H x W, masks: N x H x W. Gradient is with respect to the logits.
LossResult softmax_cross_entropy(const Tensor& logits, const Tensor& masks);

// ---------------------------------------------------------------------------
// Layer objects: thin stateful wrappers that own parameters. Activations needed
// by backward live in a caller-owned LayerCache so one layer can serve many
// concurrent forward passes.

struct LayerCache {
    Tensor input;
    Tensor mask;
    Shape input_shape;
    std::vector<std::uint32_t> argmax;
    bool valid = false;
};

struct ForwardContext {
    bool dropout_active = false;
    Rng* rng = nullptr;
};

class Layer {
public:
    virtual ~Layer() = default;

    // One-line architecture description, e.g. "conv2d 1 16 same".
    virtual std::string describe() const = 0;
    virtual Tensor forward(const Tensor& x, LayerCache& cache, ForwardContext& ctx) const = 0;
    // Adds parameter gradients into `grads` (same order as params()).
    virtual Tensor backward(const Tensor& grad_output, const LayerCache& cache,
                            std::span<Tensor> grads, bool need_input_grad) const = 0;
    virtual std::span<Tensor> params() { return {}; }
    virtual std::span<const Tensor> params() const { return {}; }
    virtual void init(Rng& /*rng*/) {}
    virtual std::unique_ptr<Layer> clone() const = 0;
};

class Conv2dLayer final : public Layer {
public:
    Conv2dLayer(std::size_t in_channels, std::size_t out_channels, Padding padding = Padding::same);

    std::string describe() const override;
    Tensor forward(const Tensor& x, LayerCache& cache, ForwardContext& ctx) const override;
    Tensor backward(const Tensor& grad_output, const LayerCache& cache, std::span<Tensor> grads,
                    bool need_input_grad) const override;
    std::span<Tensor> params() override { return params_; }
    std::span<const Tensor> params() const override { return params_; }
    void init(Rng& rng) override;
    std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv2dLayer>(*this); }

private:
    Padding padding_;
    std::vector<Tensor> params_; // weights, bias
};

class DenseLayer final : public Layer {
public:
    DenseLayer(std::size_t in, std::size_t out);

    std::string describe() const override;
    Tensor forward(const Tensor& x, LayerCache& cache, ForwardContext& ctx) const override;
    Tensor backward(const Tensor& grad_output, const LayerCache& cache, std::span<Tensor> grads,
                    bool need_input_grad) const override;
    std::span<Tensor> params() override { return params_; }
    std::span<const Tensor> params() const override { return params_; }
    void init(Rng& rng) override;
    std::unique_ptr<Layer> clone() const override { return std::make_unique<DenseLayer>(*this); }

private:
    std::vector<Tensor> params_; // weights, bias
};

class ReluLayer final : public Layer {
public:
    std::string describe() const override { return "relu"; }
    Tensor forward(const Tensor& x, LayerCache& cache, ForwardContext& ctx) const override;
    Tensor backward(const Tensor& grad_output, const LayerCache& cache, std::span<Tensor> grads,
                    bool need_input_grad) const override;
    std::unique_ptr<Layer> clone() const override { return std::make_unique<ReluLayer>(*this); }
};

class MaxPoolLayer final : public Layer {
public:
    std::string describe() const override { return "maxpool2x2"; }
    Tensor forward(const Tensor& x, LayerCache& cache, ForwardContext& ctx) const override;
    Tensor backward(const Tensor& grad_output, const LayerCache& cache, std::span<Tensor> grads,
                    bool need_input_grad) const override;
    std::unique_ptr<Layer> clone() const override { return std::make_unique<MaxPoolLayer>(*this); }
};

class UpsampleLayer final : public Layer {
public:
    std::string describe() const override { return "upsample2x"; }
    Tensor forward(const Tensor& x, LayerCache& cache, ForwardContext& ctx) const override;
    Tensor backward(const Tensor& grad_output, const LayerCache& cache, std::span<Tensor> grads,
                    bool need_input_grad) const override;
    std::unique_ptr<Layer> clone() const override { return std::make_unique<UpsampleLayer>(*this); }
};

class DropoutLayer final : public Layer {
public:
    explicit DropoutLayer(double p);

    double rate() const { return p_; }
    std::string describe() const override;
    Tensor forward(const Tensor& x, LayerCache& cache, ForwardContext& ctx) const override;
    Tensor backward(const Tensor& grad_output, const LayerCache& cache, std::span<Tensor> grads,
                    bool need_input_grad) const override;
    std::unique_ptr<Layer> clone() const override { return std::make_unique<DropoutLayer>(*this); }

private:
    double p_;
};

// Parses one describe() line back into a layer (parameters zero-initialized).
std::unique_ptr<Layer> make_layer(const std::string& description);

// Ordered stack of layers with a flat parameter list.
class Sequential {
public:
    Sequential() = default;
    Sequential(const Sequential& other);
    Sequential& operator=(const Sequential& other);
    Sequential(Sequential&&) noexcept = default;
    Sequential& operator=(Sequential&&) noexcept = default;

    void add(std::unique_ptr<Layer> layer);
    std::size_t size() const { return layers_.size(); }
    const Layer& layer(std::size_t i) const { return *layers_.at(i); }

    using Cache = std::vector<LayerCache>;

    Tensor forward(const Tensor& x, Cache& cache, ForwardContext& ctx) const;
    Tensor forward(const Tensor& x, ForwardContext& ctx) const; // inference only, no cache
    // `grads` is laid out like parameters(); gradients are accumulated.
    Tensor backward(const Tensor& grad_output, const Cache& cache, std::span<Tensor> grads,
                    bool need_input_grad = true) const;

    std::vector<Tensor*> parameters();
    std::vector<const Tensor*> parameters() const;
    std::vector<Tensor> zero_grads() const;
    void init(Rng& rng);
    std::vector<std::string> describe() const;
    bool has_dropout() const;

private:
    std::vector<std::unique_ptr<Layer>> layers_;
};

// Zero tensors shaped like each parameter.
std::vector<Tensor> zeros_like(const std::vector<const Tensor*>& params);

// FNV-1a over the raw bytes of every parameter; used to assert frozen networks.
std::uint64_t parameter_checksum(const std::vector<const Tensor*>& params);

} // namespace uqseg

#include "uqseg/layers.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace uqseg {

namespace {

struct Dims4 {
    std::size_t n, c, h, w;
};

Dims4 spatial_dims(const Tensor& t, const char* op)
{
    if (t.ndim() == 3) return {1, t.dim(0), t.dim(1), t.dim(2)};
    if (t.ndim() == 4) return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
    throw std::invalid_argument(std::string(op) + ": expected C x H x W or N x C x H x W, got " +
                                shape_string(t.shape()));
}

Shape spatial_shape(bool batched, std::size_t n, std::size_t c, std::size_t h, std::size_t w)
{
    if (batched) return {n, c, h, w};
    return {c, h, w};
}

kernels::ConvGeometry geometry(const Dims4& d, const ConvParams& p)
{
    if (p.weights.ndim() != 4 || p.weights.dim(2) != 3 || p.weights.dim(3) != 3)
        throw std::invalid_argument("conv2d: kernel must be out x in x 3 x 3, got " +
                                    shape_string(p.weights.shape()));
    if (p.bias.size() != p.weights.dim(0))
        throw std::invalid_argument("conv2d: bias length " + std::to_string(p.bias.size()) +
                                    " does not match " + std::to_string(p.weights.dim(0)) +
                                    " output channels");
    if (d.c != p.weights.dim(1))
        throw std::invalid_argument("conv2d: input has " + std::to_string(d.c) +
                                    " channels, kernel expects " +
                                    std::to_string(p.weights.dim(1)));
    if (p.padding == Padding::valid && (d.h < 3 || d.w < 3))
        throw std::invalid_argument("conv2d: valid padding needs at least 3x3 input");
    return {d.c, p.weights.dim(0), d.h, d.w, p.padding};
}

std::size_t per_sample(const Tensor& t)
{
    return t.ndim() <= 1 ? t.size() : t.size() / t.dim(0);
}

} // namespace

// ---------------------------------------------------------------------------
// Convolution

Tensor conv2d_forward(const Tensor& input, const ConvParams& params)
{
    const Dims4 d = spatial_dims(input, "conv2d");
    const auto g = geometry(d, params);
    Tensor out(spatial_shape(input.ndim() == 4, d.n, g.out_channels, g.out_height(), g.out_width()));
    kernels::conv2d_forward_batch(g, d.n, input.values(), params.weights.values(),
                                  params.bias.values(), out.values());
    return out;
}

ConvGrads conv2d_backward(const Tensor& grad_output, const Tensor& input, const ConvParams& params)
{
    const Dims4 d = spatial_dims(input, "conv2d backward");
    const auto g = geometry(d, params);
    if (grad_output.size() != d.n * g.output_size())
        throw std::invalid_argument("conv2d backward: gradient shape " +
                                    shape_string(grad_output.shape()) + " does not match output");
    ConvGrads grads{Tensor(input.shape()), Tensor(params.weights.shape()),
                    Tensor(params.bias.shape())};
    kernels::conv2d_backward_batch(g, d.n, grad_output.values(), input.values(),
                                   params.weights.values(), grads.input.values(),
                                   grads.weights.values(), grads.bias.values());
    return grads;
}

// ---------------------------------------------------------------------------
// Elementwise / pooling / resampling

Tensor relu(const Tensor& input)
{
    Tensor out = input;
    for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
    return out;
}

Tensor relu_backward(const Tensor& grad_output, const Tensor& input)
{
    require_same_shape(grad_output, input, "relu backward");
    Tensor out(input.shape());
    for (std::size_t i = 0; i < input.size(); ++i)
        out[i] = input[i] > 0.0 ? grad_output[i] : 0.0;
    return out;
}

PoolResult maxpool2x2(const Tensor& input)
{
    const Dims4 d = spatial_dims(input, "maxpool2x2");
    const std::size_t oh = (d.h + 1) / 2;
    const std::size_t ow = (d.w + 1) / 2;
    PoolResult r{Tensor(spatial_shape(input.ndim() == 4, d.n, d.c, oh, ow)), {}};
    r.argmax.resize(r.output.size());
    const double* src = input.data();
    std::size_t o = 0;
    for (std::size_t plane = 0; plane < d.n * d.c; ++plane) {
        const std::size_t base = plane * d.h * d.w;
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t x = 0; x < ow; ++x, ++o) {
                double best = -std::numeric_limits<double>::infinity();
                std::size_t best_i = base + 2 * y * d.w + 2 * x;
                for (std::size_t dy = 0; dy < 2; ++dy) {
                    const std::size_t iy = 2 * y + dy;
                    if (iy >= d.h) continue;
                    for (std::size_t dx = 0; dx < 2; ++dx) {
                        const std::size_t ix = 2 * x + dx;
                        if (ix >= d.w) continue;
                        const std::size_t idx = base + iy * d.w + ix;
                        if (src[idx] > best) {
                            best = src[idx];
                            best_i = idx;
                        }
                    }
                }
                r.output[o] = best;
                r.argmax[o] = static_cast<std::uint32_t>(best_i);
            }
        }
    }
    return r;
}

Tensor maxpool2x2_backward(const Tensor& grad_output, std::span<const std::uint32_t> argmax,
                           const Shape& input_shape)
{
    if (argmax.size() != grad_output.size())
        throw std::invalid_argument("maxpool2x2 backward: index count does not match gradient");
    Tensor out(input_shape);
    for (std::size_t i = 0; i < argmax.size(); ++i) out[argmax[i]] += grad_output[i];
    return out;
}

Tensor upsample2x_nearest(const Tensor& input)
{
    const Dims4 d = spatial_dims(input, "upsample2x");
    Tensor out(spatial_shape(input.ndim() == 4, d.n, d.c, 2 * d.h, 2 * d.w));
    const std::size_t ow = 2 * d.w;
    for (std::size_t plane = 0; plane < d.n * d.c; ++plane) {
        const double* src = input.data() + plane * d.h * d.w;
        double* dst = out.data() + plane * 4 * d.h * d.w;
        for (std::size_t y = 0; y < 2 * d.h; ++y)
            for (std::size_t x = 0; x < ow; ++x) dst[y * ow + x] = src[(y / 2) * d.w + x / 2];
    }
    return out;
}

Tensor upsample2x_nearest_backward(const Tensor& grad_output)
{
    const Dims4 d = spatial_dims(grad_output, "upsample2x backward");
    if (d.h % 2 || d.w % 2)
        throw std::invalid_argument("upsample2x backward: gradient extent must be even");
    const std::size_t h = d.h / 2, w = d.w / 2;
    Tensor out(spatial_shape(grad_output.ndim() == 4, d.n, d.c, h, w));
    for (std::size_t plane = 0; plane < d.n * d.c; ++plane) {
        const double* src = grad_output.data() + plane * d.h * d.w;
        double* dst = out.data() + plane * h * w;
        for (std::size_t y = 0; y < d.h; ++y)
            for (std::size_t x = 0; x < d.w; ++x) dst[(y / 2) * w + x / 2] += src[y * d.w + x];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dense

Tensor dense_forward(const Tensor& input, const DenseParams& params)
{
    if (params.weights.ndim() != 2 || params.bias.size() != params.weights.dim(0))
        throw std::invalid_argument("dense: weights must be out x in with matching bias");
    const std::size_t out = params.weights.dim(0);
    const std::size_t in = params.weights.dim(1);
    const bool flat = input.ndim() <= 1;
    const std::size_t n = flat ? 1 : input.dim(0);
    if ((flat ? input.size() : per_sample(input)) != in)
        throw std::invalid_argument("dense: input length " +
                                    std::to_string(flat ? input.size() : per_sample(input)) +
                                    " does not match " + std::to_string(in) + " inputs");
    Tensor y(flat ? Shape{out} : Shape{n, out});
    for (std::size_t i = 0; i < n; ++i)
        std::copy(params.bias.data(), params.bias.data() + out, y.data() + i * out);
    kernels::gemm(false, true, n, out, in, 1.0, input.data(), params.weights.data(), 1.0, y.data());
    return y;
}

DenseGrads dense_backward(const Tensor& grad_output, const Tensor& input,
                          const DenseParams& params)
{
    const std::size_t out = params.weights.dim(0);
    const std::size_t in = params.weights.dim(1);
    const std::size_t n = input.size() / in;
    if (grad_output.size() != n * out)
        throw std::invalid_argument("dense backward: gradient shape " +
                                    shape_string(grad_output.shape()) + " does not match output");
    DenseGrads g{Tensor(input.shape()), Tensor(params.weights.shape()), Tensor(params.bias.shape())};
    kernels::gemm(true, false, out, in, n, 1.0, grad_output.data(), input.data(), 0.0,
                  g.weights.data());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o = 0; o < out; ++o) g.bias[o] += grad_output[i * out + o];
    kernels::gemm(false, false, n, in, out, 1.0, grad_output.data(), params.weights.data(), 0.0,
                  g.input.data());
    return g;
}

// ---------------------------------------------------------------------------
// Dropout, softmax, losses

DropoutResult dropout_forward(const Tensor& input, double p, DropoutMode mode, Rng& rng)
{
    if (!(p >= 0.0 && p < 1.0))
        throw std::invalid_argument("dropout: rate must lie in [0, 1), got " + std::to_string(p));
    if (mode == DropoutMode::eval) return {input, Tensor()};
    const double scale = 1.0 / (1.0 - p);
    Tensor mask(input.shape());
    Tensor out(input.shape());
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (std::size_t i = 0; i < input.size(); ++i) {
        const double keep = (p == 0.0 || unif(rng) >= p) ? scale : 0.0;
        mask[i] = keep;
        out[i] = input[i] * keep;
    }
    return {std::move(out), std::move(mask)};
}

Tensor softmax_channels(const Tensor& logits)
{
    const Dims4 d = spatial_dims(logits, "softmax_channels");
    Tensor out(logits.shape());
    const std::size_t plane = d.h * d.w;
    for (std::size_t n = 0; n < d.n; ++n) {
        const double* src = logits.data() + n * d.c * plane;
        double* dst = out.data() + n * d.c * plane;
        for (std::size_t p = 0; p < plane; ++p) {
            double mx = src[p];
            for (std::size_t c = 1; c < d.c; ++c) mx = std::max(mx, src[c * plane + p]);
            double sum = 0.0;
            for (std::size_t c = 0; c < d.c; ++c) {
                const double e = std::exp(src[c * plane + p] - mx);
                dst[c * plane + p] = e;
                sum += e;
            }
            for (std::size_t c = 0; c < d.c; ++c) dst[c * plane + p] /= sum;
        }
    }
    return out;
}

ScalarLoss mse_loss(double pred, double target)
{
    const double diff = pred - target;
    return {diff * diff, 2.0 * diff};
}

LossResult softmax_cross_entropy(const Tensor& logits, const Tensor& masks)
{
    const Dims4 d = spatial_dims(logits, "softmax_cross_entropy");
    if (d.c != 2) throw std::invalid_argument("softmax_cross_entropy: expected 2 channels");
    const std::size_t plane = d.h * d.w;
    if (masks.size() != d.n * plane)
        throw std::invalid_argument("softmax_cross_entropy: mask shape " +
                                    shape_string(masks.shape()) + " does not match logits " +
                                    shape_string(logits.shape()));
    Tensor probs = softmax_channels(logits);
    LossResult r{0.0, Tensor(logits.shape())};
    const double norm = 1.0 / static_cast<double>(d.n * plane);
    for (std::size_t n = 0; n < d.n; ++n) {
        for (std::size_t p = 0; p < plane; ++p) {
            const std::size_t label = masks[n * plane + p] > 0.5 ? 1 : 0;
            for (std::size_t c = 0; c < 2; ++c) {
                const std::size_t i = (n * 2 + c) * plane + p;
                const double target = c == label ? 1.0 : 0.0;
                if (c == label) r.loss -= std::log(std::max(probs[i], 1e-300));
                r.grad[i] = (probs[i] - target) * norm;
            }
        }
    }
    r.loss *= norm;
    return r;
}

// ---------------------------------------------------------------------------
// Layer objects

namespace {

void require_cache(const LayerCache& cache, const std::string& layer)
{
    if (!cache.valid)
        throw std::logic_error(layer + " backward called without a cached forward pass");
}

void he_uniform(Tensor& t, std::size_t fan_in, Rng& rng)
{
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> unif(-bound, bound);
    for (double& v : t.values()) v = unif(rng);
}

} // namespace

Conv2dLayer::Conv2dLayer(std::size_t in_channels, std::size_t out_channels, Padding padding)
    : padding_(padding)
{
    params_.emplace_back(Shape{out_channels, in_channels, 3, 3});
    params_.emplace_back(Shape{out_channels});
}

std::string Conv2dLayer::describe() const
{
    return "conv2d " + std::to_string(params_[0].dim(1)) + " " + std::to_string(params_[0].dim(0)) +
           (padding_ == Padding::same ? " same" : " valid");
}

Tensor Conv2dLayer::forward(const Tensor& x, LayerCache& cache, ForwardContext&) const
{
    const Dims4 d = spatial_dims(x, "conv2d");
    if (d.c != params_[0].dim(1))
        throw std::invalid_argument("conv2d: input has " + std::to_string(d.c) +
                                    " channels, layer expects " + std::to_string(params_[0].dim(1)));
    const kernels::ConvGeometry g{d.c, params_[0].dim(0), d.h, d.w, padding_};
    Tensor out(spatial_shape(x.ndim() == 4, d.n, g.out_channels, g.out_height(), g.out_width()));
    kernels::conv2d_forward_batch(g, d.n, x.values(), params_[0].values(), params_[1].values(),
                                  out.values());
    cache.input = x;
    cache.valid = true;
    return out;
}

Tensor Conv2dLayer::backward(const Tensor& grad_output, const LayerCache& cache,
                             std::span<Tensor> grads, bool need_input_grad) const
{
    require_cache(cache, "conv2d");
    const Dims4 d = spatial_dims(cache.input, "conv2d backward");
    const kernels::ConvGeometry g{d.c, params_[0].dim(0), d.h, d.w, padding_};
    Tensor input_grad = need_input_grad ? Tensor(cache.input.shape()) : Tensor();
    kernels::conv2d_backward_batch(g, d.n, grad_output.values(), cache.input.values(),
                                   params_[0].values(), input_grad.values(), grads[0].values(),
                                   grads[1].values());
    return input_grad;
}

void Conv2dLayer::init(Rng& rng)
{
    he_uniform(params_[0], params_[0].dim(1) * 9, rng);
    params_[1].fill(0.0);
}

DenseLayer::DenseLayer(std::size_t in, std::size_t out)
{
    params_.emplace_back(Shape{out, in});
    params_.emplace_back(Shape{out});
}

std::string DenseLayer::describe() const
{
    return "dense " + std::to_string(params_[0].dim(1)) + " " + std::to_string(params_[0].dim(0));
}

Tensor DenseLayer::forward(const Tensor& x, LayerCache& cache, ForwardContext&) const
{
    const std::size_t n = x.ndim() <= 1 ? 1 : x.dim(0);
    cache.input = x.reshaped({n, x.size() / std::max<std::size_t>(n, 1)});
    cache.valid = true;
    const std::size_t out = params_[0].dim(0);
    const std::size_t in = params_[0].dim(1);
    if (cache.input.dim(1) != in)
        throw std::invalid_argument("dense: input length " + std::to_string(cache.input.dim(1)) +
                                    " does not match " + std::to_string(in) + " inputs");
    Tensor y(Shape{n, out});
    for (std::size_t i = 0; i < n; ++i)
        std::copy(params_[1].data(), params_[1].data() + out, y.data() + i * out);
    kernels::gemm(false, true, n, out, in, 1.0, cache.input.data(), params_[0].data(), 1.0,
                  y.data());
    return y;
}

Tensor DenseLayer::backward(const Tensor& grad_output, const LayerCache& cache,
                            std::span<Tensor> grads, bool need_input_grad) const
{
    require_cache(cache, "dense");
    const std::size_t out = params_[0].dim(0);
    const std::size_t in = params_[0].dim(1);
    const std::size_t n = cache.input.dim(0);
    kernels::gemm(true, false, out, in, n, 1.0, grad_output.data(), cache.input.data(), 1.0,
                  grads[0].data());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o = 0; o < out; ++o) grads[1][o] += grad_output[i * out + o];
    if (!need_input_grad) return Tensor();
    Tensor gx(Shape{n, in});
    kernels::gemm(false, false, n, in, out, 1.0, grad_output.data(), params_[0].data(), 0.0,
                  gx.data());
    return gx;
}

void DenseLayer::init(Rng& rng)
{
    he_uniform(params_[0], params_[0].dim(1), rng);
    params_[1].fill(0.0);
}

Tensor ReluLayer::forward(const Tensor& x, LayerCache& cache, ForwardContext&) const
{
    cache.input = x;
    cache.valid = true;
    return relu(x);
}

Tensor ReluLayer::backward(const Tensor& grad_output, const LayerCache& cache, std::span<Tensor>,
                           bool) const
{
    require_cache(cache, "relu");
    return relu_backward(grad_output, cache.input);
}

Tensor MaxPoolLayer::forward(const Tensor& x, LayerCache& cache, ForwardContext&) const
{
    PoolResult r = maxpool2x2(x);
    cache.input_shape = x.shape();
    cache.argmax = std::move(r.argmax);
    cache.valid = true;
    return std::move(r.output);
}

Tensor MaxPoolLayer::backward(const Tensor& grad_output, const LayerCache& cache,
                              std::span<Tensor>, bool) const
{
    require_cache(cache, "maxpool2x2");
    return maxpool2x2_backward(grad_output, cache.argmax, cache.input_shape);
}

Tensor UpsampleLayer::forward(const Tensor& x, LayerCache& cache, ForwardContext&) const
{
    cache.valid = true;
    return upsample2x_nearest(x);
}

Tensor UpsampleLayer::backward(const Tensor& grad_output, const LayerCache& cache,
                               std::span<Tensor>, bool) const
{
    require_cache(cache, "upsample2x");
    return upsample2x_nearest_backward(grad_output);
}

DropoutLayer::DropoutLayer(double p) : p_(p)
{
    if (!(p >= 0.0 && p < 1.0))
        throw std::invalid_argument("dropout: rate must lie in [0, 1), got " + std::to_string(p));
}

std::string DropoutLayer::describe() const
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "dropout %.17g", p_);
    return buf;
}

Tensor DropoutLayer::forward(const Tensor& x, LayerCache& cache, ForwardContext& ctx) const
{
    cache.valid = true;
    if (!ctx.dropout_active) {
        cache.mask = Tensor();
        return x;
    }
    if (ctx.rng == nullptr) throw std::logic_error("dropout: active mode requires an rng");
    DropoutResult r = dropout_forward(x, p_, DropoutMode::train, *ctx.rng);
    cache.mask = std::move(r.mask);
    return std::move(r.output);
}

Tensor DropoutLayer::backward(const Tensor& grad_output, const LayerCache& cache,
                              std::span<Tensor>, bool) const
{
    require_cache(cache, "dropout");
    if (cache.mask.empty()) return grad_output;
    Tensor g = grad_output;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= cache.mask[i];
    return g;
}

std::unique_ptr<Layer> make_layer(const std::string& description)
{
    std::istringstream is(description);
    std::string kind;
    is >> kind;
    if (kind == "conv2d") {
        std::size_t in = 0, out = 0;
        std::string pad;
        if (!(is >> in >> out >> pad) || (pad != "same" && pad != "valid"))
            throw std::invalid_argument("malformed layer line: " + description);
        return std::make_unique<Conv2dLayer>(in, out, pad == "same" ? Padding::same : Padding::valid);
    }
    if (kind == "dense") {
        std::size_t in = 0, out = 0;
        if (!(is >> in >> out)) throw std::invalid_argument("malformed layer line: " + description);
        return std::make_unique<DenseLayer>(in, out);
    }
    if (kind == "dropout") {
        double p = 0;
        if (!(is >> p)) throw std::invalid_argument("malformed layer line: " + description);
        return std::make_unique<DropoutLayer>(p);
    }
    if (kind == "relu") return std::make_unique<ReluLayer>();
    if (kind == "maxpool2x2") return std::make_unique<MaxPoolLayer>();
    if (kind == "upsample2x") return std::make_unique<UpsampleLayer>();
    throw std::invalid_argument("unknown layer kind in line: " + description);
}

// ---------------------------------------------------------------------------
// Sequential

Sequential::Sequential(const Sequential& other)
{
    for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Sequential& Sequential::operator=(const Sequential& other)
{
    if (this != &other) {
        layers_.clear();
        for (const auto& l : other.layers_) layers_.push_back(l->clone());
    }
    return *this;
}

void Sequential::add(std::unique_ptr<Layer> layer)
{
    layers_.push_back(std::move(layer));
}

Tensor Sequential::forward(const Tensor& x, Cache& cache, ForwardContext& ctx) const
{
    cache.assign(layers_.size(), LayerCache{});
    Tensor h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) h = layers_[i]->forward(h, cache[i], ctx);
    return h;
}

Tensor Sequential::forward(const Tensor& x, ForwardContext& ctx) const
{
    Tensor h = x;
    LayerCache scratch;
    for (const auto& l : layers_) {
        h = l->forward(h, scratch, ctx);
        scratch = LayerCache{};
    }
    return h;
}

Tensor Sequential::backward(const Tensor& grad_output, const Cache& cache, std::span<Tensor> grads,
                            bool need_input_grad) const
{
    if (cache.size() != layers_.size())
        throw std::logic_error("sequential backward called without a cached forward pass");
    std::size_t offset = 0;
    std::vector<std::size_t> offsets(layers_.size());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        offsets[i] = offset;
        offset += layers_[i]->params().size();
    }
    if (grads.size() != offset)
        throw std::invalid_argument("sequential backward: gradient list has wrong length");
    Tensor g = grad_output;
    for (std::size_t k = layers_.size(); k-- > 0;) {
        const bool want_input = need_input_grad || k > 0;
        auto* layer = layers_[k].get();
        g = layer->backward(g, cache[k],
                            grads.subspan(offsets[k], layer->params().size()), want_input);
    }
    return g;
}

std::vector<Tensor*> Sequential::parameters()
{
    std::vector<Tensor*> out;
    for (auto& l : layers_)
        for (Tensor& t : l->params()) out.push_back(&t);
    return out;
}

std::vector<const Tensor*> Sequential::parameters() const
{
    std::vector<const Tensor*> out;
    for (const auto& l : layers_)
        for (const Tensor& t : std::as_const(*l).params()) out.push_back(&t);
    return out;
}

std::vector<Tensor> Sequential::zero_grads() const
{
    return zeros_like(parameters());
}

void Sequential::init(Rng& rng)
{
    for (auto& l : layers_) l->init(rng);
}

std::vector<std::string> Sequential::describe() const
{
    std::vector<std::string> out;
    for (const auto& l : layers_) out.push_back(l->describe());
    return out;
}

bool Sequential::has_dropout() const
{
    return std::any_of(layers_.begin(), layers_.end(), [](const auto& l) {
        return dynamic_cast<const DropoutLayer*>(l.get()) != nullptr;
    });
}

std::vector<Tensor> zeros_like(const std::vector<const Tensor*>& params)
{
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (const Tensor* p : params) out.emplace_back(p->shape());
    return out;
}

std::uint64_t parameter_checksum(const std::vector<const Tensor*>& params)
{
    std::uint64_t h = 1469598103934665603ULL;
    for (const Tensor* p : params) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(p->data());
        for (std::size_t i = 0; i < p->size() * sizeof(double); ++i) {
            h ^= bytes[i];
            h *= 1099511628211ULL;
        }
    }
    return h;
}

} // namespace uqseg

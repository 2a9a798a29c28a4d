#include "uqseg/segmenter.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "uqseg/io.hpp"
#include "uqseg/optim.hpp"

namespace uqseg {

SegNet::SegNet(SegNetConfig config) : config_(config)
{
    auto dropout = [this]() {
        if (config_.with_dropout) body_.add(std::make_unique<DropoutLayer>(config_.dropout));
    };
    body_.add(std::make_unique<Conv2dLayer>(1, 16));
    body_.add(std::make_unique<ReluLayer>());
    dropout();
    body_.add(std::make_unique<Conv2dLayer>(16, 32));
    body_.add(std::make_unique<ReluLayer>());
    body_.add(std::make_unique<MaxPoolLayer>());
    body_.add(std::make_unique<Conv2dLayer>(32, 32));
    body_.add(std::make_unique<ReluLayer>());
    dropout();
    body_.add(std::make_unique<UpsampleLayer>());
    body_.add(std::make_unique<Conv2dLayer>(32, 16));
    body_.add(std::make_unique<ReluLayer>());
    body_.add(std::make_unique<Conv2dLayer>(16, 2));
}

SegNet train_segmenter(const std::vector<const synth::SyntheticSample*>& train,
                       const SegTrainConfig& config, const SegNetConfig& net_config,
                       SegTrainReport* report)
{
    if (train.empty()) throw std::invalid_argument("train_segmenter: empty training split");
    if (config.epochs == 0 || config.batch_size == 0 || !(config.lr > 0.0))
        throw std::invalid_argument("train_segmenter: epochs, batch size and lr must be positive");
    const std::size_t side = net_config.side;
    for (const auto* s : train)
        if (s->image.shape() != Shape{1, side, side})
            throw std::invalid_argument("train_segmenter: sample " + s->id + " has shape " +
                                        shape_string(s->image.shape()) + ", expected 1x" +
                                        std::to_string(side) + "x" + std::to_string(side));

    SegNet net(net_config);
    Rng init_rng(mix_seed(config.seed, 1));
    net.body().init(init_rng);
    AdamState adam = make_adam_state(std::as_const(net.body()).parameters(), AdamConfig{config.lr});
    auto params = net.body().parameters();

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(mix_seed(config.seed, 2));
    Rng dropout_rng(mix_seed(config.seed, 3));
    const std::size_t plane = side * side;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t bs = std::min(config.batch_size, order.size() - start);
            Tensor images({bs, 1, side, side});
            Tensor masks({bs, side, side});
            for (std::size_t b = 0; b < bs; ++b) {
                const auto* s = train[order[start + b]];
                std::copy_n(s->image.data(), plane, images.data() + b * plane);
                std::copy_n(s->gt_mask.data(), plane, masks.data() + b * plane);
            }
            Sequential::Cache cache;
            ForwardContext ctx{true, &dropout_rng};
            const Tensor logits = net.body().forward(images, cache, ctx);
            LossResult loss = softmax_cross_entropy(logits, masks);
            std::vector<Tensor> grads = net.body().zero_grads();
            net.body().backward(loss.grad, cache, grads, false);
            adam_step(params, grads, adam);
            loss_sum += loss.loss;
            ++batches;
        }
        if (report) report->epoch_loss.push_back(loss_sum / static_cast<double>(batches));
    }
    return net;
}

Tensor predict_probs_batch(const SegNet& net, const Tensor& images, DropoutUse dropout,
                           std::uint64_t seed)
{
    const std::size_t side = net.config().side;
    if (images.ndim() != 4 || images.dim(1) != 1 || images.dim(2) != side || images.dim(3) != side)
        throw std::invalid_argument("predict_probs: expected N x 1 x " + std::to_string(side) + " x " +
                                    std::to_string(side) + " images, got " +
                                    shape_string(images.shape()));
    const std::size_t n = images.dim(0);
    if (dropout == DropoutUse::off) {
        ForwardContext ctx{false, nullptr};
        return softmax_channels(net.body().forward(images, ctx));
    }
    // Each sample owns its dropout stream so results do not depend on batching.
    const std::size_t plane = side * side;
    Tensor out({n, 2, side, side});
    const auto count = static_cast<long>(n);
#pragma omp parallel for schedule(static)
    for (long i = 0; i < count; ++i) {
        const auto k = static_cast<std::size_t>(i);
        Tensor one({1, 1, side, side});
        std::copy_n(images.data() + k * plane, plane, one.data());
        Rng rng(mix_seed(seed, k));
        ForwardContext ctx{true, &rng};
        const Tensor p = softmax_channels(net.body().forward(one, ctx));
        std::copy_n(p.data(), 2 * plane, out.data() + k * 2 * plane);
    }
    return out;
}

Tensor predict_probs(const SegNet& net, const Tensor& image, DropoutUse dropout, Rng* rng)
{
    const std::size_t side = net.config().side;
    if (image.shape() != Shape{1, side, side})
        throw std::invalid_argument("predict_probs: image shape " + shape_string(image.shape()) +
                                    " does not match network resolution 1x" + std::to_string(side) +
                                    "x" + std::to_string(side));
    if (dropout == DropoutUse::mcd && rng == nullptr)
        throw std::invalid_argument("predict_probs: mcd mode needs an rng");
    ForwardContext ctx{dropout == DropoutUse::mcd, rng};
    return softmax_channels(net.body().forward(image, ctx));
}

Tensor hard_mask(const Tensor& probs, double threshold)
{
    if (probs.ndim() != 3 || probs.dim(0) != 2)
        throw std::invalid_argument("hard_mask: expected 2 x H x W probabilities, got " +
                                    shape_string(probs.shape()));
    const std::size_t h = probs.dim(1), w = probs.dim(2);
    Tensor mask({h, w});
    for (std::size_t i = 0; i < h * w; ++i) mask[i] = probs[h * w + i] >= threshold ? 1.0 : 0.0;
    return mask;
}

void save_segnet(const std::filesystem::path& path, const SegNet& net)
{
    io::ModelFile m;
    m.set("kind", "segnet");
    m.set("side", std::to_string(net.config().side));
    m.set("dropout", io::format_double(net.config().dropout));
    m.set("with_dropout", net.config().with_dropout ? "1" : "0");
    for (const auto& line : net.body().describe()) m.set("layer", line);
    for (const Tensor* p : net.body().parameters()) m.tensors.push_back(*p);
    io::save_model(path, m);
}

SegNet load_segnet(const std::filesystem::path& path)
{
    const io::ModelFile m = io::load_model(path);
    if (m.get("kind") != "segnet") throw std::runtime_error(path.string() + ": not a segnet model");
    SegNetConfig cfg;
    cfg.side = m.get_size("side");
    cfg.dropout = io::parse_double(m.get("dropout"), path.string());
    cfg.with_dropout = m.get("with_dropout") == "1";
    SegNet net(cfg);
    if (net.body().describe() != m.get_all("layer"))
        throw std::runtime_error(path.string() + ": layer list does not match the segnet architecture");
    auto params = net.body().parameters();
    if (params.size() != m.tensors.size())
        throw std::runtime_error(path.string() + ": expected " + std::to_string(params.size()) +
                                 " parameter tensors, found " + std::to_string(m.tensors.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->shape() != m.tensors[i].shape())
            throw std::runtime_error(path.string() + ": parameter " + std::to_string(i) +
                                     " has shape " + shape_string(m.tensors[i].shape()));
        *params[i] = m.tensors[i];
    }
    return net;
}

} // namespace uqseg

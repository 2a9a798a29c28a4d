#include "uqseg/quality_net.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "uqseg/io.hpp"
#include "uqseg/metrics.hpp"
#include "uqseg/optim.hpp"

namespace uqseg {

std::string to_string(QualityArch arch)
{
    switch (arch) {
    case QualityArch::two_way_seg: return "two_way_seg";
    case QualityArch::two_way_img: return "two_way_img";
    case QualityArch::three_way: return "three_way";
    }
    return "unknown";
}

QualityArch parse_quality_arch(const std::string& s)
{
    if (s == "two_way_seg") return QualityArch::two_way_seg;
    if (s == "two_way_img") return QualityArch::two_way_img;
    if (s == "three_way") return QualityArch::three_way;
    throw std::invalid_argument("unknown architecture '" + s +
                                "' (expected two_way_seg|two_way_img|three_way)");
}

std::string to_string(InputRole role)
{
    switch (role) {
    case InputRole::image: return "image";
    case InputRole::ue_map: return "ue_map";
    case InputRole::seg_map: return "seg_map";
    }
    return "unknown";
}

std::vector<InputRole> input_roles(QualityArch arch)
{
    switch (arch) {
    case QualityArch::two_way_seg: return {InputRole::ue_map, InputRole::seg_map};
    case QualityArch::two_way_img: return {InputRole::ue_map, InputRole::image};
    case QualityArch::three_way: return {InputRole::image, InputRole::ue_map, InputRole::seg_map};
    }
    throw std::logic_error("unhandled architecture");
}

QualityNet::QualityNet(QualityArch arch, std::size_t side) : arch_(arch), side_(side)
{
    if (side == 0 || side % 32 != 0)
        throw std::invalid_argument("quality net input side must be a positive multiple of 32, got " +
                                    std::to_string(side));
    const std::size_t n_branches = input_roles(arch).size();
    for (std::size_t b = 0; b < n_branches; ++b) {
        Sequential br;
        std::size_t in = 1;
        for (std::size_t filters : kBranchFilters) {
            br.add(std::make_unique<Conv2dLayer>(in, filters));
            br.add(std::make_unique<ReluLayer>());
            br.add(std::make_unique<MaxPoolLayer>());
            in = filters;
        }
        branches_.push_back(std::move(br));
    }
    head_.add(std::make_unique<DenseLayer>(n_branches * branch_feature_size(), 128));
    head_.add(std::make_unique<ReluLayer>());
    head_.add(std::make_unique<DenseLayer>(128, 128));
    head_.add(std::make_unique<ReluLayer>());
    head_.add(std::make_unique<DenseLayer>(128, 1));
    norm_.assign(n_branches, {0.0, 1.0});
}

std::size_t QualityNet::branch_feature_size() const
{
    return kBranchFilters.back() * feature_side() * feature_side();
}

void QualityNet::set_input_normalization(std::vector<std::pair<double, double>> offset_scale)
{
    if (offset_scale.size() != branches_.size())
        throw std::invalid_argument("input normalization needs one entry per branch");
    for (const auto& [o, s] : offset_scale)
        if (!(s > 0.0) || !std::isfinite(o)) throw std::invalid_argument("invalid input normalization");
    norm_ = std::move(offset_scale);
}

std::vector<Tensor> QualityNet::prepare(const std::vector<Tensor>& inputs, std::size_t& batch) const
{
    if (inputs.size() != branches_.size())
        throw std::invalid_argument(to_string(arch_) + " expects " + std::to_string(branches_.size()) +
                                    " inputs, got " + std::to_string(inputs.size()));
    std::vector<Tensor> out;
    batch = 0;
    for (std::size_t b = 0; b < inputs.size(); ++b) {
        const Tensor& x = inputs[b];
        std::size_t n = 0;
        if (x.shape() == Shape{side_, side_} || x.shape() == Shape{1, side_, side_})
            n = 1;
        else if (x.ndim() == 4 && x.dim(1) == 1 && x.dim(2) == side_ && x.dim(3) == side_)
            n = x.dim(0);
        else
            throw std::invalid_argument("input " + std::to_string(b) + " (" +
                                        to_string(input_roles(arch_)[b]) + ") has shape " +
                                        shape_string(x.shape()) + ", expected 1x" +
                                        std::to_string(side_) + "x" + std::to_string(side_));
        if (b == 0) batch = n;
        if (n != batch) throw std::invalid_argument("quality net inputs disagree on batch size");
        Tensor t = x.reshaped({n, 1, side_, side_});
        const auto [offset, scale] = norm_[b];
        for (double& v : t.values()) v = (v - offset) / scale;
        out.push_back(std::move(t));
    }
    return out;
}

std::vector<double> QualityNet::forward_batch(const std::vector<Tensor>& inputs, Cache* cache) const
{
    std::size_t n = 0;
    const std::vector<Tensor> xs = prepare(inputs, n);
    return run(xs, n, cache);
}

std::vector<double> QualityNet::run(const std::vector<Tensor>& xs, std::size_t n, Cache* cache) const
{
    const std::size_t feat = branch_feature_size();
    const std::size_t total = feat * branches_.size();
    Tensor concat({n, total});
    if (cache) {
        cache->branches.assign(branches_.size(), {});
        cache->branch_outputs.assign(branches_.size(), {});
        cache->batch = n;
    }
    for (std::size_t b = 0; b < branches_.size(); ++b) {
        ForwardContext ctx;
        Tensor y = cache ? branches_[b].forward(xs[b], cache->branches[b], ctx)
                         : branches_[b].forward(xs[b], ctx);
        for (std::size_t i = 0; i < n; ++i)
            std::copy_n(y.data() + i * feat, feat, concat.data() + i * total + b * feat);
        if (cache) cache->branch_outputs[b] = std::move(y);
    }
    ForwardContext ctx;
    const Tensor out = cache ? head_.forward(concat, cache->head, ctx) : head_.forward(concat, ctx);
    return {out.values().begin(), out.values().end()};
}

QualityPrediction QualityNet::forward(const std::vector<Tensor>& inputs) const
{
    const auto raw = forward_batch(inputs, nullptr);
    if (raw.size() != 1) throw std::invalid_argument("forward expects a single sample");
    return {raw[0], std::clamp(raw[0], 0.0, 1.0)};
}

std::vector<Tensor> QualityNet::backward(std::span<const double> grad_output, const Cache& cache,
                                         std::span<Tensor> grads) const
{
    const std::size_t n = cache.batch;
    if (grad_output.size() != n || cache.branches.size() != branches_.size())
        throw std::logic_error("quality net backward called without a matching forward pass");
    std::vector<std::size_t> counts;
    std::size_t total_params = 0;
    for (const auto& br : branches_) {
        counts.push_back(br.parameters().size());
        total_params += counts.back();
    }
    const std::size_t head_params = head_.parameters().size();
    if (grads.size() != total_params + head_params)
        throw std::invalid_argument("quality net backward: gradient list has wrong length");

    Tensor g_out({n, 1}, std::vector<double>(grad_output.begin(), grad_output.end()));
    const Tensor g_concat = head_.backward(g_out, cache.head, grads.subspan(total_params, head_params));
    const std::size_t feat = branch_feature_size();
    const std::size_t total = feat * branches_.size();
    const std::size_t s = feature_side();
    std::vector<Tensor> branch_grads;
    std::size_t offset = 0;
    for (std::size_t b = 0; b < branches_.size(); ++b) {
        Tensor g({n, kBranchFilters.back(), s, s});
        for (std::size_t i = 0; i < n; ++i)
            std::copy_n(g_concat.data() + i * total + b * feat, feat, g.data() + i * feat);
        branches_[b].backward(g, cache.branches[b], grads.subspan(offset, counts[b]), false);
        offset += counts[b];
        branch_grads.push_back(std::move(g));
    }
    return branch_grads;
}

double QualityNet::mse_gradients(const std::vector<Tensor>& inputs, std::span<const double> targets,
                                 std::span<Tensor> grads) const
{
    std::size_t n = 0;
    const std::vector<Tensor> xs = prepare(inputs, n);
    if (targets.size() != n)
        throw std::invalid_argument("mse_gradients: " + std::to_string(targets.size()) +
                                    " targets for a batch of " + std::to_string(n));
    const std::size_t plane = side_ * side_;
    std::vector<std::vector<Tensor>> partial(n);
    std::vector<double> sq(n);
    const auto count = static_cast<long>(n);
#pragma omp parallel for schedule(static)
    for (long i = 0; i < count; ++i) {
        const auto k = static_cast<std::size_t>(i);
        std::vector<Tensor> one;
        for (const Tensor& x : xs)
            one.emplace_back(Shape{1, 1, side_, side_},
                             std::vector<double>(x.data() + k * plane, x.data() + (k + 1) * plane));
        Cache cache;
        const double pred = run(one, 1, &cache)[0];
        const ScalarLoss l = mse_loss(pred, targets[k]);
        sq[k] = l.loss;
        const double g = l.grad / static_cast<double>(n);
        partial[k] = zero_grads();
        backward(std::span<const double>(&g, 1), cache, partial[k]);
    }
    if (grads.size() != parameters().size())
        throw std::invalid_argument("mse_gradients: gradient list has wrong length");
    double total = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t j = 0; j < grads.size(); ++j) grads[j] += partial[k][j];
        total += sq[k];
    }
    return total;
}

std::vector<Tensor*> QualityNet::parameters()
{
    std::vector<Tensor*> out;
    for (auto& br : branches_)
        for (Tensor* p : br.parameters()) out.push_back(p);
    for (Tensor* p : head_.parameters()) out.push_back(p);
    return out;
}

std::vector<const Tensor*> QualityNet::parameters() const
{
    std::vector<const Tensor*> out;
    for (const auto& br : branches_)
        for (const Tensor* p : br.parameters()) out.push_back(p);
    for (const Tensor* p : head_.parameters()) out.push_back(p);
    return out;
}

void QualityNet::init(Rng& rng)
{
    for (auto& br : branches_) br.init(rng);
    head_.init(rng);
}

// ---------------------------------------------------------------------------
// Training data

ImageFeatures extract_features(const std::string& id, const Tensor& image,
                               const SampleStack& stack, const Tensor* gt_mask, EntropyMode mode)
{
    ImageFeatures f;
    f.id = id;
    f.image = image;
    const Tensor mean = mean_prediction(stack);
    const std::size_t h = stack.height(), w = stack.width();
    f.seg_map = Tensor({h, w}, std::vector<double>(mean.data() + h * w, mean.data() + 2 * h * w));
    f.predicted_mask = hard_mask(mean);
    f.maps = compute_maps(stack, mode);
    f.true_dice = gt_mask ? metrics::dice(f.predicted_mask, *gt_mask)
                          : std::numeric_limits<double>::quiet_NaN();
    return f;
}

QualityPair make_pair(const ImageFeatures& f, UEKind ue, QualityArch arch)
{
    QualityPair p;
    p.id = f.id;
    p.target = f.true_dice;
    const std::size_t h = f.seg_map.dim(0), w = f.seg_map.dim(1);
    for (InputRole role : input_roles(arch)) {
        switch (role) {
        case InputRole::image: p.inputs.push_back(f.image.reshaped({1, h, w})); break;
        case InputRole::ue_map: p.inputs.push_back(f.maps.get(ue).reshaped({1, h, w})); break;
        case InputRole::seg_map: p.inputs.push_back(f.seg_map.reshaped({1, h, w})); break;
        }
    }
    return p;
}

std::vector<QualityPair> make_pairs(std::span<const ImageFeatures> features, UEKind ue,
                                    QualityArch arch)
{
    std::vector<QualityPair> out;
    out.reserve(features.size());
    for (const auto& f : features) out.push_back(make_pair(f, ue, arch));
    return out;
}

std::vector<QualityPair> make_training_pairs(const std::vector<const synth::SyntheticSample*>& samples,
                                             std::span<const SegNet> nets, const UMConfig& um,
                                             UEKind ue, QualityArch arch)
{
    std::vector<QualityPair> out(samples.size());
    const auto n = static_cast<long>(samples.size());
#pragma omp parallel for schedule(dynamic)
    for (long i = 0; i < n; ++i) {
        const auto* s = samples[static_cast<std::size_t>(i)];
        const SampleStack stack = sample_stack(um, nets, s->image, stack_stream(s->id));
        out[static_cast<std::size_t>(i)] =
            make_pair(extract_features(s->id, s->image, stack, &s->gt_mask), ue, arch);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training / inference

namespace {

std::vector<Tensor> gather_batch(std::span<const QualityPair> pairs,
                                 std::span<const std::size_t> idx, std::size_t branches,
                                 std::size_t side)
{
    const std::size_t plane = side * side;
    std::vector<Tensor> xs;
    for (std::size_t b = 0; b < branches; ++b) {
        Tensor t({idx.size(), 1, side, side});
        for (std::size_t i = 0; i < idx.size(); ++i)
            std::copy_n(pairs[idx[i]].inputs[b].data(), plane, t.data() + i * plane);
        xs.push_back(std::move(t));
    }
    return xs;
}

void check_pairs(std::span<const QualityPair> pairs, QualityArch arch, std::size_t& side)
{
    const std::size_t branches = input_roles(arch).size();
    side = 0;
    for (const auto& p : pairs) {
        if (p.inputs.size() != branches)
            throw std::invalid_argument("pair " + p.id + " has " + std::to_string(p.inputs.size()) +
                                        " inputs, " + to_string(arch) + " needs " +
                                        std::to_string(branches));
        for (const auto& x : p.inputs) {
            if (x.ndim() != 3 || x.dim(0) != 1 || x.dim(1) != x.dim(2))
                throw std::invalid_argument("pair " + p.id + " input has shape " +
                                            shape_string(x.shape()));
            if (side == 0) side = x.dim(1);
            if (x.dim(1) != side) throw std::invalid_argument("pairs disagree on resolution");
        }
    }
}

} // namespace

QualityNet train_quality_net(std::span<const QualityPair> pairs, const QPTrainConfig& config,
                             QualityArch arch, QPTrainReport* report)
{
    if (config.epochs == 0 || config.batch_size == 0 || !(config.lr > 0.0))
        throw std::invalid_argument("train_quality_net: epochs, batch size and lr must be positive");
    if (pairs.size() < config.batch_size)
        throw std::invalid_argument("train_quality_net: " + std::to_string(pairs.size()) +
                                    " pairs is fewer than one batch of " +
                                    std::to_string(config.batch_size));
    std::size_t side = 0;
    check_pairs(pairs, arch, side);

    QualityNet net(arch, side);
    const std::size_t branches = net.branch_count();
    if (config.standardize_inputs) {
        std::vector<std::pair<double, double>> norm;
        for (std::size_t b = 0; b < branches; ++b) {
            double sum = 0.0, sq = 0.0;
            std::size_t count = 0;
            for (const auto& p : pairs) {
                for (double v : p.inputs[b].values()) {
                    sum += v;
                    sq += v * v;
                }
                count += p.inputs[b].size();
            }
            const double mean = sum / static_cast<double>(count);
            const double var = std::max(sq / static_cast<double>(count) - mean * mean, 0.0);
            const double sd = std::sqrt(var);
            norm.emplace_back(mean, sd > 1e-12 ? sd : 1.0);
        }
        net.set_input_normalization(std::move(norm));
    }

    Rng init_rng(mix_seed(config.seed, 11));
    net.init(init_rng);
    AdamState adam = make_adam_state(std::as_const(net).parameters(), AdamConfig{config.lr});
    auto params = net.parameters();

    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(mix_seed(config.seed, 12));

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double sq_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t bs = std::min(config.batch_size, order.size() - start);
            const std::span<const std::size_t> idx(order.data() + start, bs);
            std::vector<double> targets(bs);
            for (std::size_t i = 0; i < bs; ++i) targets[i] = pairs[idx[i]].target;
            std::vector<Tensor> grads = net.zero_grads();
            sq_sum += net.mse_gradients(gather_batch(pairs, idx, branches, side), targets, grads);
            adam_step(params, grads, adam);
        }
        if (report) report->epoch_mse.push_back(sq_sum / static_cast<double>(pairs.size()));
    }
    if (report) {
        const auto preds = predict_quality(net, pairs);
        double s = 0.0;
        for (std::size_t i = 0; i < pairs.size(); ++i)
            s += (preds[i].raw - pairs[i].target) * (preds[i].raw - pairs[i].target);
        report->final_train_mse = s / static_cast<double>(pairs.size());
    }
    return net;
}

std::vector<QualityPrediction> predict_quality(const QualityNet& net,
                                               std::span<const QualityPair> pairs)
{
    std::size_t side = 0;
    check_pairs(pairs, net.arch(), side);
    std::vector<QualityPrediction> out;
    constexpr std::size_t kChunk = 16;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < pairs.size(); start += kChunk) {
        const std::size_t bs = std::min(kChunk, pairs.size() - start);
        idx.resize(bs);
        std::iota(idx.begin(), idx.end(), start);
        const auto raw = net.forward_batch(gather_batch(pairs, idx, net.branch_count(), side), nullptr);
        for (double r : raw) out.push_back({r, std::clamp(r, 0.0, 1.0)});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Grad-CAM

std::pair<Tensor, Tensor> branch_activation_gradient(const QualityNet& net,
                                                     const std::vector<Tensor>& inputs,
                                                     std::size_t branch)
{
    if (branch >= net.branch_count())
        throw std::invalid_argument("grad_cam: branch " + std::to_string(branch) + " out of range (" +
                                    std::to_string(net.branch_count()) + " branches)");
    QualityNet::Cache cache;
    const auto pred = net.forward_batch(inputs, &cache);
    if (pred.size() != 1) throw std::invalid_argument("grad_cam expects a single sample");
    std::vector<Tensor> grads = net.zero_grads();
    const std::vector<double> one{1.0};
    auto branch_grads = net.backward(one, cache, grads);
    const std::size_t s = net.feature_side();
    const Shape shape{kBranchFilters.back(), s, s};
    return {cache.branch_outputs[branch].reshaped(shape), branch_grads[branch].reshaped(shape)};
}

Tensor grad_cam(const QualityNet& net, const std::vector<Tensor>& inputs, std::size_t branch,
                GradCamOptions options)
{
    const auto [act, grad] = branch_activation_gradient(net, inputs, branch);
    const std::size_t channels = act.dim(0), h = act.dim(1), w = act.dim(2);
    const std::size_t plane = h * w;
    Tensor cam({h, w});
    for (std::size_t k = 0; k < channels; ++k) {
        double alpha = 0.0;
        for (std::size_t i = 0; i < plane; ++i) alpha += grad[k * plane + i];
        alpha /= static_cast<double>(plane);
        for (std::size_t i = 0; i < plane; ++i) cam[i] += alpha * act[k * plane + i];
    }
    if (options.apply_relu)
        for (double& v : cam.values()) v = std::max(v, 0.0);
    const auto [lo, hi] = std::minmax_element(cam.values().begin(), cam.values().end());
    const double min = *lo, range = *hi - *lo;
    for (double& v : cam.values()) v = range > 0.0 ? (v - min) / range : 0.0;
    return cam;
}

Tensor upscale_nearest(const Tensor& map, std::size_t side)
{
    if (map.ndim() != 2) throw std::invalid_argument("upscale_nearest: expected an H x W map");
    Tensor out({side, side});
    for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x)
            out.at(y, x) = map.at(y * map.dim(0) / side, x * map.dim(1) / side);
    return out;
}

// ---------------------------------------------------------------------------
// Persistence

void save_quality_net(const std::filesystem::path& path, const QualityNet& net,
                      const std::vector<std::pair<std::string, std::string>>& extra)
{
    io::ModelFile m;
    m.set("kind", "qnet");
    m.set("arch", to_string(net.arch()));
    m.set("side", std::to_string(net.side()));
    for (const auto& [o, s] : net.input_normalization())
        m.set("input_norm", io::format_double(o) + " " + io::format_double(s));
    for (std::size_t b = 0; b < net.branch_count(); ++b)
        for (const auto& line : net.branch(b).describe())
            m.set("branch_layer", std::to_string(b) + " " + line);
    for (const auto& line : net.head().describe()) m.set("head_layer", line);
    for (const auto& [k, v] : extra) m.set("meta." + k, v);
    for (const Tensor* p : net.parameters()) m.tensors.push_back(*p);
    io::save_model(path, m);
}

QualityNet load_quality_net(const std::filesystem::path& path,
                            std::vector<std::pair<std::string, std::string>>* extra)
{
    const io::ModelFile m = io::load_model(path);
    const std::string where = path.string();
    if (m.get("kind") != "qnet") throw std::runtime_error(where + ": not a quality net model");
    QualityNet net(parse_quality_arch(m.get("arch")), m.get_size("side"));

    std::vector<std::string> expected;
    for (std::size_t b = 0; b < net.branch_count(); ++b)
        for (const auto& line : net.branch(b).describe()) expected.push_back(std::to_string(b) + " " + line);
    if (m.get_all("branch_layer") != expected || m.get_all("head_layer") != net.head().describe())
        throw std::runtime_error(where + ": layer list does not match the quality net architecture");

    std::vector<std::pair<double, double>> norm;
    for (const auto& line : m.get_all("input_norm")) {
        const auto sp = line.find(' ');
        norm.emplace_back(io::parse_double(line.substr(0, sp), where),
                          io::parse_double(line.substr(sp + 1), where));
    }
    net.set_input_normalization(std::move(norm));

    auto params = net.parameters();
    if (params.size() != m.tensors.size())
        throw std::runtime_error(where + ": expected " + std::to_string(params.size()) +
                                 " parameter tensors, found " + std::to_string(m.tensors.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->shape() != m.tensors[i].shape())
            throw std::runtime_error(where + ": parameter " + std::to_string(i) + " has shape " +
                                     shape_string(m.tensors[i].shape()));
        *params[i] = m.tensors[i];
    }
    if (extra) {
        extra->clear();
        for (const auto& [k, v] : m.header)
            if (k.rfind("meta.", 0) == 0) extra->emplace_back(k.substr(5), v);
    }
    return net;
}

} // namespace uqseg

#include <doctest.h>

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"
#include "support.hpp"
#include "uqseg/quality_net.hpp"

using namespace uqseg;

namespace {

std::vector<QualityPair> random_pairs(QualityArch arch, std::size_t n, std::size_t side, Rng& rng,
                                      double target)
{
    std::vector<QualityPair> out;
    for (std::size_t i = 0; i < n; ++i) {
        QualityPair p;
        p.id = synth::sample_id(i);
        for (std::size_t b = 0; b < input_roles(arch).size(); ++b)
            p.inputs.push_back(testing::random_tensor({1, side, side}, rng, 0.0, 1.0));
        p.target = target;
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<Tensor> single_inputs(const QualityNet& net, Rng& rng)
{
    std::vector<Tensor> xs;
    for (std::size_t b = 0; b < net.branch_count(); ++b)
        xs.push_back(testing::random_tensor({1, net.side(), net.side()}, rng, 0.0, 1.0));
    return xs;
}

Tensor one_hot_stack_probs(const Tensor& mask, std::size_t t_count, bool foreground)
{
    const std::size_t plane = mask.size();
    Tensor p({t_count, 2, mask.dim(0), mask.dim(1)});
    for (std::size_t t = 0; t < t_count; ++t)
        for (std::size_t i = 0; i < plane; ++i) {
            const double fg = foreground ? mask[i] : 0.0;
            p[t * 2 * plane + i] = 1.0 - fg;
            p[t * 2 * plane + plane + i] = fg;
        }
    return p;
}

} // namespace

TEST_SUITE("quality net")
{
    TEST_CASE("architecture")
    {
        CHECK(input_roles(QualityArch::three_way) ==
              std::vector<InputRole>{InputRole::image, InputRole::ue_map, InputRole::seg_map});
        CHECK(input_roles(QualityArch::two_way_seg) ==
              std::vector<InputRole>{InputRole::ue_map, InputRole::seg_map});
        CHECK(input_roles(QualityArch::two_way_img) ==
              std::vector<InputRole>{InputRole::ue_map, InputRole::image});
        for (QualityArch a : {QualityArch::two_way_seg, QualityArch::two_way_img, QualityArch::three_way})
            CHECK(parse_quality_arch(to_string(a)) == a);
        CHECK_THROWS(parse_quality_arch("four_way"));

        const QualityNet net(QualityArch::three_way, 64);
        CHECK(net.branch_count() == 3);
        CHECK(net.feature_side() == 2);
        CHECK(net.branch_feature_size() == 16 * 2 * 2);
        CHECK(net.branch(0).size() == 15);
        CHECK(net.head().describe() ==
              std::vector<std::string>{"dense 192 128", "relu", "dense 128 128", "relu", "dense 128 1"});
        CHECK_THROWS_AS(QualityNet(QualityArch::three_way, 48), std::invalid_argument);
    }

    TEST_CASE("input validation")
    {
        QualityNet net(QualityArch::two_way_seg, 32);
        Rng rng(1);
        net.init(rng);
        const Tensor x({1, 32, 32});
        CHECK_NOTHROW(net.forward({x, x}));
        CHECK_NOTHROW(net.forward({Tensor({32, 32}), x}));
        CHECK_THROWS_AS(net.forward({x}), std::invalid_argument);
        CHECK_THROWS_AS(net.forward({x, Tensor({1, 64, 64})}), std::invalid_argument);
        CHECK_THROWS_AS(net.forward_batch({Tensor({2, 1, 32, 32}), Tensor({3, 1, 32, 32})}, nullptr),
                        std::invalid_argument);
        CHECK_THROWS_AS(net.set_input_normalization({{0.0, 1.0}}), std::invalid_argument);
        CHECK_THROWS_AS(net.set_input_normalization({{0.0, 1.0}, {0.0, 0.0}}), std::invalid_argument);
    }

    TEST_CASE("zero weights give the output bias")
    {
        QualityNet net(QualityArch::three_way, 32);
        Rng rng(2);
        auto params = net.parameters();
        for (Tensor* p : params) p->fill(0.0);
        params.back()->fill(0.37);
        const QualityPrediction p = net.forward(single_inputs(net, rng));
        CHECK(p.raw == 0.37);
        CHECK(p.clamped == 0.37);
        params.back()->fill(1.8);
        CHECK(net.forward(single_inputs(net, rng)).clamped == 1.0);
    }

    TEST_CASE("swapping identical branches leaves the output unchanged")
    {
        QualityNet net(QualityArch::two_way_img, 64);
        Rng rng(3);
        net.init(rng);
        net.branch(1) = net.branch(0);
        const Tensor x = testing::random_tensor({1, 64, 64}, rng, 0.0, 1.0);
        const double before = net.forward({x, x}).raw;

        Tensor& w = *net.head().parameters()[0];
        const std::size_t f = net.branch_feature_size(), in = w.dim(1);
        for (std::size_t o = 0; o < w.dim(0); ++o)
            for (std::size_t j = 0; j < f; ++j) std::swap(w[o * in + j], w[o * in + f + j]);
        CHECK(std::abs(net.forward({x, x}).raw - before) <= 1e-12);
    }

    TEST_CASE("finite-difference gradients for every parameter")
    {
        for (QualityArch a : {QualityArch::two_way_seg, QualityArch::two_way_img, QualityArch::three_way}) {
            const double err = testing::qnet_gradient_error(a, 32, 8, 4);
            INFO(to_string(a) << " worst relative error " << err);
            CHECK(err < testing::kFdTolerance);
        }
    }

    TEST_CASE("fused per-sample gradients match the batched pass")
    {
        QualityNet net(QualityArch::three_way, 32);
        Rng rng(5);
        net.init(rng);
        std::vector<Tensor> xs;
        for (int b = 0; b < 3; ++b) xs.push_back(testing::random_tensor({3, 1, 32, 32}, rng, 0.0, 1.0));
        const std::vector<double> t{0.2, 0.9, 0.5};

        QualityNet::Cache cache;
        const std::vector<double> p = net.forward_batch(xs, &cache);
        std::vector<double> g;
        double sse = 0.0;
        for (std::size_t i = 0; i < 3; ++i) {
            g.push_back(2.0 * (p[i] - t[i]) / 3.0);
            sse += (p[i] - t[i]) * (p[i] - t[i]);
        }
        std::vector<Tensor> expected = net.zero_grads();
        net.backward(g, cache, expected);

        std::vector<Tensor> fused = net.zero_grads();
        CHECK(net.mse_gradients(xs, t, fused) == doctest::Approx(sse).epsilon(1e-12));
        for (std::size_t i = 0; i < fused.size(); ++i)
            for (std::size_t k = 0; k < fused[i].size(); ++k)
                CHECK(std::abs(fused[i][k] - expected[i][k]) <= 1e-12 * (1.0 + std::abs(expected[i][k])));
    }

    TEST_CASE("constant targets are learned")
    {
        Rng rng(6);
        const auto pairs = random_pairs(QualityArch::two_way_seg, 24, 32, rng, 0.7);
        QPTrainConfig cfg;
        cfg.epochs = 60;
        cfg.batch_size = 8;
        QPTrainReport report;
        const QualityNet net = train_quality_net(pairs, cfg, QualityArch::two_way_seg, &report);
        CHECK(report.epoch_mse.size() == 60);
        MESSAGE("last epoch mse " << report.epoch_mse.back());
        for (const auto& p : predict_quality(net, pairs)) CHECK(std::abs(p.raw - 0.7) < 0.05);
    }

    TEST_CASE("training is bit reproducible and validates its inputs")
    {
        Rng rng(7);
        auto pairs = random_pairs(QualityArch::two_way_img, 8, 32, rng, 0.5);
        for (std::size_t i = 0; i < pairs.size(); ++i) pairs[i].target = 0.1 * static_cast<double>(i);
        QPTrainConfig cfg;
        cfg.epochs = 2;
        cfg.batch_size = 4;
        const QualityNet a = train_quality_net(pairs, cfg, QualityArch::two_way_img);
        const QualityNet b = train_quality_net(pairs, cfg, QualityArch::two_way_img);
        CHECK(a.checksum() == b.checksum());
        CHECK(a.input_normalization() == b.input_normalization());
        cfg.seed = 1;
        CHECK(train_quality_net(pairs, cfg, QualityArch::two_way_img).checksum() != a.checksum());

        cfg.batch_size = 16;
        CHECK_THROWS_AS(train_quality_net(pairs, cfg, QualityArch::two_way_img), std::invalid_argument);
        cfg.batch_size = 4;
        CHECK_THROWS_AS(train_quality_net(pairs, cfg, QualityArch::three_way), std::invalid_argument);
        cfg.epochs = 0;
        CHECK_THROWS_AS(train_quality_net(pairs, cfg, QualityArch::two_way_img), std::invalid_argument);
    }

    TEST_CASE("save and load")
    {
        testing::TempDir dir("qnet");
        QualityNet net(QualityArch::three_way, 32);
        Rng rng(8);
        net.init(rng);
        net.set_input_normalization({{0.1, 2.0}, {0.3, 0.5}, {-1.0, 3.0}});
        save_quality_net(dir / "q.uqm", net, {{"ue", "entropy"}, {"um", "mcd"}});
        std::vector<std::pair<std::string, std::string>> extra;
        const QualityNet back = load_quality_net(dir / "q.uqm", &extra);
        CHECK(back.checksum() == net.checksum());
        CHECK(back.arch() == QualityArch::three_way);
        CHECK(back.input_normalization() == net.input_normalization());
        CHECK(extra == std::vector<std::pair<std::string, std::string>>{{"ue", "entropy"}, {"um", "mcd"}});
        const auto xs = single_inputs(net, rng);
        CHECK(back.forward(xs).raw == net.forward(xs).raw);

        const std::vector<SegNet> seg{SegNet({32})};
        save_segnet(dir / "s.uqm", seg[0]);
        CHECK_THROWS_WITH(load_quality_net(dir / "s.uqm"), doctest::Contains("s.uqm"));
    }
}

TEST_SUITE("quality features")
{
    TEST_CASE("targets from perfect and empty predictors")
    {
        const auto& s = testing::small_corpus()[0];
        SampleStack perfect;
        perfect.probs = one_hot_stack_probs(s.gt_mask, 3, true);
        for (std::size_t t = 0; t < 3; ++t) perfect.meta.push_back({t, 0, 0, 0.0});
        const ImageFeatures good = extract_features(s.id, s.image, perfect, &s.gt_mask);
        CHECK(good.true_dice == 1.0);
        CHECK(good.predicted_mask == s.gt_mask);
        CHECK(good.seg_map == s.gt_mask);

        SampleStack empty = perfect;
        empty.probs = one_hot_stack_probs(s.gt_mask, 3, false);
        CHECK(extract_features(s.id, s.image, empty, &s.gt_mask).true_dice == 0.0);
        CHECK(std::isnan(extract_features(s.id, s.image, empty, nullptr).true_dice));
    }

    TEST_CASE("pairs follow the branch order")
    {
        const auto& s = testing::small_corpus()[1];
        const SampleStack stack = mcd_sample(testing::small_segnet(), s.image, 4, 1);
        const ImageFeatures f = extract_features(s.id, s.image, stack, &s.gt_mask);
        const QualityPair p = make_pair(f, UEKind::mi, QualityArch::three_way);
        REQUIRE(p.inputs.size() == 3);
        CHECK(p.inputs[0] == s.image);
        CHECK(p.inputs[1] == f.maps.mi.reshaped({1, 32, 32}));
        CHECK(p.inputs[2] == f.seg_map.reshaped({1, 32, 32}));
        CHECK(p.target == f.true_dice);
        const QualityPair q = make_pair(f, UEKind::confidence, QualityArch::two_way_img);
        CHECK(q.inputs[0] == f.maps.confidence.reshaped({1, 32, 32}));
        CHECK(q.inputs[1] == s.image);
    }

    TEST_CASE("training pairs do not depend on list order")
    {
        const auto items = testing::pointers(testing::small_corpus());
        std::vector<const synth::SyntheticSample*> few{items[3], items[1], items[2]};
        std::vector<const synth::SyntheticSample*> reordered{items[2], items[3], items[1]};
        const std::vector<SegNet> nets{testing::small_segnet()};
        UMConfig um;
        um.mcd_passes = 3;
        const auto a = make_training_pairs(few, nets, um, UEKind::entropy, QualityArch::two_way_seg);
        const auto b = make_training_pairs(reordered, nets, um, UEKind::entropy, QualityArch::two_way_seg);
        CHECK(a[0].inputs == b[1].inputs);
        CHECK(a[1].inputs == b[2].inputs);
        CHECK(a[2].target == b[0].target);
    }
}

TEST_SUITE("grad-cam")
{
    TEST_CASE("matches a per-channel loop and is normalized")
    {
        QualityNet net(QualityArch::three_way, 64);
        Rng rng(9);
        net.init(rng);
        for (int trial = 0; trial < 5; ++trial) {
            const auto xs = single_inputs(net, rng);
            for (std::size_t b = 0; b < 3; ++b) {
                const auto [act, grad] = branch_activation_gradient(net, xs, b);
                REQUIRE(act.shape() == Shape{16, 2, 2});
                const Tensor oracle = testing::naive_grad_cam(act, grad, true);

                const Tensor cam = grad_cam(net, xs, b);
                REQUIRE(cam.shape() == Shape{2, 2});
                for (std::size_t i = 0; i < 4; ++i) {
                    CHECK(std::abs(cam[i] - oracle[i]) <= 1e-9);
                    CHECK((cam[i] >= 0.0 && cam[i] <= 1.0));
                }
            }
        }
    }

    TEST_CASE("activation gradient matches finite differences through the head")
    {
        QualityNet net(QualityArch::two_way_seg, 64);
        Rng rng(10);
        net.init(rng);
        const auto xs = single_inputs(net, rng);
        const auto [act, grad] = branch_activation_gradient(net, xs, 1);
        QualityNet::Cache cache;
        net.forward_batch(xs, &cache);
        const std::size_t f = net.branch_feature_size();
        Tensor features({1, 2 * f});
        std::copy_n(cache.branch_outputs[0].data(), f, features.data());
        std::copy_n(cache.branch_outputs[1].data(), f, features.data() + f);
        auto pred = [&] {
            ForwardContext ctx{};
            return net.head().forward(features, ctx)[0];
        };
        double worst = 0.0;
        for (std::size_t i = 0; i < f; ++i) {
            const double fd = testing::central_difference(pred, features[f + i]);
            worst = std::max(worst, testing::relative_error(grad[i], fd));
        }
        CHECK(worst < testing::kFdTolerance);
    }

    TEST_CASE("zero head weights give an all-zero map")
    {
        QualityNet net(QualityArch::three_way, 64);
        Rng rng(11);
        net.init(rng);
        for (Tensor* p : net.head().parameters()) p->fill(0.0);
        const auto xs = single_inputs(net, rng);
        for (std::size_t b = 0; b < 3; ++b) CHECK(grad_cam(net, xs, b) == Tensor({2, 2}));
        CHECK_THROWS_AS(grad_cam(net, xs, 3), std::invalid_argument);
    }

    TEST_CASE("nearest upscaling")
    {
        const Tensor m({2, 2}, std::vector<double>{0, 1, 0.5, 0.25});
        const Tensor u = upscale_nearest(m, 64);
        CHECK(u.shape() == Shape{64, 64});
        CHECK(u.at(0, 0) == 0.0);
        CHECK(u.at(10, 40) == 1.0);
        CHECK(u.at(40, 31) == 0.5);
        CHECK(u.at(63, 63) == 0.25);
    }
}

#include <doctest.h>

#include <cmath>
#include <numeric>

#include "support.hpp"
#include "uqseg/kernels.hpp"
#include "uqseg/layers.hpp"
#include "uqseg/optim.hpp"

using namespace uqseg;
using testing::kFdTolerance;

namespace {

ConvParams random_conv(std::size_t in, std::size_t out, Padding pad, Rng& rng)
{
    return {testing::random_tensor({out, in, 3, 3}, rng), testing::random_tensor({out}, rng), pad};
}

// Six nested loops, written independently of the library reference.
Tensor naive_conv(const Tensor& x, const ConvParams& p)
{
    const std::size_t c_in = x.dim(0), h = x.dim(1), w = x.dim(2), c_out = p.weights.dim(0);
    const bool same = p.padding == Padding::same;
    const std::size_t oh = same ? h : h - 2, ow = same ? w : w - 2;
    const long off = same ? -1 : 0;
    Tensor out({c_out, oh, ow});
    for (std::size_t o = 0; o < c_out; ++o)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xx = 0; xx < ow; ++xx) {
                double acc = p.bias[o];
                for (std::size_t c = 0; c < c_in; ++c)
                    for (std::size_t ky = 0; ky < 3; ++ky)
                        for (std::size_t kx = 0; kx < 3; ++kx) {
                            const long iy = static_cast<long>(y + ky) + off;
                            const long ix = static_cast<long>(xx + kx) + off;
                            if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) ||
                                ix >= static_cast<long>(w))
                                continue;
                            acc += p.weights[((o * c_in + c) * 3 + ky) * 3 + kx] *
                                   x.at(c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
                        }
                out.at(o, y, xx) = acc;
            }
    return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b)
{
    REQUIRE(a.shape() == b.shape());
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace

TEST_SUITE("tensor")
{
    TEST_CASE("construction checks value count")
    {
        CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), std::invalid_argument);
        Tensor t({2, 3}, 1.5);
        CHECK(t.size() == 6);
        CHECK(t.at(1, 2) == 1.5);
        CHECK_THROWS_AS(t.reshaped({4, 2}), std::invalid_argument);
        CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
    }

    TEST_CASE("elementwise helpers")
    {
        Tensor a({2}, std::vector<double>{1, 2});
        a += Tensor({2}, std::vector<double>{3, 4});
        a *= 0.5;
        CHECK(a[0] == 2.0);
        CHECK(a[1] == 3.0);
        CHECK_THROWS_AS(a += Tensor({3}), std::invalid_argument);
        a[0] = std::nan("");
        CHECK_FALSE(a.all_finite());
    }

    TEST_CASE("mix_seed separates streams")
    {
        CHECK(mix_seed(42, 0) != mix_seed(42, 1));
        CHECK(mix_seed(42, 0) != mix_seed(43, 0));
        CHECK(mix_seed(42, 5) == mix_seed(42, 5));
    }
}

TEST_SUITE("conv2d")
{
    TEST_CASE("all-ones valid convolution sums to nine")
    {
        ConvParams p{Tensor({1, 1, 3, 3}, 1.0), Tensor({1}), Padding::valid};
        const Tensor y = conv2d_forward(Tensor({1, 3, 3}, 1.0), p);
        CHECK(y.shape() == Shape{1, 1, 1});
        CHECK(y[0] == 9.0);
    }

    TEST_CASE("centre delta kernel with same padding is the identity")
    {
        Rng rng(1);
        const Tensor x = testing::random_tensor({1, 7, 5}, rng);
        ConvParams p{Tensor({1, 1, 3, 3}), Tensor({1}), Padding::same};
        p.weights[4] = 1.0;
        CHECK(conv2d_forward(x, p) == x);
    }

    TEST_CASE("output shapes for both paddings")
    {
        Rng rng(2);
        const Tensor x = testing::random_tensor({2, 6, 9}, rng);
        CHECK(conv2d_forward(x, random_conv(2, 4, Padding::same, rng)).shape() == Shape{4, 6, 9});
        CHECK(conv2d_forward(x, random_conv(2, 4, Padding::valid, rng)).shape() == Shape{4, 4, 7});
    }

    TEST_CASE("matches the naive loop oracle")
    {
        Rng rng(3);
        for (int trial = 0; trial < 20; ++trial) {
            const std::size_t c_in = 1 + trial % 4, c_out = 1 + (trial * 7) % 5;
            const std::size_t h = 3 + (trial * 5) % 14, w = 3 + (trial * 3) % 14;
            const Padding pad = trial % 2 ? Padding::valid : Padding::same;
            const Tensor x = testing::random_tensor({c_in, h, w}, rng);
            const ConvParams p = random_conv(c_in, c_out, pad, rng);
            CHECK(max_abs_diff(conv2d_forward(x, p), naive_conv(x, p)) <= 1e-12);
        }
        const Tensor x = testing::random_tensor({2, 5, 5}, rng);
        const ConvParams p = random_conv(2, 3, Padding::same, rng);
        CHECK(max_abs_diff(conv2d_forward(x, p), naive_conv(x, p)) <= 1e-12);
    }

    TEST_CASE("im2col kernels agree with the serial reference")
    {
        Rng rng(4);
        for (Padding pad : {Padding::same, Padding::valid}) {
            kernels::ConvGeometry g{3, 5, 11, 8, pad};
            const std::size_t batch = 4;
            const Tensor x = testing::random_tensor({batch * g.input_size()}, rng);
            const Tensor w = testing::random_tensor({g.weight_size()}, rng);
            const Tensor b = testing::random_tensor({g.out_channels}, rng);
            const Tensor go = testing::random_tensor({batch * g.output_size()}, rng);

            Tensor fast({batch * g.output_size()});
            kernels::conv2d_forward_batch(g, batch, x.values(), w.values(), b.values(), fast.values());
            Tensor gi_fast({x.size()}), gw_fast({w.size()}), gb_fast({b.size()});
            kernels::conv2d_backward_batch(g, batch, go.values(), x.values(), w.values(),
                                           gi_fast.values(), gw_fast.values(), gb_fast.values());

            Tensor ref({batch * g.output_size()});
            Tensor gi_ref({x.size()}), gw_ref({w.size()}), gb_ref({b.size()});
            for (std::size_t s = 0; s < batch; ++s) {
                const auto in = x.values().subspan(s * g.input_size(), g.input_size());
                kernels::reference::conv2d_forward(
                    g, in, w.values(), b.values(),
                    ref.values().subspan(s * g.output_size(), g.output_size()));
                kernels::reference::conv2d_backward(
                    g, go.values().subspan(s * g.output_size(), g.output_size()), in, w.values(),
                    gi_ref.values().subspan(s * g.input_size(), g.input_size()), gw_ref.values(),
                    gb_ref.values());
            }
            CHECK(max_abs_diff(fast, ref) <= 1e-12);
            CHECK(max_abs_diff(gi_fast, gi_ref) <= 1e-12);
            CHECK(max_abs_diff(gw_fast, gw_ref) <= 1e-11);
            CHECK(max_abs_diff(gb_fast, gb_ref) <= 1e-11);
        }
    }

    TEST_CASE("shape mismatches are rejected")
    {
        Rng rng(5);
        const ConvParams p = random_conv(2, 3, Padding::same, rng);
        CHECK_THROWS_AS(conv2d_forward(Tensor({3, 4, 4}), p), std::invalid_argument);
        CHECK_THROWS_AS(conv2d_forward(Tensor({4, 4}), p), std::invalid_argument);
        ConvParams bad = p;
        bad.bias = Tensor({2});
        CHECK_THROWS_AS(conv2d_forward(Tensor({2, 4, 4}), bad), std::invalid_argument);
        ConvParams valid = random_conv(1, 1, Padding::valid, rng);
        CHECK_THROWS_AS(conv2d_forward(Tensor({1, 2, 5}), valid), std::invalid_argument);
        CHECK_THROWS_AS(conv2d_backward(Tensor({3, 5, 5}), Tensor({2, 4, 4}), p),
                        std::invalid_argument);
    }

    TEST_CASE("zero upstream gradient gives zero gradients")
    {
        Rng rng(6);
        const Tensor x = testing::random_tensor({2, 5, 5}, rng);
        const ConvParams p = random_conv(2, 3, Padding::same, rng);
        const ConvGrads g = conv2d_backward(Tensor({3, 5, 5}), x, p);
        for (const Tensor* t : {&g.input, &g.weights, &g.bias})
            for (double v : t->values()) CHECK(v == 0.0);
    }

    TEST_CASE("sum loss: weight gradient is the input correlated with ones")
    {
        Rng rng(7);
        const Tensor x = testing::random_tensor({1, 4, 4}, rng);
        const ConvParams p = random_conv(1, 1, Padding::valid, rng);
        const ConvGrads g = conv2d_backward(Tensor({1, 2, 2}, 1.0), x, p);
        for (std::size_t ky = 0; ky < 3; ++ky)
            for (std::size_t kx = 0; kx < 3; ++kx) {
                double expect = 0.0;
                for (std::size_t y = 0; y < 2; ++y)
                    for (std::size_t xx = 0; xx < 2; ++xx) expect += x.at(0, y + ky, xx + kx);
                CHECK(g.weights[ky * 3 + kx] == doctest::Approx(expect).epsilon(1e-12));
            }
        CHECK(g.bias[0] == 4.0);
    }

    TEST_CASE("finite-difference gradients")
    {
        Rng rng(8);
        for (Padding pad : {Padding::same, Padding::valid}) {
            Tensor x = testing::random_tensor({2, 3, 5, 6}, rng);
            ConvParams p = random_conv(3, 4, pad, rng);
            const Tensor r = testing::random_tensor(conv2d_forward(x, p).shape(), rng);
            auto loss = [&] { return testing::sum_product(conv2d_forward(x, p), r); };
            const ConvGrads g = conv2d_backward(r, x, p);
            CHECK(testing::check_tensor_gradient(loss, x, g.input) < kFdTolerance);
            CHECK(testing::check_tensor_gradient(loss, p.weights, g.weights) < kFdTolerance);
            CHECK(testing::check_tensor_gradient(loss, p.bias, g.bias) < kFdTolerance);
        }
    }
}

TEST_SUITE("relu")
{
    TEST_CASE("examples")
    {
        const Tensor y = relu(Tensor({3}, std::vector<double>{-1, 0, 2}));
        CHECK(y == Tensor({3}, std::vector<double>{0, 0, 2}));
        const Tensor pos({3}, std::vector<double>{0.1, 3, 7});
        CHECK(relu(pos) == pos);
    }

    TEST_CASE("gradient is zero at exactly zero")
    {
        const Tensor g = relu_backward(Tensor({3}, 1.0), Tensor({3}, std::vector<double>{-1, 0, 2}));
        CHECK(g == Tensor({3}, std::vector<double>{0, 0, 1}));
    }

    TEST_CASE("finite-difference gradient away from zero")
    {
        Rng rng(9);
        Tensor x = testing::random_away_from_zero({4, 3, 3}, rng);
        const Tensor r = testing::random_tensor(x.shape(), rng);
        auto loss = [&] { return testing::sum_product(relu(x), r); };
        CHECK(testing::check_tensor_gradient(loss, x, relu_backward(r, x)) < kFdTolerance);
    }
}

TEST_SUITE("maxpool")
{
    TEST_CASE("picks the maximum and its index")
    {
        const PoolResult r = maxpool2x2(Tensor({1, 2, 2}, std::vector<double>{1, 2, 3, 4}));
        CHECK(r.output.shape() == Shape{1, 1, 1});
        CHECK(r.output[0] == 4.0);
        CHECK(r.argmax[0] == 3u); // row 1, col 1
    }

    TEST_CASE("ties go to the first element in row-major order")
    {
        const PoolResult r = maxpool2x2(Tensor({1, 4, 4}, 2.5));
        CHECK(r.argmax == std::vector<std::uint32_t>{0, 2, 8, 10});
    }

    TEST_CASE("odd extents behave as if padded with minus infinity")
    {
        const Tensor x({1, 3, 3}, std::vector<double>{-5, -4, -3, -2, -1, -6, -7, -8, -9});
        const PoolResult r = maxpool2x2(x);
        CHECK(r.output.shape() == Shape{1, 2, 2});
        CHECK(r.output == Tensor({1, 2, 2}, std::vector<double>{-1, -3, -7, -9}));
    }

    TEST_CASE("backward routes gradient to the argmax only")
    {
        const Tensor x({1, 2, 2}, std::vector<double>{1, 5, 3, 4});
        const PoolResult r = maxpool2x2(x);
        const Tensor g = maxpool2x2_backward(Tensor({1, 1, 1}, 2.0), r.argmax, x.shape());
        CHECK(g == Tensor({1, 2, 2}, std::vector<double>{0, 2, 0, 0}));
    }

    TEST_CASE("finite-difference gradient")
    {
        // Distinct values spaced well beyond the step so no window changes winner.
        Rng rng(10);
        Tensor x({2, 3, 6, 4});
        std::vector<double> v(x.size());
        std::iota(v.begin(), v.end(), 0.0);
        std::shuffle(v.begin(), v.end(), rng);
        for (std::size_t i = 0; i < v.size(); ++i) x[i] = v[i] * 0.01;
        const PoolResult r = maxpool2x2(x);
        const Tensor up = testing::random_tensor(r.output.shape(), rng);
        auto loss = [&] { return testing::sum_product(maxpool2x2(x).output, up); };
        CHECK(testing::check_tensor_gradient(loss, x, maxpool2x2_backward(up, r.argmax, x.shape())) <
              kFdTolerance);
    }
}

TEST_SUITE("upsample")
{
    TEST_CASE("nearest neighbour doubling and its adjoint")
    {
        Rng rng(11);
        Tensor x = testing::random_tensor({2, 3, 2, 3}, rng);
        const Tensor y = upsample2x_nearest(x);
        CHECK(y.shape() == Shape{2, 3, 4, 6});
        CHECK(y[0] == x[0]);
        CHECK(y[7] == x[0]); // row 1, col 1 of the first plane
        const Tensor r = testing::random_tensor(y.shape(), rng);
        auto loss = [&] { return testing::sum_product(upsample2x_nearest(x), r); };
        CHECK(testing::check_tensor_gradient(loss, x, upsample2x_nearest_backward(r)) < kFdTolerance);
    }
}

TEST_SUITE("dense")
{
    TEST_CASE("identity weights and zero bias pass the input through")
    {
        DenseParams p{Tensor({3, 3}), Tensor({3})};
        for (std::size_t i = 0; i < 3; ++i) p.weights.at(i, i) = 1.0;
        const Tensor x({3}, std::vector<double>{1, -2, 3});
        CHECK(dense_forward(x, p) == x);
    }

    TEST_CASE("zero weights give the bias")
    {
        DenseParams p{Tensor({2, 4}), Tensor({2}, std::vector<double>{0.3, -0.7})};
        CHECK(dense_forward(Tensor({4}, 9.0), p) == p.bias);
    }

    TEST_CASE("length mismatch is rejected")
    {
        DenseParams p{Tensor({2, 4}), Tensor({2})};
        CHECK_THROWS_AS(dense_forward(Tensor({5}), p), std::invalid_argument);
        CHECK_THROWS_AS(dense_forward(Tensor({3, 5}), p), std::invalid_argument);
    }

    TEST_CASE("finite-difference gradients on a batch")
    {
        Rng rng(12);
        Tensor x = testing::random_tensor({3, 5}, rng);
        DenseParams p{testing::random_tensor({4, 5}, rng), testing::random_tensor({4}, rng)};
        const Tensor r = testing::random_tensor({3, 4}, rng);
        auto loss = [&] { return testing::sum_product(dense_forward(x, p), r); };
        const DenseGrads g = dense_backward(r, x, p);
        CHECK(testing::check_tensor_gradient(loss, x, g.input) < kFdTolerance);
        CHECK(testing::check_tensor_gradient(loss, p.weights, g.weights) < kFdTolerance);
        CHECK(testing::check_tensor_gradient(loss, p.bias, g.bias) < kFdTolerance);
    }
}

TEST_SUITE("dropout")
{
    TEST_CASE("rate zero and eval mode are the identity")
    {
        Rng rng(13);
        const Tensor x = testing::random_tensor({50}, rng);
        CHECK(dropout_forward(x, 0.0, DropoutMode::train, rng).output == x);
        CHECK(dropout_forward(x, 0.7, DropoutMode::eval, rng).output == x);
    }

    TEST_CASE("rates outside [0, 1) are rejected")
    {
        Rng rng(14);
        CHECK_THROWS_AS(dropout_forward(Tensor({2}), 1.0, DropoutMode::train, rng),
                        std::invalid_argument);
        CHECK_THROWS_AS(dropout_forward(Tensor({2}), -0.1, DropoutMode::train, rng),
                        std::invalid_argument);
    }

    TEST_CASE("seeded masks repeat")
    {
        Rng a(15), b(15);
        const Tensor x({100}, 1.0);
        CHECK(dropout_forward(x, 0.3, DropoutMode::train, a).mask ==
              dropout_forward(x, 0.3, DropoutMode::train, b).mask);
    }

    TEST_CASE("inverted scaling keeps the mean")
    {
        Rng rng(16);
        const DropoutResult r = dropout_forward(Tensor({100000}, 1.0), 0.5, DropoutMode::train, rng);
        double mean = 0.0;
        for (double v : r.output.values()) {
            CHECK((v == 0.0 || v == 2.0));
            mean += v;
        }
        mean /= 100000.0;
        CHECK(std::abs(mean - 1.0) < 0.01);
    }

    TEST_CASE("layer gradient with a fixed mask")
    {
        Rng rng(17);
        DropoutLayer layer(0.4);
        Tensor x = testing::random_tensor({2, 3, 4}, rng);
        const Tensor r = testing::random_tensor(x.shape(), rng);
        auto run = [&](LayerCache& cache) {
            Rng local(99);
            ForwardContext ctx{true, &local};
            return layer.forward(x, cache, ctx);
        };
        LayerCache cache;
        run(cache);
        const Tensor g = layer.backward(r, cache, {}, true);
        auto loss = [&] {
            LayerCache c;
            return testing::sum_product(run(c), r);
        };
        CHECK(testing::check_tensor_gradient(loss, x, g) < kFdTolerance);
    }
}

TEST_SUITE("softmax")
{
    TEST_CASE("equal logits give a uniform split")
    {
        const Tensor p = softmax_channels(Tensor({2, 1, 1}, 3.0));
        CHECK(p[0] == 0.5);
        CHECK(p[1] == 0.5);
    }

    TEST_CASE("large gap saturates without overflow")
    {
        const Tensor p = softmax_channels(Tensor({2, 1, 1}, std::vector<double>{1000.0, -1000.0}));
        CHECK(p[0] == doctest::Approx(1.0));
        CHECK(p[1] < 1e-300);
        CHECK(p.all_finite());
    }

    TEST_CASE("matches naive exp/sum, sums to one, shift invariant")
    {
        Rng rng(18);
        const Tensor logits = testing::random_tensor({4, 5, 6}, rng, -5.0, 5.0);
        const Tensor p = softmax_channels(logits);
        Tensor shifted = logits;
        for (double& v : shifted.values()) v += 123.0;
        const Tensor ps = softmax_channels(shifted);
        for (std::size_t i = 0; i < 30; ++i) {
            double denom = 0.0, sum = 0.0;
            for (std::size_t c = 0; c < 4; ++c) denom += std::exp(logits[c * 30 + i]);
            for (std::size_t c = 0; c < 4; ++c) {
                CHECK(std::abs(p[c * 30 + i] - std::exp(logits[c * 30 + i]) / denom) <= 1e-12);
                CHECK(std::abs(p[c * 30 + i] - ps[c * 30 + i]) <= 1e-9);
                sum += p[c * 30 + i];
            }
            CHECK(std::abs(sum - 1.0) <= 1e-9);
        }
    }

    TEST_CASE("cross-entropy gradient")
    {
        Rng rng(19);
        Tensor logits = testing::random_tensor({2, 2, 3, 3}, rng, -2.0, 2.0);
        Tensor masks({2, 3, 3});
        for (std::size_t i = 0; i < masks.size(); ++i) masks[i] = i % 3 == 0 ? 1.0 : 0.0;
        const LossResult r = softmax_cross_entropy(logits, masks);
        auto loss = [&] { return softmax_cross_entropy(logits, masks).loss; };
        CHECK(testing::check_tensor_gradient(loss, logits, r.grad) < kFdTolerance);
        CHECK_THROWS_AS(softmax_cross_entropy(logits, Tensor({2, 3, 4})), std::invalid_argument);
    }
}

TEST_SUITE("mse")
{
    TEST_CASE("examples and gradient")
    {
        CHECK(mse_loss(0.3, 0.3).loss == 0.0);
        const ScalarLoss l = mse_loss(1.0, 0.0);
        CHECK(l.loss == 1.0);
        CHECK(l.grad == 2.0);
        double pred = 0.37;
        auto loss = [&] { return mse_loss(pred, 0.81).loss; };
        CHECK(testing::relative_error(mse_loss(pred, 0.81).grad,
                                      testing::central_difference(loss, pred)) < kFdTolerance);
    }
}

TEST_SUITE("layers")
{
    TEST_CASE("backward without a forward pass is an error")
    {
        LayerCache empty;
        CHECK_THROWS_AS(Conv2dLayer(1, 2).backward(Tensor({2, 3, 3}), empty, {}, true),
                        std::logic_error);
        CHECK_THROWS_AS(ReluLayer().backward(Tensor({2}), empty, {}, true), std::logic_error);
        CHECK_THROWS_AS(MaxPoolLayer().backward(Tensor({1, 1, 1}), empty, {}, true),
                        std::logic_error);
        CHECK_THROWS_AS(DenseLayer(2, 2).backward(Tensor({2}), empty, {}, true), std::logic_error);
        CHECK_THROWS_AS(DropoutLayer(0.5).backward(Tensor({2}), empty, {}, true), std::logic_error);
    }

    TEST_CASE("describe lines round-trip through make_layer")
    {
        for (const std::string line : {"conv2d 3 8 same", "conv2d 1 2 valid", "dense 10 4", "relu",
                                       "maxpool2x2", "upsample2x", "dropout 0.25"})
            CHECK(make_layer(line)->describe() == line);
        CHECK_THROWS(make_layer("conv2d 3"));
        CHECK_THROWS(make_layer("softplus"));
        CHECK_THROWS(make_layer("dropout 1.5"));
    }

    TEST_CASE("sequential gradient check through every layer kind")
    {
        Rng rng(20);
        Sequential net;
        net.add(std::make_unique<Conv2dLayer>(2, 3));
        net.add(std::make_unique<ReluLayer>());
        net.add(std::make_unique<DropoutLayer>(0.3));
        net.add(std::make_unique<MaxPoolLayer>());
        net.add(std::make_unique<UpsampleLayer>());
        net.add(std::make_unique<Conv2dLayer>(3, 2, Padding::valid));
        net.init(rng);
        Tensor x = testing::random_tensor({2, 2, 6, 6}, rng);

        auto forward = [&](Sequential::Cache& cache) {
            Rng local(5);
            ForwardContext ctx{true, &local};
            return net.forward(x, cache, ctx);
        };
        Sequential::Cache cache;
        const Tensor y = forward(cache);
        const Tensor r = testing::random_tensor(y.shape(), rng);
        std::vector<Tensor> grads = net.zero_grads();
        const Tensor gx = net.backward(r, cache, grads, true);
        auto loss = [&] {
            Sequential::Cache c;
            return testing::sum_product(forward(c), r);
        };
        CHECK(testing::check_tensor_gradient(loss, x, gx) < kFdTolerance);
        auto params = net.parameters();
        for (std::size_t i = 0; i < params.size(); ++i)
            CHECK(testing::check_tensor_gradient(loss, *params[i], grads[i]) < kFdTolerance);
    }

    TEST_CASE("copies are deep")
    {
        Rng rng(21);
        Sequential a;
        a.add(std::make_unique<DenseLayer>(3, 2));
        a.init(rng);
        Sequential b = a;
        const auto before = parameter_checksum(std::as_const(a).parameters());
        (*b.parameters()[0])[0] += 1.0;
        CHECK(parameter_checksum(std::as_const(a).parameters()) == before);
        CHECK(parameter_checksum(std::as_const(b).parameters()) != before);
    }
}

TEST_SUITE("adam")
{
    TEST_CASE("zero gradient leaves parameters unchanged")
    {
        Tensor w({4}, std::vector<double>{1, -2, 3, 0.5});
        const Tensor start = w;
        std::vector<Tensor*> params{&w};
        AdamState st = make_adam_state({&w});
        const std::vector<Tensor> g{Tensor({4})};
        for (int i = 0; i < 3; ++i) adam_step(params, g, st);
        CHECK(w == start);
        CHECK(st.step_count == 3);
    }

    TEST_CASE("first step moves every coordinate by about lr")
    {
        Tensor w({5});
        std::vector<Tensor*> params{&w};
        AdamState st = make_adam_state({&w}, AdamConfig{0.001});
        const std::vector<Tensor> g{Tensor({5}, std::vector<double>{1e-3, 0.5, -7, 300, -2e4})};
        adam_step(params, g, st);
        for (std::size_t i = 0; i < 5; ++i) {
            CHECK(std::abs(std::abs(w[i]) - 0.001) < 1e-7);
            CHECK((w[i] < 0) == (g[0][i] > 0));
        }
    }

    TEST_CASE("identical state and gradients reproduce bit for bit")
    {
        Rng rng(22);
        const Tensor init = testing::random_tensor({10}, rng);
        const std::vector<Tensor> g{testing::random_tensor({10}, rng)};
        auto run = [&] {
            Tensor w = init;
            std::vector<Tensor*> params{&w};
            AdamState st = make_adam_state({&w});
            adam_step(params, g, st);
            adam_step(params, g, st);
            return w;
        };
        CHECK(run() == run());
    }

    TEST_CASE("gradient shape mismatch is rejected")
    {
        Tensor w({3});
        std::vector<Tensor*> params{&w};
        AdamState st = make_adam_state({&w});
        const std::vector<Tensor> g{Tensor({4})};
        CHECK_THROWS_AS(adam_step(params, g, st), std::invalid_argument);
    }
}

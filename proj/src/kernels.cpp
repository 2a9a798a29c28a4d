#include "uqseg/kernels.hpp"

#include <cblas.h>

#include <algorithm>
#include <stdexcept>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace uqseg::kernels {

namespace {

void check_sizes(const ConvGeometry& g, std::size_t input, std::size_t weights, std::size_t bias,
                 std::size_t output, std::size_t batch = 1)
{
    if (g.padding == Padding::valid && (g.height < 3 || g.width < 3))
        throw std::invalid_argument("conv2d: valid padding needs at least 3x3 input");
    if (input != batch * g.input_size())
        throw std::invalid_argument("conv2d: input has " + std::to_string(input) +
                                    " values, expected " + std::to_string(batch * g.input_size()));
    if (weights != g.weight_size())
        throw std::invalid_argument("conv2d: weight tensor has " + std::to_string(weights) +
                                    " values, expected " + std::to_string(g.weight_size()));
    if (bias != g.out_channels)
        throw std::invalid_argument("conv2d: bias length does not match output channels");
    if (output != batch * g.output_size())
        throw std::invalid_argument("conv2d: output buffer has wrong size");
}

} // namespace

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, const double* b, double beta, double* c)
{
    const auto lda = static_cast<blasint>(trans_a ? m : k);
    const auto ldb = static_cast<blasint>(trans_b ? k : n);
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, static_cast<blasint>(m),
                static_cast<blasint>(n), static_cast<blasint>(k), alpha, a, lda, b, ldb, beta, c,
                static_cast<blasint>(n));
}

int worker_threads()
{
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

namespace reference {

void conv2d_forward(const ConvGeometry& g, std::span<const double> input,
                    std::span<const double> weights, std::span<const double> bias,
                    std::span<double> output)
{
    check_sizes(g, input.size(), weights.size(), bias.size(), output.size());
    const auto pad = static_cast<long>(g.pad());
    const auto h = static_cast<long>(g.height);
    const auto w = static_cast<long>(g.width);
    const std::size_t oh = g.out_height();
    const std::size_t ow = g.out_width();
    for (std::size_t o = 0; o < g.out_channels; ++o) {
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t x = 0; x < ow; ++x) {
                double acc = bias[o];
                for (std::size_t c = 0; c < g.in_channels; ++c) {
                    for (long ky = 0; ky < 3; ++ky) {
                        for (long kx = 0; kx < 3; ++kx) {
                            const long iy = static_cast<long>(y) + ky - pad;
                            const long ix = static_cast<long>(x) + kx - pad;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                            acc += weights[((o * g.in_channels + c) * 3 + ky) * 3 + kx] *
                                   input[(c * g.height + iy) * g.width + ix];
                        }
                    }
                }
                output[(o * oh + y) * ow + x] = acc;
            }
        }
    }
}

void conv2d_backward(const ConvGeometry& g, std::span<const double> grad_output,
                     std::span<const double> input, std::span<const double> weights,
                     std::span<double> input_grad, std::span<double> weight_grad,
                     std::span<double> bias_grad)
{
    check_sizes(g, input.size(), weights.size(), bias_grad.size(), grad_output.size());
    if (weight_grad.size() != weights.size())
        throw std::invalid_argument("conv2d backward: weight gradient size mismatch");
    if (!input_grad.empty()) {
        if (input_grad.size() != input.size())
            throw std::invalid_argument("conv2d backward: input gradient size mismatch");
        std::fill(input_grad.begin(), input_grad.end(), 0.0);
    }
    const auto pad = static_cast<long>(g.pad());
    const auto h = static_cast<long>(g.height);
    const auto w = static_cast<long>(g.width);
    const std::size_t oh = g.out_height();
    const std::size_t ow = g.out_width();
    for (std::size_t o = 0; o < g.out_channels; ++o) {
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t x = 0; x < ow; ++x) {
                const double go = grad_output[(o * oh + y) * ow + x];
                bias_grad[o] += go;
                for (std::size_t c = 0; c < g.in_channels; ++c) {
                    for (long ky = 0; ky < 3; ++ky) {
                        for (long kx = 0; kx < 3; ++kx) {
                            const long iy = static_cast<long>(y) + ky - pad;
                            const long ix = static_cast<long>(x) + kx - pad;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                            const std::size_t wi = ((o * g.in_channels + c) * 3 + ky) * 3 + kx;
                            const std::size_t ii = (c * g.height + iy) * g.width + ix;
                            weight_grad[wi] += go * input[ii];
                            if (!input_grad.empty()) input_grad[ii] += go * weights[wi];
                        }
                    }
                }
            }
        }
    }
}

} // namespace reference

void im2col(const ConvGeometry& g, std::span<const double> input, std::span<double> col)
{
    const auto pad = static_cast<long>(g.pad());
    const auto h = static_cast<long>(g.height);
    const auto w = static_cast<long>(g.width);
    const std::size_t oh = g.out_height();
    const std::size_t ow = g.out_width();
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.in_channels; ++c) {
        const double* plane = input.data() + c * g.height * g.width;
        for (long ky = 0; ky < 3; ++ky) {
            for (long kx = 0; kx < 3; ++kx, ++row) {
                double* dst = col.data() + row * oh * ow;
                for (std::size_t y = 0; y < oh; ++y) {
                    const long iy = static_cast<long>(y) + ky - pad;
                    double* d = dst + y * ow;
                    if (iy < 0 || iy >= h) {
                        std::fill(d, d + ow, 0.0);
                        continue;
                    }
                    const double* src = plane + iy * w;
                    for (std::size_t x = 0; x < ow; ++x) {
                        const long ix = static_cast<long>(x) + kx - pad;
                        d[x] = (ix < 0 || ix >= w) ? 0.0 : src[ix];
                    }
                }
            }
        }
    }
}

void col2im(const ConvGeometry& g, std::span<const double> col, std::span<double> input)
{
    std::fill(input.begin(), input.end(), 0.0);
    const auto pad = static_cast<long>(g.pad());
    const auto h = static_cast<long>(g.height);
    const auto w = static_cast<long>(g.width);
    const std::size_t oh = g.out_height();
    const std::size_t ow = g.out_width();
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.in_channels; ++c) {
        double* plane = input.data() + c * g.height * g.width;
        for (long ky = 0; ky < 3; ++ky) {
            for (long kx = 0; kx < 3; ++kx, ++row) {
                const double* src = col.data() + row * oh * ow;
                for (std::size_t y = 0; y < oh; ++y) {
                    const long iy = static_cast<long>(y) + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    double* dst = plane + iy * w;
                    const double* s = src + y * ow;
                    for (std::size_t x = 0; x < ow; ++x) {
                        const long ix = static_cast<long>(x) + kx - pad;
                        if (ix >= 0 && ix < w) dst[ix] += s[x];
                    }
                }
            }
        }
    }
}

void conv2d_forward(const ConvGeometry& g, std::span<const double> input,
                    std::span<const double> weights, std::span<const double> bias,
                    std::span<double> output)
{
    check_sizes(g, input.size(), weights.size(), bias.size(), output.size());
    const std::size_t pixels = g.out_height() * g.out_width();
    std::vector<double> col(g.patch_size() * pixels);
    im2col(g, input, col);
    for (std::size_t o = 0; o < g.out_channels; ++o)
        std::fill_n(output.data() + o * pixels, pixels, bias[o]);
    gemm(false, false, g.out_channels, pixels, g.patch_size(), 1.0, weights.data(), col.data(), 1.0,
         output.data());
}

void conv2d_backward(const ConvGeometry& g, std::span<const double> grad_output,
                     std::span<const double> input, std::span<const double> weights,
                     std::span<double> input_grad, std::span<double> weight_grad,
                     std::span<double> bias_grad)
{
    check_sizes(g, input.size(), weights.size(), bias_grad.size(), grad_output.size());
    if (weight_grad.size() != weights.size())
        throw std::invalid_argument("conv2d backward: weight gradient size mismatch");
    const std::size_t pixels = g.out_height() * g.out_width();
    for (std::size_t o = 0; o < g.out_channels; ++o) {
        const double* go = grad_output.data() + o * pixels;
        double s = 0.0;
        for (std::size_t p = 0; p < pixels; ++p) s += go[p];
        bias_grad[o] += s;
    }
    std::vector<double> col(g.patch_size() * pixels);
    im2col(g, input, col);
    gemm(false, true, g.out_channels, g.patch_size(), pixels, 1.0, grad_output.data(), col.data(),
         1.0, weight_grad.data());
    if (!input_grad.empty()) {
        if (input_grad.size() != input.size())
            throw std::invalid_argument("conv2d backward: input gradient size mismatch");
        gemm(true, false, g.patch_size(), pixels, g.out_channels, 1.0, weights.data(),
             grad_output.data(), 0.0, col.data());
        col2im(g, col, input_grad);
    }
}

void conv2d_forward_batch(const ConvGeometry& g, std::size_t batch, std::span<const double> input,
                          std::span<const double> weights, std::span<const double> bias,
                          std::span<double> output)
{
    check_sizes(g, input.size(), weights.size(), bias.size(), output.size(), batch);
    const std::size_t in_sz = g.input_size();
    const std::size_t out_sz = g.output_size();
    const auto n = static_cast<long>(batch);
#pragma omp parallel for schedule(static) if (n > 1)
    for (long i = 0; i < n; ++i) {
        const auto s = static_cast<std::size_t>(i);
        conv2d_forward(g, input.subspan(s * in_sz, in_sz), weights, bias,
                       output.subspan(s * out_sz, out_sz));
    }
}

void conv2d_backward_batch(const ConvGeometry& g, std::size_t batch,
                           std::span<const double> grad_output, std::span<const double> input,
                           std::span<const double> weights, std::span<double> input_grad,
                           std::span<double> weight_grad, std::span<double> bias_grad)
{
    check_sizes(g, input.size(), weights.size(), bias_grad.size(), grad_output.size(), batch);
    const std::size_t in_sz = g.input_size();
    const std::size_t out_sz = g.output_size();
    const std::size_t w_sz = g.weight_size();
    const std::size_t b_sz = g.out_channels;
    // Per-sample partial gradients, summed afterwards in sample order.
    std::vector<double> partial_w(batch * w_sz, 0.0);
    std::vector<double> partial_b(batch * b_sz, 0.0);
    const auto n = static_cast<long>(batch);
#pragma omp parallel for schedule(static) if (n > 1)
    for (long i = 0; i < n; ++i) {
        const auto s = static_cast<std::size_t>(i);
        std::span<double> in_grad =
            input_grad.empty() ? std::span<double>{} : input_grad.subspan(s * in_sz, in_sz);
        conv2d_backward(g, grad_output.subspan(s * out_sz, out_sz), input.subspan(s * in_sz, in_sz),
                        weights, in_grad, std::span<double>(partial_w).subspan(s * w_sz, w_sz),
                        std::span<double>(partial_b).subspan(s * b_sz, b_sz));
    }
    for (std::size_t s = 0; s < batch; ++s) {
        const double* pw = partial_w.data() + s * w_sz;
        for (std::size_t j = 0; j < w_sz; ++j) weight_grad[j] += pw[j];
        const double* pb = partial_b.data() + s * b_sz;
        for (std::size_t j = 0; j < b_sz; ++j) bias_grad[j] += pb[j];
    }
}

} // namespace uqseg::kernels

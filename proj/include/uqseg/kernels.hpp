#pragma once

// Low-level 3x3 convolution kernels over raw C x H x W buffers.
//
// Two implementations are kept side by side:
//   reference::  straightforward nested loops, serial. Used as the test oracle.
//   (unqualified) im2col + GEMM, single sample; batch variants run samples in
//                 parallel with OpenMP and reduce weight gradients in sample order
//                 so results do not depend on the thread count.

#include <cstddef>
#include <span>

namespace uqseg::kernels {

enum class Padding { same, valid };

struct ConvGeometry {
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    Padding padding = Padding::same;

    static constexpr std::size_t kernel = 3;

    std::size_t pad() const { return padding == Padding::same ? 1 : 0; }
    std::size_t out_height() const { return padding == Padding::same ? height : height - 2; }
    std::size_t out_width() const { return padding == Padding::same ? width : width - 2; }
    std::size_t input_size() const { return in_channels * height * width; }
    std::size_t output_size() const { return out_channels * out_height() * out_width(); }
    std::size_t weight_size() const { return out_channels * in_channels * kernel * kernel; }
    std::size_t patch_size() const { return in_channels * kernel * kernel; }
};

// C = alpha * op(A) * op(B) + beta * C, row-major.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, const double* b, double beta, double* c);

// Number of worker threads the batch kernels will use.
int worker_threads();

namespace reference {

void conv2d_forward(const ConvGeometry& g, std::span<const double> input,
                    std::span<const double> weights, std::span<const double> bias,
                    std::span<double> output);

// Accumulates into weight_grad / bias_grad; overwrites input_grad when non-empty.
void conv2d_backward(const ConvGeometry& g, std::span<const double> grad_output,
                     std::span<const double> input, std::span<const double> weights,
                     std::span<double> input_grad, std::span<double> weight_grad,
                     std::span<double> bias_grad);

} // namespace reference

// col has patch_size() rows and out_height()*out_width() columns.
void im2col(const ConvGeometry& g, std::span<const double> input, std::span<double> col);
void col2im(const ConvGeometry& g, std::span<const double> col, std::span<double> input);

void conv2d_forward(const ConvGeometry& g, std::span<const double> input,
                    std::span<const double> weights, std::span<const double> bias,
                    std::span<double> output);

void conv2d_backward(const ConvGeometry& g, std::span<const double> grad_output,
                     std::span<const double> input, std::span<const double> weights,
                     std::span<double> input_grad, std::span<double> weight_grad,
                     std::span<double> bias_grad);

// Batched variants: `batch` contiguous samples in input/output.
void conv2d_forward_batch(const ConvGeometry& g, std::size_t batch, std::span<const double> input,
                          std::span<const double> weights, std::span<const double> bias,
                          std::span<double> output);

void conv2d_backward_batch(const ConvGeometry& g, std::size_t batch,
                           std::span<const double> grad_output, std::span<const double> input,
                           std::span<const double> weights, std::span<double> input_grad,
                           std::span<double> weight_grad, std::span<double> bias_grad);

} // namespace uqseg::kernels

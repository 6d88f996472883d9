#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include "asgk/blas.hpp"
#include "asgk/ops.hpp"
#include "asgk/tensor.hpp"

namespace asgk {

// conv2d over [C_in x H x W] with weights stored flat as
// [C_out x (C_in*kh*kw)]; im2col + GEMM on both passes.
inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                     std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad) {
    if (input.rank() != 3) throw ShapeError("conv2d input must be [C x H x W]");
    if (weight.rank() != 2) throw ShapeError("conv2d weight must be [C_out x C_in*kh*kw]");
    const std::size_t c_in = input.dim(0), h = input.dim(1), w = input.dim(2);
    const std::size_t patch = c_in * kh * kw;
    if (weight.dim(1) != patch)
        throw ShapeError("conv2d weight cols " + std::to_string(weight.dim(1)) +
                         " vs patch size " + std::to_string(patch));
    const std::size_t c_out = weight.dim(0);
    if (bias.rank() != 1 || bias.dim(0) != c_out) throw ShapeError("conv2d bias must be [C_out]");
    if (h + 2 * pad < kh || w + 2 * pad < kw) throw ShapeError("conv2d kernel larger than input");
    const std::size_t h_out = (h + 2 * pad - kh) / stride + 1;
    const std::size_t w_out = (w + 2 * pad - kw) / stride + 1;
    const std::size_t npos = h_out * w_out;

    auto col = std::make_shared<std::vector<double>>(patch * npos, 0.0);
    for (std::size_t c = 0; c < c_in; ++c)
        for (std::size_t ki = 0; ki < kh; ++ki)
            for (std::size_t kj = 0; kj < kw; ++kj) {
                const std::size_t prow = (c * kh + ki) * kw + kj;
                double* dst = col->data() + prow * npos;
                for (std::size_t oy = 0; oy < h_out; ++oy) {
                    const std::ptrdiff_t iy =
                        static_cast<std::ptrdiff_t>(oy * stride + ki) -
                        static_cast<std::ptrdiff_t>(pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t ox = 0; ox < w_out; ++ox) {
                        const std::ptrdiff_t ix =
                            static_cast<std::ptrdiff_t>(ox * stride + kj) -
                            static_cast<std::ptrdiff_t>(pad);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                        dst[oy * w_out + ox] =
                            input.at((c * h + static_cast<std::size_t>(iy)) * w +
                                     static_cast<std::size_t>(ix));
                    }
                }
            }

    std::vector<double> out(c_out * npos, 0.0);
    blas::gemm_nn(c_out, patch, npos, weight.values().data(), col->data(), out.data());
    for (std::size_t c = 0; c < c_out; ++c) {
        const double b = bias.at(c);
        for (std::size_t i = 0; i < npos; ++i) out[c * npos + i] += b;
    }

    return detail::make_op(
        {c_out, h_out, w_out}, std::move(out), "conv2d", {input, weight, bias},
        [input, weight, bias, col, c_in, c_out, h, w, kh, kw, stride, pad, h_out, w_out, npos,
         patch](TensorNode& self) {
            if (bias.requires_grad())
                for (std::size_t c = 0; c < c_out; ++c) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < npos; ++i) acc += self.grad[c * npos + i];
                    bias.raw()->grad[c] += acc;
                }
            if (weight.requires_grad())
                blas::gemm_nt(c_out, npos, patch, self.grad.data(), col->data(),
                              weight.raw()->grad.data());
            if (input.requires_grad()) {
                std::vector<double> dcol(patch * npos, 0.0);
                blas::gemm_tn(patch, c_out, npos, weight.values().data(), self.grad.data(),
                              dcol.data());
                for (std::size_t c = 0; c < c_in; ++c)
                    for (std::size_t ki = 0; ki < kh; ++ki)
                        for (std::size_t kj = 0; kj < kw; ++kj) {
                            const std::size_t prow = (c * kh + ki) * kw + kj;
                            const double* src = dcol.data() + prow * npos;
                            for (std::size_t oy = 0; oy < h_out; ++oy) {
                                const std::ptrdiff_t iy =
                                    static_cast<std::ptrdiff_t>(oy * stride + ki) -
                                    static_cast<std::ptrdiff_t>(pad);
                                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                                for (std::size_t ox = 0; ox < w_out; ++ox) {
                                    const std::ptrdiff_t ix =
                                        static_cast<std::ptrdiff_t>(ox * stride + kj) -
                                        static_cast<std::ptrdiff_t>(pad);
                                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                                    input.raw()->grad[(c * h + static_cast<std::size_t>(iy)) * w +
                                                      static_cast<std::size_t>(ix)] +=
                                        src[oy * w_out + ox];
                                }
                            }
                        }
            }
        });
}

// Mean over the spatial extent of [C x S x S] -> [C].
inline Tensor spatial_mean(const Tensor& maps) {
    if (maps.rank() != 3) throw ShapeError("spatial_mean expects [C x H x W]");
    const std::size_t c = maps.dim(0), hw = maps.dim(1) * maps.dim(2);
    std::vector<double> out(c, 0.0);
    for (std::size_t i = 0; i < c; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < hw; ++j) acc += maps.at(i * hw + j);
        out[i] = acc / static_cast<double>(hw);
    }
    return detail::make_op({c}, std::move(out), "spatial_mean", {maps},
                           [maps, c, hw](TensorNode& self) {
                               if (!maps.requires_grad()) return;
                               for (std::size_t i = 0; i < c; ++i) {
                                   const double g = self.grad[i] / static_cast<double>(hw);
                                   for (std::size_t j = 0; j < hw; ++j)
                                       maps.raw()->grad[i * hw + j] += g;
                               }
                           });
}

} // namespace asgk

#pragma once

#include <cstdint>
#include <vector>

namespace sqa::ref {

// Serial reference kernels. These are deliberately the textbook forms of the
// OpenMP kernels in ndiff/dsp; tests assert bit-equality against them and
// tools/bench.cpp compares their speed. Per-element accumulation order is
// identical to the parallel kernels, so equality is exact, not approximate.

// c[m,n] = a[m,k] @ b[k,n], classic triple loop.
void matmul(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
            std::int64_t n);

// Direct convolution, NCHW layout, "same" padding, arbitrary strides.
// weight is [OC, IC, KH, KW]; out must be preallocated to [B, OC, OH, OW]
// with OH = ceil(H/sh), OW = ceil(W/sw).
void conv2d_forward(const double* x, std::int64_t batch, std::int64_t in_c, std::int64_t in_h,
                    std::int64_t in_w, const double* weight, const double* bias,
                    std::int64_t out_c, std::int64_t kernel_h, std::int64_t kernel_w,
                    std::int64_t stride_h, std::int64_t stride_w, double* out);

// Serial twin of dsp::resample_sinc.
std::vector<double> resample_sinc(const std::vector<double>& x, double ratio);

}  // namespace sqa::ref

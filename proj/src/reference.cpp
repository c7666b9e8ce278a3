#include "sqa/reference.hpp"

#include <algorithm>
#include <cmath>

#include "sqa/dsp.hpp"

namespace sqa::ref {

void matmul(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
            std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::int64_t kk = 0; kk < k; ++kk) acc += a[i * k + kk] * b[kk * n + j];
      c[i * n + j] = acc;
    }
}

void conv2d_forward(const double* x, std::int64_t batch, std::int64_t in_c, std::int64_t in_h,
                    std::int64_t in_w, const double* weight, const double* bias,
                    std::int64_t out_c, std::int64_t kernel_h, std::int64_t kernel_w,
                    std::int64_t stride_h, std::int64_t stride_w, double* out) {
  const std::int64_t out_h = (in_h + stride_h - 1) / stride_h;
  const std::int64_t out_w = (in_w + stride_w - 1) / stride_w;
  const std::int64_t pad_h = std::max<std::int64_t>(0, (out_h - 1) * stride_h + kernel_h - in_h);
  const std::int64_t pad_w = std::max<std::int64_t>(0, (out_w - 1) * stride_w + kernel_w - in_w);
  const std::int64_t pad_top = pad_h / 2, pad_left = pad_w / 2;

  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t oc = 0; oc < out_c; ++oc)
      for (std::int64_t oh = 0; oh < out_h; ++oh)
        for (std::int64_t ow = 0; ow < out_w; ++ow) {
          // bias first, then taps in (ic, ki, kj) order; padded taps
          // contribute an explicit 0.0 so the FP op sequence matches the
          // im2col kernel exactly
          double acc = bias[oc];
          for (std::int64_t ic = 0; ic < in_c; ++ic)
            for (std::int64_t ki = 0; ki < kernel_h; ++ki)
              for (std::int64_t kj = 0; kj < kernel_w; ++kj) {
                const std::int64_t ih = oh * stride_h - pad_top + ki;
                const std::int64_t iw = ow * stride_w - pad_left + kj;
                const double v = (ih >= 0 && ih < in_h && iw >= 0 && iw < in_w)
                                     ? x[((b * in_c + ic) * in_h + ih) * in_w + iw]
                                     : 0.0;
                acc += weight[((oc * in_c + ic) * kernel_h + ki) * kernel_w + kj] * v;
              }
          out[((b * out_c + oc) * out_h + oh) * out_w + ow] = acc;
        }
}

std::vector<double> resample_sinc(const std::vector<double>& x, double ratio) {
  constexpr int kHalfTaps = 16;
  constexpr double kKaiserBeta = 8.6;
  const auto in_len = static_cast<std::int64_t>(x.size());
  const auto out_len = static_cast<std::int64_t>(std::llround(static_cast<double>(in_len) * ratio));
  std::vector<double> out(static_cast<std::size_t>(out_len), 0.0);
  const double fc = 0.5 * std::min(1.0, ratio);
  const double i0_beta = dsp::bessel_i0(kKaiserBeta);

  for (std::int64_t n = 0; n < out_len; ++n) {
    const double t = static_cast<double>(n) / ratio;
    const auto i0 = static_cast<std::int64_t>(std::floor(t));
    double acc = 0.0;
    for (int k = -kHalfTaps + 1; k <= kHalfTaps; ++k) {
      const std::int64_t i = i0 + k;
      if (i < 0 || i >= in_len) continue;
      const double d = t - static_cast<double>(i);
      const double r = d / kHalfTaps;
      if (r <= -1.0 || r >= 1.0) continue;
      const double window = dsp::bessel_i0(kKaiserBeta * std::sqrt(1.0 - r * r)) / i0_beta;
      const double arg = 2.0 * fc * d;
      const double sinc = arg == 0.0 ? 1.0 : std::sin(dsp::kPi * arg) / (dsp::kPi * arg);
      acc += x[static_cast<std::size_t>(i)] * 2.0 * fc * sinc * window;
    }
    out[static_cast<std::size_t>(n)] = acc;
  }
  return out;
}

}  // namespace sqa::ref

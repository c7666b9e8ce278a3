#include "sqa/dsp.hpp"

#include <cmath>
#include <cstdint>

namespace sqa::dsp {

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

void fft(std::vector<std::complex<double>>& a, bool inverse) {
  const std::size_t n = a.size();
  if (n < 2) return;
  // bit-reversal permutation
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = 2.0 * kPi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        std::complex<double> u = a[i + k];
        std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
  if (inverse) {
    const double scale = 1.0 / static_cast<double>(n);
    for (auto& v : a) v *= scale;
  }
}

std::vector<double> hann_window(int n_samples) {
  std::vector<double> w(static_cast<std::size_t>(n_samples));
  for (int i = 0; i < n_samples; ++i)
    w[static_cast<std::size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * kPi * i / n_samples);
  return w;
}

std::vector<double> convolve_fft(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty()) return {};
  const std::size_t out_len = a.size() + b.size() - 1;
  const std::size_t n = next_pow2(out_len);
  std::vector<std::complex<double>> fa(n), fb(n);
  for (std::size_t i = 0; i < a.size(); ++i) fa[i] = a[i];
  for (std::size_t i = 0; i < b.size(); ++i) fb[i] = b[i];
  fft(fa, false);
  fft(fb, false);
  for (std::size_t i = 0; i < n; ++i) fa[i] *= fb[i];
  fft(fa, true);
  std::vector<double> out(out_len);
  for (std::size_t i = 0; i < out_len; ++i) out[i] = fa[i].real();
  return out;
}

void Biquad::process_inplace(std::vector<double>& x) const {
  double z1 = 0.0, z2 = 0.0;
  for (double& v : x) {
    const double in = v;
    const double out = b0 * in + z1;
    z1 = b1 * in - a1 * out + z2;
    z2 = b2 * in - a2 * out;
    v = out;
  }
}

namespace {
Biquad rbj_lowpass(double cutoff_hz, double sample_rate, double q) {
  const double w0 = 2.0 * kPi * cutoff_hz / sample_rate;
  const double alpha = std::sin(w0) / (2.0 * q);
  const double cw = std::cos(w0);
  const double a0 = 1.0 + alpha;
  Biquad s;
  s.b0 = (1.0 - cw) / 2.0 / a0;
  s.b1 = (1.0 - cw) / a0;
  s.b2 = s.b0;
  s.a1 = -2.0 * cw / a0;
  s.a2 = (1.0 - alpha) / a0;
  return s;
}
}  // namespace

std::array<Biquad, 2> butterworth_lowpass4(double cutoff_hz, double sample_rate) {
  // Section Q values for a 4th-order Butterworth: 1/(2 cos(pi/8)), 1/(2 cos(3 pi/8)).
  const double q1 = 1.0 / (2.0 * std::cos(kPi / 8.0));
  const double q2 = 1.0 / (2.0 * std::cos(3.0 * kPi / 8.0));
  return {rbj_lowpass(cutoff_hz, sample_rate, q1), rbj_lowpass(cutoff_hz, sample_rate, q2)};
}

double bessel_i0(double x) {
  // power series; converges quickly for the |x| <= 9 range a Kaiser window uses
  const double y = x * x / 4.0;
  double term = 1.0, sum = 1.0;
  for (int k = 1; k < 64; ++k) {
    term *= y / (static_cast<double>(k) * k);
    sum += term;
    if (term < 1e-18 * sum) break;
  }
  return sum;
}

std::vector<double> resample_sinc(const std::vector<double>& x, double ratio) {
  constexpr int kHalfTaps = 16;  // 32-tap kernel
  constexpr double kKaiserBeta = 8.6;
  const auto in_len = static_cast<std::int64_t>(x.size());
  const auto out_len = static_cast<std::int64_t>(std::llround(static_cast<double>(in_len) * ratio));
  std::vector<double> out(static_cast<std::size_t>(out_len), 0.0);
  const double fc = 0.5 * std::min(1.0, ratio);  // cycles per input sample
  const double i0_beta = bessel_i0(kKaiserBeta);

#pragma omp parallel for schedule(static)
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
      const double window = bessel_i0(kKaiserBeta * std::sqrt(1.0 - r * r)) / i0_beta;
      const double arg = 2.0 * fc * d;
      const double sinc = arg == 0.0 ? 1.0 : std::sin(kPi * arg) / (kPi * arg);
      acc += x[static_cast<std::size_t>(i)] * 2.0 * fc * sinc * window;
    }
    out[static_cast<std::size_t>(n)] = acc;
  }
  return out;
}

}  // namespace sqa::dsp

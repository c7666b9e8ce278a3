#pragma once

#include <array>
#include <complex>
#include <cstddef>
#include <vector>

namespace sqa::dsp {

inline constexpr double kPi = 3.14159265358979323846;

std::size_t next_pow2(std::size_t n);

// In-place radix-2 Cooley-Tukey transform; size must be a power of two.
// inverse=true applies the 1/n scaling.
void fft(std::vector<std::complex<double>>& a, bool inverse);

// Periodic Hann window, w[n] = 0.5 - 0.5 cos(2 pi n / n_samples).
std::vector<double> hann_window(int n_samples);

// Full linear convolution, output length a.size() + b.size() - 1.
std::vector<double> convolve_fft(const std::vector<double>& a, const std::vector<double>& b);

// Direct-form-II-transposed biquad section.
struct Biquad {
  double b0 = 1, b1 = 0, b2 = 0, a1 = 0, a2 = 0;
  void process_inplace(std::vector<double>& x) const;
};

// 4th-order Butterworth low-pass as two cascaded sections (RBJ bilinear design).
std::array<Biquad, 2> butterworth_lowpass4(double cutoff_hz, double sample_rate);

// Modified Bessel function of the first kind, order zero (Kaiser window).
double bessel_i0(double x);

// Band-limited interpolation by an arbitrary rational-free ratio
// (ratio = output_rate / input_rate) with a 32-tap Kaiser-windowed sinc.
std::vector<double> resample_sinc(const std::vector<double>& x, double ratio);

}  // namespace sqa::dsp

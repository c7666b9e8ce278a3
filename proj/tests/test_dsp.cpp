#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <complex>
#include <vector>

#include "oracles.hpp"
#include "sqa/dsp.hpp"
#include "sqa/rng.hpp"

using namespace sqa;

namespace {
std::vector<double> sine(double freq, double rate, double seconds, double amp = 0.5) {
  std::vector<double> x(static_cast<std::size_t>(rate * seconds));
  for (std::size_t i = 0; i < x.size(); ++i)
    x[i] = amp * std::sin(2.0 * oracles::kPi * freq * static_cast<double>(i) / rate);
  return x;
}
}  // namespace

TEST_CASE("fft matches a direct dft on random input") {
  Rng rng(7);
  const std::size_t n = 256;
  std::vector<std::complex<double>> a(n);
  for (auto& v : a) v = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
  auto spectrum = a;
  dsp::fft(spectrum, false);
  for (std::size_t k = 0; k < n; k += 37) {
    std::complex<double> ref = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double ang = -2.0 * dsp::kPi * static_cast<double>(k * i) / static_cast<double>(n);
      ref += a[i] * std::complex<double>(std::cos(ang), std::sin(ang));
    }
    CHECK(std::abs(spectrum[k] - ref) < 1e-9);
  }
}

TEST_CASE("fft round-trips through the inverse") {
  Rng rng(13);
  std::vector<std::complex<double>> a(1024);
  for (auto& v : a) v = {rng.normal(), rng.normal()};
  auto b = a;
  dsp::fft(b, false);
  dsp::fft(b, true);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-12);
}

TEST_CASE("convolve_fft matches direct convolution") {
  Rng rng(3);
  std::vector<double> a(50), b(13);
  for (auto& v : a) v = rng.uniform(-1, 1);
  for (auto& v : b) v = rng.uniform(-1, 1);
  const auto got = dsp::convolve_fft(a, b);
  REQUIRE(got.size() == a.size() + b.size() - 1);
  for (std::size_t n = 0; n < got.size(); ++n) {
    double ref = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (n >= i && n - i < b.size()) ref += a[i] * b[n - i];
    CHECK(got[n] == doctest::Approx(ref).epsilon(1e-10));
  }
}

TEST_CASE("butterworth lowpass meets the stop-band and pass-band contract") {
  const double fs = 16000.0;
  const double cutoff = 750.0;
  auto sections = dsp::butterworth_lowpass4(cutoff, fs);

  auto gain_at = [&](double freq) {
    auto x = sine(freq, fs, 1.0);
    const double in_rms = oracles::rms(x);
    for (const auto& s : sections) s.process_inplace(x);
    // skip the transient
    std::vector<double> tail(x.begin() + 4000, x.end());
    return 20.0 * std::log10(oracles::rms(tail) / in_rms);
  };

  CHECK(gain_at(2.0 * cutoff) < -20.0);   // >= 20 dB down at twice the cutoff
  CHECK(gain_at(cutoff / 4.0) > -1.0);    // <= 1 dB ripple deep in the passband
}

TEST_CASE("resample_sinc preserves tone frequency across a 48k to 16k conversion") {
  auto x = sine(1000.0, 48000.0, 1.0);
  auto y = dsp::resample_sinc(x, 16000.0 / 48000.0);
  CHECK(y.size() == 16000);
  const double peak = oracles::dominant_frequency(y, 16000.0, 200.0, 4000.0);
  CHECK(peak == doctest::Approx(1000.0).epsilon(0.032));  // within one bin
}

TEST_CASE("resample_sinc is linear in amplitude") {
  Rng rng(17);
  std::vector<double> x(4000);
  for (auto& v : x) v = rng.uniform(-0.5, 0.5);
  auto y1 = dsp::resample_sinc(x, 2.0);
  auto x2 = x;
  for (auto& v : x2) v *= 3.0;
  auto y2 = dsp::resample_sinc(x2, 2.0);
  REQUIRE(y1.size() == y2.size());
  for (std::size_t i = 0; i < y1.size(); ++i) CHECK(std::fabs(y2[i] - 3.0 * y1[i]) < 1e-6);
}

TEST_CASE("bessel_i0 matches series values") {
  CHECK(dsp::bessel_i0(0.0) == doctest::Approx(1.0));
  CHECK(dsp::bessel_i0(1.0) == doctest::Approx(1.2660658777520082));
  CHECK(dsp::bessel_i0(8.6) == doctest::Approx(750.4611595631659).epsilon(1e-9));
}

// Timing comparison of the OpenMP kernels against their serial reference
// twins. Also verifies bit-equality on the benchmarked inputs, since both
// sides must agree exactly.
#include <omp.h>

#include <chrono>
#include <cstdio>
#include <functional>
#include <vector>

#include "sqa/degrade.hpp"
#include "sqa/dsp.hpp"
#include "sqa/features.hpp"
#include "sqa/ndiff.hpp"
#include "sqa/reference.hpp"
#include "sqa/rng.hpp"

using namespace sqa;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
  fn();  // warmup
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

void report(const char* name, double serial_ms, double omp_ms, bool equal) {
  std::printf("%-28s serial %9.2f ms   omp %9.2f ms   speedup %5.2fx   %s\n", name, serial_ms,
              omp_ms, serial_ms / omp_ms, equal ? "bit-equal" : "MISMATCH");
}

}  // namespace

int main() {
  std::printf("threads: %d\n\n", omp_get_max_threads());
  Rng rng(2024);

  {
    const std::int64_t m = 256, k = 512, n = 384;
    std::vector<double> a(static_cast<std::size_t>(m * k)), b(static_cast<std::size_t>(k * n));
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.normal();
    std::vector<double> c1(static_cast<std::size_t>(m * n)), c2(static_cast<std::size_t>(m * n));
    const double ts = time_ms([&] { ref::matmul(a.data(), b.data(), c1.data(), m, k, n); }, 5);
    const double tp = time_ms([&] { ndiff::matmul(a.data(), b.data(), c2.data(), m, k, n); }, 5);
    report("matmul 256x512x384", ts, tp, c1 == c2);
  }

  {
    ndiff::LayerConfig cfg;
    cfg.kind = ndiff::LayerKind::kConv2d;
    cfg.in_channels = 8;
    cfg.out_channels = 16;
    auto layer = ndiff::make_layer(cfg);
    Rng init(1);
    layer->init(init);
    ndiff::Tensor x = ndiff::Tensor::zeros({8, 8, 100, 128});
    for (auto& v : x.values) v = rng.normal();
    const auto params = layer->params();

    ndiff::Tensor out_serial;
    const double ts = time_ms(
        [&] {
          out_serial = ndiff::Tensor::zeros({8, 16, 100, 128});
          ref::conv2d_forward(x.values.data(), 8, 8, 100, 128, params[0].value->values.data(),
                              params[1].value->values.data(), 16, 3, 3, 1, 1,
                              out_serial.values.data());
        },
        3);
    ndiff::Tensor out_omp;
    const double tp =
        time_ms([&] { out_omp = layer->forward(x, ndiff::Mode::kEval, nullptr, nullptr); }, 3);
    report("conv2d 8x8x100x128 -> 16", ts, tp, out_serial.values == out_omp.values);
  }

  {
    std::vector<double> x(16000 * 10);
    for (auto& v : x) v = rng.uniform(-1, 1);
    std::vector<double> r1, r2;
    const double ts = time_ms([&] { r1 = ref::resample_sinc(x, 48000.0 / 16000.0); }, 3);
    const double tp = time_ms([&] { r2 = dsp::resample_sinc(x, 48000.0 / 16000.0); }, 3);
    report("resample 10s 16k->48k", ts, tp, r1 == r2);
  }

  {
    audio_io::Waveform w;
    w.sample_rate = 16000;
    w.samples.resize(16000 * 10);
    for (auto& v : w.samples) v = 0.3 * rng.normal();
    features::Spectrogram s1, s2;
    const int max_threads = omp_get_max_threads();
    const double ts = time_ms(
        [&] {
          omp_set_num_threads(1);
          s1 = features::stft(w, {});
        },
        3);
    const double tp = time_ms(
        [&] {
          omp_set_num_threads(max_threads);
          s2 = features::stft(w, {});
        },
        3);
    report("stft 10s (1 vs all threads)", ts, tp, s1.values == s2.values);
  }

  return 0;
}

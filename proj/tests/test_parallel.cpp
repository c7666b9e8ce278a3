// The OpenMP kernels assign each output element to exactly one thread and
// reduce serially inside it, so their results must equal the serial reference
// kernels bit for bit, at any thread count.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <omp.h>

#include <vector>

#include "oracles.hpp"
#include "sqa/degrade.hpp"
#include "sqa/dsp.hpp"
#include "sqa/features.hpp"
#include "sqa/ndiff.hpp"
#include "sqa/reference.hpp"

using namespace sqa;

TEST_CASE("matmul matches the serial reference bit-exactly") {
  Rng rng(101);
  for (int trial = 0; trial < 10; ++trial) {
    const auto m = rng.uniform_int(1, 40);
    const auto k = rng.uniform_int(1, 40);
    const auto n = rng.uniform_int(1, 40);
    std::vector<double> a(static_cast<std::size_t>(m * k)), b(static_cast<std::size_t>(k * n));
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.normal();
    std::vector<double> c_omp(static_cast<std::size_t>(m * n)), c_ref(static_cast<std::size_t>(m * n));
    ndiff::matmul(a.data(), b.data(), c_omp.data(), m, k, n);
    ref::matmul(a.data(), b.data(), c_ref.data(), m, k, n);
    CHECK(c_omp == c_ref);
  }
}

TEST_CASE("conv2d forward matches the direct serial reference bit-exactly") {
  Rng rng(202);
  for (int trial = 0; trial < 6; ++trial) {
    ndiff::LayerConfig cfg;
    cfg.kind = ndiff::LayerKind::kConv2d;
    cfg.in_channels = static_cast<int>(rng.uniform_int(1, 3));
    cfg.out_channels = static_cast<int>(rng.uniform_int(1, 4));
    cfg.stride_h = trial % 2 == 0 ? 1 : 2;
    cfg.stride_w = trial % 3 == 0 ? 3 : 1;
    auto layer = ndiff::make_layer(cfg);
    Rng init(child_seed(202, static_cast<std::uint64_t>(trial)));
    layer->init(init);

    const std::int64_t batch = rng.uniform_int(1, 3);
    const std::int64_t h = rng.uniform_int(5, 12), w = rng.uniform_int(5, 12);
    ndiff::Tensor x = ndiff::Tensor::zeros({batch, cfg.in_channels, h, w});
    for (auto& v : x.values) v = rng.normal();

    const auto got = layer->forward(x, ndiff::Mode::kEval, nullptr, nullptr);

    const auto params = layer->params();
    ndiff::Tensor expect = ndiff::Tensor::zeros(got.shape);
    ref::conv2d_forward(x.values.data(), batch, cfg.in_channels, h, w, params[0].value->values.data(),
                        params[1].value->values.data(), cfg.out_channels, cfg.kernel_h, cfg.kernel_w,
                        cfg.stride_h, cfg.stride_w, expect.values.data());
    CHECK(got.values == expect.values);
  }
}

TEST_CASE("resample matches the serial reference bit-exactly") {
  Rng rng(303);
  std::vector<double> x(4321);
  for (auto& v : x) v = rng.uniform(-1, 1);
  for (double ratio : {0.35, 1.0, 2.0, 16.0 / 44.1}) {
    CHECK(dsp::resample_sinc(x, ratio) == ref::resample_sinc(x, ratio));
  }
}

TEST_CASE("thread count does not change any kernel result") {
  const int max_threads = omp_get_max_threads();

  Rng rng(404);
  audio_io::Waveform w;
  w.sample_rate = 16000;
  w.samples.resize(16000);
  for (auto& v : w.samples) v = 0.3 * rng.normal();

  omp_set_num_threads(1);
  const auto stft1 = features::stft(w, {});
  const auto res1 = dsp::resample_sinc(w.samples, 0.76);
  degrade::DegradationSpec spec;
  spec.condition = degrade::Condition::kNoisePlusRoom;
  spec.params = {{"snr_db", 3.0}, {"rt60_s", 0.9}};
  const auto deg1 = degrade::apply(w, spec, 5);

  omp_set_num_threads(max_threads > 1 ? max_threads : 2);
  const auto stft2 = features::stft(w, {});
  const auto res2 = dsp::resample_sinc(w.samples, 0.76);
  const auto deg2 = degrade::apply(w, spec, 5);
  omp_set_num_threads(max_threads);

  CHECK(stft1.values == stft2.values);
  CHECK(res1 == res2);
  CHECK(deg1.samples == deg2.samples);
}

TEST_CASE("training steps are bit-identical across thread counts") {
  auto run = [](int threads) {
    omp_set_num_threads(threads);
    std::vector<ndiff::LayerConfig> cfgs(4);
    cfgs[0].kind = ndiff::LayerKind::kConv2d;
    cfgs[0].in_channels = 1;
    cfgs[0].out_channels = 4;
    cfgs[1].kind = ndiff::LayerKind::kBatchNorm;
    cfgs[1].num_features = 4;
    cfgs[2].kind = ndiff::LayerKind::kGlobalChannelMax;
    cfgs[3].kind = ndiff::LayerKind::kDense;
    cfgs[3].in_features = 4;
    cfgs[3].out_features = 2;
    ndiff::Graph g(cfgs, 99);
    ndiff::Adam adam(g.params(), {});
    Rng data(7);
    for (int step = 0; step < 5; ++step) {
      ndiff::Tensor x = ndiff::Tensor::zeros({8, 1, 10, 12});
      for (auto& v : x.values) v = data.normal();
      ndiff::Tape tape;
      const auto out = g.forward(x, ndiff::Mode::kTrain, nullptr, &tape);
      ndiff::Tensor grad = ndiff::Tensor::zeros(out.shape);
      for (std::size_t i = 0; i < grad.values.size(); ++i) grad.values[i] = out.values[i];
      g.backward(tape, grad);
      adam.step();
      g.zero_grads();
    }
    std::vector<double> flat;
    for (auto& p : g.params()) flat.insert(flat.end(), p.value->values.begin(), p.value->values.end());
    return flat;
  };
  const int max_threads = omp_get_max_threads();
  const auto single = run(1);
  const auto multi = run(max_threads > 1 ? max_threads : 2);
  omp_set_num_threads(max_threads);
  CHECK(single == multi);
}

#include "sqa/features.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "sqa/dsp.hpp"
#include "sqa/errors.hpp"

namespace sqa::features {

double Spectrogram::floor_value() const {
  return kind == SpecKind::kMagnitude ? 0.0 : std::log(kLogFloor);
}

Spectrogram stft(const audio_io::Waveform& w, const StftConfig& cfg) {
  if (cfg.fft_len < cfg.window_len || cfg.hop <= 0 || cfg.hop > cfg.window_len)
    throw ValidationError("bad stft configuration");
  if ((cfg.fft_len & (cfg.fft_len - 1)) != 0) throw ValidationError("fft_len must be a power of two");
  const auto len = static_cast<std::int64_t>(w.samples.size());
  if (len < cfg.window_len)
    throw TooShortError("clip shorter than one analysis window (" +
                        std::to_string(len) + " < " + std::to_string(cfg.window_len) + " samples)");

  const auto window = dsp::hann_window(cfg.window_len);
  const int frames = 1 + static_cast<int>((len - cfg.window_len) / cfg.hop);
  const int bins = cfg.fft_len / 2 + 1;

  Spectrogram s;
  s.frames = frames;
  s.bins = bins;
  s.bin_hz = static_cast<double>(w.sample_rate) / cfg.fft_len;
  s.frame_hop_s = static_cast<double>(cfg.hop) / w.sample_rate;
  s.kind = SpecKind::kMagnitude;
  s.values.assign(static_cast<std::size_t>(frames) * bins, 0.0);

#pragma omp parallel for schedule(static)
  for (int t = 0; t < frames; ++t) {
    std::vector<std::complex<double>> frame(static_cast<std::size_t>(cfg.fft_len), 0.0);
    const auto start = static_cast<std::int64_t>(t) * cfg.hop;
    for (int i = 0; i < cfg.window_len; ++i)
      frame[static_cast<std::size_t>(i)] =
          w.samples[static_cast<std::size_t>(start + i)] * window[static_cast<std::size_t>(i)];
    dsp::fft(frame, false);
    for (int k = 0; k < bins; ++k) s.at(t, k) = std::abs(frame[static_cast<std::size_t>(k)]);
  }
  return s;
}

Spectrogram log_magnitude(const Spectrogram& s) {
  if (s.kind != SpecKind::kMagnitude)
    throw ValidationError("log_magnitude expects a magnitude spectrogram");
  Spectrogram out = s;
  out.kind = SpecKind::kLogMagnitude;
  for (auto& v : out.values) v = std::log(std::max(v, kLogFloor));
  return out;
}

Spectrogram pad_or_crop(const Spectrogram& s, int frames, Rng& rng) {
  if (frames <= 0) throw ValidationError("target frame count must be positive");
  if (s.frames == frames) return s;

  Spectrogram out = s;
  out.frames = frames;
  out.values.assign(static_cast<std::size_t>(frames) * s.bins, s.floor_value());
  if (s.frames > frames) {
    const auto start = rng.uniform_int(0, s.frames - frames);
    std::copy_n(s.values.begin() + static_cast<std::ptrdiff_t>(start) * s.bins,
                static_cast<std::size_t>(frames) * s.bins, out.values.begin());
  } else {
    std::copy(s.values.begin(), s.values.end(), out.values.begin());
  }
  return out;
}

void write_cache(const Spectrogram& s, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open cache file for writing: " + path);
  const std::uint32_t frames = static_cast<std::uint32_t>(s.frames);
  const std::uint32_t bins = static_cast<std::uint32_t>(s.bins);
  const std::uint8_t kind = s.kind == SpecKind::kMagnitude ? 0 : 1;
  out.write(reinterpret_cast<const char*>(&frames), 4);
  out.write(reinterpret_cast<const char*>(&bins), 4);
  out.write(reinterpret_cast<const char*>(&kind), 1);
  std::vector<float> buf(s.values.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(s.values[i]);
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!out) throw IoError("short write to cache file: " + path);
}

Spectrogram read_cache(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open cache file: " + path);
  std::uint32_t frames = 0, bins = 0;
  std::uint8_t kind = 0;
  in.read(reinterpret_cast<char*>(&frames), 4);
  in.read(reinterpret_cast<char*>(&bins), 4);
  in.read(reinterpret_cast<char*>(&kind), 1);
  if (!in || kind > 1) throw FormatError("bad cache header: " + path);
  Spectrogram s;
  s.frames = static_cast<int>(frames);
  s.bins = static_cast<int>(bins);
  s.kind = kind == 0 ? SpecKind::kMagnitude : SpecKind::kLogMagnitude;
  std::vector<float> buf(static_cast<std::size_t>(frames) * bins);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!in) throw FormatError("truncated cache file: " + path);
  s.values.resize(buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) s.values[i] = buf[i];
  return s;
}

}  // namespace sqa::features

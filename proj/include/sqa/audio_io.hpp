#pragma once

#include <string>
#include <vector>

namespace sqa::audio_io {

// Canonical pipeline rate; corpora are resampled to this before modeling.
inline constexpr int kPipelineRate = 16000;

// Mono waveform. Samples are dimensionless amplitudes, nominally in [-1, 1],
// stored as 64-bit reals so degradation math is reproducible across platforms.
struct Waveform {
  std::vector<double> samples;
  int sample_rate = 0;

  double duration_s() const {
    return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
  }
};

// Reads a RIFF/WAVE file (PCM16 or IEEE float32, 1 or 2 channels).
// Stereo is averaged to mono; PCM16 is scaled by 1/32768.
Waveform read_wav(const std::string& path);

// Writes a mono IEEE-float32 WAV. read_wav(write_wav(w)) reproduces samples
// bit-exactly when they are float32-representable.
void write_wav(const Waveform& w, const std::string& path);

// The same container, serialized in memory (wire payloads, tests).
std::string to_wav_bytes(const Waveform& w);

// Band-limited resampling (32-tap Kaiser-windowed sinc, beta = 8.6).
// Same target rate returns the input unchanged.
Waveform resample(const Waveform& w, int target_rate);

double peak_abs(const Waveform& w);
double rms(const std::vector<double>& samples);
double energy(const std::vector<double>& samples);

}  // namespace sqa::audio_io

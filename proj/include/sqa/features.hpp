#pragma once

#include <string>
#include <vector>

#include "sqa/audio_io.hpp"
#include "sqa/rng.hpp"

namespace sqa::features {

struct StftConfig {
  int window_len = 512;
  int hop = 256;
  int fft_len = 512;  // must be a power of two and >= window_len
};

enum class SpecKind { kMagnitude, kLogMagnitude };

// Floor applied before the log so padded silence stays at a finite value.
inline constexpr double kLogFloor = 1e-8;

struct Spectrogram {
  int frames = 0;
  int bins = 0;
  double bin_hz = 0.0;
  double frame_hop_s = 0.0;
  SpecKind kind = SpecKind::kMagnitude;
  std::vector<double> values;  // row-major frames x bins

  double& at(int frame, int bin) { return values[static_cast<std::size_t>(frame) * bins + bin]; }
  double at(int frame, int bin) const {
    return values[static_cast<std::size_t>(frame) * bins + bin];
  }
  double floor_value() const;
};

// Hann-windowed magnitude STFT; frames = 1 + floor((len - window_len)/hop).
Spectrogram stft(const audio_io::Waveform& w, const StftConfig& cfg);

// Element-wise ln(max(v, 1e-8)).
Spectrogram log_magnitude(const Spectrogram& s);

// Longer inputs get a random contiguous crop, shorter ones are right-padded
// with the kind's floor value.
Spectrogram pad_or_crop(const Spectrogram& s, int frames, Rng& rng);

// On-disk cache: header (frames, bins as u32 LE; kind as u8) followed by
// row-major float32 LE values.
void write_cache(const Spectrogram& s, const std::string& path);
Spectrogram read_cache(const std::string& path);

}  // namespace sqa::features

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sqa/audio_io.hpp"
#include "sqa/rng.hpp"

namespace sqa::degrade {

using audio_io::Waveform;

// The 16 simulated impairment conditions: 10 singles (incl. the clean
// Identity condition) and 6 composite pairs, applied left to right.
enum class Condition {
  kIdentity,
  kAddBackgroundNoise,
  kClippingImpairment,
  kGainTransition,
  kLowPassFilter,
  kMp3Compression,
  kPitchShift,
  kRoomSimulator,
  kTimeMask,
  kTimeStretch,
  kNoisePlusRoom,
  kNoisePlusLowPass,
  kNoisePlusTimeStretch,
  kRoomPlusMp3,
  kPitchShiftPlusLowPass,
  kGainTransitionPlusTimeMask,
};

inline constexpr int kNumConditions = 16;

const std::string& to_string(Condition c);
Condition condition_from_string(const std::string& name);
bool is_pair(Condition c);
// Constituents in application order; singles return {c, c} with size flag via is_pair.
std::array<Condition, 2> pair_parts(Condition c);

// Closed uniform sampling ranges per parameter.
struct ParamRange {
  std::string name;
  double lo, hi;
};
const std::vector<ParamRange>& param_ranges(Condition single);

struct DegradationSpec {
  Condition condition = Condition::kIdentity;
  std::map<std::string, double> params;  // union of the constituents' parameters
};

// Condition -> probability, renormalized so the weights sum to exactly 1
// (the raw column sums to 0.998).
const std::vector<std::pair<Condition, double>>& condition_weights();

// Draws a condition from the weights and each parameter uniformly from its range.
DegradationSpec sample_spec(Rng& rng);

// Background-noise sources for AddBackgroundNoise: three built-in generators,
// optionally extended by WAV files from a user directory.
enum class NoiseKind { kWhite, kPink, kSpeechShaped };
Waveform make_noise(NoiseKind kind, std::size_t n_samples, int sample_rate, Rng& rng);

class NoiseBank {
 public:
  NoiseBank() = default;
  explicit NoiseBank(const std::string& wav_dir);
  // Picks a source with the rng and renders n_samples at sample_rate.
  Waveform sample(std::size_t n_samples, int sample_rate, Rng& rng) const;

 private:
  std::vector<std::string> files_;
};

// Applies the spec's condition(s) to a 16 kHz waveform. Pair constituents run
// left to right and draw their randomness from per-constituent child streams
// of `seed`, so composition is reproducible op by op. If the final peak
// exceeds 1 the output is rescaled by 1/peak.
Waveform apply(const Waveform& w, const DegradationSpec& spec, std::uint64_t seed,
               const NoiseBank& bank = NoiseBank());

// Per-condition operations.
Waveform add_noise(const Waveform& w, double snr_db, const Waveform& noise);
Waveform clip_impair(const Waveform& w, double percentile);
Waveform gain_transition(const Waveform& w, double gain_db, Rng& rng);
Waveform low_pass(const Waveform& w, double cutoff_hz);
Waveform mp3_like(const Waveform& w, double bit_rate_kbps);
Waveform pitch_shift(const Waveform& w, double semitones);
Waveform room_simulate(const Waveform& w, double rt60_s, Rng& rng);
Waveform time_mask(const Waveform& w, double band_part, Rng& rng);
Waveform time_stretch(const Waveform& w, double rate);

// The synthetic impulse response behind room_simulate: a unit direct path
// followed by an exponentially decaying noise tail reaching -60 dB at rt60_s.
std::vector<double> make_room_impulse_response(double rt60_s, int sample_rate, Rng& rng);

// Band edge of the codec-artifact simulation, in Hz.
inline double mp3_band_edge_hz(double bit_rate_kbps) {
  return 2800.0 + 400.0 * (bit_rate_kbps - 8.0);
}

}  // namespace sqa::degrade

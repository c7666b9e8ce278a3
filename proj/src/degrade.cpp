#include "sqa/degrade.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>
#include <unordered_map>

#include "sqa/dsp.hpp"
#include "sqa/errors.hpp"

namespace sqa::degrade {

namespace {

constexpr int kRate = audio_io::kPipelineRate;

const std::vector<std::string>& condition_names() {
  static const std::vector<std::string> names = {
      "Identity",
      "AddBackgroundNoise",
      "ClippingImpairment",
      "GainTransition",
      "LowPassFilter",
      "Mp3Compression",
      "PitchShift",
      "RoomSimulator",
      "TimeMask",
      "TimeStretch",
      "AddBackgroundNoise+RoomSimulator",
      "AddBackgroundNoise+LowPassFilter",
      "AddBackgroundNoise+TimeStretch",
      "RoomSimulator+Mp3Compression",
      "PitchShift+LowPassFilter",
      "GainTransition+TimeMask",
  };
  return names;
}

}  // namespace

const std::string& to_string(Condition c) {
  return condition_names()[static_cast<std::size_t>(c)];
}

Condition condition_from_string(const std::string& name) {
  const auto& names = condition_names();
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return static_cast<Condition>(i);
  throw ValidationError("unknown degradation condition: " + name);
}

bool is_pair(Condition c) { return static_cast<int>(c) >= static_cast<int>(Condition::kNoisePlusRoom); }

std::array<Condition, 2> pair_parts(Condition c) {
  switch (c) {
    case Condition::kNoisePlusRoom:
      return {Condition::kAddBackgroundNoise, Condition::kRoomSimulator};
    case Condition::kNoisePlusLowPass:
      return {Condition::kAddBackgroundNoise, Condition::kLowPassFilter};
    case Condition::kNoisePlusTimeStretch:
      return {Condition::kAddBackgroundNoise, Condition::kTimeStretch};
    case Condition::kRoomPlusMp3:
      return {Condition::kRoomSimulator, Condition::kMp3Compression};
    case Condition::kPitchShiftPlusLowPass:
      return {Condition::kPitchShift, Condition::kLowPassFilter};
    case Condition::kGainTransitionPlusTimeMask:
      return {Condition::kGainTransition, Condition::kTimeMask};
    default:
      return {c, c};
  }
}

const std::vector<ParamRange>& param_ranges(Condition single) {
  static const std::unordered_map<int, std::vector<ParamRange>> table = {
      {static_cast<int>(Condition::kIdentity), {}},
      {static_cast<int>(Condition::kAddBackgroundNoise), {{"snr_db", -10.0, 15.0}}},
      {static_cast<int>(Condition::kClippingImpairment), {{"percentile", 10.0, 40.0}}},
      {static_cast<int>(Condition::kGainTransition), {{"gain_db", -60.0, 20.0}}},
      {static_cast<int>(Condition::kLowPassFilter), {{"cutoff_hz", 500.0, 1000.0}}},
      {static_cast<int>(Condition::kMp3Compression), {{"bit_rate_kbps", 8.0, 14.0}}},
      {static_cast<int>(Condition::kPitchShift), {{"semitones", -4.0, 4.0}}},
      {static_cast<int>(Condition::kRoomSimulator), {{"rt60_s", 0.8, 1.5}}},
      {static_cast<int>(Condition::kTimeMask), {{"band_part", 0.2, 0.5}}},
      {static_cast<int>(Condition::kTimeStretch), {{"rate", 0.5, 2.0}}},
  };
  auto it = table.find(static_cast<int>(single));
  if (it == table.end()) throw ValidationError("param_ranges: not a single condition");
  return it->second;
}

const std::vector<std::pair<Condition, double>>& condition_weights() {
  static const std::vector<std::pair<Condition, double>> weights = [] {
    std::vector<std::pair<Condition, double>> w;
    double total = 0.0;
    for (int i = 0; i < kNumConditions; ++i) {
      const auto c = static_cast<Condition>(i);
      const double raw = is_pair(c) ? 0.083 : 0.050;
      w.emplace_back(c, raw);
      total += raw;
    }
    for (auto& [c, p] : w) p /= total;
    return w;
  }();
  return weights;
}

DegradationSpec sample_spec(Rng& rng) {
  const auto& weights = condition_weights();
  const double u = rng.uniform();
  double cum = 0.0;
  Condition picked = weights.back().first;
  for (const auto& [c, p] : weights) {
    cum += p;
    if (u < cum) {
      picked = c;
      break;
    }
  }
  DegradationSpec spec;
  spec.condition = picked;
  const auto parts = pair_parts(picked);
  const int n_parts = is_pair(picked) ? 2 : 1;
  for (int i = 0; i < n_parts; ++i)
    for (const auto& range : param_ranges(parts[static_cast<std::size_t>(i)]))
      spec.params[range.name] = rng.uniform(range.lo, range.hi);
  return spec;
}

// ---------------------------------------------------------------------------
// Noise sources
// ---------------------------------------------------------------------------

Waveform make_noise(NoiseKind kind, std::size_t n_samples, int sample_rate, Rng& rng) {
  Waveform w;
  w.sample_rate = sample_rate;
  w.samples.resize(n_samples);
  switch (kind) {
    case NoiseKind::kWhite:
      for (auto& v : w.samples) v = rng.normal();
      break;
    case NoiseKind::kPink: {
      // Paul Kellet's pink noise filter
      double b0 = 0, b1 = 0, b2 = 0, b3 = 0, b4 = 0, b5 = 0, b6 = 0;
      for (auto& v : w.samples) {
        const double white = rng.normal();
        b0 = 0.99886 * b0 + white * 0.0555179;
        b1 = 0.99332 * b1 + white * 0.0750759;
        b2 = 0.96900 * b2 + white * 0.1538520;
        b3 = 0.86650 * b3 + white * 0.3104856;
        b4 = 0.55000 * b4 + white * 0.5329522;
        b5 = -0.7616 * b5 - white * 0.0168980;
        v = b0 + b1 + b2 + b3 + b4 + b5 + b6 + white * 0.5362;
        b6 = white * 0.115926;
      }
      break;
    }
    case NoiseKind::kSpeechShaped: {
      // white noise through a gentle low-pass tilt approximating the
      // long-term speech spectrum
      const double a = std::exp(-2.0 * dsp::kPi * 400.0 / sample_rate);
      double y = 0.0;
      for (auto& v : w.samples) {
        const double white = rng.normal();
        y = a * y + (1.0 - a) * white;
        v = y + 0.05 * white;
      }
      break;
    }
  }
  const double r = audio_io::rms(w.samples);
  if (r > 0)
    for (auto& v : w.samples) v /= r;
  return w;
}

NoiseBank::NoiseBank(const std::string& wav_dir) {
  if (wav_dir.empty()) return;
  namespace fs = std::filesystem;
  if (!fs::is_directory(wav_dir)) throw IoError("noise directory not found: " + wav_dir);
  for (const auto& e : fs::directory_iterator(wav_dir))
    if (e.is_regular_file() && e.path().extension() == ".wav") files_.push_back(e.path().string());
  std::sort(files_.begin(), files_.end());
}

Waveform NoiseBank::sample(std::size_t n_samples, int sample_rate, Rng& rng) const {
  const auto pool = static_cast<std::int64_t>(3 + files_.size());
  const auto idx = rng.uniform_int(0, pool - 1);
  if (idx < 3) return make_noise(static_cast<NoiseKind>(idx), n_samples, sample_rate, rng);
  Waveform src = audio_io::read_wav(files_[static_cast<std::size_t>(idx - 3)]);
  src = audio_io::resample(src, sample_rate);
  Waveform out;
  out.sample_rate = sample_rate;
  out.samples.resize(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) out.samples[i] = src.samples[i % src.samples.size()];
  return out;
}

// ---------------------------------------------------------------------------
// Per-condition operations
// ---------------------------------------------------------------------------

Waveform add_noise(const Waveform& w, double snr_db, const Waveform& noise) {
  if (!std::isfinite(snr_db)) throw ValidationError("snr_db must be finite");
  if (noise.samples.empty()) throw DegenerateInputError("noise source is empty");
  const std::size_t n = w.samples.size();
  std::vector<double> tiled(n);
  for (std::size_t i = 0; i < n; ++i) tiled[i] = noise.samples[i % noise.samples.size()];
  const double noise_energy = audio_io::energy(tiled);
  if (noise_energy <= 0.0) throw DegenerateInputError("noise source is silent");
  const double speech_energy = audio_io::energy(w.samples);
  const double gain = std::sqrt(speech_energy / (noise_energy * std::pow(10.0, snr_db / 10.0)));
  Waveform out = w;
  for (std::size_t i = 0; i < n; ++i) out.samples[i] += gain * tiled[i];
  return out;
}

Waveform clip_impair(const Waveform& w, double percentile) {
  if (percentile < 0.0 || percentile > 100.0) throw ValidationError("percentile out of range");
  if (audio_io::peak_abs(w) == 0.0) return w;
  std::vector<double> mags(w.samples.size());
  for (std::size_t i = 0; i < mags.size(); ++i) mags[i] = std::fabs(w.samples[i]);
  std::sort(mags.begin(), mags.end());
  const double q = (100.0 - percentile) / 100.0;
  const double pos = q * static_cast<double>(mags.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, mags.size() - 1);
  const double threshold = mags[lo] + (pos - static_cast<double>(lo)) * (mags[hi] - mags[lo]);
  Waveform out = w;
  for (auto& v : out.samples) v = std::clamp(v, -threshold, threshold);
  return out;
}

Waveform gain_transition(const Waveform& w, double gain_db, Rng& rng) {
  const auto n = static_cast<std::int64_t>(w.samples.size());
  // draw order: segment fraction, then start position
  const double frac = rng.uniform(0.2, 0.8);
  const auto seg_len = std::max<std::int64_t>(2, static_cast<std::int64_t>(std::llround(frac * static_cast<double>(n))));
  const auto start = rng.uniform_int(0, std::max<std::int64_t>(0, n - seg_len));
  Waveform out = w;
  const double tail_gain = std::pow(10.0, gain_db / 20.0);
  for (std::int64_t i = 0; i < n; ++i) {
    double db;
    if (i < start)
      db = 0.0;
    else if (i < start + seg_len)
      db = gain_db * static_cast<double>(i - start) / static_cast<double>(seg_len - 1);
    else
      db = gain_db;
    out.samples[static_cast<std::size_t>(i)] *=
        (i >= start + seg_len) ? tail_gain : std::pow(10.0, db / 20.0);
  }
  return out;
}

Waveform low_pass(const Waveform& w, double cutoff_hz) {
  if (cutoff_hz <= 0.0 || cutoff_hz >= 0.5 * w.sample_rate)
    throw ValidationError("cutoff frequency out of range");
  Waveform out = w;
  for (const auto& section : dsp::butterworth_lowpass4(cutoff_hz, w.sample_rate))
    section.process_inplace(out.samples);
  return out;
}

// ---------------------------------------------------------------------------
// STFT-domain processing shared by mp3_like and the phase vocoder
// ---------------------------------------------------------------------------

namespace {

constexpr int kStftLen = 512;
constexpr int kStftHop = 128;

struct OlaBuffer {
  std::vector<double> acc, wsum;
  explicit OlaBuffer(std::size_t n) : acc(n, 0.0), wsum(n, 0.0) {}
  void add(std::size_t pos, const std::vector<double>& frame, const std::vector<double>& window) {
    for (std::size_t i = 0; i < frame.size() && pos + i < acc.size(); ++i) {
      acc[pos + i] += frame[i] * window[i];
      wsum[pos + i] += window[i] * window[i];
    }
  }
  std::vector<double> normalized() const {
    std::vector<double> out(acc.size());
    for (std::size_t i = 0; i < acc.size(); ++i)
      out[i] = wsum[i] > 1e-8 ? acc[i] / wsum[i] : 0.0;
    return out;
  }
};

std::vector<std::complex<double>> windowed_fft(const std::vector<double>& x, std::int64_t start,
                                               const std::vector<double>& window) {
  const auto n = static_cast<std::int64_t>(window.size());
  std::vector<std::complex<double>> frame(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t j = start + i;
    const double v = (j >= 0 && j < static_cast<std::int64_t>(x.size())) ? x[static_cast<std::size_t>(j)] : 0.0;
    frame[static_cast<std::size_t>(i)] = v * window[static_cast<std::size_t>(i)];
  }
  dsp::fft(frame, false);
  return frame;
}

std::vector<double> real_ifft(std::vector<std::complex<double>> spectrum) {
  dsp::fft(spectrum, true);
  std::vector<double> out(spectrum.size());
  for (std::size_t i = 0; i < spectrum.size(); ++i) out[i] = spectrum[i].real();
  return out;
}

double wrap_phase(double phi) {
  return phi - 2.0 * dsp::kPi * std::round(phi / (2.0 * dsp::kPi));
}

// Phase-vocoder resynthesis at a new time scale. rate is a speed factor:
// output duration = input duration / rate, pitch preserved.
std::vector<double> vocoder_stretch(const std::vector<double>& x, double rate) {
  const auto in_len = static_cast<std::int64_t>(x.size());
  const auto out_len = static_cast<std::int64_t>(std::llround(static_cast<double>(in_len) / rate));
  if (out_len <= 0) return {};
  if (in_len < 2 * kStftLen) {
    // too short for spectral processing; nearest-sample speed change
    std::vector<double> out(static_cast<std::size_t>(out_len));
    for (std::int64_t n = 0; n < out_len; ++n) {
      const auto i = std::min<std::int64_t>(in_len - 1, std::llround(static_cast<double>(n) * rate));
      out[static_cast<std::size_t>(n)] = x[static_cast<std::size_t>(i)];
    }
    return out;
  }

  const auto window = dsp::hann_window(kStftLen);
  const int bins = kStftLen / 2 + 1;
  OlaBuffer ola(static_cast<std::size_t>(out_len) + kStftLen);
  std::vector<double> prev_phase(static_cast<std::size_t>(bins), 0.0);
  std::vector<double> synth_phase(static_cast<std::size_t>(bins), 0.0);

  std::int64_t prev_start = 0;
  const std::int64_t n_frames = (out_len - 1) / kStftHop + 1;
  for (std::int64_t u = 0; u < n_frames; ++u) {
    const double want = static_cast<double>(u) * kStftHop * rate;
    const auto start = std::clamp<std::int64_t>(std::llround(want), 0, in_len - kStftLen);
    auto spectrum = windowed_fft(x, start, window);

    std::vector<std::complex<double>> shaped(static_cast<std::size_t>(kStftLen));
    for (int k = 0; k < bins; ++k) {
      const double mag = std::abs(spectrum[static_cast<std::size_t>(k)]);
      const double phase = std::arg(spectrum[static_cast<std::size_t>(k)]);
      const double omega = 2.0 * dsp::kPi * k / kStftLen;  // rad/sample
      if (u == 0) {
        synth_phase[static_cast<std::size_t>(k)] = phase;
      } else {
        const auto dt = std::max<std::int64_t>(1, start - prev_start);
        const double dphi = wrap_phase(phase - prev_phase[static_cast<std::size_t>(k)] -
                                       omega * static_cast<double>(dt));
        const double inst_freq = omega + dphi / static_cast<double>(dt);
        synth_phase[static_cast<std::size_t>(k)] =
            wrap_phase(synth_phase[static_cast<std::size_t>(k)] + inst_freq * kStftHop);
      }
      prev_phase[static_cast<std::size_t>(k)] = phase;
      const std::complex<double> v = std::polar(mag, synth_phase[static_cast<std::size_t>(k)]);
      shaped[static_cast<std::size_t>(k)] = v;
      if (k > 0 && k < kStftLen / 2) shaped[static_cast<std::size_t>(kStftLen - k)] = std::conj(v);
    }
    prev_start = start;
    ola.add(static_cast<std::size_t>(u * kStftHop), real_ifft(std::move(shaped)), window);
  }
  auto out = ola.normalized();
  out.resize(static_cast<std::size_t>(out_len));
  return out;
}

}  // namespace

Waveform mp3_like(const Waveform& w, double bit_rate_kbps) {
  if (bit_rate_kbps <= 0.0) throw ValidationError("bit rate must be positive");
  const auto in_len = static_cast<std::int64_t>(w.samples.size());
  if (in_len < kStftLen) return w;

  const double f_max = mp3_band_edge_hz(bit_rate_kbps);
  const auto window = dsp::hann_window(kStftLen);
  const double bin_hz = static_cast<double>(w.sample_rate) / kStftLen;
  const int bins = kStftLen / 2 + 1;
  OlaBuffer ola(static_cast<std::size_t>(in_len) + kStftLen);

  for (std::int64_t start = 0; start <= in_len; start += kStftHop) {
    auto spectrum = windowed_fft(w.samples, start, window);
    double max_mag = 0.0;
    for (int k = 0; k < bins; ++k)
      if (bin_hz * k <= f_max) max_mag = std::max(max_mag, std::abs(spectrum[static_cast<std::size_t>(k)]));
    const double step = max_mag / (2.0 * bit_rate_kbps);
    std::vector<std::complex<double>> shaped(static_cast<std::size_t>(kStftLen));
    for (int k = 0; k < bins; ++k) {
      std::complex<double> v = 0.0;
      if (bin_hz * k <= f_max && step > 0.0) {
        const double mag = std::abs(spectrum[static_cast<std::size_t>(k)]);
        const double quantized = step * std::round(mag / step);
        v = std::polar(quantized, std::arg(spectrum[static_cast<std::size_t>(k)]));
      }
      shaped[static_cast<std::size_t>(k)] = v;
      if (k > 0 && k < kStftLen / 2) shaped[static_cast<std::size_t>(kStftLen - k)] = std::conj(v);
    }
    ola.add(static_cast<std::size_t>(start), real_ifft(std::move(shaped)), window);
  }
  Waveform out;
  out.sample_rate = w.sample_rate;
  out.samples = ola.normalized();
  out.samples.resize(static_cast<std::size_t>(in_len));
  return out;
}

Waveform pitch_shift(const Waveform& w, double semitones) {
  const double factor = std::pow(2.0, semitones / 12.0);
  if (semitones == 0.0) return w;
  // stretch duration by `factor` with pitch preserved, then compress time by
  // resampling, which multiplies all frequencies by `factor`
  Waveform out;
  out.sample_rate = w.sample_rate;
  out.samples = dsp::resample_sinc(vocoder_stretch(w.samples, 1.0 / factor), 1.0 / factor);
  return out;
}

Waveform time_stretch(const Waveform& w, double rate) {
  if (rate <= 0.0) throw ValidationError("stretch rate must be positive");
  Waveform out;
  out.sample_rate = w.sample_rate;
  out.samples = vocoder_stretch(w.samples, rate);
  return out;
}

std::vector<double> make_room_impulse_response(double rt60_s, int sample_rate, Rng& rng) {
  const auto n60 = static_cast<std::int64_t>(std::llround(rt60_s * sample_rate));
  // amplitude envelope exp(-n/tau); energy decays 60 dB at n60 samples
  const double tau = static_cast<double>(n60) / (3.0 * std::log(10.0));
  const auto len = static_cast<std::int64_t>(std::llround(1.1 * static_cast<double>(n60)));
  std::vector<double> h(static_cast<std::size_t>(len), 0.0);
  h[0] = 1.0;
  for (std::int64_t n = 1; n < len; ++n)
    h[static_cast<std::size_t>(n)] =
        0.35 * rng.normal() * std::exp(-static_cast<double>(n) / tau);
  return h;
}

Waveform room_simulate(const Waveform& w, double rt60_s, Rng& rng) {
  if (rt60_s <= 0.0) throw ValidationError("rt60 must be positive");
  const auto rir = make_room_impulse_response(rt60_s, w.sample_rate, rng);
  Waveform out;
  out.sample_rate = w.sample_rate;
  out.samples = dsp::convolve_fft(w.samples, rir);
  out.samples.resize(w.samples.size());
  return out;
}

Waveform time_mask(const Waveform& w, double band_part, Rng& rng) {
  if (band_part < 0.0 || band_part > 1.0) throw ValidationError("band_part out of range");
  const auto n = static_cast<std::int64_t>(w.samples.size());
  if (static_cast<double>(n) / w.sample_rate < 0.020) return w;
  const auto seg_len = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::llround(band_part * static_cast<double>(n))));
  const auto fade = std::min<std::int64_t>(static_cast<std::int64_t>(std::llround(0.005 * w.sample_rate)), seg_len / 2);
  const auto start = rng.uniform_int(0, n - seg_len);
  Waveform out = w;
  for (std::int64_t i = 0; i < seg_len; ++i) {
    double gain = 0.0;
    if (fade > 0 && i < fade)
      gain = 1.0 - static_cast<double>(i) / static_cast<double>(fade);
    else if (fade > 0 && i >= seg_len - fade)
      gain = 1.0 - static_cast<double>(seg_len - 1 - i) / static_cast<double>(fade);
    out.samples[static_cast<std::size_t>(start + i)] *= gain;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

namespace {

double need_param(const DegradationSpec& spec, const std::string& name) {
  auto it = spec.params.find(name);
  if (it == spec.params.end())
    throw ValidationError("degradation spec missing parameter: " + name);
  return it->second;
}

Waveform apply_single(const Waveform& w, Condition c, const DegradationSpec& spec, Rng& rng,
                      const NoiseBank& bank) {
  switch (c) {
    case Condition::kIdentity:
      return w;
    case Condition::kAddBackgroundNoise: {
      const Waveform noise = bank.sample(w.samples.size(), w.sample_rate, rng);
      return add_noise(w, need_param(spec, "snr_db"), noise);
    }
    case Condition::kClippingImpairment:
      return clip_impair(w, need_param(spec, "percentile"));
    case Condition::kGainTransition:
      return gain_transition(w, need_param(spec, "gain_db"), rng);
    case Condition::kLowPassFilter:
      return low_pass(w, need_param(spec, "cutoff_hz"));
    case Condition::kMp3Compression:
      return mp3_like(w, need_param(spec, "bit_rate_kbps"));
    case Condition::kPitchShift:
      return pitch_shift(w, need_param(spec, "semitones"));
    case Condition::kRoomSimulator:
      return room_simulate(w, need_param(spec, "rt60_s"), rng);
    case Condition::kTimeMask:
      return time_mask(w, need_param(spec, "band_part"), rng);
    case Condition::kTimeStretch:
      return time_stretch(w, need_param(spec, "rate"));
    default:
      throw ValidationError("apply_single: composite condition");
  }
}

}  // namespace

Waveform apply(const Waveform& w, const DegradationSpec& spec, std::uint64_t seed,
               const NoiseBank& bank) {
  if (w.sample_rate != kRate)
    throw ValidationError("degradations expect the 16 kHz pipeline rate");
  if (w.samples.empty()) throw EmptyClipError("cannot degrade an empty clip");

  const auto parts = pair_parts(spec.condition);
  const int n_parts = is_pair(spec.condition) ? 2 : 1;
  Waveform cur = w;
  for (int i = 0; i < n_parts; ++i) {
    Rng rng(child_seed(seed, static_cast<std::uint64_t>(i)));
    cur = apply_single(cur, parts[static_cast<std::size_t>(i)], spec, rng, bank);
  }
  const double peak = audio_io::peak_abs(cur);
  if (peak > 1.0)
    for (auto& v : cur.samples) v /= peak;
  return cur;
}

}  // namespace sqa::degrade
